//! Parameter-list compression and return-type merging.

use crate::ir::{Function, Type};

/// Lossless common type of two values, if any. `void` merges with anything
/// (only meaningful for return types).
pub fn type_compatible(a: Type, b: Type) -> Option<Type> {
    match (a, b) {
        (Type::Void, t) | (t, Type::Void) => Some(t),
        (x, y) if x.is_int() && y.is_int() => Some(if x.bits() >= y.bits() { x } else { y }),
        (x, y) if x.is_float() && y.is_float() => Some(if x.bits() >= y.bits() { x } else { y }),
        (Type::Ptr, Type::Ptr) => Some(Type::Ptr),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergedParam {
    pub ty: Type,
    pub left: Option<usize>,
    pub right: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionPair {
    /// Runs when ctrl is 0.
    pub left: String,
    /// Runs when ctrl is 1.
    pub right: String,
    /// Excludes the leading ctrl parameter.
    pub merged_params: Vec<MergedParam>,
    pub merged_return: Type,
    /// Every side's parameter `i` sits at merged position `i`.
    pub positional: bool,
}

impl FusionPair {
    /// Merged position of parameter `i` of one side.
    pub fn position(&self, right_side: bool, i: usize) -> usize {
        self.merged_params
            .iter()
            .position(|p| if right_side { p.right == Some(i) } else { p.left == Some(i) })
            .expect("every parameter has a merged position")
    }

    /// Parameters saved relative to keeping both lists.
    pub fn params_removed(&self) -> usize {
        self.merged_params.iter().filter(|p| p.left.is_some() && p.right.is_some()).count()
    }
}

/// Largest order-preserving matching of compatible types. Returns matched
/// index pairs in increasing order; among maximum matchings, earlier
/// matches are preferred.
pub fn max_matching(left: &[Type], right: &[Type]) -> Vec<(usize, usize)> {
    let (n, m) = (left.len(), right.len());
    // best[i][j]: size of the best matching of left[i..] with right[j..]
    let mut best = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            let take = if type_compatible(left[i], right[j]).is_some() { 1 + best[i + 1][j + 1] } else { 0 };
            best[i][j] = take.max(best[i + 1][j]).max(best[i][j + 1]);
        }
    }
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < n && j < m {
        if type_compatible(left[i], right[j]).is_some() && best[i][j] == 1 + best[i + 1][j + 1] {
            out.push((i, j));
            i += 1;
            j += 1;
        } else if best[i][j + 1] == best[i][j] {
            j += 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Merged signature of `left` and `right`, or `None` when their return
/// types cannot be merged.
pub fn compress_params(left: &Function, right: &Function) -> Option<FusionPair> {
    let merged_return = type_compatible(left.ret, right.ret)?;
    let lt: Vec<Type> = left.params.iter().map(|p| p.ty).collect();
    let rt: Vec<Type> = right.params.iter().map(|p| p.ty).collect();
    let matched = max_matching(&lt, &rt);
    let mut merged: Vec<MergedParam> = matched
        .iter()
        .map(|&(i, j)| MergedParam { ty: type_compatible(lt[i], rt[j]).unwrap(), left: Some(i), right: Some(j) })
        .collect();
    for (i, &t) in lt.iter().enumerate() {
        if !matched.iter().any(|m| m.0 == i) {
            merged.push(MergedParam { ty: t, left: Some(i), right: None });
        }
    }
    for (j, &t) in rt.iter().enumerate() {
        if !matched.iter().any(|m| m.1 == j) {
            merged.push(MergedParam { ty: t, left: None, right: Some(j) });
        }
    }
    let positional = merged.iter().enumerate().all(|(k, p)| p.left.is_none_or(|i| i == k) && p.right.is_none_or(|j| j == k));
    Some(FusionPair { left: left.name.clone(), right: right.name.clone(), merged_params: merged, merged_return, positional })
}

//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeSet;

use fufi_core::analysis::FreqMap;
use fufi_core::fusion::compress::type_compatible;
use fufi_core::ir::{Block, Function, Module, Param, Terminator, Type};
use rand::Rng;

/// A void function `@f(%c: i1, %x: i64)` with `n` empty blocks and random
/// terminators. The entry has no predecessors; other blocks may be
/// unreachable.
pub fn random_cfg<R: Rng>(rng: &mut R, n: usize) -> Module {
    let mut f = Function::new("f", vec![Param::new("c", Type::I1), Param::new("x", Type::I64)], Type::Void);
    let label = |i: usize| format!("b{i}");
    for i in 0..n {
        let pick = |rng: &mut R| label(rng.gen_range(1..n.max(2)));
        let term = if n == 1 {
            Terminator::Ret(None)
        } else {
            match rng.gen_range(0..20) {
                0..=3 => Terminator::Ret(None),
                4..=10 => Terminator::Br(pick(rng)),
                11..=17 => Terminator::CondBr("c".into(), pick(rng), pick(rng)),
                _ => {
                    let k = rng.gen_range(1..4);
                    let cases = (0..k).map(|v| (v as i64, pick(rng))).collect();
                    Terminator::Switch { value: "x".into(), cases, default: pick(rng) }
                }
            }
        };
        f.blocks.push(Block::new(label(i), vec![], term));
    }
    let mut m = Module::new("cfg");
    m.functions.push(f);
    m
}

pub fn successors(f: &Function) -> Vec<Vec<usize>> {
    f.blocks
        .iter()
        .map(|b| b.successors().iter().map(|s| f.block_index(s).unwrap()).collect::<BTreeSet<_>>().into_iter().collect())
        .collect()
}

/// Blocks reachable from the entry without visiting `removed`.
pub fn reach_without(succ: &[Vec<usize>], removed: Option<usize>) -> Vec<bool> {
    let mut seen = vec![false; succ.len()];
    if succ.is_empty() || removed == Some(0) {
        return seen;
    }
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(b) = stack.pop() {
        for &s in &succ[b] {
            if !seen[s] && Some(s) != removed {
                seen[s] = true;
                stack.push(s);
            }
        }
    }
    seen
}

/// `dom[a][b]`: `a` dominates `b`, by deleting `a` and testing reachability.
pub fn brute_dominators(f: &Function) -> Vec<Vec<bool>> {
    let succ = successors(f);
    let n = succ.len();
    let reach = reach_without(&succ, None);
    let mut dom = vec![vec![false; n]; n];
    for a in 0..n {
        if !reach[a] {
            continue;
        }
        let without = reach_without(&succ, Some(a));
        for b in 0..n {
            dom[a][b] = reach[b] && (a == b || !without[b]);
        }
    }
    dom
}

/// Immediate dominators from the brute-force relation: the strict
/// dominator that every other strict dominator dominates.
pub fn brute_idom(f: &Function) -> Vec<Option<usize>> {
    let dom = brute_dominators(f);
    let n = dom.len();
    (0..n)
        .map(|b| {
            let strict: Vec<usize> = (0..n).filter(|&a| a != b && dom[a][b]).collect();
            strict.iter().copied().find(|&d| strict.iter().all(|&o| dom[o][d]))
        })
        .collect()
}

/// Region selection re-derived from scratch: dominator subtrees from the
/// brute-force relation, natural loops from back edges, value = size ÷
/// (head frequency × trip count of the innermost enclosing loop). Block
/// frequencies are the only shared input.
pub fn oracle_regions(f: &Function, freq: &FreqMap, trip: u64, min_effect: usize) -> Vec<Vec<String>> {
    let n = f.blocks.len();
    if n < 2 {
        return vec![];
    }
    let succ = successors(f);
    let dom = brute_dominators(f);
    let reach = reach_without(&succ, None);
    // natural loops, one per header
    let mut loops: Vec<(usize, BTreeSet<usize>)> = Vec::new();
    for t in (0..n).filter(|&t| reach[t]) {
        for &h in &succ[t] {
            if !dom[h][t] {
                continue;
            }
            let mut body: BTreeSet<usize> = [h, t].into_iter().collect();
            let mut work = vec![t];
            while let Some(x) = work.pop() {
                if x == h {
                    continue;
                }
                for p in (0..n).filter(|&p| reach[p] && succ[p].contains(&x)) {
                    if body.insert(p) {
                        work.push(p);
                    }
                }
            }
            match loops.iter_mut().find(|(hh, _)| *hh == h) {
                Some((_, b)) => b.extend(body),
                None => loops.push((h, body)),
            }
        }
    }
    let cost = |h: usize| {
        let inner = loops.iter().filter(|(_, b)| b.contains(&h)).min_by_key(|(_, b)| b.len());
        freq.get(h) * if inner.is_some() { trip as f64 } else { 1.0 }
    };
    let subtree = |h: usize| -> Vec<usize> { (0..n).filter(|&b| dom[h][b]).collect() };
    let leaves = |members: &[usize]| {
        members.iter().any(|&b| matches!(f.blocks[b].terminator, Terminator::Ret(_)) || succ[b].iter().any(|s| !members.contains(s)))
    };
    let mut pool: Vec<(usize, Vec<usize>, f64)> = (1..n)
        .filter(|&h| reach[h])
        .map(|h| (h, subtree(h), cost(h)))
        .filter(|(_, m, _)| leaves(m))
        .collect();
    let mut chosen = Vec::new();
    while !pool.is_empty() {
        let value = |c: &(usize, Vec<usize>, f64)| c.1.len() as f64 / c.2;
        let mut best = 0;
        for i in 0..pool.len() {
            if value(&pool[i]) > value(&pool[best]) {
                best = i;
            }
        }
        let (_, members, _) = pool.remove(best);
        if members.len() < min_effect {
            continue;
        }
        pool.retain(|(_, m, _)| !m.iter().any(|b| members.contains(b)));
        chosen.push(members.iter().map(|&b| f.blocks[b].label.clone()).collect());
    }
    chosen
}

/// Size of the largest order-preserving matching of compatible types, by
/// trying every subset of pairs.
pub fn brute_matching(l: &[Type], r: &[Type]) -> usize {
    fn go(l: &[Type], r: &[Type], i: usize, j: usize) -> usize {
        if i == l.len() || j == r.len() {
            return 0;
        }
        let mut best = go(l, r, i + 1, j);
        for k in j..r.len() {
            if type_compatible(l[i], r[k]).is_some() {
                best = best.max(1 + go(l, r, i + 1, k + 1));
            }
        }
        best
    }
    go(l, r, 0, 0)
}

pub const PARAM_TYPES: [Type; 8] = [Type::I1, Type::I8, Type::I16, Type::I32, Type::I64, Type::F32, Type::F64, Type::Ptr];

pub fn random_types<R: Rng>(rng: &mut R, max: usize) -> Vec<Type> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| PARAM_TYPES[rng.gen_range(0..PARAM_TYPES.len())]).collect()
}

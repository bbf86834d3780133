use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Unchanged,
    RemFunc,
    SepFunc,
    FusFunc,
    Trampoline,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Unchanged => "unchanged",
            Role::RemFunc => "remfunc",
            Role::SepFunc => "sepfunc",
            Role::FusFunc => "fusfunc",
            Role::Trampoline => "trampoline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub origins: BTreeSet<String>,
    pub role: Role,
}

/// Maps every function of a transformed module to the original functions
/// it was built from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceMap {
    pub functions: BTreeMap<String, Origin>,
}

impl ProvenanceMap {
    /// Every function maps to itself.
    pub fn identity<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        let mut p = ProvenanceMap::default();
        for n in names {
            p.insert(n, [n], Role::Unchanged);
        }
        p
    }

    pub fn insert<'a>(&mut self, name: &str, origins: impl IntoIterator<Item = &'a str>, role: Role) {
        self.functions.insert(
            name.to_string(),
            Origin { origins: origins.into_iter().map(str::to_string).collect(), role },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Origin> {
        self.functions.get(name)
    }

    pub fn origins(&self, name: &str) -> BTreeSet<String> {
        self.functions.get(name).map(|o| o.origins.clone()).unwrap_or_default()
    }

    /// Composes `self` (first pass) with `later` (a pass run on the first
    /// pass's output). Roles come from the later pass unless it left the
    /// function unchanged.
    pub fn then(&self, later: &ProvenanceMap) -> ProvenanceMap {
        let mut out = ProvenanceMap::default();
        for (name, o) in &later.functions {
            let mut origins = BTreeSet::new();
            for mid in &o.origins {
                match self.functions.get(mid) {
                    Some(first) => origins.extend(first.origins.iter().cloned()),
                    None => {
                        origins.insert(mid.clone());
                    }
                }
            }
            let role = match (o.role, o.origins.iter().next().and_then(|m| self.functions.get(m))) {
                (Role::Unchanged, Some(first)) => first.role,
                (r, _) => r,
            };
            out.functions.insert(name.clone(), Origin { origins, role });
        }
        out
    }

    pub fn all_origins(&self) -> BTreeSet<String> {
        self.functions.values().flat_map(|o| o.origins.iter().cloned()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_is_transitive() {
        let mut first = ProvenanceMap::identity(["a", "b"]);
        first.insert("a", ["a"], Role::RemFunc);
        first.insert("a_sep1", ["a"], Role::SepFunc);
        let mut second = ProvenanceMap::default();
        second.insert("a", ["a"], Role::Unchanged);
        second.insert("b", ["b"], Role::Trampoline);
        second.insert("a_sep1_b_fusion", ["a_sep1", "b"], Role::FusFunc);
        let c = first.then(&second);
        assert_eq!(c.get("a").unwrap().role, Role::RemFunc);
        assert_eq!(c.origins("a_sep1_b_fusion"), BTreeSet::from(["a".to_string(), "b".to_string()]));
        assert_eq!(c.all_origins(), BTreeSet::from(["a".to_string(), "b".to_string()]));
    }
}

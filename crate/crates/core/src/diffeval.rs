//! A small binary-differ stand-in: per-function features, similarity,
//! greedy matching, Precision@1 and opcode histogram distance.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::analysis::Cfg;
use crate::ir::{Module, Op};
use crate::provenance::ProvenanceMap;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionFeatures {
    pub n_blocks: usize,
    pub n_edges: usize,
    pub n_calls: usize,
    /// Terminators included.
    pub n_instructions: usize,
    pub opcode_histogram: BTreeMap<String, usize>,
    pub cg_in_degree: usize,
    pub cg_out_degree: usize,
}

impl FunctionFeatures {
    fn scalars(&self) -> [f64; 6] {
        [
            self.n_blocks as f64,
            self.n_edges as f64,
            self.n_calls as f64,
            self.n_instructions as f64,
            self.cg_in_degree as f64,
            self.cg_out_degree as f64,
        ]
    }
}

/// Features of every defined function, keyed by name.
pub fn extract_features(m: &Module) -> BTreeMap<String, FunctionFeatures> {
    let mut out: BTreeMap<String, FunctionFeatures> = BTreeMap::new();
    let mut callers: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for f in m.functions.iter().filter(|f| !f.external) {
        for g in f.direct_callees() {
            callers.entry(g).or_default().insert(&f.name);
        }
    }
    for f in m.functions.iter().filter(|f| !f.external) {
        let mut ft = FunctionFeatures {
            n_blocks: f.blocks.len(),
            n_edges: Cfg::new(f).edge_count(),
            cg_out_degree: f.direct_callees().len(),
            cg_in_degree: callers.get(f.name.as_str()).map_or(0, |c| c.len()),
            ..Default::default()
        };
        for b in &f.blocks {
            for i in &b.instructions {
                if matches!(i.op, Op::Call(..) | Op::ICall(..)) {
                    ft.n_calls += 1;
                }
                *ft.opcode_histogram.entry(i.op.opcode().to_string()).or_default() += 1;
            }
            *ft.opcode_histogram.entry(b.terminator.opcode().to_string()).or_default() += 1;
            ft.n_instructions += b.instructions.len() + 1;
        }
        out.insert(f.name.clone(), ft);
    }
    out
}

fn cosine(a: &BTreeMap<String, usize>, b: &BTreeMap<String, usize>) -> f64 {
    let dot: f64 = a.iter().map(|(k, &x)| x as f64 * b.get(k).copied().unwrap_or(0) as f64).sum();
    let na: f64 = a.values().map(|&x| (x * x) as f64).sum();
    let nb: f64 = b.values().map(|&x| (x * x) as f64).sum();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (false, false) => (dot / (na * nb).sqrt()).min(1.0),
        _ => 0.0,
    }
}

/// Half histogram cosine, half mean relative agreement of the scalar
/// features. Symmetric, 1 on identical features.
pub fn similarity(a: &FunctionFeatures, b: &FunctionFeatures) -> f64 {
    let (sa, sb) = (a.scalars(), b.scalars());
    let agree: f64 = sa.iter().zip(&sb).map(|(x, y)| 1.0 - (x - y).abs() / x.max(*y).max(1.0)).sum::<f64>() / 6.0;
    0.5 * cosine(&a.opcode_histogram, &b.opcode_histogram) + 0.5 * agree
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub original: String,
    pub obfuscated: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matches: Vec<Match>,
    /// Candidates of each original function, best first.
    #[serde(skip)]
    pub candidates: BTreeMap<String, Vec<(String, f64)>>,
}

impl MatchReport {
    pub fn matched(&self, original: &str) -> Option<&Match> {
        self.matches.iter().find(|m| m.original == original)
    }
}

/// Greedy one-to-one matching in decreasing similarity; ties break on
/// names so the result is deterministic.
pub fn match_functions(
    orig: &BTreeMap<String, FunctionFeatures>,
    obf: &BTreeMap<String, FunctionFeatures>,
) -> MatchReport {
    let mut all: Vec<(f64, &str, &str)> = Vec::new();
    let mut report = MatchReport::default();
    for (a, fa) in orig {
        let mut cands: Vec<(String, f64)> = obf.iter().map(|(b, fb)| (b.clone(), similarity(fa, fb))).collect();
        all.extend(cands.iter().map(|(b, s)| (*s, a.as_str(), obf.get_key_value(b).unwrap().0.as_str())));
        cands.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        report.candidates.insert(a.clone(), cands);
    }
    all.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(y.1)).then_with(|| x.2.cmp(y.2)));
    let (mut used_a, mut used_b) = (BTreeSet::new(), BTreeSet::new());
    for (s, a, b) in all {
        if used_a.contains(a) || used_b.contains(b) {
            continue;
        }
        used_a.insert(a);
        used_b.insert(b);
        report.matches.push(Match { original: a.to_string(), obfuscated: b.to_string(), similarity: s });
    }
    report.matches.sort_by(|x, y| x.original.cmp(&y.original));
    report
}

/// Hits and total: an original function is a hit when its match was
/// built from it.
pub fn precision_counts(report: &MatchReport, prov: &ProvenanceMap) -> (usize, usize) {
    let total = report.candidates.len();
    let hits = report
        .candidates
        .keys()
        .filter(|a| report.matched(a).is_some_and(|m| prov.origins(&m.obfuscated).contains(*a)))
        .count();
    (hits, total)
}

pub fn precision_at_1(report: &MatchReport, prov: &ProvenanceMap) -> f64 {
    match precision_counts(report, prov) {
        (_, 0) => 1.0,
        (h, t) => h as f64 / t as f64,
    }
}

/// 1-based position of the first provenance-correct candidate of each
/// original function.
pub fn ranks(report: &MatchReport, prov: &ProvenanceMap) -> BTreeMap<String, Option<usize>> {
    report
        .candidates
        .iter()
        .map(|(a, cands)| (a.clone(), cands.iter().position(|(b, _)| prov.origins(b).contains(a)).map(|i| i + 1)))
        .collect()
}

/// Opcode counts over all defined functions.
pub fn module_histogram(m: &Module) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for ft in extract_features(m).into_values() {
        for (k, v) in ft.opcode_histogram {
            *h.entry(k).or_default() += v;
        }
    }
    h
}

pub fn histogram_distance(a: &BTreeMap<String, usize>, b: &BTreeMap<String, usize>) -> f64 {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .map(|k| {
            let d = a.get(k).copied().unwrap_or(0) as f64 - b.get(k).copied().unwrap_or(0) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Distances from `baseline`, scaled so the farthest is 1.
pub fn normalize(distances: &[f64]) -> Vec<f64> {
    let max = distances.iter().copied().fold(0.0, f64::max);
    distances.iter().map(|d| if max == 0.0 { 0.0 } else { d / max }).collect()
}

pub fn opcode_distance(baseline: &Module, variants: &[Module]) -> Vec<f64> {
    let base = module_histogram(baseline);
    let raw: Vec<f64> = variants.iter().map(|v| histogram_distance(&base, &module_histogram(v))).collect();
    normalize(&raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub precision_at_1: f64,
    pub matches: Vec<Match>,
    pub ranks: BTreeMap<String, Option<usize>>,
    pub opcode_distances: Vec<f64>,
}

/// Full comparison of an original module with one obfuscated variant.
/// The opcode distance is the raw Euclidean distance; it is only
/// normalized across several variants.
pub fn diff(orig: &Module, obf: &Module, prov: &ProvenanceMap) -> DiffReport {
    let report = match_functions(&extract_features(orig), &extract_features(obf));
    DiffReport {
        precision_at_1: precision_at_1(&report, prov),
        ranks: ranks(&report, prov),
        opcode_distances: vec![histogram_distance(&module_histogram(orig), &module_histogram(obf))],
        matches: report.matches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;
    use crate::pipeline::{obfuscate, Mode, ObfuscationConfig};
    use crate::samples;

    #[test]
    fn single_block_features() {
        let m = parse_module("module m func @f() -> i64 { e: %x = const i64 1 ret %x }").unwrap();
        let f = &extract_features(&m)["f"];
        assert_eq!((f.n_blocks, f.n_edges, f.n_calls, f.n_instructions), (1, 0, 0, 2));
        assert_eq!(f.opcode_histogram.values().sum::<usize>(), f.n_instructions);
    }

    #[test]
    fn cal_file_features_and_fission_change() {
        let m = samples::cal_file();
        assert_eq!(extract_features(&m)["cal_file"].n_blocks, 9);
        let o = obfuscate(&m, &ObfuscationConfig::new(Mode::FissionOnly, 0)).unwrap();
        assert_ne!(extract_features(&o.module)["cal_file"], extract_features(&m)["cal_file"]);
    }

    #[test]
    fn identity_and_renaming_match_perfectly() {
        let m = samples::cal_file();
        let fm = extract_features(&m);
        let r = match_functions(&fm, &fm);
        assert!(r.matches.iter().all(|x| x.similarity == 1.0 && x.original == x.obfuscated));
        let prov = ProvenanceMap::identity(m.functions.iter().map(|f| f.name.as_str()));
        assert_eq!(precision_at_1(&r, &prov), 1.0);
        let mut renamed = BTreeMap::new();
        for (k, v) in &fm {
            renamed.insert(format!("zz_{k}"), v.clone());
        }
        let r2 = match_functions(&fm, &renamed);
        assert!(r2.matches.iter().all(|x| x.obfuscated == format!("zz_{}", x.original)));
    }

    #[test]
    fn similarity_is_symmetric() {
        let m = samples::cal_file();
        let fm = extract_features(&m);
        let (a, b) = (&fm["cal_file"], &fm["main"]);
        assert_eq!(similarity(a, b), similarity(b, a));
        assert_eq!(similarity(a, a), 1.0);
    }

    #[test]
    fn opcode_distance_normalization() {
        let m = samples::cal_file();
        assert_eq!(opcode_distance(&m, &[m.clone()]), vec![0.0]);
        let o = obfuscate(&m, &ObfuscationConfig::new(Mode::FufiAll, 1)).unwrap().module;
        assert_eq!(opcode_distance(&m, &[o.clone()]), vec![1.0]);
        let d = opcode_distance(&m, &[m.clone(), o]);
        assert_eq!(d, vec![0.0, 1.0]);
    }

    #[test]
    fn unrelated_match_is_a_miss() {
        let m = samples::cal_file();
        let fm = extract_features(&m);
        let r = match_functions(&fm, &fm);
        let mut prov = ProvenanceMap::default();
        prov.insert("cal_file", ["main"], crate::provenance::Role::FusFunc);
        prov.insert("main", ["cal_file"], crate::provenance::Role::FusFunc);
        assert_eq!(precision_at_1(&r, &prov), 0.0);
    }
}

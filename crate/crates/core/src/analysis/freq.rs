use super::{Cfg, LoopInfo};

/// Static execution-frequency estimate per block (entry = 1).
///
/// Branches split equally; a loop body is scaled by the product of the
/// enclosing trip counts; mass leaving a loop equals the mass that entered
/// it. Within a loop, a branch only splits across the successors that stay
/// in the loop, and exit edges share the loop's entry mass in proportion to
/// how often their source runs.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqMap {
    pub freq: Vec<f64>,
}

impl FreqMap {
    pub fn get(&self, b: usize) -> f64 {
        self.freq[b]
    }
}

/// Mass propagation inside one loop (or the whole function) with its header
/// at mass 1.
struct RegionMass {
    /// Mass per block directly in the region and per child-loop header.
    mass: Vec<f64>,
    /// Exit edges `(source, target)` of the region with normalized weights.
    exits: Vec<(usize, usize, f64)>,
}

pub fn block_frequency(cfg: &Cfg, li: &LoopInfo) -> FreqMap {
    let n = cfg.len();
    let nregions = li.loops.len() + 1;
    // region id: loop index, or `root` for the function itself
    let root = li.loops.len();
    let region_of = |b: usize| li.innermost[b].unwrap_or(root);
    let parent_of = |r: usize| if r == root { None } else { Some(li.loops[r].parent.unwrap_or(root)) };
    let in_region = |r: usize, b: usize| r == root || li.loops[r].contains(b);
    // the node that represents block `b` inside region `r` (b must be in r)
    let node_in = |r: usize, b: usize| -> usize {
        let mut cur = region_of(b);
        if cur == r {
            return b;
        }
        while parent_of(cur) != Some(r) {
            cur = parent_of(cur).expect("block not inside region");
        }
        li.loops[cur].header
    };
    let rpo = |b: usize| cfg.rpo_index[b].unwrap_or(usize::MAX);

    // children before parents, so inner exit weights are known
    let mut order: Vec<usize> = (0..li.loops.len()).collect();
    order.sort_by_key(|&l| li.loops[l].body.len());
    order.push(root);

    let mut regions: Vec<Option<RegionMass>> = (0..nregions).map(|_| None).collect();
    for &r in &order {
        let header = if r == root { 0 } else { li.loops[r].header };
        let mut nodes: Vec<usize> = (0..n)
            .filter(|&b| cfg.reachable(b) && in_region(r, b))
            .filter(|&b| region_of(b) == r || li.loops.iter().enumerate().any(|(l, lp)| lp.header == b && parent_of(l) == Some(r)))
            .collect();
        nodes.sort_by_key(|&b| rpo(b));
        let mut mass = vec![0.0; n];
        mass[header] = 1.0;
        let mut exits: Vec<(usize, usize, f64)> = Vec::new();
        for &u in &nodes {
            let m = mass[u];
            if m == 0.0 {
                continue;
            }
            // outgoing edges of this node with relative weights
            let out: Vec<(usize, usize, f64)> = if region_of(u) == r {
                let succs = &cfg.succs[u];
                let stay: Vec<usize> =
                    succs.iter().copied().filter(|&v| in_region(r, v) && (v == header || rpo(v) > rpo(u))).collect();
                let leaving: Vec<usize> = succs.iter().copied().filter(|&v| !in_region(r, v)).collect();
                let mut e: Vec<(usize, usize, f64)> = Vec::new();
                if !stay.is_empty() {
                    for &v in &stay {
                        e.push((u, v, m / stay.len() as f64));
                    }
                }
                for &v in &leaving {
                    e.push((u, v, m / succs.len() as f64));
                }
                e
            } else {
                let child = li.innermost[u]
                    .map(|mut l| {
                        while parent_of(l) != Some(r) {
                            l = parent_of(l).unwrap();
                        }
                        l
                    })
                    .unwrap();
                regions[child].as_ref().unwrap().exits.iter().map(|&(s, v, w)| (s, v, m * w)).collect()
            };
            for (s, v, w) in out {
                if !in_region(r, v) {
                    exits.push((s, v, w));
                } else if v == header {
                    // back edge: absorbed by the trip count
                } else {
                    let nv = node_in(r, v);
                    // retreating edges that are not back edges carry no mass
                    if rpo(nv) > rpo(u) {
                        mass[nv] += w;
                    }
                }
            }
        }
        let total: f64 = exits.iter().map(|e| e.2).sum();
        if total > 0.0 {
            for e in &mut exits {
                e.2 /= total;
            }
        }
        regions[r] = Some(RegionMass { mass, exits });
    }

    // absolute mass entering each region's header
    let mut entry_mass = vec![0.0; nregions];
    entry_mass[root] = 1.0;
    let trip = |r: usize| if r == root { 1.0 } else { li.loops[r].trip_count as f64 };
    let mut top_down = order.clone();
    top_down.reverse();
    for &r in &top_down {
        if r == root {
            continue;
        }
        let p = parent_of(r).unwrap();
        let h = li.loops[r].header;
        entry_mass[r] = entry_mass[p] * trip(p) * regions[p].as_ref().unwrap().mass[h];
    }
    let freq = (0..n)
        .map(|b| {
            if !cfg.reachable(b) {
                return 0.0;
            }
            let r = region_of(b);
            entry_mass[r] * trip(r) * regions[r].as_ref().unwrap().mass[b]
        })
        .collect();
    FreqMap { freq }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{loop_info, DomTree, DEFAULT_TRIP_COUNT};
    use crate::ir::parse_module;

    fn freqs(src: &str) -> Vec<f64> {
        let m = parse_module(src).unwrap();
        let f = &m.functions[0];
        let cfg = Cfg::new(f);
        let dt = DomTree::new(&cfg);
        let li = loop_info(f, &cfg, &dt, DEFAULT_TRIP_COUNT);
        block_frequency(&cfg, &li).freq
    }

    #[test]
    fn diamond_splits_and_merges() {
        let f = freqs("module m func @f(%c: i1) -> void { e: condbr %c, a, b a: br j b: br j j: ret }");
        assert_eq!(f, vec![1.0, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn loop_body_scaled_by_default_trip_count() {
        let f = freqs("module m func @f(%c: i1) -> void { e: br h h: condbr %c, b, x b: br h x: ret }");
        assert_eq!(f, vec![1.0, 10.0, 10.0, 1.0]);
    }

    #[test]
    fn self_loop_rotated_shape() {
        let f = freqs("module m func @f(%c: i1) -> void { e: br b b: condbr %c, b, x x: ret }");
        assert_eq!(f, vec![1.0, 10.0, 1.0]);
    }

    #[test]
    fn loop_with_break_conserves_exit_mass() {
        let f = freqs(
            "module m func @f(%c: i1) -> void {
               e: br h
               h: condbr %c, b, x
               b: condbr %c, l, x
               l: br h
               x: ret }",
        );
        assert_eq!(f[0], 1.0);
        assert_eq!(f[1], 10.0);
        assert_eq!(f[2], 10.0);
        assert_eq!(f[3], 10.0);
        assert!((f[4] - 1.0).abs() < 1e-12);
    }
}

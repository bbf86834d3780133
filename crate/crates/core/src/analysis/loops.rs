use std::collections::{BTreeMap, HashMap};

use super::{Cfg, DomTree};
use crate::ir::{BinOp, Const, Function, IntPred, Op, Terminator};

/// Trip count assumed for loops whose bound cannot be read off the code.
pub const DEFAULT_TRIP_COUNT: u64 = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Loop {
    pub header: usize,
    /// Blocks of the natural loop, header included, sorted.
    pub body: Vec<usize>,
    pub parent: Option<usize>,
    pub trip_count: u64,
}

impl Loop {
    pub fn contains(&self, b: usize) -> bool {
        self.body.binary_search(&b).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopInfo {
    /// Ordered by header position in reverse postorder (outer loops first).
    pub loops: Vec<Loop>,
    /// Innermost loop containing each block.
    pub innermost: Vec<Option<usize>>,
}

impl LoopInfo {
    pub fn depth(&self, b: usize) -> usize {
        let mut d = 0;
        let mut cur = self.innermost[b];
        while let Some(l) = cur {
            d += 1;
            cur = self.loops[l].parent;
        }
        d
    }

    /// Product of the trip counts of every loop enclosing `b`.
    pub fn multiplier(&self, b: usize) -> u64 {
        let mut m = 1u64;
        let mut cur = self.innermost[b];
        while let Some(l) = cur {
            m = m.saturating_mul(self.loops[l].trip_count);
            cur = self.loops[l].parent;
        }
        m
    }

    pub fn is_header(&self, b: usize) -> bool {
        self.loops.iter().any(|l| l.header == b)
    }
}

/// Natural loops from back edges, with syntactic trip-count estimation.
pub fn loop_info(f: &Function, cfg: &Cfg, dt: &DomTree, default_trip: u64) -> LoopInfo {
    let n = cfg.len();
    let mut bodies: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for u in 0..n {
        if !cfg.reachable(u) {
            continue;
        }
        for &h in &cfg.succs[u] {
            if !dt.dominates(h, u) {
                continue;
            }
            let body = bodies.entry(h).or_insert_with(|| vec![false; n]);
            body[h] = true;
            let mut stack = vec![u];
            while let Some(x) = stack.pop() {
                if body[x] {
                    continue;
                }
                body[x] = true;
                for &p in &cfg.preds[x] {
                    if cfg.reachable(p) {
                        stack.push(p);
                    }
                }
            }
        }
    }
    let mut loops: Vec<Loop> = bodies
        .into_iter()
        .map(|(header, mask)| Loop {
            header,
            body: (0..n).filter(|&b| mask[b]).collect(),
            parent: None,
            trip_count: default_trip,
        })
        .collect();
    loops.sort_by_key(|l| cfg.rpo_index[l.header]);
    for i in 0..loops.len() {
        let parent = (0..loops.len())
            .filter(|&j| j != i && loops[j].contains(loops[i].header) && loops[j].body.len() > loops[i].body.len())
            .min_by_key(|&j| loops[j].body.len());
        loops[i].parent = parent;
    }
    let mut innermost = vec![None; n];
    for b in 0..n {
        innermost[b] = (0..loops.len()).filter(|&l| loops[l].contains(b)).min_by_key(|&l| loops[l].body.len());
    }
    let mut info = LoopInfo { loops, innermost };
    for l in 0..info.loops.len() {
        if let Some(k) = counted_trip_count(f, cfg, dt, &info, l) {
            info.loops[l].trip_count = k;
        }
    }
    info
}

/// Recognises `slot = C0; while (slot <pred> K) { ...; slot = slot + S }`
/// with the test in the header and returns the exact iteration count.
fn counted_trip_count(f: &Function, cfg: &Cfg, dt: &DomTree, info: &LoopInfo, l: usize) -> Option<u64> {
    let lp = &info.loops[l];
    let h = lp.header;
    let mut defs: HashMap<&str, &Op> = HashMap::new();
    for b in &f.blocks {
        for i in &b.instructions {
            if let Some(r) = i.def() {
                defs.insert(r, &i.op);
            }
        }
    }
    let slot_of = |reg: &str| match defs.get(reg) {
        Some(Op::SlotAddr(s)) => Some(s.as_str()),
        _ => None,
    };
    let const_of = |reg: &str| match defs.get(reg) {
        Some(Op::Const(Const::Int(v))) => Some(*v),
        _ => None,
    };

    let Terminator::CondBr(c, t, e) = &f.blocks[h].terminator else {
        return None;
    };
    let t_in = lp.contains(f.block_index(t)?);
    let e_in = lp.contains(f.block_index(e)?);
    if t_in == e_in {
        return None;
    }
    let Some(Op::Icmp(pred, a, b)) = defs.get(c.as_str()) else {
        return None;
    };
    // counter on the left or the right of the comparison
    let (counter_reg, bound, swapped) = match (defs.get(a.as_str()), const_of(b), const_of(a)) {
        (Some(Op::Load(_)), Some(k), _) => (a.as_str(), k, false),
        (_, _, Some(k)) if matches!(defs.get(b.as_str()), Some(Op::Load(_))) => (b.as_str(), k, true),
        _ => return None,
    };
    let Some(Op::Load(p)) = defs.get(counter_reg) else {
        return None;
    };
    let slot = slot_of(p)?;
    let slot_ty = f.slot(slot)?.ty;
    if !slot_ty.is_int() {
        return None;
    }

    // the counter slot must only be touched through direct loads and stores
    let mut stores: Vec<(usize, usize, &str)> = Vec::new();
    for (bi, blk) in f.blocks.iter().enumerate() {
        for (ii, inst) in blk.instructions.iter().enumerate() {
            match &inst.op {
                Op::Store(v, q) if slot_of(q) == Some(slot) => {
                    if slot_of(v) == Some(slot) {
                        return None;
                    }
                    stores.push((bi, ii, v.as_str()));
                }
                Op::Load(q) if slot_of(q) == Some(slot) => {}
                op => {
                    if op.uses().iter().any(|u| slot_of(u) == Some(slot)) {
                        return None;
                    }
                }
            }
        }
        if blk.terminator.uses().iter().any(|u| slot_of(u) == Some(slot)) {
            return None;
        }
    }

    let outside_preds: Vec<usize> =
        cfg.preds[h].iter().copied().filter(|p| cfg.reachable(*p) && !lp.contains(*p)).collect();
    let [pre] = outside_preds[..] else {
        return None;
    };
    let init_store = stores.iter().filter(|s| s.0 == pre).max_by_key(|s| s.1)?;
    let init = const_of(init_store.2)?;

    let in_loop: Vec<_> = stores.iter().filter(|s| lp.contains(s.0)).collect();
    let [step_store] = in_loop[..] else {
        return None;
    };
    if info.innermost[step_store.0] != Some(l) {
        return None;
    }
    let latches: Vec<usize> = cfg.preds[h].iter().copied().filter(|p| lp.contains(*p)).collect();
    if !latches.iter().all(|&x| dt.dominates(step_store.0, x)) {
        return None;
    }
    let step = match defs.get(step_store.2) {
        Some(Op::Bin(op @ (BinOp::Add | BinOp::Sub), x, y)) => {
            let loads_counter = |r: &str| matches!(defs.get(r), Some(Op::Load(q)) if slot_of(q) == Some(slot));
            let s = if loads_counter(x) {
                const_of(y)?
            } else if *op == BinOp::Add && loads_counter(y) {
                const_of(x)?
            } else {
                return None;
            };
            if *op == BinOp::Sub {
                s.checked_neg()?
            } else {
                s
            }
        }
        _ => return None,
    };
    if step == 0 {
        return None;
    }
    let holds = |v: i64| {
        let (x, y) = if swapped { (bound, v) } else { (v, bound) };
        let r = match pred {
            IntPred::Eq => x == y,
            IntPred::Ne => x != y,
            IntPred::Slt => x < y,
            IntPred::Sle => x <= y,
            IntPred::Sgt => x > y,
            IntPred::Sge => x >= y,
        };
        r == t_in
    };
    let bits = slot_ty.bits();
    let (lo, hi) = if bits >= 64 { (i64::MIN, i64::MAX) } else { (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1) };
    let mut v = init;
    let mut count = 0u64;
    while holds(v) {
        count += 1;
        if count > 1_000_000 {
            return None;
        }
        v = v.checked_add(step)?;
        if v < lo || v > hi {
            return None;
        }
    }
    Some(count.max(1))
}

//! Fusion: merge pairs of functions into one body selected by a leading
//! `ctrl: i1` parameter.

pub mod compress;
pub mod tag;

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use compress::{compress_params, max_matching, type_compatible, FusionPair, MergedParam};

use crate::analysis::{innocuous_blocks, EscapeSet, ValueFlow};
use crate::ir::{
    validate_function, BinOp, Block, CastOp, Const, Function, Instruction, IntPred, Module, NameGen, Op, Param, Slot,
    Terminator, Type,
};
use crate::provenance::{ProvenanceMap, Role};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionConfig {
    pub deep: bool,
    /// Pairs whose merged list (ctrl included) fits are matched first.
    pub max_params: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { deep: true, max_params: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FusionError {
    #[error("cannot fuse `@{left}` with `@{right}`: {reason}")]
    InvalidPair { left: String, right: String, reason: String },
}

/// Whether `f` may take part in fusion at all.
pub fn fusible(f: &Function) -> bool {
    !f.external && !f.variadic && !f.blocks.is_empty()
}

fn pair_allowed(a: &Function, b: &Function) -> bool {
    a.name != b.name
        && fusible(a)
        && fusible(b)
        && type_compatible(a.ret, b.ret).is_some()
        && !a.direct_callees().contains(b.name.as_str())
        && !b.direct_callees().contains(a.name.as_str())
}

/// Random maximal pairing of `pool`. Pairs that fit in `max_params`
/// registers (ctrl included) are formed before any others. Several seeded
/// orders are tried and the one forming the most pairs is kept.
pub fn select_pairs(m: &Module, pool: &[String], seed: u64, max_params: usize) -> Vec<FusionPair> {
    let mut names: Vec<&str> = pool.iter().map(String::as_str).collect::<BTreeSet<_>>().into_iter().collect();
    names.retain(|n| m.function(n).is_some_and(fusible));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Vec<FusionPair> = Vec::new();
    for _ in 0..PAIRING_ATTEMPTS {
        names.shuffle(&mut rng);
        let out = greedy_pairs(m, &names, max_params);
        if out.len() > best.len() {
            best = out;
        }
        if 2 * best.len() + 1 >= names.len() {
            break;
        }
    }
    best
}

const PAIRING_ATTEMPTS: usize = 16;

fn greedy_pairs(m: &Module, names: &[&str], max_params: usize) -> Vec<FusionPair> {
    let funcs: Vec<&Function> = names.iter().map(|n| m.function(n).unwrap()).collect();
    let mut used = vec![false; funcs.len()];
    let mut out = Vec::new();
    for small_only in [true, false] {
        for i in 0..funcs.len() {
            if used[i] {
                continue;
            }
            for j in i + 1..funcs.len() {
                if used[j] || !pair_allowed(funcs[i], funcs[j]) {
                    continue;
                }
                let Some(p) = compress_params(funcs[i], funcs[j]) else { continue };
                if small_only && p.merged_params.len() + 1 > max_params {
                    continue;
                }
                used[i] = true;
                used[j] = true;
                out.push(p);
                break;
            }
        }
    }
    out
}

fn widen(from: Type, to: Type) -> Option<CastOp> {
    match (from, to) {
        (a, b) if a == b => None,
        (a, _) if a.is_int() => Some(CastOp::ZExt),
        _ => Some(CastOp::FPExt),
    }
}

fn narrow(from: Type, to: Type) -> Option<CastOp> {
    match (from, to) {
        (a, b) if a == b => None,
        (a, _) if a.is_int() => Some(CastOp::Trunc),
        _ => Some(CastOp::FPTrunc),
    }
}

/// Instructions calling `fus` in place of one side of `p`.
fn build_call(
    p: &FusionPair,
    fus: &str,
    right_side: bool,
    args: &[(String, Type)],
    dst: Option<(String, Type)>,
    names: &mut NameGen,
) -> Vec<Instruction> {
    let mut out = Vec::new();
    let c = names.fresh("fu.ctrl");
    out.push(Instruction::with_result(&c, Type::I1, Op::Const(Const::Int(right_side as i64))));
    let mut operands = vec![c];
    for mp in &p.merged_params {
        let src = if right_side { mp.right } else { mp.left };
        let reg = match src {
            Some(i) => {
                let (a, t) = &args[i];
                match widen(*t, mp.ty) {
                    None => a.clone(),
                    Some(op) => {
                        let w = names.fresh(&format!("{a}.w"));
                        out.push(Instruction::with_result(&w, mp.ty, Op::Cast(op, a.clone())));
                        w
                    }
                }
            }
            None => {
                let z = names.fresh("fu.zero");
                out.push(Instruction::with_result(&z, mp.ty, Op::Const(mp.ty.zero())));
                z
            }
        };
        operands.push(reg);
    }
    let call = Op::Call(fus.to_string(), operands);
    match dst {
        None => out.push(Instruction::new(call)),
        Some((d, t)) => match narrow(p.merged_return, t) {
            None => out.push(Instruction::with_result(&d, t, call)),
            Some(op) => {
                let wide = names.fresh(&format!("{d}.m"));
                out.push(Instruction::with_result(&wide, p.merged_return, call));
                out.push(Instruction::with_result(&d, t, Op::Cast(op, wide)));
            }
        },
    }
    out
}

/// Body of one side, renamed into the fused function's namespace.
fn place_side(f: &Function, p: &FusionPair, right_side: bool) -> (Vec<Block>, Vec<Slot>) {
    let (rp, lp) = if right_side { ("r.", "R.") } else { ("l.", "L.") };
    let reg = |r: &str| format!("{rp}{r}");
    let mut rename: HashMap<String, String> = HashMap::new();
    let mut conversions = Vec::new();
    for (i, prm) in f.params.iter().enumerate() {
        let k = p.position(right_side, i);
        let merged = format!("p{k}");
        match narrow(p.merged_params[k].ty, prm.ty) {
            None => {
                rename.insert(prm.name.clone(), merged);
            }
            Some(op) => {
                conversions.push(Instruction::with_result(reg(&prm.name), prm.ty, Op::Cast(op, merged)));
                rename.insert(prm.name.clone(), reg(&prm.name));
            }
        }
    }
    let mut blocks: Vec<Block> = f.blocks.clone();
    for b in &mut blocks {
        b.label = format!("{lp}{}", b.label);
        for t in b.terminator.targets_mut() {
            *t = format!("{lp}{t}");
        }
        for i in &mut b.instructions {
            if let Some((r, _)) = &mut i.result {
                *r = reg(r);
            }
            match &mut i.op {
                Op::SlotAddr(s) => *s = format!("{rp}{s}"),
                Op::MayThrow(_, h) => *h = format!("{lp}{h}"),
                _ => {}
            }
            for u in i.op.uses_mut() {
                *u = rename.get(u.as_str()).cloned().unwrap_or_else(|| reg(u));
            }
        }
        for u in b.terminator.uses_mut() {
            *u = rename.get(u.as_str()).cloned().unwrap_or_else(|| reg(u));
        }
    }
    let head = &mut blocks[0].instructions;
    conversions.append(head);
    *head = conversions;
    let slots = f.slots.iter().map(|s| Slot::new(format!("{rp}{}", s.name), s.ty)).collect();
    (blocks, slots)
}

/// Rewrites returns of one side to produce the merged return type.
fn widen_returns(blocks: &mut [Block], from: Type, to: Type, names: &mut NameGen) {
    for b in blocks {
        let Terminator::Ret(v) = &b.terminator else { continue };
        let new = match (v, from) {
            (_, _) if to == Type::Void => continue,
            (None, _) => {
                let z = names.fresh("fu.rz");
                b.instructions.push(Instruction::with_result(&z, to, Op::Const(to.zero())));
                z
            }
            (Some(v), t) => match widen(t, to) {
                None => continue,
                Some(op) => {
                    let w = names.fresh(&format!("{v}.w"));
                    b.instructions.push(Instruction::with_result(&w, to, Op::Cast(op, v.clone())));
                    w
                }
            },
        };
        b.terminator = Terminator::Ret(Some(new));
    }
}

/// Builds the fused function for `p`. `name` must be free in `m`.
pub fn build_fused(m: &Module, p: &FusionPair, name: &str) -> Function {
    let l = m.function(&p.left).unwrap();
    let r = m.function(&p.right).unwrap();
    let mut params = vec![Param::new("ctrl", Type::I1)];
    params.extend(p.merged_params.iter().enumerate().map(|(k, mp)| Param::new(format!("p{k}"), mp.ty)));
    let mut fus = Function::new(name, params, p.merged_return);
    let (mut lb, ls) = place_side(l, p, false);
    let (mut rb, rs) = place_side(r, p, true);
    let entry = Block::new(
        "entry",
        vec![],
        Terminator::CondBr("ctrl".into(), rb[0].label.clone(), lb[0].label.clone()),
    );
    fus.blocks = vec![entry];
    fus.blocks.append(&mut lb);
    fus.blocks.append(&mut rb);
    let mut names = NameGen::for_function(&fus);
    let n_left = l.blocks.len();
    widen_returns(&mut fus.blocks[1..1 + n_left], l.ret, p.merged_return, &mut names);
    widen_returns(&mut fus.blocks[1 + n_left..], r.ret, p.merged_return, &mut names);
    fus.slots = ls.into_iter().chain(rs).collect();
    fus.exits = match (l.exits, r.exits) {
        (Some(a), Some(b)) if p.merged_return == Type::I32 => Some(a.max(b)),
        _ => None,
    };
    fus
}

/// Rewrites every direct call of `p.left` / `p.right` in `f`.
fn rewrite_calls(f: &mut Function, p: &FusionPair, fus: &str, sigs: &[Vec<Type>; 2]) -> usize {
    let hits = |i: &Instruction| matches!(&i.op, Op::Call(g, _) if *g == p.left || *g == p.right);
    if !f.blocks.iter().any(|b| b.instructions.iter().any(hits)) {
        return 0;
    }
    let mut names = NameGen::for_function(f);
    let mut n = 0;
    for b in &mut f.blocks {
        let old = std::mem::take(&mut b.instructions);
        for i in old {
            let Op::Call(g, args) = &i.op else {
                b.instructions.push(i);
                continue;
            };
            if *g != p.left && *g != p.right {
                b.instructions.push(i);
                continue;
            }
            let right_side = *g == p.right;
            let typed: Vec<(String, Type)> =
                args.iter().zip(&sigs[right_side as usize]).map(|(a, t)| (a.clone(), *t)).collect();
            b.instructions.extend(build_call(p, fus, right_side, &typed, i.result.clone(), &mut names));
            n += 1;
        }
    }
    n
}

/// A function keeping the signature of one side and forwarding to `fus`.
fn trampoline(orig: &Function, p: &FusionPair, fus: &str, right_side: bool) -> Function {
    let mut t = Function::new(&orig.name, orig.params.clone(), orig.ret);
    let mut names = NameGen::for_function(orig);
    let args: Vec<(String, Type)> = orig.params.iter().map(|q| (q.name.clone(), q.ty)).collect();
    let dst = (orig.ret != Type::Void).then(|| (names.fresh("res"), orig.ret));
    let insts = build_call(p, fus, right_side, &args, dst.clone(), &mut names);
    t.blocks = vec![Block::new("entry", insts, Terminator::Ret(dst.map(|d| d.0)))];
    t
}

/// Replaces `addr_of_func` of `target` with a tagged address of `fus`.
fn tag_addresses(f: &mut Function, target: &str, fus: &str, ctrl: bool) -> usize {
    let hits = |i: &Instruction| matches!(&i.op, Op::AddrOfFunc(g) if g == target);
    if !f.blocks.iter().any(|b| b.instructions.iter().any(hits)) {
        return 0;
    }
    let mut names = NameGen::for_function(f);
    let mut n = 0;
    for b in &mut f.blocks {
        let old = std::mem::take(&mut b.instructions);
        for i in old {
            match (&i.op, &i.result) {
                (Op::AddrOfFunc(g), Some((d, _))) if g == target => {
                    let a = names.fresh(&format!("{d}.fus"));
                    let t = names.fresh(&format!("{d}.tag"));
                    b.instructions.push(Instruction::with_result(&a, Type::I64, Op::AddrOfFunc(fus.to_string())));
                    b.instructions.push(Instruction::with_result(&t, Type::I64, Op::Const(Const::Int(tag::tag_bits(ctrl)))));
                    b.instructions.push(Instruction::with_result(d, Type::I64, Op::Bin(BinOp::Or, a, t)));
                    n += 1;
                }
                _ => b.instructions.push(i),
            }
        }
    }
    n
}

/// Blocks of one side that deep fusion may share: innocuous, not the
/// entry, and reading nothing but their own registers and unconverted
/// merged parameters.
fn shareable(m: &Module, f: &Function, fus: &Function, right_side: bool) -> Vec<String> {
    let inn = innocuous_blocks(m, f);
    let lp = if right_side { "R." } else { "L." };
    let params: BTreeSet<&str> = fus.params.iter().map(|q| q.name.as_str()).collect();
    let mut out = Vec::new();
    for b in f.blocks.iter().skip(1) {
        if !inn.contains(&b.label) {
            continue;
        }
        let label = format!("{lp}{}", b.label);
        let Some(fb) = fus.block(&label) else { continue };
        let own: BTreeSet<&str> = fb.instructions.iter().filter_map(|i| i.def()).collect();
        let uses = fb.instructions.iter().flat_map(|i| i.op.uses()).chain(fb.terminator.uses());
        if uses.into_iter().all(|u| own.contains(u) || (params.contains(u) && u != "ctrl")) {
            out.push(label);
        }
    }
    out
}

/// Merges one shareable block of each side into a `[shared]` block that
/// runs on both ctrl paths. Returns the number of merged pairs.
pub fn deep_fuse(m: &Module, fus: &mut Function, left: &Function, right: &Function) -> usize {
    let ls = shareable(m, left, fus, false);
    let rs = shareable(m, right, fus, true);
    let mut names = NameGen::for_function(fus);
    let mut merged = 0;
    for (a, b) in ls.iter().zip(&rs) {
        let mut trial = fus.clone();
        let ai = trial.block_index(a).unwrap();
        let bi = trial.block_index(b).unwrap();
        let label = names.fresh("dfuse");
        let (ll, rl) = (names.fresh(&format!("{label}.l")), names.fresh(&format!("{label}.r")));
        let mut insts = trial.blocks[ai].instructions.clone();
        insts.extend(trial.blocks[bi].instructions.iter().cloned());
        let mut shared = Block::new(&label, insts, Terminator::CondBr("ctrl".into(), rl.clone(), ll.clone()));
        shared.shared = true;
        let lt = Block::new(&ll, vec![], trial.blocks[ai].terminator.clone());
        let rt = Block::new(&rl, vec![], trial.blocks[bi].terminator.clone());
        trial.blocks[bi] = rt;
        trial.blocks.splice(ai..ai + 1, [shared, lt]);
        for blk in &mut trial.blocks {
            blk.retarget(a, &label);
            blk.retarget(b, &label);
        }
        if validate_function(m, &trial).is_empty() {
            *fus = trial;
            merged += 1;
        }
    }
    merged
}

/// What fusing one pair produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairReport {
    pub fused: String,
    pub trampolines: Vec<String>,
    /// Sides (left, right) whose addresses were replaced by tagged values.
    pub tagged: [bool; 2],
    pub call_sites: usize,
    pub deep_blocks: usize,
}

/// Facts about the module before fusion that decide how addresses of
/// fused functions are handled.
#[derive(Debug, Clone, Default)]
pub struct AddressPolicy {
    pub escaping: EscapeSet,
    pub exported: BTreeSet<String>,
}

impl AddressPolicy {
    pub fn of(m: &Module) -> Self {
        AddressPolicy { escaping: ValueFlow::new(m).escape_set(), exported: m.exported.clone() }
    }

    fn needs_trampoline(&self, name: &str, address_taken: bool, positional: bool) -> bool {
        self.exported.contains(name) || self.escaping.contains(name) || (address_taken && !positional)
    }
}

/// Fuses one pair in place.
pub fn fuse_pair(m: &mut Module, p: &FusionPair, policy: &AddressPolicy, deep: bool) -> Result<PairReport, FusionError> {
    let bad = |reason: &str| FusionError::InvalidPair { left: p.left.clone(), right: p.right.clone(), reason: reason.into() };
    let (Some(l), Some(r)) = (m.function(&p.left).cloned(), m.function(&p.right).cloned()) else {
        return Err(bad("function missing"));
    };
    if !pair_allowed(&l, &r) {
        return Err(bad("pair violates the fusion constraints"));
    }
    if compress_params(&l, &r).as_ref() != Some(p) {
        return Err(bad("merged signature does not match the functions"));
    }
    let name = m.fresh_function_name(&format!("{}_{}_fusion", p.left, p.right));
    let mut fus = build_fused(m, p, &name);
    let li = m.function_index(&p.left).unwrap();
    m.functions.insert(li, Function::declaration(&name, fus.params.clone(), fus.ret));
    let sigs = [l.params.iter().map(|q| q.ty).collect(), r.params.iter().map(|q| q.ty).collect()];
    let mut report = PairReport { fused: name.clone(), ..Default::default() };
    report.call_sites += rewrite_calls(&mut fus, p, &name, &sigs);
    for f in &mut m.functions {
        report.call_sites += rewrite_calls(f, p, &name, &sigs);
    }
    if deep {
        report.deep_blocks = deep_fuse(m, &mut fus, &l, &r);
    }
    let taken = m.address_taken().into_iter().map(str::to_string).collect::<BTreeSet<_>>();
    let li = m.function_index(&name).unwrap();
    m.functions[li] = fus;
    for (side, orig) in [(false, &l), (true, &r)] {
        let at = taken.contains(&orig.name);
        let idx = m.function_index(&orig.name).unwrap();
        if policy.needs_trampoline(&orig.name, at, p.positional) {
            m.functions[idx] = trampoline(orig, p, &name, side);
            report.trampolines.push(orig.name.clone());
        } else {
            m.functions.remove(idx);
            if at {
                for f in &mut m.functions {
                    tag_addresses(f, &orig.name, &name, side);
                }
                report.tagged[side as usize] = true;
            }
        }
    }
    Ok(report)
}

/// Inserts the tag check in front of every icall whose callee may carry
/// a tagged address of one of `fused`. Returns the number of guarded sites.
pub fn guard_icalls(m: &mut Module, fused: &BTreeSet<String>) -> usize {
    if fused.is_empty() {
        return 0;
    }
    let vf = ValueFlow::new(m);
    let mut total = 0;
    for f in &mut m.functions {
        let fname = f.name.clone();
        let needs = |i: &Instruction| match &i.op {
            Op::ICall(c, _) => fused.iter().any(|t| vf.may_hold(&fname, c, t)),
            _ => false,
        };
        if !f.blocks.iter().any(|b| b.instructions.iter().any(needs)) {
            continue;
        }
        let mut names = NameGen::for_function(f);
        let mut bi = 0;
        while bi < f.blocks.len() {
            let Some(ii) = f.blocks[bi].instructions.iter().position(needs) else {
                bi += 1;
                continue;
            };
            let b = &mut f.blocks[bi];
            let rest: Vec<Instruction> = b.instructions.split_off(ii + 1);
            let call = b.instructions.pop().unwrap();
            let Op::ICall(callee, args) = call.op else { unreachable!() };
            let base = b.label.clone();
            let (tagged, plain, join) =
                (names.fresh(&format!("{base}.tagged")), names.fresh(&format!("{base}.plain")), names.fresh(&format!("{base}.join")));
            let cell = call.result.as_ref().map(|(d, t)| (names.fresh(&format!("{d}.cell")), d.clone(), *t));
            let k = |names: &mut NameGen, base: &str, v: i64| {
                let r = names.fresh(base);
                (r.clone(), Instruction::with_result(r, Type::I64, Op::Const(Const::Int(v))))
            };
            let (two, c2) = k(&mut names, "tg.bit", tag::FUSED_BIT);
            let (zero, cz) = k(&mut names, "tg.zero", 0);
            let and = names.fresh("tg.and");
            let is = names.fresh("tg.is");
            b.instructions.extend([
                c2,
                cz,
                Instruction::with_result(&and, Type::I64, Op::Bin(BinOp::And, callee.clone(), two)),
                Instruction::with_result(&is, Type::I1, Op::Icmp(IntPred::Ne, and, zero.clone())),
            ]);
            let term = std::mem::replace(&mut b.terminator, Terminator::CondBr(is, tagged.clone(), plain.clone()));
            let mut slots = Vec::new();
            let mut store_to = |names: &mut NameGen, insts: &mut Vec<Instruction>, v: &str| {
                if let Some((cell, _, t)) = &cell {
                    let a = names.fresh(&format!("{cell}.a"));
                    insts.push(Instruction::with_result(&a, Type::Ptr, Op::SlotAddr(cell.clone())));
                    insts.push(Instruction::new(Op::Store(v.to_string(), a)));
                    if slots.is_empty() {
                        slots.push(Slot::new(cell, *t));
                    }
                }
            };
            // tagged path: strip the tag and pass ctrl first
            let mut ti = Vec::new();
            let (mask, cm) = k(&mut names, "tg.mask", !tag::TAG_MASK);
            let (four, c4) = k(&mut names, "tg.cbit", tag::CTRL_BIT);
            let (addr, cbits, ctrl) = (names.fresh("tg.addr"), names.fresh("tg.cb"), names.fresh("tg.ctrl"));
            ti.extend([
                cm,
                c4,
                Instruction::with_result(&addr, Type::I64, Op::Bin(BinOp::And, callee.clone(), mask)),
                Instruction::with_result(&cbits, Type::I64, Op::Bin(BinOp::And, callee.clone(), four)),
                Instruction::with_result(&ctrl, Type::I1, Op::Icmp(IntPred::Ne, cbits, zero)),
            ]);
            let mut targs = vec![ctrl];
            targs.extend(args.iter().cloned());
            let tres = cell.as_ref().map(|(_, d, t)| (names.fresh(&format!("{d}.t")), *t));
            ti.push(Instruction { result: tres.clone(), op: Op::ICall(addr, targs) });
            if let Some((v, _)) = &tres {
                store_to(&mut names, &mut ti, v);
            }
            let mut pi = Vec::new();
            let pres = cell.as_ref().map(|(_, d, t)| (names.fresh(&format!("{d}.p")), *t));
            pi.push(Instruction { result: pres.clone(), op: Op::ICall(callee.clone(), args) });
            if let Some((v, _)) = &pres {
                store_to(&mut names, &mut pi, v);
            }
            let mut ji = Vec::new();
            if let Some((c, d, t)) = &cell {
                let a = names.fresh(&format!("{c}.a"));
                ji.push(Instruction::with_result(&a, Type::Ptr, Op::SlotAddr(c.clone())));
                ji.push(Instruction::with_result(d, *t, Op::Load(a)));
            }
            ji.extend(rest);
            f.slots.extend(slots);
            let new = [
                Block::new(&tagged, ti, Terminator::Br(join.clone())),
                Block::new(&plain, pi, Terminator::Br(join.clone())),
                Block::new(&join, ji, term),
            ];
            f.blocks.splice(bi + 1..bi + 1, new);
            total += 1;
            // continue scanning in the join block
            bi += 3;
        }
    }
    total
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionStats {
    /// Pool functions allowed to take part.
    pub eligible: usize,
    pub fused: usize,
    pub pairs: usize,
    pub params_removed: usize,
    /// Innocuous blocks summed over eligible functions.
    pub innocuous_blocks: usize,
    pub positional_pairs: usize,
    pub trampolines: usize,
    pub tagged_sides: usize,
    pub guarded_icalls: usize,
    pub deep_blocks: usize,
    pub call_sites: usize,
}

impl FusionStats {
    /// Fraction of eligible functions that were fused.
    pub fn fusion_ratio(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.fused as f64 / self.eligible as f64
        }
    }

    /// Mean parameters removed by compression per pair.
    pub fn reduced_params(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.params_removed as f64 / self.pairs as f64
        }
    }

    /// Mean innocuous blocks per eligible function.
    pub fn innocuous_per_function(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.innocuous_blocks as f64 / self.eligible as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub module: Module,
    pub provenance: ProvenanceMap,
    pub stats: FusionStats,
    pub pairs: Vec<FusionPair>,
}

/// Pairs and fuses functions of `pool`.
pub fn run_fusion(m: &Module, pool: &[String], cfg: &FusionConfig, seed: u64) -> Result<FusionOutput, FusionError> {
    let mut out = m.clone();
    let mut prov = ProvenanceMap::identity(m.functions.iter().map(|f| f.name.as_str()));
    let mut stats = FusionStats::default();
    let eligible: BTreeSet<&str> =
        pool.iter().map(String::as_str).filter(|n| m.function(n).is_some_and(fusible)).collect();
    stats.eligible = eligible.len();
    stats.innocuous_blocks = eligible.iter().map(|n| innocuous_blocks(m, m.function(n).unwrap()).len()).sum();
    let pairs = select_pairs(m, pool, seed, cfg.max_params);
    let policy = AddressPolicy::of(m);
    let mut tagged = BTreeSet::new();
    for p in &pairs {
        let rep = fuse_pair(&mut out, p, &policy, cfg.deep)?;
        stats.pairs += 1;
        stats.fused += 2;
        stats.params_removed += p.params_removed();
        stats.positional_pairs += p.positional as usize;
        stats.trampolines += rep.trampolines.len();
        stats.tagged_sides += rep.tagged.iter().filter(|t| **t).count();
        stats.deep_blocks += rep.deep_blocks;
        stats.call_sites += rep.call_sites;
        if rep.tagged.iter().any(|t| *t) {
            tagged.insert(rep.fused.clone());
        }
        prov.functions.remove(&p.left);
        prov.functions.remove(&p.right);
        prov.insert(&rep.fused, [p.left.as_str(), p.right.as_str()], Role::FusFunc);
        for t in &rep.trampolines {
            prov.insert(t, [t.as_str()], Role::Trampoline);
        }
    }
    stats.guarded_icalls = guard_icalls(&mut out, &tagged);
    Ok(FusionOutput { module: out, provenance: prov, stats, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{run, run_checked, Limits, Value};
    use crate::ir::{parse_module, print_module, validate};

    use crate::samples::BAR_FOO;

    fn same(a: &Module, b: &Module, entry: &str, inputs: &[Vec<Value>]) {
        for args in inputs {
            let x = run(a, entry, args, Limits::default()).unwrap();
            let y = run(b, entry, args, Limits::default()).unwrap();
            assert!(x.same_behavior(&y), "{args:?}: {x:?} vs {y:?}\n{}", print_module(b));
        }
    }

    fn ints(xs: &[i64]) -> Vec<Vec<Value>> {
        xs.iter().map(|&x| vec![Value::Int(x)]).collect()
    }

    #[test]
    fn bar_foo_direct_calls() {
        let m = parse_module(BAR_FOO).unwrap();
        let pool = vec!["bar".to_string(), "foo".to_string()];
        let o = run_fusion(&m, &pool, &FusionConfig::default(), 7).unwrap();
        assert!(validate(&o.module).is_empty(), "{}", print_module(&o.module));
        assert_eq!(o.pairs.len(), 1);
        let fus = &o.module.function(&o.stats_name()).unwrap();
        assert_eq!(fus.params.len(), 4);
        assert_eq!(fus.params[0].ty, Type::I1);
        assert!(o.module.function("bar").is_none() && o.module.function("foo").is_none());
        assert_eq!(o.stats.fusion_ratio(), 1.0);
        same(&m, &o.module, "main", &ints(&[0, 1, 70000, -5]));
    }

    impl FusionOutput {
        fn stats_name(&self) -> String {
            self.provenance.functions.iter().find(|(_, o)| o.role == Role::FusFunc).unwrap().0.clone()
        }
    }

    #[test]
    fn caller_callee_pair_is_rejected() {
        let m = parse_module(
            "module m
func @a() -> void { e: call @b() ret }
func @b() -> void { e: ret }",
        )
        .unwrap();
        assert!(select_pairs(&m, &["a".into(), "b".into()], 1, 6).is_empty());
    }

    #[test]
    fn five_functions_make_two_pairs() {
        let src = "module m
func @f1() -> void { e: ret }
func @f2() -> void { e: ret }
func @f3() -> void { e: ret }
func @f4() -> void { e: ret }
func @f5() -> void { e: ret }";
        let m = parse_module(src).unwrap();
        let pool: Vec<String> = (1..=5).map(|i| format!("f{i}")).collect();
        let a = select_pairs(&m, &pool, 3, 6);
        assert_eq!(a.len(), 2);
        assert_eq!(a, select_pairs(&m, &pool, 3, 6));
    }

    const ICALLS: &str = "module m
export @main
func @bar(%a: i32) -> i32 {
e:
  %one = const i32 1
  %r = add i32 %a, %one
  ret %r
}
func @foo(%m: i64) -> i32 {
e:
  %t = trunc i64 %m to i32
  %r = mul i32 %t, %t
  ret %r
}
func @main(%x: i64) -> i64 {
  slot %fp: i64
e:
  %p = slot_addr %fp
  %zero = const i64 0
  %odd = icmp sgt i64 %x, %zero
  condbr %odd, a, b
a:
  %fa = addr_of_func @bar
  store %fa, %p
  br go
b:
  %fb = addr_of_func @foo
  store %fb, %p
  br go
go:
  %f = load i64 %p
  %arg = trunc i64 %x to i32
  %r = icall i32 %f(%arg)
  print %r
  %w = zext i32 %r to i64
  ret %w
}";

    #[test]
    fn tagged_pointers_dispatch_through_guard() {
        let m = parse_module(ICALLS).unwrap();
        let o = run_fusion(&m, &["bar".into(), "foo".into()], &FusionConfig::default(), 1).unwrap();
        assert!(validate(&o.module).is_empty(), "{}", print_module(&o.module));
        assert!(o.stats.tagged_sides >= 1, "{:?}", o.stats);
        assert_eq!(o.stats.guarded_icalls, 1);
        for x in [-3, 0, 4, 9] {
            let a = run(&m, "main", &[Value::Int(x)], Limits::default()).unwrap();
            let (b, violations) = run_checked(&o.module, "main", &[Value::Int(x)], Limits::default()).unwrap();
            assert!(a.same_behavior(&b), "{x}");
            assert!(violations.is_empty(), "{violations:?}");
        }
    }

    #[test]
    fn escaping_functions_get_trampolines() {
        let src = ICALLS.replace("export @main", "export @main\nvisible @bar");
        let m = parse_module(&src).unwrap();
        let o = run_fusion(&m, &["bar".into(), "foo".into()], &FusionConfig::default(), 1).unwrap();
        assert!(validate(&o.module).is_empty());
        assert!(o.module.function("bar").is_some(), "bar survives as a trampoline");
        assert_eq!(o.provenance.get("bar").unwrap().role, Role::Trampoline);
        same(&m, &o.module, "main", &ints(&[-2, 3]));
    }

    const UPDATE_UMV: &str = "module m
export @main
global @current: i64 = 3
func @update(%x: i64) -> i64 {
  slot %delta: i64
  slot %tmp1: i64
  slot %tmp2: i64
e:
  br b3
b3:
  %d = slot_addr %delta
  %k = const i64 2
  store %k, %d
  %g = global_addr @current
  %c = load i64 %g
  %t1 = slot_addr %tmp1
  %t2 = slot_addr %tmp2
  store %c, %t1
  %s = add i64 %c, %k
  store %s, %t2
  br b4
b4:
  %v = load i64 %t2
  %r = add i64 %v, %x
  ret %r
}
func @umv(%y: i64) -> i64 {
  slot %acc: i64
e:
  br b6
b6:
  %a = slot_addr %acc
  %two = const i64 7
  store %two, %a
  br b7
b7:
  %v = load i64 %a
  %r = mul i64 %v, %y
  ret %r
}
func @main(%x: i64) -> i64 {
e:
  %a = call i64 @update(%x)
  %b = call i64 @umv(%x)
  %s = add i64 %a, %b
  print %s
  ret %s
}";

    #[test]
    fn deep_fusion_shares_innocuous_blocks() {
        let m = parse_module(UPDATE_UMV).unwrap();
        let o = run_fusion(&m, &["update".into(), "umv".into()], &FusionConfig::default(), 0).unwrap();
        assert!(validate(&o.module).is_empty(), "{}", print_module(&o.module));
        assert_eq!(o.stats.deep_blocks, 1, "{}", print_module(&o.module));
        let fus = o.module.functions.iter().find(|f| f.name.ends_with("_fusion")).unwrap();
        assert_eq!(fus.blocks.iter().filter(|b| b.shared).count(), 1);
        for x in [-4, 0, 11] {
            let a = run(&m, "main", &[Value::Int(x)], Limits::default()).unwrap();
            let (b, violations) = run_checked(&o.module, "main", &[Value::Int(x)], Limits::default()).unwrap();
            assert!(a.same_behavior(&b));
            assert!(violations.is_empty(), "{violations:?}");
        }
    }
}

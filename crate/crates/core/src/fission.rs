//! Fission: split a function into a remnant and outlined sub-functions.
//!
//! Candidate regions are dominator subtrees. Selection greedily takes the
//! subtree with the highest `effect / cost` (block count over execution
//! cost of its head) and discards every candidate that overlaps it.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::analysis::{DomTree, FunctionAnalyses, DEFAULT_TRIP_COUNT};
use crate::ir::{Block, Const, Function, Instruction, Module, NameGen, Op, Param, Slot, Terminator, Type};
use crate::provenance::{ProvenanceMap, Role};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FissionConfig {
    /// Selections smaller than this are dropped instead of outlined.
    pub min_effect: usize,
    pub max_regions_per_function: Option<usize>,
    pub default_trip_count: u64,
}

impl Default for FissionConfig {
    fn default() -> Self {
        FissionConfig { min_effect: 2, max_regions_per_function: None, default_trip_count: DEFAULT_TRIP_COUNT }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExitTarget {
    Block(String),
    /// The region returns from the original function.
    Return,
}

/// One numbered way out of a region. Several edges that reach the same
/// target share an exit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exit {
    pub sources: Vec<String>,
    pub target: ExitTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub head: String,
    /// Member labels in layout order.
    pub members: Vec<String>,
    pub exits: Vec<Exit>,
    pub live_in_regs: BTreeSet<String>,
    pub used_slots: BTreeSet<String>,
    pub private_slots: BTreeSet<String>,
    pub effect: usize,
    pub cost: f64,
}

impl Region {
    pub fn value(&self) -> f64 {
        self.effect as f64 / self.cost
    }

    pub fn contains(&self, label: &str) -> bool {
        self.members.iter().any(|m| m == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FissionError {
    #[error("invalid region at `{head}` in `@{function}`: {reason}")]
    InvalidRegion { function: String, head: String, reason: String },
}

/// Slot accesses resolved through `slot_addr` registers.
struct SlotUse<'f> {
    /// Register -> slot for every `slot_addr` result.
    addr_of: HashMap<&'f str, &'f str>,
}

impl<'f> SlotUse<'f> {
    fn new(f: &'f Function) -> Self {
        let mut addr_of = HashMap::new();
        for i in f.blocks.iter().flat_map(|b| &b.instructions) {
            if let (Op::SlotAddr(s), Some(r)) = (&i.op, i.def()) {
                addr_of.insert(r, s.as_str());
            }
        }
        SlotUse { addr_of }
    }

    /// Slots whose address is used for anything but a direct load or store.
    fn escaping(&self, f: &'f Function) -> BTreeSet<&'f str> {
        let mut out = BTreeSet::new();
        for b in &f.blocks {
            for i in &b.instructions {
                let allowed: Option<&str> = match &i.op {
                    Op::Load(p) | Op::Store(_, p) => Some(p),
                    _ => None,
                };
                for u in i.op.uses() {
                    if let Some(s) = self.addr_of.get(u) {
                        if Some(u) != allowed || matches!(&i.op, Op::Store(v, _) if v == u) {
                            out.insert(*s);
                        }
                    }
                }
            }
            for u in b.terminator.uses() {
                if let Some(s) = self.addr_of.get(u) {
                    out.insert(*s);
                }
            }
        }
        out
    }
}

fn layout_index(f: &Function) -> HashMap<&str, usize> {
    f.blocks.iter().enumerate().map(|(i, b)| (b.label.as_str(), i)).collect()
}

/// Exits in numbering order: member blocks in layout order, each block's
/// outside successors sorted by label; a `ret` counts at its block.
fn region_exits(f: &Function, members: &HashSet<&str>) -> Vec<Exit> {
    let mut exits: Vec<Exit> = Vec::new();
    let mut add = |target: ExitTarget, src: &str| match exits.iter_mut().find(|e| e.target == target) {
        Some(e) => {
            if !e.sources.iter().any(|s| s == src) {
                e.sources.push(src.to_string());
            }
        }
        None => exits.push(Exit { sources: vec![src.to_string()], target }),
    };
    for b in &f.blocks {
        if !members.contains(b.label.as_str()) {
            continue;
        }
        if matches!(b.terminator, Terminator::Ret(_)) {
            add(ExitTarget::Return, &b.label);
        }
        let mut outs: Vec<&str> = b.successors().into_iter().filter(|s| !members.contains(s)).collect();
        outs.sort();
        for t in outs {
            add(ExitTarget::Block(t.to_string()), &b.label);
        }
    }
    exits
}

/// Builds the region rooted at `head` in `f` and fills in its data-flow sets.
pub fn region_at(f: &Function, dt: &DomTree, head: usize, cost: f64) -> Region {
    let mut idx = dt.subtree(head);
    idx.sort();
    let members: Vec<String> = idx.iter().map(|&i| f.blocks[i].label.clone()).collect();
    let mset: HashSet<&str> = members.iter().map(String::as_str).collect();
    let exits = region_exits(f, &mset);

    let mut defined_in: HashMap<&str, bool> = f.params.iter().map(|p| (p.name.as_str(), false)).collect();
    for b in &f.blocks {
        for i in &b.instructions {
            if let Some(r) = i.def() {
                defined_in.insert(r, mset.contains(b.label.as_str()));
            }
        }
    }
    let su = SlotUse::new(f);
    let mut live_in = BTreeSet::new();
    let mut used_slots = BTreeSet::new();
    let mut inside_access: BTreeSet<&str> = BTreeSet::new();
    let mut outside_load: BTreeSet<&str> = BTreeSet::new();
    let mut outside_access: BTreeSet<&str> = BTreeSet::new();
    for b in &f.blocks {
        let inside = mset.contains(b.label.as_str());
        for i in &b.instructions {
            if let Op::SlotAddr(s) = &i.op {
                if inside {
                    inside_access.insert(s);
                } else {
                    outside_access.insert(s);
                }
            }
            if !inside {
                if let Op::Load(p) = &i.op {
                    if let Some(s) = su.addr_of.get(p.as_str()) {
                        outside_load.insert(*s);
                    }
                }
            }
        }
        if inside {
            let uses = b.instructions.iter().flat_map(|i| i.op.uses()).chain(b.terminator.uses());
            for u in uses {
                if defined_in.get(u) == Some(&false) {
                    live_in.insert(u.to_string());
                    if let Some(s) = su.addr_of.get(u) {
                        inside_access.insert(s);
                    }
                }
            }
        }
    }
    used_slots.extend(inside_access.iter().map(|s| s.to_string()));
    let exposed = upward_exposed(f, &mset, &f.blocks[head].label, &su);
    let escaping = su.escaping(f);
    let private_slots = inside_access
        .iter()
        .filter(|s| {
            !escaping.contains(*s)
                && !exposed.contains(*s)
                && !outside_load.contains(*s)
                && !live_in.iter().any(|r| su.addr_of.get(r.as_str()) == Some(s))
        })
        .map(|s| s.to_string())
        .collect();
    let _ = outside_access;
    Region {
        head: f.blocks[head].label.clone(),
        effect: members.len(),
        members,
        exits,
        live_in_regs: live_in,
        used_slots,
        private_slots,
        cost,
    }
}

/// Slots that may be read inside the region before any store to them on
/// some path from the head.
fn upward_exposed<'f>(f: &'f Function, mset: &HashSet<&str>, head: &str, su: &SlotUse<'f>) -> BTreeSet<&'f str> {
    let idx = layout_index(f);
    let members: Vec<usize> = f.blocks.iter().enumerate().filter(|(_, b)| mset.contains(b.label.as_str())).map(|(i, _)| i).collect();
    let all: BTreeSet<&str> = f.slots.iter().map(|s| s.name.as_str()).collect();
    // must-stored sets at block entry, starting from "everything" except at the head
    let mut inn: HashMap<usize, BTreeSet<&str>> = members.iter().map(|&b| (b, all.clone())).collect();
    inn.insert(idx[head], BTreeSet::new());
    let stores_of = |b: usize| -> BTreeSet<&str> {
        f.blocks[b]
            .instructions
            .iter()
            .filter_map(|i| match &i.op {
                Op::Store(_, p) => su.addr_of.get(p.as_str()).copied(),
                _ => None,
            })
            .collect()
    };
    let mut preds: HashMap<usize, Vec<usize>> = HashMap::new();
    for &b in &members {
        for s in f.blocks[b].successors() {
            if mset.contains(s) {
                preds.entry(idx[s]).or_default().push(b);
            }
        }
    }
    let mut changed = true;
    while changed {
        changed = false;
        for &b in &members {
            if f.blocks[b].label == head {
                continue;
            }
            let mut acc: Option<BTreeSet<&str>> = None;
            for p in preds.get(&b).into_iter().flatten() {
                let mut out = inn[p].clone();
                out.extend(stores_of(*p));
                acc = Some(match acc {
                    None => out,
                    Some(a) => a.intersection(&out).copied().collect(),
                });
            }
            let new = acc.unwrap_or_default();
            if new != inn[&b] {
                inn.insert(b, new);
                changed = true;
            }
        }
    }
    let mut exposed = BTreeSet::new();
    for &b in &members {
        let mut stored = inn[&b].clone();
        for i in &f.blocks[b].instructions {
            match &i.op {
                Op::Load(p) => {
                    if let Some(s) = su.addr_of.get(p.as_str()) {
                        if !stored.contains(s) {
                            exposed.insert(*s);
                        }
                    }
                }
                Op::Store(_, p) => {
                    if let Some(s) = su.addr_of.get(p.as_str()) {
                        stored.insert(*s);
                    }
                }
                _ => {}
            }
        }
    }
    exposed
}

/// Why a subtree may not be outlined, if it may not.
fn ineligible(f: &Function, r: &Region) -> Option<&'static str> {
    let mset: HashSet<&str> = r.members.iter().map(String::as_str).collect();
    let blocks = f.blocks.iter().filter(|b| mset.contains(b.label.as_str()));
    for b in blocks {
        for i in &b.instructions {
            match &i.op {
                Op::SetJmp(_) => return Some("contains a setjmp call-site"),
                Op::MayThrow(_, h) if !mset.contains(h.as_str()) => return Some("may_throw handler outside the region"),
                _ => {}
            }
        }
    }
    if r.exits.is_empty() {
        return Some("region never leaves");
    }
    // values defined inside and used outside can only reach unreachable code
    let mut inside_defs = HashSet::new();
    for b in f.blocks.iter().filter(|b| mset.contains(b.label.as_str())) {
        inside_defs.extend(b.instructions.iter().filter_map(|i| i.def()));
    }
    for b in f.blocks.iter().filter(|b| !mset.contains(b.label.as_str())) {
        let uses = b.instructions.iter().flat_map(|i| i.op.uses()).chain(b.terminator.uses());
        for u in uses {
            if inside_defs.contains(u) {
                return Some("value defined inside is used outside");
            }
        }
    }
    None
}

/// Execution cost of a subtree: head frequency, times the trip count of the
/// innermost loop containing the head.
fn cost_of(an: &FunctionAnalyses, head: usize) -> f64 {
    let f = an.freq.get(head);
    match an.loops.innermost[head] {
        Some(l) => f * an.loops.loops[l].trip_count as f64,
        None => f,
    }
}

/// Region selection. Regions are returned in selection order.
pub fn identify_regions(f: &Function, an: &FunctionAnalyses, cfg: &FissionConfig) -> Vec<Region> {
    if f.external || f.blocks.len() < 2 {
        return Vec::new();
    }
    let mut pool: Vec<Region> = (1..f.blocks.len())
        .filter(|&h| an.cfg.reachable(h))
        .map(|h| region_at(f, &an.dom, h, cost_of(an, h)))
        .filter(|r| ineligible(f, r).is_none())
        .collect();
    let mut chosen = Vec::new();
    while !pool.is_empty() {
        if cfg.max_regions_per_function.is_some_and(|k| chosen.len() >= k) {
            break;
        }
        let mut best = 0;
        for i in 1..pool.len() {
            if pool[i].value() > pool[best].value() {
                best = i;
            }
        }
        let pick = pool.remove(best);
        if pick.effect < cfg.min_effect {
            continue;
        }
        pool.retain(|t| !t.members.iter().any(|m| pick.contains(m)));
        chosen.push(pick);
    }
    chosen
}

/// Labels inserted by outlining, for accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Inserted {
    pub rem_blocks: Vec<String>,
    pub sep_blocks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outlined {
    pub sep_func: Function,
    pub rem_func: Function,
    pub dispatch: String,
    pub inserted: Inserted,
}

fn code_return(names: &mut NameGen, k: usize, code: usize) -> (Vec<Instruction>, Terminator) {
    if k >= 2 {
        let c = names.fresh("code");
        (vec![Instruction::with_result(&c, Type::I32, Op::Const(Const::Int(code as i64)))], Terminator::Ret(Some(c)))
    } else {
        (Vec::new(), Terminator::Ret(None))
    }
}

fn rename_uses(b: &mut Block, map: &HashMap<String, String>) {
    if map.is_empty() {
        return;
    }
    for i in &mut b.instructions {
        for u in i.op.uses_mut() {
            if let Some(n) = map.get(u.as_str()) {
                *u = n.clone();
            }
        }
    }
    for u in b.terminator.uses_mut() {
        if let Some(n) = map.get(u.as_str()) {
            *u = n.clone();
        }
    }
}

/// Moves region `r` of `f` into a new function `name`.
pub fn outline_region(f: &Function, r: &Region, name: &str) -> Result<Outlined, FissionError> {
    let invalid = |reason: &str| FissionError::InvalidRegion {
        function: f.name.clone(),
        head: r.head.clone(),
        reason: reason.to_string(),
    };
    if r.head == f.blocks[0].label {
        return Err(invalid("the entry block cannot be outlined"));
    }
    if let Some(why) = ineligible(f, r) {
        return Err(invalid(why));
    }
    let mset: HashSet<&str> = r.members.iter().map(String::as_str).collect();
    let su = SlotUse::new(f);
    let types = f.register_types();
    let mut names = NameGen::for_function(f);
    let mut rem = f.clone();
    let k = r.exits.len();

    // live-in registers: slot addresses travel as the slot itself, every
    // other value is spilled to a fresh slot
    let mut spills: Vec<(String, String, Type)> = Vec::new();
    let mut slot_regs: Vec<(String, String)> = Vec::new();
    for reg in &r.live_in_regs {
        match su.addr_of.get(reg.as_str()) {
            Some(s) => slot_regs.push((reg.clone(), s.to_string())),
            None => {
                let ty = types[reg.as_str()];
                let slot = names.fresh(&format!("{reg}.spill"));
                rem.slots.push(Slot::new(&slot, ty));
                spills.push((reg.clone(), slot, ty));
            }
        }
    }
    let has_return = r.exits.iter().any(|e| e.target == ExitTarget::Return);
    let ret_slot = if has_return && f.ret != Type::Void {
        let s = names.fresh("retval");
        rem.slots.push(Slot::new(&s, f.ret));
        Some(s)
    } else {
        None
    };

    // pointer parameters, in slot order
    let passed: Vec<&Slot> = rem
        .slots
        .iter()
        .filter(|s| {
            (r.used_slots.contains(&s.name) && !r.private_slots.contains(&s.name))
                || spills.iter().any(|x| x.1 == s.name)
                || ret_slot.as_ref() == Some(&s.name)
        })
        .collect();
    let param_of: BTreeMap<String, String> =
        passed.iter().map(|s| (s.name.clone(), names.fresh(&format!("{}.p", s.name)))).collect();
    let params: Vec<Param> = passed.iter().map(|s| Param::new(&param_of[&s.name], Type::Ptr)).collect();

    // sepFunc body: head first, then the other members in layout order
    let mut body: Vec<Block> = Vec::new();
    body.extend(f.blocks.iter().filter(|b| b.label == r.head).cloned());
    body.extend(f.blocks.iter().filter(|b| b.label != r.head && mset.contains(b.label.as_str())).cloned());

    let mut rename: HashMap<String, String> = HashMap::new();
    for b in &mut body {
        b.instructions.retain(|i| match (&i.op, i.def()) {
            (Op::SlotAddr(s), Some(d)) if param_of.contains_key(s) => {
                rename.insert(d.to_string(), param_of[s].clone());
                false
            }
            _ => true,
        });
    }
    let mut entry_code: Vec<Instruction> = Vec::new();
    for (reg, slot) in &slot_regs {
        match param_of.get(slot) {
            Some(p) => {
                rename.insert(reg.clone(), p.clone());
            }
            None => entry_code.push(Instruction::with_result(reg, Type::Ptr, Op::SlotAddr(slot.clone()))),
        }
    }
    for (reg, slot, ty) in &spills {
        entry_code.push(Instruction::with_result(reg, *ty, Op::Load(param_of[slot].clone())));
    }
    for b in &mut body {
        rename_uses(b, &rename);
    }

    let exit_of = |t: &ExitTarget| r.exits.iter().position(|e| &e.target == t).unwrap();
    let mut exit_blocks: BTreeMap<usize, String> = BTreeMap::new();
    let mut extra: Vec<Block> = Vec::new();
    let mut inserted = Inserted::default();
    for b in &mut body {
        if let Terminator::Ret(v) = &b.terminator {
            if let (Some(v), Some(slot)) = (v.clone(), &ret_slot) {
                b.instructions.push(Instruction::new(Op::Store(v, param_of[slot].clone())));
            }
            let (code, term) = code_return(&mut names, k, exit_of(&ExitTarget::Return));
            b.instructions.extend(code);
            b.terminator = term;
            continue;
        }
        if let Terminator::Br(t) = &b.terminator {
            if !mset.contains(t.as_str()) {
                let (code, term) = code_return(&mut names, k, exit_of(&ExitTarget::Block(t.clone())));
                b.instructions.extend(code);
                b.terminator = term;
            }
            continue;
        }
        for t in b.terminator.targets_mut() {
            if mset.contains(t.as_str()) {
                continue;
            }
            let e = exit_of(&ExitTarget::Block(t.clone()));
            let label = match exit_blocks.get(&e) {
                Some(l) => l.clone(),
                None => {
                    let l = names.fresh(&format!("exit{e}"));
                    let (code, term) = code_return(&mut names, k, e);
                    extra.push(Block::new(&l, code, term));
                    inserted.sep_blocks.push(l.clone());
                    exit_blocks.insert(e, l.clone());
                    l
                }
            };
            *t = label;
        }
    }
    let head_has_preds = body.iter().any(|b| b.successors().contains(&r.head.as_str()));
    if head_has_preds {
        let l = names.fresh("entry");
        body.insert(0, Block::new(&l, entry_code, Terminator::Br(r.head.clone())));
        inserted.sep_blocks.push(l);
    } else {
        let head = &mut body[0];
        entry_code.append(&mut head.instructions);
        head.instructions = entry_code;
    }
    body.extend(extra);

    let mut sep = Function::new(name, params, if k >= 2 { Type::I32 } else { Type::Void });
    sep.slots = f.slots.iter().filter(|s| r.private_slots.contains(&s.name)).cloned().collect();
    sep.blocks = body;
    sep.exits = if k >= 2 { Some(k as u32) } else { None };

    // remFunc: dispatch block at the head's position
    let disp = names.fresh(&format!("{}.disp", r.head));
    let mut code: Vec<Instruction> = Vec::new();
    let mut addr: BTreeMap<String, String> = BTreeMap::new();
    for s in &passed {
        let a = names.fresh(&format!("{}.a", s.name));
        code.push(Instruction::with_result(&a, Type::Ptr, Op::SlotAddr(s.name.clone())));
        addr.insert(s.name.clone(), a);
    }
    for (reg, slot, _) in &spills {
        code.push(Instruction::new(Op::Store(reg.clone(), addr[slot].clone())));
    }
    let args: Vec<String> = passed.iter().map(|s| addr[&s.name].clone()).collect();
    let target_label = |t: &ExitTarget, names: &mut NameGen, extra: &mut Vec<Block>| -> String {
        match t {
            ExitTarget::Block(l) => l.clone(),
            ExitTarget::Return => {
                let l = names.fresh(&format!("{}.ret", r.head));
                extra.push(return_block(&l, ret_slot.as_deref(), f.ret, names));
                l
            }
        }
    };
    let mut rem_extra: Vec<Block> = Vec::new();
    let term = if k >= 2 {
        let c = names.fresh("exit.code");
        code.push(Instruction::with_result(&c, Type::I32, Op::Call(name.to_string(), args)));
        let cases: Vec<(i64, String)> = r
            .exits
            .iter()
            .enumerate()
            .map(|(i, e)| (i as i64, target_label(&e.target, &mut names, &mut rem_extra)))
            .collect();
        let bad = names.fresh(&format!("{}.bad", r.head));
        rem_extra.push(Block::new(&bad, vec![], Terminator::Unreachable));
        Terminator::Switch { value: c, cases, default: bad }
    } else {
        code.push(Instruction::new(Op::Call(name.to_string(), args)));
        match &r.exits[0].target {
            ExitTarget::Block(l) => Terminator::Br(l.clone()),
            ExitTarget::Return => {
                let b = return_block("", ret_slot.as_deref(), f.ret, &mut names);
                code.extend(b.instructions);
                b.terminator
            }
        }
    };
    inserted.rem_blocks.push(disp.clone());
    inserted.rem_blocks.extend(rem_extra.iter().map(|b| b.label.clone()));
    let pos = rem.blocks.iter().position(|b| b.label == r.head).unwrap();
    let mut new_blocks: Vec<Block> = Vec::new();
    for (i, b) in rem.blocks.drain(..).enumerate() {
        if i == pos {
            new_blocks.push(Block::new(&disp, std::mem::take(&mut code), term.clone()));
            new_blocks.append(&mut rem_extra);
        }
        if !mset.contains(b.label.as_str()) {
            new_blocks.push(b);
        }
    }
    for b in &mut new_blocks {
        b.retarget(&r.head, &disp);
    }
    rem.blocks = new_blocks;
    // private slots stay behind only while something outside still names them
    let still_used: BTreeSet<String> = rem
        .blocks
        .iter()
        .flat_map(|b| &b.instructions)
        .filter_map(|i| match &i.op {
            Op::SlotAddr(s) => Some(s.clone()),
            _ => None,
        })
        .collect();
    rem.slots.retain(|s| !r.private_slots.contains(&s.name) || still_used.contains(&s.name));
    Ok(Outlined { sep_func: sep, rem_func: rem, dispatch: disp, inserted })
}

fn return_block(label: &str, slot: Option<&str>, ty: Type, names: &mut NameGen) -> Block {
    match slot {
        Some(s) => {
            let a = names.fresh("ret.a");
            let v = names.fresh("ret.v");
            Block::new(
                label,
                vec![
                    Instruction::with_result(&a, Type::Ptr, Op::SlotAddr(s.to_string())),
                    Instruction::with_result(&v, ty, Op::Load(a)),
                ],
                Terminator::Ret(Some(v)),
            )
        }
        None => Block::new(label, vec![], Terminator::Ret(None)),
    }
}

/// Internal counters: which outlining shapes were produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FissionCounters {
    pub single_exit: usize,
    pub multi_exit: usize,
    pub return_exits: usize,
    pub private_slots: usize,
    pub spilled_regs: usize,
    pub fresh_entries: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FissionStats {
    pub ori_funcs: usize,
    pub processed_funcs: usize,
    pub sep_funcs: usize,
    /// Blocks across all emitted sepFuncs.
    pub sep_blocks: usize,
    /// Original blocks moved out of their function.
    pub blocks_moved: usize,
    /// Sum over processed functions of moved / original blocks.
    pub removed_fraction_sum: f64,
    pub counters: FissionCounters,
}

impl FissionStats {
    /// sepFuncs per original function.
    pub fn fission_ratio(&self) -> f64 {
        if self.ori_funcs == 0 {
            0.0
        } else {
            self.sep_funcs as f64 / self.ori_funcs as f64
        }
    }

    /// Mean number of blocks per sepFunc.
    pub fn mean_bb(&self) -> f64 {
        if self.sep_funcs == 0 {
            0.0
        } else {
            self.sep_blocks as f64 / self.sep_funcs as f64
        }
    }

    /// Mean fraction of blocks removed from each processed function.
    pub fn removal_rate(&self) -> f64 {
        if self.processed_funcs == 0 {
            0.0
        } else {
            self.removed_fraction_sum / self.processed_funcs as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FissionOutput {
    pub module: Module,
    pub provenance: ProvenanceMap,
    pub stats: FissionStats,
    pub sep_funcs: Vec<String>,
}

/// Fission of one function: the remnant followed by its sepFuncs, the
/// latter named and ordered by the layout position of their heads.
pub fn fission_function(
    m: &Module,
    f: &Function,
    cfg: &FissionConfig,
    taken: &mut BTreeSet<String>,
    counters: &mut FissionCounters,
) -> Result<(Function, Vec<Function>), FissionError> {
    let an = FunctionAnalyses::new(f, cfg.default_trip_count);
    let regions = identify_regions(f, &an, cfg);
    if regions.is_empty() {
        return Ok((f.clone(), Vec::new()));
    }
    let layout = layout_index(f);
    let mut by_layout: Vec<&Region> = regions.iter().collect();
    by_layout.sort_by_key(|r| layout[r.head.as_str()]);
    let mut name_of: HashMap<String, String> = HashMap::new();
    for (i, r) in by_layout.iter().enumerate() {
        let base = format!("{}_sep{}", f.name, i + 1);
        let mut n = base.clone();
        let mut j = 1;
        while taken.contains(&n) || m.function(&n).is_some() {
            n = format!("{base}.{j}");
            j += 1;
        }
        taken.insert(n.clone());
        name_of.insert(r.head.clone(), n);
    }
    let mut cur = f.clone();
    let mut seps: Vec<(usize, Function)> = Vec::new();
    for r in &regions {
        let dt = crate::analysis::dominator_tree(&cur);
        let head = cur.block_index(&r.head).expect("region head vanished");
        let fresh = region_at(&cur, &dt, head, r.cost);
        let out = outline_region(&cur, &fresh, &name_of[&r.head])?;
        if fresh.exits.len() >= 2 {
            counters.multi_exit += 1;
        } else {
            counters.single_exit += 1;
        }
        if fresh.exits.iter().any(|e| e.target == ExitTarget::Return) {
            counters.return_exits += 1;
        }
        counters.private_slots += fresh.private_slots.len();
        counters.spilled_regs += fresh.live_in_regs.len();
        if out.inserted.sep_blocks.iter().any(|l| l.starts_with("entry")) {
            counters.fresh_entries += 1;
        }
        cur = out.rem_func;
        seps.push((layout[r.head.as_str()], out.sep_func));
    }
    seps.sort_by_key(|s| s.0);
    Ok((cur, seps.into_iter().map(|s| s.1).collect()))
}

/// Runs fission over every defined function of `m`.
pub fn run_fission(m: &Module, cfg: &FissionConfig) -> Result<FissionOutput, FissionError> {
    let mut out = m.clone();
    out.functions.clear();
    let mut prov = ProvenanceMap::default();
    let mut stats = FissionStats::default();
    let mut sep_names = Vec::new();
    let mut taken: BTreeSet<String> = m.functions.iter().map(|f| f.name.clone()).collect();
    for f in &m.functions {
        if f.external {
            prov.insert(&f.name, [f.name.as_str()], Role::Unchanged);
            out.functions.push(f.clone());
            continue;
        }
        stats.ori_funcs += 1;
        let (rem, seps) = fission_function(m, f, cfg, &mut taken, &mut stats.counters)?;
        if seps.is_empty() {
            prov.insert(&f.name, [f.name.as_str()], Role::Unchanged);
            out.functions.push(rem);
            continue;
        }
        let moved: usize = f.blocks.len() - f.blocks.iter().filter(|b| rem.block(&b.label).is_some()).count();
        stats.processed_funcs += 1;
        stats.blocks_moved += moved;
        stats.removed_fraction_sum += moved as f64 / f.blocks.len() as f64;
        prov.insert(&f.name, [f.name.as_str()], Role::RemFunc);
        out.functions.push(rem);
        for s in seps {
            stats.sep_funcs += 1;
            stats.sep_blocks += s.blocks.len();
            prov.insert(&s.name, [f.name.as_str()], Role::SepFunc);
            sep_names.push(s.name.clone());
            out.functions.push(s);
        }
    }
    Ok(FissionOutput { module: out, provenance: prov, stats, sep_funcs: sep_names })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{run, Limits, Value};
    use crate::ir::{parse_module, validate};
    use crate::samples;

    fn regions(src: &str) -> Vec<Vec<String>> {
        let m = parse_module(src).unwrap();
        let f = &m.functions[0];
        let an = FunctionAnalyses::new(f, DEFAULT_TRIP_COUNT);
        identify_regions(f, &an, &FissionConfig::default()).into_iter().map(|r| r.members).collect()
    }

    #[test]
    fn single_block_function_has_no_regions() {
        assert!(regions("module m func @f() -> void { e: ret }").is_empty());
    }

    #[test]
    fn cal_file_decomposition() {
        let m = samples::cal_file();
        let f = m.function("cal_file").unwrap();
        let an = FunctionAnalyses::new(f, DEFAULT_TRIP_COUNT);
        let rs = identify_regions(f, &an, &FissionConfig::default());
        let sets: Vec<Vec<&str>> = rs.iter().map(|r| r.members.iter().map(String::as_str).collect()).collect();
        assert_eq!(sets, vec![vec!["bb5", "bb6", "bb7", "bb8"], vec!["bb2", "bb3"]]);
        let r2 = &rs[1];
        assert_eq!(r2.exits.len(), 2);
        assert_eq!(r2.exits[0].target, ExitTarget::Block("bb5".into()));
        assert_eq!(r2.exits[1].target, ExitTarget::Block("bb9".into()));
        assert!(rs[0].private_slots.contains("n"));
    }

    #[test]
    fn cold_subtree_beats_hot_loop() {
        // hot loop body {l1, l2} at cost 10 and a cold 3-block arm at cost 0.5
        let src = "module m
func @f(%c: i1) -> void {
e:
  condbr %c, h, c1
h:
  condbr %c, l1, x
l1:
  br l2
l2:
  br h
c1:
  condbr %c, c2, c3
c2:
  br x
c3:
  br x
x:
  ret
}";
        let r = regions(src);
        assert_eq!(r[0], vec!["c1", "c2", "c3"]);
    }

    #[test]
    fn single_exit_region_becomes_void() {
        let src = "module m
func @f(%x: i64) -> i64 {
  slot %s: i64
e:
  %a = slot_addr %s
  store %x, %a
  %c = const i1 1
  condbr %c, r1, out
r1:
  %v = load i64 %a
  %w = add i64 %v, %x
  store %w, %a
  br r2
r2:
  print %w
  br out
out:
  %z = load i64 %a
  ret %z
}";
        let m = parse_module(src).unwrap();
        let o = run_fission(&m, &FissionConfig::default()).unwrap();
        assert!(validate(&o.module).is_empty(), "{}", crate::ir::print_module(&o.module));
        let sep = o.module.function("f_sep1").unwrap();
        assert_eq!(sep.ret, Type::Void);
        assert_eq!(sep.params.len(), 2);
        for x in [0, 5, -3] {
            let a = run(&m, "f", &[Value::Int(x)], Limits::default()).unwrap();
            let b = run(&o.module, "f", &[Value::Int(x)], Limits::default()).unwrap();
            assert!(a.same_behavior(&b));
        }
    }

    #[test]
    fn cal_file_module_stats_and_semantics() {
        let m = samples::cal_file();
        let o = run_fission(&m, &FissionConfig::default()).unwrap();
        assert!(validate(&o.module).is_empty(), "{}", crate::ir::print_module(&o.module));
        assert_eq!(o.sep_funcs, vec!["cal_file_sep1", "cal_file_sep2"]);
        let mut only = m.clone();
        only.functions.retain(|f| f.name == "cal_file");
        only.exported.clear();
        let single = run_fission(&only, &FissionConfig::default()).unwrap();
        assert_eq!(single.stats.fission_ratio(), 2.0);
        let rem = o.module.function("cal_file").unwrap();
        let kept: Vec<&str> = rem.blocks.iter().map(|b| b.label.as_str()).filter(|l| l.len() == 3).collect();
        assert_eq!(kept, vec!["bb1", "bb4", "bb9"]);
        let sep1 = o.module.function("cal_file_sep1").unwrap();
        assert_eq!(sep1.exits, Some(2));
        assert!(sep1.block("bb2").is_some() && sep1.block("bb3").is_some());
        let sep2 = o.module.function("cal_file_sep2").unwrap();
        assert!(sep2.slot("n").is_some(), "n moves into sepFunc-2");
        for args in samples::cal_file_inputs() {
            let a = run(&m, "main", &args, Limits::default()).unwrap();
            let b = run(&o.module, "main", &args, Limits::default()).unwrap();
            assert!(a.same_behavior(&b), "{a:?} vs {b:?}");
        }
    }
}

use std::collections::{BTreeSet, HashMap};

use crate::ir::{Module, Op, Terminator};

/// Abstract value: a function address, the address of a slot or global, or
/// something produced outside the module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Atom {
    Unknown,
    Func(usize),
    Slot(usize, usize),
    Global(usize),
}

type Set = BTreeSet<Atom>;

/// Flow-insensitive, whole-module points-to facts for function addresses
/// and pointers.
#[derive(Debug, Clone)]
pub struct ValueFlow {
    names: Vec<String>,
    regs: Vec<HashMap<String, Set>>,
    escaping: BTreeSet<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EscapeSet {
    pub escaping: BTreeSet<String>,
}

impl EscapeSet {
    pub fn contains(&self, f: &str) -> bool {
        self.escaping.contains(f)
    }
}

fn add(dst: &mut Set, src: &Set) -> bool {
    let before = dst.len();
    dst.extend(src.iter().copied());
    dst.len() != before
}

struct Solver<'m> {
    m: &'m Module,
    fidx: HashMap<&'m str, usize>,
    gidx: HashMap<&'m str, usize>,
    regs: Vec<HashMap<String, Set>>,
    params: Vec<Vec<Set>>,
    rets: Vec<Set>,
    mem: HashMap<Atom, Set>,
    escaped_locs: BTreeSet<Atom>,
    escaping: BTreeSet<usize>,
    changed: bool,
}

impl<'m> Solver<'m> {
    fn escape(&mut self, s: &Set) {
        for &a in s {
            match a {
                Atom::Func(f) => {
                    if self.escaping.insert(f) {
                        self.changed = true;
                    }
                }
                Atom::Unknown => {}
                loc => {
                    if self.escaped_locs.insert(loc) {
                        self.changed = true;
                        let inner = self.mem.get(&loc).cloned().unwrap_or_default();
                        self.escape(&inner);
                    }
                }
            }
        }
    }

    fn reg(&self, f: usize, r: &str) -> Set {
        self.regs[f].get(r).cloned().unwrap_or_default()
    }

    fn set_reg(&mut self, f: usize, r: &str, s: &Set) {
        let slot = self.regs[f].entry(r.to_string()).or_default();
        if add(slot, s) {
            self.changed = true;
        }
    }

    fn flow_into_call(&mut self, callee: usize, args: &[Set]) -> Set {
        let g = &self.m.functions[callee];
        if g.external {
            for a in args {
                self.escape(a);
            }
            return Set::from([Atom::Unknown]);
        }
        for (i, a) in args.iter().enumerate().take(g.params.len()) {
            if add(&mut self.params[callee][i], a) {
                self.changed = true;
            }
        }
        self.rets[callee].clone()
    }

    fn step(&mut self) {
        let m = self.m;
        for (fi, f) in m.functions.iter().enumerate() {
            if f.external {
                continue;
            }
            let open = m.exported.contains(&f.name) || self.escaping.contains(&fi);
            for (pi, p) in f.params.iter().enumerate() {
                if open && self.params[fi][pi].insert(Atom::Unknown) {
                    self.changed = true;
                }
                let s = self.params[fi][pi].clone();
                self.set_reg(fi, &p.name, &s);
            }
            for b in &f.blocks {
                for inst in &b.instructions {
                    let u: Vec<Set> = inst.op.uses().iter().map(|r| self.reg(fi, r)).collect();
                    let result: Set = match &inst.op {
                        Op::Const(_) | Op::Icmp(..) | Op::Fcmp(..) | Op::Print(_) | Op::MayThrow(..) => Set::new(),
                        Op::Bin(..) | Op::Cast(..) => u.iter().flatten().copied().collect(),
                        Op::SlotAddr(s) => match f.slots.iter().position(|x| &x.name == s) {
                            Some(si) => Set::from([Atom::Slot(fi, si)]),
                            None => Set::new(),
                        },
                        Op::GlobalAddr(g) => match self.gidx.get(g.as_str()) {
                            Some(&gi) => Set::from([Atom::Global(gi)]),
                            None => Set::new(),
                        },
                        Op::AddrOfFunc(g) => match self.fidx.get(g.as_str()) {
                            Some(&gi) => Set::from([Atom::Func(gi)]),
                            None => Set::new(),
                        },
                        Op::Load(_) => {
                            let mut out = Set::new();
                            for &loc in &u[0] {
                                if loc == Atom::Unknown || (self.escaped_locs.contains(&loc) && !matches!(loc, Atom::Global(_))) {
                                    out.insert(Atom::Unknown);
                                }
                                if let Some(c) = self.mem.get(&loc) {
                                    out.extend(c.iter().copied());
                                }
                            }
                            out
                        }
                        Op::Store(..) => {
                            for &loc in &u[1] {
                                if matches!(loc, Atom::Func(_)) {
                                    continue;
                                }
                                let c = self.mem.entry(loc).or_default();
                                if add(c, &u[0]) {
                                    self.changed = true;
                                }
                                if loc == Atom::Unknown || matches!(loc, Atom::Global(_)) || self.escaped_locs.contains(&loc) {
                                    self.escape(&u[0]);
                                }
                            }
                            Set::new()
                        }
                        Op::Call(g, _) => match self.fidx.get(g.as_str()) {
                            Some(&gi) => self.flow_into_call(gi, &u),
                            None => Set::new(),
                        },
                        Op::ICall(..) => {
                            let (callee, args) = u.split_first().unwrap();
                            let mut out = Set::new();
                            for &t in callee {
                                match t {
                                    Atom::Func(gi) => out.extend(self.flow_into_call(gi, args)),
                                    Atom::Unknown => {
                                        for a in args {
                                            self.escape(a);
                                        }
                                        out.insert(Atom::Unknown);
                                    }
                                    _ => {}
                                }
                            }
                            out
                        }
                        Op::SetJmp(_) | Op::LongJmp(..) => Set::new(),
                    };
                    if let Some(r) = inst.def() {
                        self.set_reg(fi, r, &result);
                    }
                }
                if let Terminator::Ret(Some(v)) = &b.terminator {
                    let s = self.reg(fi, v);
                    if add(&mut self.rets[fi], &s) {
                        self.changed = true;
                    }
                    if m.exported.contains(&f.name) {
                        self.escape(&s);
                    }
                }
            }
        }
    }
}

impl ValueFlow {
    pub fn new(m: &Module) -> ValueFlow {
        let fidx: HashMap<&str, usize> = m.functions.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
        let mut s = Solver {
            m,
            gidx: m.globals.iter().enumerate().map(|(i, g)| (g.name.as_str(), i)).collect(),
            regs: vec![HashMap::new(); m.functions.len()],
            params: m.functions.iter().map(|f| vec![Set::new(); f.params.len()]).collect(),
            rets: vec![Set::new(); m.functions.len()],
            mem: HashMap::new(),
            escaped_locs: BTreeSet::from([Atom::Unknown]),
            escaping: m.visible.iter().filter_map(|v| fidx.get(v.as_str()).copied()).collect(),
            fidx,
            changed: true,
        };
        while s.changed {
            s.changed = false;
            s.step();
        }
        ValueFlow {
            names: m.functions.iter().map(|f| f.name.clone()).collect(),
            regs: s.regs,
            escaping: s.escaping,
        }
    }

    pub fn escape_set(&self) -> EscapeSet {
        EscapeSet { escaping: self.escaping.iter().map(|&i| self.names[i].clone()).collect() }
    }

    /// Atoms register `reg` of function `func` may hold.
    pub fn values(&self, func: &str, reg: &str) -> Set {
        self.names
            .iter()
            .position(|n| n == func)
            .and_then(|fi| self.regs[fi].get(reg).cloned())
            .unwrap_or_default()
    }

    /// Whether register `reg` of `func` may carry the address of `target`.
    pub fn may_hold(&self, func: &str, reg: &str, target: &str) -> bool {
        let Some(ti) = self.names.iter().position(|n| n == target) else {
            return false;
        };
        let v = self.values(func, reg);
        v.contains(&Atom::Func(ti)) || (v.contains(&Atom::Unknown) && self.escaping.contains(&ti))
    }
}

/// Functions whose address may leave the module.
pub fn escape_set(m: &Module) -> EscapeSet {
    ValueFlow::new(m).escape_set()
}

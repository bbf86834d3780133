//! Deterministic random programs for differential testing.
//!
//! Programs are structured (if/else, counted loops, early returns, loop
//! breaks) so they always validate; loops have constant trip counts and
//! the call graph is acyclic, so every run terminates. Branch conditions
//! test bits of input-derived values to keep both directions reachable.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::compress::type_compatible;
use crate::interp::{parse_value, Value};
use crate::ir::{
    parse_module, BinOp, Block, CastOp, Const, Function, Global, Instruction, IntPred, Module, Op, Param, ParseError, Slot,
    Terminator, Type,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Features {
    pub branches: bool,
    pub loops: bool,
    pub icalls: bool,
    pub setjmp: bool,
    pub may_throw: bool,
    pub globals: bool,
    pub variadic: bool,
}

impl Features {
    pub fn all() -> Self {
        Features { branches: true, loops: true, icalls: true, setjmp: true, may_throw: true, globals: true, variadic: true }
    }

    pub fn none() -> Self {
        Features {
            branches: false,
            loops: false,
            icalls: false,
            setjmp: false,
            may_throw: false,
            globals: false,
            variadic: false,
        }
    }

    /// Parses a comma-separated list such as `loops,icalls`; `all` and
    /// `none` are accepted.
    pub fn parse(s: &str) -> Result<Self, String> {
        let mut f = Features::none();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "all" => f = Features::all(),
                "none" => f = Features::none(),
                "branches" => f.branches = true,
                "loops" => f.loops = true,
                "icalls" => f.icalls = true,
                "setjmp" => f.setjmp = true,
                "may_throw" => f.may_throw = true,
                "globals" => f.globals = true,
                "variadic" => f.variadic = true,
                other => return Err(format!("unknown feature `{other}`")),
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenSpec {
    pub seed: u64,
    /// Defined functions, `main` included.
    pub n_functions: usize,
    /// Soft cap on blocks per function.
    pub max_blocks: usize,
    pub features: Features,
}

impl GenSpec {
    pub fn new(seed: u64) -> Self {
        GenSpec { seed, n_functions: 8, max_blocks: 14, features: Features::all() }
    }
}

/// Steps a single call of any function may cost, callees included.
const COST_CAP: u64 = 2500;

#[derive(Debug, Clone)]
struct Sig {
    name: String,
    params: Vec<Type>,
    ret: Type,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Plain,
    /// Target of indirect calls; all members of a family share a signature.
    Family,
    /// Calls longjmp on its buffer argument for some inputs.
    Thrower,
}

struct Ctx {
    sigs: Vec<Sig>,
    kinds: Vec<Kind>,
    cost: Vec<u64>,
    family: Vec<usize>,
    thrower: Option<usize>,
    /// Partner of `main` in a perfect pairing; `main` never calls it.
    mate: Option<usize>,
    calls: Vec<BTreeSet<usize>>,
    features: Features,
    has_vsum: bool,
}

struct Body<'a> {
    rng: &'a mut ChaCha8Rng,
    ctx: &'a Ctx,
    me: usize,
    is_main: bool,
    ret: Type,
    blocks: Vec<Block>,
    label: String,
    insts: Vec<Instruction>,
    env: Vec<String>,
    vars: Vec<String>,
    ptr_params: Vec<String>,
    slots: Vec<Slot>,
    n: usize,
    weight: u64,
    cost: u64,
    depth: usize,
    loop_exit: Option<String>,
    setjmp_used: bool,
    called: BTreeSet<usize>,
}

impl<'a> Body<'a> {
    fn fresh(&mut self, base: &str) -> String {
        self.n += 1;
        format!("{base}{}", self.n)
    }

    fn emit(&mut self, ty: Type, op: Op) -> String {
        let r = self.fresh("t");
        self.insts.push(Instruction::with_result(&r, ty, op));
        self.cost += self.weight;
        r
    }

    fn emit_void(&mut self, op: Op) {
        self.insts.push(Instruction::new(op));
        self.cost += self.weight;
    }

    fn konst(&mut self, ty: Type, v: i64) -> String {
        let c = if ty.is_float() { Const::Float(v as f64) } else { Const::Int(v) };
        self.emit(ty, Op::Const(c))
    }

    fn close(&mut self, term: Terminator) {
        let label = std::mem::take(&mut self.label);
        let insts = std::mem::take(&mut self.insts);
        self.blocks.push(Block::new(label, insts, term));
        self.cost += self.weight;
    }

    fn open(&mut self, label: String) {
        self.label = label;
    }

    fn budget_left(&self, max_blocks: usize) -> usize {
        max_blocks.saturating_sub(self.blocks.len())
    }

    fn slot(&mut self, base: &str, ty: Type) -> String {
        let s = self.fresh(base);
        self.slots.push(Slot::new(&s, ty));
        s
    }

    fn load_var(&mut self, v: &str) -> String {
        let a = self.emit(Type::Ptr, Op::SlotAddr(v.to_string()));
        self.emit(Type::I64, Op::Load(a))
    }

    fn store_var(&mut self, v: &str, x: String) {
        let a = self.emit(Type::Ptr, Op::SlotAddr(v.to_string()));
        self.emit_void(Op::Store(x, a));
    }

    /// An i64 value available here.
    fn operand(&mut self) -> String {
        if !self.env.is_empty() && self.rng.gen_bool(0.5) {
            return self.env[self.rng.gen_range(0..self.env.len())].clone();
        }
        let v = self.vars[self.rng.gen_range(0..self.vars.len())].clone();
        let x = self.load_var(&v);
        self.env.push(x.clone());
        x
    }

    /// An operand other than `a` when one can be found.
    fn other(&mut self, a: &str) -> String {
        for _ in 0..4 {
            let b = self.operand();
            if b != a {
                return b;
            }
        }
        let k = self.konst(Type::I64, 0x5a);
        self.emit(Type::I64, Op::Bin(BinOp::Xor, a.to_string(), k))
    }

    fn expr(&mut self) -> String {
        let a = self.operand();
        let r = match self.rng.gen_range(0..9) {
            0 | 1 => {
                let b = self.other(&a);
                self.emit(Type::I64, Op::Bin(BinOp::Add, a, b))
            }
            2 => {
                let b = self.other(&a);
                self.emit(Type::I64, Op::Bin(BinOp::Sub, a, b))
            }
            3 => {
                let b = self.other(&a);
                self.emit(Type::I64, Op::Bin(BinOp::Xor, a, b))
            }
            4 => {
                let k0 = 2 * self.rng.gen_range(1..20) + 1;
                let k = self.konst(Type::I64, k0);
                self.emit(Type::I64, Op::Bin(BinOp::Mul, a, k))
            }
            5 => {
                let k0 = self.rng.gen_range(1..4);
                let k = self.konst(Type::I64, k0);
                self.emit(Type::I64, Op::Bin(BinOp::AShr, a, k))
            }
            6 => {
                let op = if self.rng.gen_bool(0.5) { BinOp::SDiv } else { BinOp::SRem };
                let k0 = self.rng.gen_range(3..10);
                let k = self.konst(Type::I64, k0);
                self.emit(Type::I64, Op::Bin(op, a, k))
            }
            7 if self.ctx.features.globals => {
                let g = self.emit(Type::Ptr, Op::GlobalAddr("k0".into()));
                let k = self.emit(Type::I64, Op::Load(g));
                self.emit(Type::I64, Op::Bin(BinOp::Add, a, k))
            }
            _ => {
                let k0 = self.rng.gen_range(-50..50);
                let k = self.konst(Type::I64, k0);
                self.emit(Type::I64, Op::Bin(BinOp::Add, a, k))
            }
        };
        self.env.push(r.clone());
        r
    }

    fn cond(&mut self) -> String {
        let x = self.operand();
        let k0 = 1 << self.rng.gen_range(0..6);
        let bit = self.konst(Type::I64, k0);
        let t = self.emit(Type::I64, Op::Bin(BinOp::And, x, bit));
        let z = self.konst(Type::I64, 0);
        self.emit(Type::I1, Op::Icmp(IntPred::Ne, t, z))
    }

    /// Converts an i64 into `ty`.
    fn convert_to(&mut self, x: String, ty: Type) -> String {
        match ty {
            Type::I64 => x,
            Type::F64 => self.emit(Type::F64, Op::Cast(CastOp::SIToFP, x)),
            Type::F32 => self.emit(Type::F32, Op::Cast(CastOp::SIToFP, x)),
            t => self.emit(t, Op::Cast(CastOp::Trunc, x)),
        }
    }

    /// Converts a value of `ty` back into i64.
    fn convert_from(&mut self, x: String, ty: Type) -> String {
        match ty {
            Type::I64 => x,
            Type::F64 | Type::F32 => self.emit(Type::I64, Op::Cast(CastOp::FPToSI, x)),
            t if t.is_int() => self.emit(Type::I64, Op::Cast(CastOp::ZExt, x)),
            _ => unreachable!("no pointer results"),
        }
    }

    fn args_for(&mut self, params: &[Type]) -> Vec<String> {
        let mut out = Vec::new();
        for &p in params {
            if p == Type::Ptr {
                let v = self.vars[self.rng.gen_range(0..self.vars.len())].clone();
                out.push(self.emit(Type::Ptr, Op::SlotAddr(v)));
            } else {
                let x = self.operand();
                out.push(self.convert_to(x, p));
            }
        }
        out
    }

    fn assign(&mut self) {
        let x = self.expr();
        let v = self.vars[self.rng.gen_range(0..self.vars.len())].clone();
        self.store_var(&v, x);
    }

    fn print(&mut self) {
        let x = self.operand();
        match self.rng.gen_range(0..4) {
            0 => self.emit_void(Op::Call("ext_log".into(), vec![x])),
            1 if self.ctx.features.variadic => {
                let y = self.operand();
                let k = self.konst(Type::I64, 3);
                self.emit(Type::I32, Op::Call("ext_fmt".into(), vec![x, y, k]));
            }
            _ => self.emit_void(Op::Print(x)),
        }
    }

    fn float(&mut self) {
        let x = self.operand();
        let f = self.emit(Type::F64, Op::Cast(CastOp::SIToFP, x));
        let k0 = self.rng.gen_range(1..8) as f64 * 0.75;
        let k = self.emit(Type::F64, Op::Const(Const::Float(k0)));
        let op = [BinOp::FAdd, BinOp::FMul, BinOp::FDiv, BinOp::FSub][self.rng.gen_range(0..4)];
        let y = self.emit(Type::F64, Op::Bin(op, f, k));
        if self.ctx.features.globals && self.rng.gen_bool(0.3) {
            let g = self.emit(Type::Ptr, Op::GlobalAddr("gf".into()));
            let old = self.emit(Type::F64, Op::Load(g.clone()));
            let s = self.emit(Type::F64, Op::Bin(BinOp::FAdd, old, y.clone()));
            self.emit_void(Op::Store(s, g));
        }
        self.emit_void(Op::Print(y));
    }

    fn global_update(&mut self) {
        let g = self.emit(Type::Ptr, Op::GlobalAddr("g0".into()));
        let old = self.emit(Type::I64, Op::Load(g.clone()));
        let x = self.operand();
        let s = self.emit(Type::I64, Op::Bin(BinOp::Add, old, x));
        self.emit_void(Op::Store(s.clone(), g));
        self.env.push(s);
    }

    /// A block touching only its own registers and a local slot.
    fn local_block(&mut self) {
        let l = self.fresh("b");
        self.close(Terminator::Br(l.clone()));
        self.open(l);
        let mark = self.env.len();
        let v = self.vars[self.rng.gen_range(0..self.vars.len())].clone();
        let x = self.load_var(&v);
        let k0 = self.rng.gen_range(1..9);
        let k = self.konst(Type::I64, k0);
        let op = [BinOp::Add, BinOp::Mul, BinOp::Xor][self.rng.gen_range(0..3)];
        let y = self.emit(Type::I64, Op::Bin(op, x, k));
        if self.ctx.features.globals && self.rng.gen_bool(0.4) {
            let g = self.emit(Type::Ptr, Op::GlobalAddr("k0".into()));
            let c = self.emit(Type::I64, Op::Load(g));
            let z = self.emit(Type::I64, Op::Bin(BinOp::Sub, y, c));
            self.store_var(&v, z);
        } else {
            self.store_var(&v, y);
        }
        self.env.truncate(mark);
        let next = self.fresh("b");
        self.close(Terminator::Br(next.clone()));
        self.open(next);
    }

    fn above(&self, i: usize) -> bool {
        i + 1 < self.ctx.sigs.len() && (i > self.me || (self.is_main && i != self.me))
    }

    fn callable(&self, i: usize) -> bool {
        self.above(i)
            && self.ctx.twin(self.me) != Some(i)
            && self.ctx.kinds[i] != Kind::Thrower
            && self.ctx.cost[i] * self.weight <= COST_CAP / 2
            && self.cost + self.ctx.cost[i] * self.weight <= COST_CAP
    }

    fn call(&mut self) -> bool {
        let cands: Vec<usize> = (0..self.ctx.sigs.len()).filter(|&i| self.callable(i)).collect();
        if cands.is_empty() {
            return false;
        }
        let j = cands[self.rng.gen_range(0..cands.len())];
        self.call_fn(j);
        true
    }

    fn call_fn(&mut self, j: usize) {
        let sig = self.ctx.sigs[j].clone();
        let args = self.args_for(&sig.params);
        self.cost += self.ctx.cost[j] * self.weight;
        self.called.insert(j);
        if sig.ret == Type::Void {
            self.emit_void(Op::Call(sig.name, args));
        } else {
            let r = self.emit(sig.ret, Op::Call(sig.name, args));
            let x = self.convert_from(r, sig.ret);
            let v = self.vars[self.rng.gen_range(0..self.vars.len())].clone();
            self.store_var(&v, x.clone());
            self.env.push(x);
        }
    }

    fn vsum(&mut self) {
        let a = self.operand();
        let b = self.operand();
        let c = self.operand();
        let r = self.emit(Type::I64, Op::Call("vsum".into(), vec![a, b, c]));
        self.env.push(r.clone());
        self.emit_void(Op::Print(r));
    }

    fn icall(&mut self) -> bool {
        let fam: Vec<usize> = self.ctx.family.clone();
        if fam.is_empty() || fam.iter().any(|&i| !self.callable(i)) {
            return false;
        }
        let in_global = self.ctx.features.globals && self.rng.gen_bool(0.3);
        let cell = if in_global { None } else { Some(self.slot("fp", Type::I64)) };
        let (a, b) = (fam[0], fam[1 + self.rng.gen_range(0..fam.len() - 1)]);
        let c = self.cond();
        let (la, lb, lj) = (self.fresh("b"), self.fresh("b"), self.fresh("b"));
        self.close(Terminator::CondBr(c, la.clone(), lb.clone()));
        for (l, t) in [(la, a), (lb, b)] {
            self.open(l);
            let f = self.emit(Type::I64, Op::AddrOfFunc(self.ctx.sigs[t].name.clone()));
            let p = self.cell_addr(&cell);
            self.emit_void(Op::Store(f, p));
            self.close(Terminator::Br(lj.clone()));
        }
        self.open(lj);
        let p = self.cell_addr(&cell);
        let f = self.emit(Type::I64, Op::Load(p));
        let sig = self.ctx.sigs[a].clone();
        let args = self.args_for(&sig.params);
        self.cost += fam.iter().map(|&i| self.ctx.cost[i]).max().unwrap() * self.weight;
        self.called.extend(fam.iter().copied());
        let r = self.emit(sig.ret, Op::ICall(f, args));
        let x = self.convert_from(r, sig.ret);
        self.emit_void(Op::Print(x.clone()));
        self.env.push(x);
        true
    }

    fn cell_addr(&mut self, cell: &Option<String>) -> String {
        match cell {
            Some(s) => self.emit(Type::Ptr, Op::SlotAddr(s.clone())),
            None => self.emit(Type::Ptr, Op::GlobalAddr("fptab".into())),
        }
    }

    fn setjmp_forced(&mut self) {
        self.setjmp_inner(self.ctx.thrower.expect("thrower exists"));
    }

    fn setjmp(&mut self) -> bool {
        let Some(t) = self.ctx.thrower else { return false };
        if self.setjmp_used || self.weight != 1 || !self.above(t) || !self.callable_thrower(t) {
            return false;
        }
        if self.ctx.twin(self.me) == Some(t) {
            return false;
        }
        self.setjmp_inner(t);
        true
    }

    fn setjmp_inner(&mut self, t: usize) {
        self.setjmp_used = true;
        let jb = self.slot("jb", Type::I64);
        let a = self.emit(Type::Ptr, Op::SlotAddr(jb));
        let r = self.emit(Type::I32, Op::SetJmp(a.clone()));
        let z = self.konst(Type::I32, 0);
        let c = self.emit(Type::I1, Op::Icmp(IntPred::Eq, r.clone(), z));
        let (lt, lc, lj) = (self.fresh("b"), self.fresh("b"), self.fresh("b"));
        self.close(Terminator::CondBr(c, lt.clone(), lc.clone()));
        let mark = self.env.len();
        self.open(lt);
        let x = self.operand();
        self.cost += self.ctx.cost[t];
        self.called.insert(t);
        self.emit_void(Op::Call(self.ctx.sigs[t].name.clone(), vec![a, x.clone()]));
        self.emit_void(Op::Print(x));
        self.close(Terminator::Br(lj.clone()));
        self.env.truncate(mark);
        self.open(lc);
        let w = self.emit(Type::I64, Op::Cast(CastOp::ZExt, r));
        self.emit_void(Op::Print(w.clone()));
        let v = self.vars[0].clone();
        self.store_var(&v, w);
        self.close(Terminator::Br(lj.clone()));
        self.env.truncate(mark);
        self.open(lj);
    }

    fn callable_thrower(&self, t: usize) -> bool {
        self.cost + self.ctx.cost[t] <= COST_CAP
    }

    fn may_throw(&mut self) {
        let c = self.cond();
        self.emit_void(Op::MayThrow(c, String::new()));
        let (h, k) = (self.fresh("b"), self.fresh("b"));
        if let Some(Instruction { op: Op::MayThrow(_, hl), .. }) = self.insts.last_mut() {
            *hl = h.clone();
        }
        self.close(Terminator::Br(k.clone()));
        let mark = self.env.len();
        self.open(h);
        let k0 = self.rng.gen_range(100..200);
        let x = self.konst(Type::I64, k0);
        self.emit_void(Op::Print(x.clone()));
        let v = self.vars[self.rng.gen_range(0..self.vars.len())].clone();
        self.store_var(&v, x);
        self.close(Terminator::Br(k.clone()));
        self.env.truncate(mark);
        self.open(k);
    }

    fn return_value(&mut self) -> Option<String> {
        match self.ret {
            Type::Void => None,
            t => {
                let x = self.operand();
                Some(self.convert_to(x, t))
            }
        }
    }

    fn if_stmt(&mut self, max_blocks: usize) {
        let c = self.cond();
        let (lt, le, lj) = (self.fresh("b"), self.fresh("b"), self.fresh("b"));
        let with_else = self.rng.gen_bool(0.5);
        let f = if with_else { le.clone() } else { lj.clone() };
        self.close(Terminator::CondBr(c, lt.clone(), f));
        let mark = self.env.len();
        self.depth += 1;
        self.open(lt);
        let k0 = self.rng.gen_range(1..4);
        self.stmts(k0, max_blocks);
        self.close(Terminator::Br(lj.clone()));
        self.env.truncate(mark);
        if with_else {
            self.open(le);
            let k0 = self.rng.gen_range(1..3);
            self.stmts(k0, max_blocks);
            self.close(Terminator::Br(lj.clone()));
            self.env.truncate(mark);
        }
        self.depth -= 1;
        self.open(lj);
    }

    fn early_return(&mut self) {
        let c = self.cond();
        let (lr, lk) = (self.fresh("b"), self.fresh("b"));
        self.close(Terminator::CondBr(c, lr.clone(), lk.clone()));
        let mark = self.env.len();
        self.open(lr);
        self.print();
        let v = self.return_value();
        self.close(Terminator::Ret(v));
        self.env.truncate(mark);
        self.open(lk);
    }

    fn loop_stmt(&mut self, max_blocks: usize) {
        let trip = if self.rng.gen_bool(0.1) { 16 } else { self.rng.gen_range(1..9) };
        let i = self.slot("i", Type::I64);
        let z = self.konst(Type::I64, 0);
        self.store_var(&i, z);
        let (lh, lb, lx) = (self.fresh("b"), self.fresh("b"), self.fresh("b"));
        self.close(Terminator::Br(lh.clone()));
        let mark = self.env.len();
        self.weight *= trip as u64;
        self.open(lh.clone());
        let iv = self.load_var(&i);
        let n = self.konst(Type::I64, trip);
        let c = self.emit(Type::I1, Op::Icmp(IntPred::Slt, iv, n));
        self.close(Terminator::CondBr(c, lb.clone(), lx.clone()));
        self.open(lb);
        let outer = self.loop_exit.replace(lx.clone());
        self.depth += 1;
        let k0 = self.rng.gen_range(1..4);
        self.stmts(k0, max_blocks);
        self.depth -= 1;
        self.loop_exit = outer;
        let iv = self.load_var(&i);
        let one = self.konst(Type::I64, 1);
        let nx = self.emit(Type::I64, Op::Bin(BinOp::Add, iv, one));
        self.store_var(&i, nx);
        self.close(Terminator::Br(lh.clone()));
        self.weight /= trip as u64;
        self.env.truncate(mark);
        self.open(lx);
    }

    fn break_stmt(&mut self) {
        let Some(x) = self.loop_exit.clone() else { return };
        let c = self.cond();
        let k = self.fresh("b");
        self.close(Terminator::CondBr(c, x, k.clone()));
        self.open(k);
    }

    fn stmts(&mut self, n: usize, max_blocks: usize) {
        for _ in 0..n {
            let room = self.budget_left(max_blocks);
            let f = self.ctx.features;
            let roll = self.rng.gen_range(0..100);
            match roll {
                0..=17 => self.assign(),
                18..=25 => self.print(),
                26..=33 if f.globals => self.global_update(),
                34..=43 if f.branches && room >= 3 && self.depth < 3 => self.if_stmt(max_blocks),
                44..=51 if f.loops && room >= 3 && self.depth < 2 => self.loop_stmt(max_blocks),
                52..=55 if f.branches && room >= 2 && self.loop_exit.is_some() => self.break_stmt(),
                56..=59 if f.branches && room >= 2 => self.early_return(),
                60..=71 => {
                    if !self.call() {
                        self.assign();
                    }
                }
                72..=77 if f.icalls && room >= 3 => {
                    if !self.icall() {
                        self.assign();
                    }
                }
                78..=80 if f.setjmp && room >= 3 => {
                    if !self.setjmp() {
                        self.print();
                    }
                }
                81..=85 if f.may_throw && room >= 2 => self.may_throw(),
                86..=89 => self.float(),
                90..=96 if f.branches && room >= 2 => self.local_block(),
                97..=99 if self.ctx.has_vsum => self.vsum(),
                _ => self.assign(),
            }
        }
    }
}

fn random_sig(rng: &mut ChaCha8Rng, name: String) -> Sig {
    let n = rng.gen_range(1..5);
    let mut params = vec![if rng.gen_bool(0.7) { Type::I64 } else { Type::I32 }];
    for _ in 1..n {
        params.push([Type::I64, Type::I32, Type::I16, Type::I8, Type::F64, Type::Ptr][rng.gen_range(0..6)]);
    }
    let ret = match rng.gen_range(0..10) {
        0..=3 => Type::I64,
        4..=5 => Type::I32,
        6 => Type::I16,
        7..=8 => Type::Void,
        _ => Type::F64,
    };
    Sig { name, params, ret }
}

fn thrower_body(rng: &mut ChaCha8Rng) -> Vec<Block> {
    let bit = 1i64 << rng.gen_range(0..3);
    let i = |r: &str, ty: Type, op: Op| Instruction::with_result(r, ty, op);
    vec![
        Block::new(
            "e",
            vec![
                i("bit", Type::I64, Op::Const(Const::Int(bit))),
                i("t", Type::I64, Op::Bin(BinOp::And, "x".into(), "bit".into())),
                i("z", Type::I64, Op::Const(Const::Int(0))),
                i("c", Type::I1, Op::Icmp(IntPred::Ne, "t".into(), "z".into())),
            ],
            Terminator::CondBr("c".into(), "jump".into(), "back".into()),
        ),
        Block::new(
            "jump",
            vec![
                i("k", Type::I64, Op::Const(Const::Int(16))),
                i("v", Type::I64, Op::Bin(BinOp::Or, "x".into(), "k".into())),
                i("w", Type::I32, Op::Cast(CastOp::Trunc, "v".into())),
                Instruction::new(Op::Print("x".into())),
                Instruction::new(Op::LongJmp("b".into(), "w".into())),
            ],
            Terminator::Unreachable,
        ),
        Block::new("back", vec![Instruction::new(Op::Print("x".into()))], Terminator::Ret(None)),
    ]
}

fn build_function(rng: &mut ChaCha8Rng, ctx: &Ctx, me: usize, max_blocks: usize, main: bool) -> (Function, u64, BTreeSet<usize>) {
    let sig = &ctx.sigs[me];
    let params: Vec<Param> = sig.params.iter().enumerate().map(|(i, &t)| Param::new(format!("a{i}"), t)).collect();
    let mut f = Function::new(&sig.name, params.clone(), sig.ret);
    if ctx.kinds[me] == Kind::Thrower {
        f.params = vec![Param::new("b", Type::Ptr), Param::new("x", Type::I64)];
        f.blocks = thrower_body(rng);
        return (f, 12, BTreeSet::new());
    }
    let mut body = Body {
        rng,
        ctx,
        me,
        is_main: main,
        ret: sig.ret,
        blocks: Vec::new(),
        label: "entry".into(),
        insts: Vec::new(),
        env: Vec::new(),
        vars: Vec::new(),
        ptr_params: Vec::new(),
        slots: Vec::new(),
        n: 0,
        weight: 1,
        cost: 0,
        depth: 0,
        loop_exit: None,
        setjmp_used: false,
        called: BTreeSet::new(),
    };
    for p in &params {
        match p.ty {
            Type::Ptr => {
                let x = body.emit(Type::I64, Op::Load(p.name.clone()));
                body.env.push(x);
                body.ptr_params.push(p.name.clone());
            }
            t => {
                let x = body.convert_from(p.name.clone(), t);
                body.env.push(x);
            }
        }
    }
    let nvars = body.rng.gen_range(2..5);
    for _ in 0..nvars {
        let v = body.slot("v", Type::I64);
        body.vars.push(v.clone());
        let x = body.operand_or_const();
        body.store_var(&v, x);
    }
    let n = body.rng.gen_range(3..8);
    body.stmts(n, max_blocks);
    if main {
        // reach every function nothing else calls
        let reached = ctx.reached_from(&body.called);
        for j in 0..ctx.sigs.len() {
            if j == me || reached.contains(&j) || ctx.mate == Some(j) {
                continue;
            }
            match ctx.kinds[j] {
                Kind::Thrower => {
                    body.setjmp_used = false;
                    body.setjmp();
                }
                Kind::Family => {
                    if !body.icall() {
                        body.call_fn(j);
                    }
                }
                Kind::Plain => body.call_fn(j),
            }
        }
        if ctx.has_vsum && body.rng.gen_bool(0.5) {
            body.vsum();
        }
    }
    if me == 0 {
        if let Some(mate) = ctx.mate.filter(|&x| x != 0 && !ctx.calls.iter().any(|c| c.contains(&x))) {
            if !body.called.contains(&mate) {
                if ctx.thrower == Some(mate) {
                    body.setjmp_used = false;
                    body.weight = 1;
                    body.setjmp_forced();
                } else {
                    body.call_fn(mate);
                }
            }
        }
    }
    for p in body.ptr_params.clone() {
        if body.rng.gen_bool(0.5) {
            let x = body.expr();
            body.emit_void(Op::Store(x, p));
        }
    }
    if body.rng.gen_bool(0.5) {
        body.print();
    }
    let v = body.return_value();
    body.close(Terminator::Ret(v));
    f.blocks = body.blocks;
    f.slots = body.slots;
    (f, body.cost.max(1), body.called)
}

impl Body<'_> {
    fn operand_or_const(&mut self) -> String {
        if !self.env.is_empty() {
            let a = self.env[self.rng.gen_range(0..self.env.len())].clone();
            let k0 = self.rng.gen_range(-9..10);
            let k = self.konst(Type::I64, k0);
            self.emit(Type::I64, Op::Bin(BinOp::Add, a, k))
        } else {
            let k0 = self.rng.gen_range(-9..10);
            self.konst(Type::I64, k0)
        }
    }
}

impl Ctx {
    /// Functions `2k` and `2k + 1` (the mate aside) are kept fusible with
    /// each other: compatible returns, no call between them.
    fn twin(&self, i: usize) -> Option<usize> {
        let main = self.sigs.len() - 1;
        if i == main {
            return self.mate;
        }
        let j = i ^ 1;
        (Some(i) != self.mate && Some(j) != self.mate && j < main).then_some(j)
    }

    /// Closure of `called` under the recorded call edges.
    fn reached_from(&self, called: &BTreeSet<usize>) -> BTreeSet<usize> {
        let mut seen = called.clone();
        let mut work: Vec<usize> = called.iter().copied().collect();
        while let Some(i) = work.pop() {
            for &j in &self.calls[i] {
                if seen.insert(j) {
                    work.push(j);
                }
            }
        }
        seen
    }
}

/// Generates one program. The same spec always yields the same module.
pub fn generate(spec: &GenSpec) -> Module {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let feats = spec.features;
    let n = spec.n_functions.max(1);
    let others = n - 1;
    let mut kinds = vec![Kind::Plain; others];
    let thrower = (feats.setjmp && others >= 2).then(|| others - 1);
    if let Some(t) = thrower {
        kinds[t] = Kind::Thrower;
    }
    let fam_end = thrower.unwrap_or(others);
    let fam_size = if feats.icalls && fam_end >= 3 { rng.gen_range(2..=3.min(fam_end - 1)) } else { 0 };
    let family: Vec<usize> = (fam_end - fam_size..fam_end).collect();
    let fam_sig = if rng.gen_bool(0.5) { (vec![Type::I64], Type::I64) } else { (vec![Type::I64, Type::I32], Type::I32) };
    let mut sigs = Vec::new();
    for i in 0..others {
        let name = format!("f{i}");
        sigs.push(match kinds[i] {
            Kind::Thrower => Sig { name, params: vec![Type::Ptr, Type::I64], ret: Type::Void },
            _ if family.contains(&i) => {
                kinds[i] = Kind::Family;
                Sig { name, params: fam_sig.0.clone(), ret: fam_sig.1 }
            }
            _ => random_sig(&mut rng, name),
        });
    }
    sigs.push(Sig { name: "main".into(), params: vec![Type::I64, Type::I64], ret: Type::I64 });
    kinds.push(Kind::Plain);
    let mate = (others >= 2).then(|| others - 1);
    let mut ctx = Ctx {
        cost: vec![0; sigs.len()],
        calls: vec![BTreeSet::new(); sigs.len()],
        sigs,
        kinds,
        family,
        thrower,
        mate,
        features: feats,
        has_vsum: feats.variadic,
    };
    for i in 0..n {
        if let Some(j) = ctx.twin(i).filter(|&j| j > i) {
            if type_compatible(ctx.sigs[i].ret, ctx.sigs[j].ret).is_none() {
                // family signatures are fixed, so adjust the other side
                let (fix, keep) = if ctx.kinds[j] == Kind::Plain && j != n - 1 { (j, i) } else { (i, j) };
                ctx.sigs[fix].ret = ctx.sigs[keep].ret;
            }
        }
    }
    if let Some(m) = mate.filter(|&m| type_compatible(ctx.sigs[m].ret, Type::I64).is_none()) {
        ctx.sigs[m].ret = Type::I64;
    }
    let mut funcs: Vec<Option<Function>> = vec![None; n];
    // callees first, so their costs are known at call sites
    for me in (0..others).rev().chain([n - 1]) {
        let (f, cost, called) = build_function(&mut rng, &ctx, me, spec.max_blocks, me == n - 1);
        ctx.cost[me] = cost;
        ctx.calls[me] = called;
        funcs[me] = Some(f);
    }
    let mut m = Module::new(format!("gen{}", spec.seed));
    if feats.globals {
        m.globals.push(Global { name: "g0".into(), ty: Type::I64, init: Const::Int(rng.gen_range(-100..100)) });
        m.globals.push(Global { name: "k0".into(), ty: Type::I64, init: Const::Int(rng.gen_range(1..50)) });
        m.globals.push(Global { name: "gf".into(), ty: Type::F64, init: Const::Float(1.5) });
        if feats.icalls {
            m.globals.push(Global { name: "fptab".into(), ty: Type::I64, init: Const::Int(0) });
        }
    }
    m.functions.push(Function::declaration("ext_log", vec![Param::new("a0", Type::I64)], Type::Void));
    if feats.variadic {
        let mut d = Function::declaration("ext_fmt", vec![Param::new("a0", Type::I64)], Type::I32);
        d.variadic = true;
        m.functions.push(d);
        m.functions.push(vsum_function());
    }
    m.functions.extend(funcs.into_iter().map(Option::unwrap));
    m.exported.insert("main".into());
    m
}

/// A defined variadic function; it ignores its extra arguments.
fn vsum_function() -> Function {
    let mut f = Function::new("vsum", vec![Param::new("a", Type::I64)], Type::I64);
    f.variadic = true;
    f.blocks = vec![Block::new(
        "e",
        vec![
            Instruction::with_result("k", Type::I64, Op::Const(Const::Int(3))),
            Instruction::with_result("r", Type::I64, Op::Bin(BinOp::Mul, "a".into(), "k".into())),
        ],
        Terminator::Ret(Some("r".into())),
    )];
    f
}

fn random_value(rng: &mut ChaCha8Rng, ty: Type) -> Value {
    match ty {
        Type::F32 | Type::F64 => Value::Float(rng.gen_range(-100.0..100.0)),
        Type::Ptr => Value::Ptr(crate::interp::Ptr::Null),
        Type::I1 => Value::Int(rng.gen_range(0..2)),
        t => {
            let v: i64 = match rng.gen_range(0..10) {
                0..=4 => rng.gen_range(-64..64),
                5..=7 => rng.gen_range(-1_000_000..1_000_000),
                _ => rng.gen(),
            };
            crate::interp::parse_value(&v.to_string(), t).unwrap_or(Value::Int(0))
        }
    }
}

/// `n` argument vectors for `entry`, deterministic in `seed`.
pub fn generate_inputs(m: &Module, entry: &str, n: usize, seed: u64) -> Vec<Vec<Value>> {
    let Some(f) = m.function(entry) else { return Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n).map(|_| f.params.iter().map(|p| random_value(&mut rng, p.ty)).collect()).collect()
}

/// Seed of the standard suite.
pub const STANDARD_SEED: u64 = 42;
pub const STANDARD_COUNT: usize = 200;

/// Spec of program `i` of the standard suite rooted at `seed`.
pub fn suite_spec(seed: u64, i: usize) -> GenSpec {
    GenSpec {
        seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
        n_functions: 6 + 2 * (i % 3),
        max_blocks: 10 + (i % 4) * 2,
        features: Features::all(),
    }
}

pub fn suite(seed: u64, count: usize) -> Vec<Module> {
    (0..count).map(|i| generate(&suite_spec(seed, i))).collect()
}

/// One generated program in a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub entry: String,
    /// Whitespace-separated literals, one string per input vector.
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub programs: Vec<ManifestEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("{file}: {source}")]
    Parse { file: String, source: ParseError },
    #[error("{file}: input `{text}` does not fit @{entry}")]
    Input { file: String, entry: String, text: String },
}

/// A corpus program with its decoded input vectors.
#[derive(Debug, Clone)]
pub struct CorpusProgram {
    pub file: String,
    pub seed: u64,
    pub entry: String,
    pub module: Module,
    pub inputs: Vec<Vec<Value>>,
}

/// Literal form of an input vector.
pub fn format_inputs(v: &[Value]) -> String {
    v.iter().map(Value::to_string).collect::<Vec<_>>().join(" ")
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

/// Loads a directory written by `fufi gen`.
pub fn load_dir(dir: &Path) -> Result<(Manifest, Vec<CorpusProgram>), CorpusError> {
    let manifest: Manifest = serde_json::from_str(&read(&dir.join("inputs.json"))?)?;
    let mut out = Vec::new();
    for e in &manifest.programs {
        let module = parse_module(&read(&dir.join(&e.file))?)
            .map_err(|source| CorpusError::Parse { file: e.file.clone(), source })?;
        let params: Vec<Type> = module.function(&e.entry).map(|f| f.params.iter().map(|p| p.ty).collect()).unwrap_or_default();
        let bad = |text: &str| CorpusError::Input { file: e.file.clone(), entry: e.entry.clone(), text: text.to_string() };
        let mut inputs = Vec::new();
        for line in &e.inputs {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != params.len() {
                return Err(bad(line));
            }
            let v: Option<Vec<Value>> = toks.iter().zip(&params).map(|(t, &ty)| parse_value(t, ty)).collect();
            inputs.push(v.ok_or_else(|| bad(line))?);
        }
        out.push(CorpusProgram { file: e.file.clone(), seed: e.seed, entry: e.entry.clone(), module, inputs });
    }
    Ok((manifest, out))
}

/// Directory of the shipped standard suite.
pub fn shipped_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/corpus")
}

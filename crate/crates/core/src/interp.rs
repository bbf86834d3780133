//! Reference interpreter: the ground-truth semantics for differential tests.
//!
//! A module is first lowered to an index-based form (registers, slots,
//! blocks and callees become integers) and then executed on an explicit
//! frame stack, so deep recursion never touches the host stack.

use std::collections::HashMap;
use std::fmt;

use crate::ir::{BinOp, CastOp, Const, FloatPred, IntPred, Module, Op, Terminator, Type, FUNCTION_ALIGN};
use crate::fusion::tag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ptr {
    Null,
    Slot { frame: u64, slot: u32 },
    Global(u32),
}

/// A runtime value. Integers are kept canonical for their type: sign
/// extended from the type width, except `i1` which is 0 or 1.
#[derive(Debug, Clone, Copy)]
pub enum Value {
    Int(i64),
    Float(f64),
    Ptr(Ptr),
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a.to_bits() == b.to_bits(),
            (Value::Ptr(a), Value::Ptr(b)) => a == b,
            _ => false,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Ptr(Ptr::Null) => f.write_str("null"),
            Value::Ptr(_) => f.write_str("ptr"),
        }
    }
}

impl Value {
    pub fn zero(ty: Type) -> Value {
        match ty {
            t if t.is_float() => Value::Float(0.0),
            Type::Ptr => Value::Ptr(Ptr::Null),
            _ => Value::Int(0),
        }
    }

    fn from_const(c: Const, ty: Type) -> Value {
        match c {
            Const::Int(v) => Value::Int(canon(ty, v)),
            Const::Float(v) => Value::Float(round_float(ty, v)),
            Const::Null => Value::Ptr(Ptr::Null),
        }
    }

    pub fn as_int(self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(v),
            _ => None,
        }
    }

    /// Whether the value is a legal inhabitant of `ty`.
    pub fn has_type(self, ty: Type) -> bool {
        match self {
            Value::Int(v) => ty.is_int() && canon(ty, v) == v,
            Value::Float(_) => ty.is_float(),
            Value::Ptr(_) => ty == Type::Ptr,
        }
    }
}

/// Parses a literal of the given type (`null` is the only ptr literal).
pub fn parse_value(text: &str, ty: Type) -> Option<Value> {
    match ty {
        t if t.is_int() => text.parse::<i64>().ok().map(|v| Value::Int(canon(t, v))),
        t if t.is_float() => text.parse::<f64>().ok().map(|v| Value::Float(round_float(t, v))),
        Type::Ptr if text == "null" => Some(Value::Ptr(Ptr::Null)),
        _ => None,
    }
}

fn canon(ty: Type, v: i64) -> i64 {
    match ty {
        Type::I1 => v & 1,
        Type::I8 => v as i8 as i64,
        Type::I16 => v as i16 as i64,
        Type::I32 => v as i32 as i64,
        _ => v,
    }
}

fn mask(ty: Type) -> u64 {
    match ty.bits() {
        64 => u64::MAX,
        b => (1u64 << b) - 1,
    }
}

fn round_float(ty: Type, v: f64) -> f64 {
    if ty == Type::F32 {
        v as f32 as f64
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrapKind {
    NullDeref,
    DivByZero,
    Unreachable,
    StepLimit,
    BadICallTarget,
    TypeError,
    Dangling,
    BadLongjmp,
    StackOverflow,
}

impl TrapKind {
    pub fn name(self) -> &'static str {
        match self {
            TrapKind::NullDeref => "null-deref",
            TrapKind::DivByZero => "div-by-zero",
            TrapKind::Unreachable => "unreachable",
            TrapKind::StepLimit => "step-limit",
            TrapKind::BadICallTarget => "bad-icall-target",
            TrapKind::TypeError => "type-error",
            TrapKind::Dangling => "dangling-pointer",
            TrapKind::BadLongjmp => "bad-longjmp",
            TrapKind::StackOverflow => "stack-overflow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trap {
    pub kind: TrapKind,
    pub function: String,
    pub block: String,
}

impl fmt::Display for Trap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "trap {} in @{} at {}", self.kind.name(), self.function, self.block)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecResult {
    pub exit_value: Option<Value>,
    pub output_trace: Vec<String>,
    pub trap: Option<Trap>,
    pub steps: u64,
}

impl ExecResult {
    /// Equality of observable behaviour: trace, exit value and trap kind.
    /// Step counts and trap locations are allowed to differ.
    pub fn same_behavior(&self, other: &ExecResult) -> bool {
        self.output_trace == other.output_trace
            && self.exit_value == other.exit_value
            && self.trap.as_ref().map(|t| t.kind) == other.trap.as_ref().map(|t| t.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub steps: u64,
    pub depth: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { steps: 10_000_000, depth: 2_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckKind {
    ExitRange,
    SharedBlockWrite,
    TaggedCallee,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckViolation {
    pub kind: CheckKind,
    pub function: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RunError {
    #[error("unknown entry function `@{0}`")]
    UnknownEntry(String),
    #[error("entry `@{name}` expects {expected} arguments, got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("argument {index} of `@{name}` must be {ty}")]
    ArgType { name: String, index: usize, ty: Type },
    #[error("cannot lower module: {0}")]
    Lowering(String),
}

/// What to observe besides the plain result.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Options {
    pub limits: Limits,
    pub checks: bool,
    pub coverage: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub result: ExecResult,
    pub violations: Vec<CheckViolation>,
    /// Per function, per block: `[else taken, then taken]` for `condbr`.
    pub coverage: Vec<Vec<[bool; 2]>>,
}

type Reg = u32;

#[derive(Debug, Clone)]
enum Inst {
    Const(Reg, Value),
    Bin(Reg, BinOp, Type, Reg, Reg),
    Icmp(Reg, IntPred, Reg, Reg),
    Fcmp(Reg, FloatPred, Reg, Reg),
    Cast(Reg, CastOp, Type, Type, Reg),
    SlotAddr(Reg, u32),
    GlobalAddr(Reg, u32),
    Load(Reg, Type, Reg),
    Store(Reg, Type, Reg),
    Call(Option<(Reg, Type)>, u32, Vec<Reg>),
    ICall(Option<(Reg, Type)>, Reg, Vec<(Reg, Type)>),
    Int(Reg, i64),
    Print(Reg),
    SetJmp(Reg, Reg),
    LongJmp(Reg, Reg),
    MayThrow(Reg, u32),
}

#[derive(Debug, Clone)]
enum Term {
    Br(u32),
    CondBr(Reg, u32, u32),
    Switch(Reg, Vec<(i64, u32)>, u32),
    Ret(Option<(Reg, Type)>),
    Unreachable,
}

#[derive(Debug, Clone)]
struct CBlock {
    label: String,
    insts: Vec<Inst>,
    term: Term,
    shared: bool,
}

#[derive(Debug, Clone)]
struct CFunc {
    name: String,
    params: Vec<(Reg, Type)>,
    ret: Type,
    variadic: bool,
    external: bool,
    nregs: usize,
    slot_types: Vec<Type>,
    blocks: Vec<CBlock>,
    exits: Option<u32>,
}

/// A module lowered for execution. Build once, run many times.
#[derive(Debug, Clone)]
pub struct Program {
    funcs: Vec<CFunc>,
    index: HashMap<String, usize>,
    global_init: Vec<Value>,
    global_types: Vec<Type>,
}

struct Lower<'a> {
    regs: HashMap<&'a str, Reg>,
}

impl<'a> Lower<'a> {
    fn reg(&mut self, r: &'a str) -> Reg {
        let n = self.regs.len() as Reg;
        *self.regs.entry(r).or_insert(n)
    }
}

impl Program {
    pub fn new(m: &Module) -> Result<Program, RunError> {
        let index: HashMap<String, usize> = m.functions.iter().enumerate().map(|(i, f)| (f.name.clone(), i)).collect();
        let gindex: HashMap<&str, u32> = m.globals.iter().enumerate().map(|(i, g)| (g.name.as_str(), i as u32)).collect();
        let err = |s: String| RunError::Lowering(s);
        let mut funcs = Vec::with_capacity(m.functions.len());
        for f in &m.functions {
            let mut lw = Lower { regs: HashMap::new() };
            let params: Vec<(Reg, Type)> = f.params.iter().map(|p| (lw.reg(&p.name), p.ty)).collect();
            let types = f.register_types();
            let ty_of = |r: &str| types.get(r).copied().unwrap_or(Type::Void);
            let labels: HashMap<&str, u32> =
                f.blocks.iter().enumerate().map(|(i, b)| (b.label.as_str(), i as u32)).collect();
            let label = |l: &str| labels.get(l).copied().ok_or_else(|| err(format!("unknown label `{l}`")));
            let mut blocks = Vec::with_capacity(f.blocks.len());
            for b in &f.blocks {
                let mut insts = Vec::with_capacity(b.instructions.len());
                for i in &b.instructions {
                    let dst = i.result.as_ref().map(|(r, t)| (lw.reg(r), *t));
                    let d = || dst.map(|x| x.0).ok_or_else(|| err(format!("`{}` without a result", i.op.opcode())));
                    let rty = dst.map(|x| x.1).unwrap_or(Type::Void);
                    insts.push(match &i.op {
                        Op::Const(c) => Inst::Const(d()?, Value::from_const(*c, rty)),
                        Op::Bin(op, a, b) => Inst::Bin(d()?, *op, rty, lw.reg(a), lw.reg(b)),
                        Op::Icmp(p, a, b) => Inst::Icmp(d()?, *p, lw.reg(a), lw.reg(b)),
                        Op::Fcmp(p, a, b) => Inst::Fcmp(d()?, *p, lw.reg(a), lw.reg(b)),
                        Op::Cast(c, a) => Inst::Cast(d()?, *c, ty_of(a), rty, lw.reg(a)),
                        Op::SlotAddr(s) => {
                            let si = f.slots.iter().position(|x| &x.name == s).ok_or_else(|| err(format!("unknown slot `{s}`")))?;
                            Inst::SlotAddr(d()?, si as u32)
                        }
                        Op::GlobalAddr(g) => {
                            let gi = gindex.get(g.as_str()).ok_or_else(|| err(format!("unknown global `{g}`")))?;
                            Inst::GlobalAddr(d()?, *gi)
                        }
                        Op::Load(p) => Inst::Load(d()?, rty, lw.reg(p)),
                        Op::Store(v, p) => Inst::Store(lw.reg(v), ty_of(v), lw.reg(p)),
                        Op::Call(g, args) => {
                            let gi = index.get(g).ok_or_else(|| err(format!("unknown function `{g}`")))?;
                            Inst::Call(dst, *gi as u32, args.iter().map(|a| lw.reg(a)).collect())
                        }
                        Op::ICall(c, args) => {
                            Inst::ICall(dst, lw.reg(c), args.iter().map(|a| (lw.reg(a), ty_of(a))).collect())
                        }
                        Op::AddrOfFunc(g) => {
                            let gi = index.get(g).ok_or_else(|| err(format!("unknown function `{g}`")))?;
                            Inst::Int(d()?, *gi as i64 * FUNCTION_ALIGN)
                        }
                        Op::Print(v) => Inst::Print(lw.reg(v)),
                        Op::SetJmp(p) => Inst::SetJmp(d()?, lw.reg(p)),
                        Op::LongJmp(p, v) => Inst::LongJmp(lw.reg(p), lw.reg(v)),
                        Op::MayThrow(c, h) => Inst::MayThrow(lw.reg(c), label(h)?),
                    });
                }
                let term = match &b.terminator {
                    Terminator::Br(l) => Term::Br(label(l)?),
                    Terminator::CondBr(c, t, e) => Term::CondBr(lw.reg(c), label(t)?, label(e)?),
                    Terminator::Switch { value, cases, default } => {
                        let v = lw.reg(value);
                        let cs = cases.iter().map(|(k, l)| Ok((*k, label(l)?))).collect::<Result<Vec<_>, RunError>>()?;
                        Term::Switch(v, cs, label(default)?)
                    }
                    Terminator::Ret(Some(v)) => Term::Ret(Some((lw.reg(v), f.ret))),
                    Terminator::Ret(None) => Term::Ret(None),
                    Terminator::Unreachable => Term::Unreachable,
                };
                blocks.push(CBlock { label: b.label.clone(), insts, term, shared: b.shared });
            }
            funcs.push(CFunc {
                name: f.name.clone(),
                params,
                ret: f.ret,
                variadic: f.variadic,
                external: f.external,
                nregs: lw.regs.len(),
                slot_types: f.slots.iter().map(|s| s.ty).collect(),
                blocks,
                exits: f.exits,
            });
        }
        Ok(Program {
            funcs,
            index,
            global_init: m.globals.iter().map(|g| Value::from_const(g.init, g.ty)).collect(),
            global_types: m.globals.iter().map(|g| g.ty).collect(),
        })
    }

    pub fn run(&self, entry: &str, args: &[Value], limits: Limits) -> Result<ExecResult, RunError> {
        Ok(self.run_with(entry, args, Options { limits, ..Options::default() })?.result)
    }

    pub fn run_checked(
        &self,
        entry: &str,
        args: &[Value],
        limits: Limits,
    ) -> Result<(ExecResult, Vec<CheckViolation>), RunError> {
        let o = self.run_with(entry, args, Options { limits, checks: true, coverage: false })?;
        Ok((o.result, o.violations))
    }

    pub fn run_with(&self, entry: &str, args: &[Value], opts: Options) -> Result<Outcome, RunError> {
        let fi = *self.index.get(entry).ok_or_else(|| RunError::UnknownEntry(entry.to_string()))?;
        let f = &self.funcs[fi];
        if args.len() != f.params.len() {
            return Err(RunError::Arity { name: f.name.clone(), expected: f.params.len(), got: args.len() });
        }
        for (i, (a, (_, t))) in args.iter().zip(&f.params).enumerate() {
            if !a.has_type(*t) {
                return Err(RunError::ArgType { name: f.name.clone(), index: i, ty: *t });
            }
        }
        let mut m = Machine {
            p: self,
            opts,
            globals: self.global_init.clone(),
            stack: Vec::new(),
            next_frame: 0,
            jumps: HashMap::new(),
            trace: Vec::new(),
            violations: Vec::new(),
            coverage: if opts.coverage {
                self.funcs.iter().map(|f| vec![[false; 2]; f.blocks.len()]).collect()
            } else {
                Vec::new()
            },
            steps: 0,
            exit: None,
        };
        let trap = match m.start(fi, args.to_vec()) {
            Ok(()) => m.execute().err(),
            Err(k) => Some(m.trap_here(k)),
        };
        Ok(Outcome {
            result: ExecResult { exit_value: m.exit, output_trace: m.trace, trap, steps: m.steps },
            violations: m.violations,
            coverage: m.coverage,
        })
    }

    /// Labels of each function's blocks, parallel to [`Outcome::coverage`].
    pub fn condbr_sites(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for f in &self.funcs {
            for b in &f.blocks {
                if matches!(b.term, Term::CondBr(..)) {
                    out.push((f.name.clone(), b.label.clone()));
                }
            }
        }
        out
    }

    /// Fraction of `condbr` sites for which both outcomes were observed in
    /// at least one of the given coverage maps.
    pub fn condbr_coverage(&self, maps: &[Vec<Vec<[bool; 2]>>]) -> (usize, usize) {
        let (mut both, mut total) = (0, 0);
        for (fi, f) in self.funcs.iter().enumerate() {
            for (bi, b) in f.blocks.iter().enumerate() {
                if !matches!(b.term, Term::CondBr(..)) {
                    continue;
                }
                total += 1;
                let seen = |k: usize| maps.iter().any(|m| m.get(fi).and_then(|f| f.get(bi)).is_some_and(|c| c[k]));
                if seen(0) && seen(1) {
                    both += 1;
                }
            }
        }
        (both, total)
    }
}

struct Frame {
    func: usize,
    id: u64,
    regs: Vec<Value>,
    slots: Vec<Value>,
    block: usize,
    ip: usize,
    /// Where the caller wants the result, and the type it expects.
    ret_to: Option<(Reg, Type)>,
    snapshot: Option<Vec<Value>>,
}

struct JumpBuf {
    frame: u64,
    depth: usize,
    block: usize,
    ip: usize,
    dst: Reg,
}

struct Machine<'p> {
    p: &'p Program,
    opts: Options,
    globals: Vec<Value>,
    stack: Vec<Frame>,
    next_frame: u64,
    jumps: HashMap<Ptr, JumpBuf>,
    trace: Vec<String>,
    violations: Vec<CheckViolation>,
    coverage: Vec<Vec<[bool; 2]>>,
    steps: u64,
    exit: Option<Value>,
}

fn coerce(v: Value, to: Type) -> Result<Value, TrapKind> {
    match v {
        Value::Int(x) if to.is_int() => Ok(Value::Int(canon(to, x))),
        Value::Float(x) if to.is_float() => Ok(Value::Float(round_float(to, x))),
        Value::Ptr(_) if to == Type::Ptr => Ok(v),
        _ => Err(TrapKind::TypeError),
    }
}

/// Widening keeps the bit pattern (zero extension), narrowing truncates:
/// the conversion fused call sites use for merged parameters.
fn coerce_from(v: Value, from: Type, to: Type) -> Result<Value, TrapKind> {
    match v {
        Value::Int(x) if to.is_int() && from.is_int() && to.bits() > from.bits() => {
            Ok(Value::Int(canon(to, (x as u64 & mask(from)) as i64)))
        }
        _ => coerce(v, to),
    }
}

impl<'p> Machine<'p> {
    fn trap_here(&self, kind: TrapKind) -> Trap {
        match self.stack.last() {
            Some(fr) => {
                let f = &self.p.funcs[fr.func];
                Trap {
                    kind,
                    function: f.name.clone(),
                    block: f.blocks.get(fr.block).map(|b| b.label.clone()).unwrap_or_default(),
                }
            }
            None => Trap { kind, function: String::new(), block: String::new() },
        }
    }

    fn violation(&mut self, kind: CheckKind, message: String) {
        let function = self.stack.last().map(|f| self.p.funcs[f.func].name.clone()).unwrap_or_default();
        self.violations.push(CheckViolation { kind, function, message });
    }

    /// Pushes a frame for `fi`, or performs an external call directly.
    /// Returns the external call's result when there is one.
    fn call(&mut self, fi: usize, args: Vec<Value>, ret_to: Option<(Reg, Type)>) -> Result<(), TrapKind> {
        let f = &self.p.funcs[fi];
        if f.external {
            let shown: Vec<String> = args.iter().map(|a| a.to_string()).collect();
            self.trace.push(format!("@{}({})", f.name, shown.join(", ")));
            if let Some((r, t)) = ret_to {
                if f.ret == Type::Void {
                    return Err(TrapKind::TypeError);
                }
                let v = coerce_from(Value::zero(f.ret), f.ret, t)?;
                self.stack.last_mut().unwrap().regs[r as usize] = v;
            }
            return Ok(());
        }
        if self.stack.len() >= self.opts.limits.depth {
            return Err(TrapKind::StackOverflow);
        }
        let mut regs = vec![Value::Int(0); f.nregs];
        for (v, (r, _)) in args.into_iter().zip(&f.params) {
            regs[*r as usize] = v;
        }
        let id = self.next_frame;
        self.next_frame += 1;
        self.stack.push(Frame {
            func: fi,
            id,
            regs,
            slots: f.slot_types.iter().map(|t| Value::zero(*t)).collect(),
            block: 0,
            ip: 0,
            ret_to,
            snapshot: None,
        });
        self.enter_block();
        Ok(())
    }

    fn start(&mut self, fi: usize, args: Vec<Value>) -> Result<(), TrapKind> {
        if self.p.funcs[fi].external {
            self.call(fi, args, None)?;
            self.exit = match self.p.funcs[fi].ret {
                Type::Void => None,
                t => Some(Value::zero(t)),
            };
            return Ok(());
        }
        let ret = self.p.funcs[fi].ret;
        self.call(fi, args, if ret == Type::Void { None } else { Some((0, ret)) })
    }

    fn enter_block(&mut self) {
        if !self.opts.checks {
            return;
        }
        let fr = self.stack.last().unwrap();
        if self.p.funcs[fr.func].blocks[fr.block].shared {
            let snap = self.globals.clone();
            self.stack.last_mut().unwrap().snapshot = Some(snap);
        }
    }

    fn jump(&mut self, b: u32) {
        let fr = self.stack.last_mut().unwrap();
        fr.block = b as usize;
        fr.ip = 0;
        self.enter_block();
    }

    fn frame_index(&self, id: u64) -> Option<usize> {
        if self.stack.last().is_some_and(|f| f.id == id) {
            return Some(self.stack.len() - 1);
        }
        self.stack.binary_search_by_key(&id, |f| f.id).ok()
    }

    fn cell_type(&self, p: Ptr) -> Result<Type, TrapKind> {
        match p {
            Ptr::Null => Err(TrapKind::NullDeref),
            Ptr::Global(g) => Ok(self.p.global_types[g as usize]),
            Ptr::Slot { frame, slot } => {
                let fi = self.frame_index(frame).ok_or(TrapKind::Dangling)?;
                Ok(self.p.funcs[self.stack[fi].func].slot_types[slot as usize])
            }
        }
    }

    fn cell(&mut self, p: Ptr) -> Result<&mut Value, TrapKind> {
        match p {
            Ptr::Null => Err(TrapKind::NullDeref),
            Ptr::Global(g) => Ok(&mut self.globals[g as usize]),
            Ptr::Slot { frame, slot } => {
                let fi = self.frame_index(frame).ok_or(TrapKind::Dangling)?;
                Ok(&mut self.stack[fi].slots[slot as usize])
            }
        }
    }

    fn execute(&mut self) -> Result<(), Trap> {
        while !self.stack.is_empty() {
            self.steps += 1;
            if self.steps > self.opts.limits.steps {
                return Err(self.trap_here(TrapKind::StepLimit));
            }
            if let Err(k) = self.step() {
                return Err(self.trap_here(k));
            }
        }
        Ok(())
    }

    fn step(&mut self) -> Result<(), TrapKind> {
        let p = self.p;
        let fr = self.stack.last_mut().unwrap();
        let func = &p.funcs[fr.func];
        let block = &func.blocks[fr.block];
        if fr.ip < block.insts.len() {
            let inst = &block.insts[fr.ip];
            fr.ip += 1;
            return self.exec(inst);
        }
        let r = |i: Reg| fr.regs[i as usize];
        match &block.term {
            Term::Br(b) => {
                let b = *b;
                self.leave_block()?;
                self.jump(b);
            }
            Term::CondBr(c, t, e) => {
                let taken = r(*c).as_int().ok_or(TrapKind::TypeError)? != 0;
                if self.opts.coverage {
                    let fr = self.stack.last().unwrap();
                    self.coverage[fr.func][fr.block][taken as usize] = true;
                }
                let b = if taken { *t } else { *e };
                self.leave_block()?;
                self.jump(b);
            }
            Term::Switch(v, cases, default) => {
                let x = r(*v).as_int().ok_or(TrapKind::TypeError)?;
                let b = cases.iter().find(|(k, _)| *k == x).map(|(_, b)| *b).unwrap_or(*default);
                self.leave_block()?;
                self.jump(b);
            }
            Term::Unreachable => return Err(TrapKind::Unreachable),
            Term::Ret(v) => {
                let v = v.map(|(x, _)| r(x));
                let exits = func.exits;
                self.leave_block()?;
                if let (Some(k), true) = (exits, self.opts.checks) {
                    if k >= 2 {
                        match v.and_then(Value::as_int) {
                            Some(code) if (0..k as i64).contains(&code) => {}
                            other => self.violation(
                                CheckKind::ExitRange,
                                format!("exit code {other:?} outside 0..{k}"),
                            ),
                        }
                    }
                }
                let done = self.stack.pop().unwrap();
                let ret_ty = p.funcs[done.func].ret;
                match self.stack.last_mut() {
                    None => self.exit = v,
                    Some(caller) => {
                        if let Some((dst, want)) = done.ret_to {
                            let v = v.ok_or(TrapKind::TypeError)?;
                            caller.regs[dst as usize] = coerce_from(v, ret_ty, want)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn leave_block(&mut self) -> Result<(), TrapKind> {
        if !self.opts.checks {
            return Ok(());
        }
        if let Some(snap) = self.stack.last_mut().unwrap().snapshot.take() {
            if snap != self.globals {
                let fr = self.stack.last().unwrap();
                let label = self.p.funcs[fr.func].blocks[fr.block].label.clone();
                self.violation(CheckKind::SharedBlockWrite, format!("shared block `{label}` changed global state"));
            }
        }
        Ok(())
    }

    fn exec(&mut self, inst: &Inst) -> Result<(), TrapKind> {
        let depth = self.stack.len() - 1;
        let fr = self.stack.last().unwrap();
        let r = |i: &Reg| fr.regs[*i as usize];
        let int = |i: &Reg| r(i).as_int().ok_or(TrapKind::TypeError);
        let float = |i: &Reg| match r(i) {
            Value::Float(x) => Ok(x),
            _ => Err(TrapKind::TypeError),
        };
        let ptr = |i: &Reg| match r(i) {
            Value::Ptr(p) => Ok(p),
            _ => Err(TrapKind::TypeError),
        };
        let (dst, val) = match inst {
            Inst::Const(d, v) => (*d, *v),
            Inst::Int(d, v) => (*d, Value::Int(*v)),
            Inst::Bin(d, op, ty, a, b) => {
                let v = if op.is_float() {
                    let (x, y) = (float(a)?, float(b)?);
                    let z = match op {
                        BinOp::FAdd => x + y,
                        BinOp::FSub => x - y,
                        BinOp::FMul => x * y,
                        _ => x / y,
                    };
                    Value::Float(round_float(*ty, z))
                } else {
                    let (x, y) = (int(a)?, int(b)?);
                    let bits = ty.bits().max(1);
                    let z = match op {
                        BinOp::Add => x.wrapping_add(y),
                        BinOp::Sub => x.wrapping_sub(y),
                        BinOp::Mul => x.wrapping_mul(y),
                        BinOp::SDiv | BinOp::SRem if y == 0 => return Err(TrapKind::DivByZero),
                        BinOp::SDiv => x.wrapping_div(y),
                        BinOp::SRem => x.wrapping_rem(y),
                        BinOp::And => x & y,
                        BinOp::Or => x | y,
                        BinOp::Xor => x ^ y,
                        BinOp::Shl => x.wrapping_shl((y as u32) % bits),
                        BinOp::LShr => ((x as u64 & mask(*ty)) >> ((y as u32) % bits)) as i64,
                        BinOp::AShr => x >> ((y as u32) % bits),
                        _ => unreachable!("float op on ints"),
                    };
                    Value::Int(canon(*ty, z))
                };
                (*d, v)
            }
            Inst::Icmp(d, p, a, b) => {
                let (x, y) = (int(a)?, int(b)?);
                let t = match p {
                    IntPred::Eq => x == y,
                    IntPred::Ne => x != y,
                    IntPred::Slt => x < y,
                    IntPred::Sle => x <= y,
                    IntPred::Sgt => x > y,
                    IntPred::Sge => x >= y,
                };
                (*d, Value::Int(t as i64))
            }
            Inst::Fcmp(d, p, a, b) => {
                let (x, y) = (float(a)?, float(b)?);
                let t = match p {
                    FloatPred::Oeq => x == y,
                    FloatPred::One => x != y && !x.is_nan() && !y.is_nan(),
                    FloatPred::Olt => x < y,
                    FloatPred::Ole => x <= y,
                    FloatPred::Ogt => x > y,
                    FloatPred::Oge => x >= y,
                };
                (*d, Value::Int(t as i64))
            }
            Inst::Cast(d, op, from, to, a) => {
                let v = match op {
                    CastOp::ZExt => Value::Int(canon(*to, (int(a)? as u64 & mask(*from)) as i64)),
                    CastOp::Trunc => Value::Int(canon(*to, int(a)?)),
                    CastOp::SIToFP => Value::Float(round_float(*to, int(a)? as f64)),
                    CastOp::FPToSI => Value::Int(canon(*to, float(a)? as i64)),
                    CastOp::FPExt | CastOp::FPTrunc => Value::Float(round_float(*to, float(a)?)),
                };
                (*d, v)
            }
            Inst::SlotAddr(d, s) => (*d, Value::Ptr(Ptr::Slot { frame: fr.id, slot: *s })),
            Inst::GlobalAddr(d, g) => (*d, Value::Ptr(Ptr::Global(*g))),
            Inst::Load(d, ty, p) => {
                let p = ptr(p)?;
                if self.cell_type(p)? != *ty {
                    return Err(TrapKind::TypeError);
                }
                let v = *self.cell(p)?;
                (*d, v)
            }
            Inst::Store(v, ty, p) => {
                let (v, p) = (r(v), ptr(p)?);
                if self.cell_type(p)? != *ty {
                    return Err(TrapKind::TypeError);
                }
                *self.cell(p)? = v;
                return Ok(());
            }
            Inst::Print(v) => {
                let s = r(v).to_string();
                self.trace.push(s);
                return Ok(());
            }
            Inst::MayThrow(c, h) => {
                if int(c)? != 0 {
                    let h = *h;
                    self.leave_block()?;
                    self.jump(h);
                }
                return Ok(());
            }
            Inst::Call(dst, g, args) => {
                let args: Vec<Value> = args.iter().map(r).collect();
                return self.call(*g as usize, args, *dst);
            }
            Inst::ICall(dst, c, args) => {
                let addr = int(c)?;
                let vals: Vec<(Value, Type)> = args.iter().map(|(a, t)| (r(a), *t)).collect();
                return self.icall(addr, vals, *dst);
            }
            Inst::SetJmp(d, b) => {
                let key = ptr(b)?;
                if key == Ptr::Null {
                    return Err(TrapKind::NullDeref);
                }
                let jb = JumpBuf { frame: fr.id, depth, block: fr.block, ip: fr.ip, dst: *d };
                self.jumps.insert(key, jb);
                (*d, Value::Int(0))
            }
            Inst::LongJmp(b, v) => {
                let key = ptr(b)?;
                let val = int(v)?;
                let jb = self.jumps.get(&key).ok_or(TrapKind::BadLongjmp)?;
                if self.stack.get(jb.depth).map(|f| f.id) != Some(jb.frame) {
                    return Err(TrapKind::BadLongjmp);
                }
                let (depth, block, ip, dst) = (jb.depth, jb.block, jb.ip, jb.dst);
                self.stack.truncate(depth + 1);
                let fr = self.stack.last_mut().unwrap();
                fr.block = block;
                fr.ip = ip;
                fr.snapshot = None;
                fr.regs[dst as usize] = Value::Int(canon(Type::I32, if val == 0 { 1 } else { val }));
                return Ok(());
            }
        };
        self.stack.last_mut().unwrap().regs[dst as usize] = val;
        Ok(())
    }

    fn icall(&mut self, addr: i64, args: Vec<(Value, Type)>, dst: Option<(Reg, Type)>) -> Result<(), TrapKind> {
        let (base, ctrl) = match tag::decode(addr) {
            Some((base, ctrl)) => {
                if self.opts.checks {
                    self.violation(CheckKind::TaggedCallee, format!("icall through tagged value {addr:#x}"));
                }
                (base, Some(ctrl))
            }
            None => (addr, None),
        };
        if base < 0 || base % FUNCTION_ALIGN != 0 {
            return Err(TrapKind::BadICallTarget);
        }
        let fi = (base / FUNCTION_ALIGN) as usize;
        let f = self.p.funcs.get(fi).ok_or(TrapKind::BadICallTarget)?;
        let mut vals: Vec<(Value, Type)> = Vec::with_capacity(args.len() + 1);
        if let Some(c) = ctrl {
            if f.params.first().map(|p| p.1) != Some(Type::I1) {
                return Err(TrapKind::BadICallTarget);
            }
            vals.push((Value::Int(c as i64), Type::I1));
        }
        vals.extend(args);
        if vals.len() > f.params.len() && !f.variadic {
            return Err(TrapKind::TypeError);
        }
        let mut out = Vec::with_capacity(f.params.len());
        for (i, (_, pt)) in f.params.iter().enumerate() {
            out.push(match vals.get(i) {
                Some((v, from)) => coerce_from(*v, *from, *pt)?,
                None => Value::zero(*pt),
            });
        }
        if f.external {
            out.extend(vals.iter().skip(f.params.len()).map(|v| v.0));
        }
        if dst.is_some() && f.ret == Type::Void {
            return Err(TrapKind::TypeError);
        }
        self.call(fi, out, dst)
    }
}

/// Convenience wrapper: lower and run once.
pub fn run(m: &Module, entry: &str, args: &[Value], limits: Limits) -> Result<ExecResult, RunError> {
    Program::new(m)?.run(entry, args, limits)
}

/// Convenience wrapper: lower and run once with dynamic checks.
pub fn run_checked(
    m: &Module,
    entry: &str,
    args: &[Value],
    limits: Limits,
) -> Result<(ExecResult, Vec<CheckViolation>), RunError> {
    Program::new(m)?.run_checked(entry, args, limits)
}

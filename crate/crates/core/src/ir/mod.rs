//! The register-and-slot IR shared by every pass.
//!
//! Registers are single-assignment and named per function; mutable locals
//! live in named stack slots reached through `slot_addr` + `load`/`store`.
//! There are no phi nodes: values that merge across control flow go
//! through a slot.

mod parse;
mod print;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub use parse::{parse_module, parse_module_unchecked, ParseError};
pub use print::print_module;
pub use validate::{validate, validate_function, Violation, ViolationKind};

/// Every function occupies a 16-byte aligned abstract address.
pub const FUNCTION_ALIGN: i64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Type {
    Void,
    I1,
    I8,
    I16,
    I32,
    I64,
    F32,
    F64,
    Ptr,
}

impl Type {
    pub fn is_int(self) -> bool {
        matches!(self, Type::I1 | Type::I8 | Type::I16 | Type::I32 | Type::I64)
    }

    pub fn is_float(self) -> bool {
        matches!(self, Type::F32 | Type::F64)
    }

    /// Bit width for integer and float types, 0 otherwise.
    pub fn bits(self) -> u32 {
        match self {
            Type::I1 => 1,
            Type::I8 => 8,
            Type::I16 => 16,
            Type::I32 | Type::F32 => 32,
            Type::I64 | Type::F64 | Type::Ptr => 64,
            Type::Void => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Type::Void => "void",
            Type::I1 => "i1",
            Type::I8 => "i8",
            Type::I16 => "i16",
            Type::I32 => "i32",
            Type::I64 => "i64",
            Type::F32 => "f32",
            Type::F64 => "f64",
            Type::Ptr => "ptr",
        }
    }

    pub fn from_name(s: &str) -> Option<Type> {
        Some(match s {
            "void" => Type::Void,
            "i1" => Type::I1,
            "i8" => Type::I8,
            "i16" => Type::I16,
            "i32" => Type::I32,
            "i64" => Type::I64,
            "f32" => Type::F32,
            "f64" => Type::F64,
            "ptr" => Type::Ptr,
            _ => return None,
        })
    }

    /// The zero constant of this type (null for `ptr`).
    pub fn zero(self) -> Const {
        match self {
            t if t.is_float() => Const::Float(0.0),
            Type::Ptr => Const::Null,
            _ => Const::Int(0),
        }
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Const {
    Int(i64),
    Float(f64),
    Null,
}

impl Const {
    pub fn fits(self, ty: Type) -> bool {
        match self {
            Const::Int(_) => ty.is_int(),
            Const::Float(_) => ty.is_float(),
            Const::Null => ty == Type::Ptr,
        }
    }
}

impl fmt::Display for Const {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Const::Int(v) => write!(f, "{v}"),
            Const::Float(v) => write!(f, "{v:?}"),
            Const::Null => f.write_str("null"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    SDiv,
    SRem,
    And,
    Or,
    Xor,
    Shl,
    LShr,
    AShr,
    FAdd,
    FSub,
    FMul,
    FDiv,
}

impl BinOp {
    pub const ALL: [BinOp; 15] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::SDiv,
        BinOp::SRem,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::LShr,
        BinOp::AShr,
        BinOp::FAdd,
        BinOp::FSub,
        BinOp::FMul,
        BinOp::FDiv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::SDiv => "sdiv",
            BinOp::SRem => "srem",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::LShr => "lshr",
            BinOp::AShr => "ashr",
            BinOp::FAdd => "fadd",
            BinOp::FSub => "fsub",
            BinOp::FMul => "fmul",
            BinOp::FDiv => "fdiv",
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, BinOp::FAdd | BinOp::FSub | BinOp::FMul | BinOp::FDiv)
    }

    pub fn is_division(self) -> bool {
        matches!(self, BinOp::SDiv | BinOp::SRem | BinOp::FDiv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IntPred {
    Eq,
    Ne,
    Slt,
    Sle,
    Sgt,
    Sge,
}

impl IntPred {
    pub const ALL: [IntPred; 6] = [
        IntPred::Eq,
        IntPred::Ne,
        IntPred::Slt,
        IntPred::Sle,
        IntPred::Sgt,
        IntPred::Sge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IntPred::Eq => "eq",
            IntPred::Ne => "ne",
            IntPred::Slt => "slt",
            IntPred::Sle => "sle",
            IntPred::Sgt => "sgt",
            IntPred::Sge => "sge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FloatPred {
    Oeq,
    One,
    Olt,
    Ole,
    Ogt,
    Oge,
}

impl FloatPred {
    pub const ALL: [FloatPred; 6] = [
        FloatPred::Oeq,
        FloatPred::One,
        FloatPred::Olt,
        FloatPred::Ole,
        FloatPred::Ogt,
        FloatPred::Oge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FloatPred::Oeq => "oeq",
            FloatPred::One => "one",
            FloatPred::Olt => "olt",
            FloatPred::Ole => "ole",
            FloatPred::Ogt => "ogt",
            FloatPred::Oge => "oge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CastOp {
    ZExt,
    Trunc,
    SIToFP,
    FPToSI,
    FPExt,
    FPTrunc,
}

impl CastOp {
    pub const ALL: [CastOp; 6] = [
        CastOp::ZExt,
        CastOp::Trunc,
        CastOp::SIToFP,
        CastOp::FPToSI,
        CastOp::FPExt,
        CastOp::FPTrunc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CastOp::ZExt => "zext",
            CastOp::Trunc => "trunc",
            CastOp::SIToFP => "sitofp",
            CastOp::FPToSI => "fptosi",
            CastOp::FPExt => "fpext",
            CastOp::FPTrunc => "fptrunc",
        }
    }
}

/// Operation performed by a non-terminator instruction.
///
/// Operands are register names; immediates only enter through `Const`.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Const(Const),
    Bin(BinOp, String, String),
    Icmp(IntPred, String, String),
    Fcmp(FloatPred, String, String),
    Cast(CastOp, String),
    SlotAddr(String),
    GlobalAddr(String),
    Load(String),
    /// `store value, ptr`
    Store(String, String),
    Call(String, Vec<String>),
    ICall(String, Vec<String>),
    AddrOfFunc(String),
    Print(String),
    SetJmp(String),
    /// `longjmp buf, value`
    LongJmp(String, String),
    /// `may_throw cond, handler`: transfers to `handler` when `cond` is true.
    MayThrow(String, String),
}

impl Op {
    /// Stable opcode name, used by the printer and the opcode histograms.
    pub fn opcode(&self) -> &'static str {
        match self {
            Op::Const(_) => "const",
            Op::Bin(b, ..) => b.name(),
            Op::Icmp(..) => "icmp",
            Op::Fcmp(..) => "fcmp",
            Op::Cast(c, _) => c.name(),
            Op::SlotAddr(_) => "slot_addr",
            Op::GlobalAddr(_) => "global_addr",
            Op::Load(_) => "load",
            Op::Store(..) => "store",
            Op::Call(..) => "call",
            Op::ICall(..) => "icall",
            Op::AddrOfFunc(_) => "addr_of_func",
            Op::Print(_) => "print",
            Op::SetJmp(_) => "setjmp",
            Op::LongJmp(..) => "longjmp",
            Op::MayThrow(..) => "may_throw",
        }
    }

    /// Registers read by this operation, in operand order.
    pub fn uses(&self) -> Vec<&str> {
        match self {
            Op::Const(_) | Op::SlotAddr(_) | Op::GlobalAddr(_) | Op::AddrOfFunc(_) => vec![],
            Op::Bin(_, a, b) | Op::Icmp(_, a, b) | Op::Fcmp(_, a, b) => vec![a, b],
            Op::Cast(_, a) | Op::Load(a) | Op::Print(a) | Op::SetJmp(a) => vec![a],
            Op::Store(v, p) => vec![v, p],
            Op::LongJmp(b, v) => vec![b, v],
            Op::MayThrow(c, _) => vec![c],
            Op::Call(_, args) => args.iter().map(String::as_str).collect(),
            Op::ICall(c, args) => std::iter::once(c.as_str())
                .chain(args.iter().map(String::as_str))
                .collect(),
        }
    }

    pub fn uses_mut(&mut self) -> Vec<&mut String> {
        match self {
            Op::Const(_) | Op::SlotAddr(_) | Op::GlobalAddr(_) | Op::AddrOfFunc(_) => vec![],
            Op::Bin(_, a, b) | Op::Icmp(_, a, b) | Op::Fcmp(_, a, b) => vec![a, b],
            Op::Cast(_, a) | Op::Load(a) | Op::Print(a) | Op::SetJmp(a) => vec![a],
            Op::Store(v, p) => vec![v, p],
            Op::LongJmp(b, v) => vec![b, v],
            Op::MayThrow(c, _) => vec![c],
            Op::Call(_, args) => args.iter_mut().collect(),
            Op::ICall(c, args) => std::iter::once(c).chain(args.iter_mut()).collect(),
        }
    }

    pub fn is_call(&self) -> bool {
        matches!(self, Op::Call(..) | Op::ICall(..))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub result: Option<(String, Type)>,
    pub op: Op,
}

impl Instruction {
    pub fn new(op: Op) -> Self {
        Instruction { result: None, op }
    }

    pub fn with_result(name: impl Into<String>, ty: Type, op: Op) -> Self {
        Instruction { result: Some((name.into(), ty)), op }
    }

    pub fn def(&self) -> Option<&str> {
        self.result.as_ref().map(|(r, _)| r.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Terminator {
    Br(String),
    CondBr(String, String, String),
    Switch {
        value: String,
        cases: Vec<(i64, String)>,
        default: String,
    },
    Ret(Option<String>),
    Unreachable,
}

impl Terminator {
    pub fn opcode(&self) -> &'static str {
        match self {
            Terminator::Br(_) => "br",
            Terminator::CondBr(..) => "condbr",
            Terminator::Switch { .. } => "switch",
            Terminator::Ret(_) => "ret",
            Terminator::Unreachable => "unreachable",
        }
    }

    /// Successor labels in operand order (duplicates kept).
    pub fn targets(&self) -> Vec<&str> {
        match self {
            Terminator::Br(t) => vec![t],
            Terminator::CondBr(_, a, b) => vec![a, b],
            Terminator::Switch { cases, default, .. } => cases
                .iter()
                .map(|(_, l)| l.as_str())
                .chain(std::iter::once(default.as_str()))
                .collect(),
            Terminator::Ret(_) | Terminator::Unreachable => vec![],
        }
    }

    pub fn targets_mut(&mut self) -> Vec<&mut String> {
        match self {
            Terminator::Br(t) => vec![t],
            Terminator::CondBr(_, a, b) => vec![a, b],
            Terminator::Switch { cases, default, .. } => cases
                .iter_mut()
                .map(|(_, l)| l)
                .chain(std::iter::once(default))
                .collect(),
            Terminator::Ret(_) | Terminator::Unreachable => vec![],
        }
    }

    pub fn uses(&self) -> Vec<&str> {
        match self {
            Terminator::CondBr(c, ..) => vec![c],
            Terminator::Switch { value, .. } => vec![value],
            Terminator::Ret(Some(v)) => vec![v],
            _ => vec![],
        }
    }

    pub fn uses_mut(&mut self) -> Vec<&mut String> {
        match self {
            Terminator::CondBr(c, ..) => vec![c],
            Terminator::Switch { value, .. } => vec![value],
            Terminator::Ret(Some(v)) => vec![v],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub label: String,
    pub instructions: Vec<Instruction>,
    pub terminator: Terminator,
    /// Set on blocks produced by deep fusion: they run on both ctrl paths.
    pub shared: bool,
}

impl Block {
    pub fn new(label: impl Into<String>, instructions: Vec<Instruction>, terminator: Terminator) -> Self {
        Block { label: label.into(), instructions, terminator, shared: false }
    }

    /// Successor labels, deduplicated, in first-occurrence order.
    /// Includes `may_throw` handlers.
    pub fn successors(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for inst in &self.instructions {
            if let Op::MayThrow(_, h) = &inst.op {
                if !out.contains(&h.as_str()) {
                    out.push(h);
                }
            }
        }
        for t in self.terminator.targets() {
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out
    }

    /// Rewrites every reference to block label `from` (terminator targets and
    /// exception handlers) into `to`.
    pub fn retarget(&mut self, from: &str, to: &str) {
        for t in self.terminator.targets_mut() {
            if t == from {
                *t = to.to_string();
            }
        }
        for inst in &mut self.instructions {
            if let Op::MayThrow(_, h) = &mut inst.op {
                if h == from {
                    *h = to.to_string();
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub ty: Type,
}

impl Param {
    pub fn new(name: impl Into<String>, ty: Type) -> Self {
        Param { name: name.into(), ty }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    pub ty: Type,
}

impl Slot {
    pub fn new(name: impl Into<String>, ty: Type) -> Self {
        Slot { name: name.into(), ty }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    AddressTaken,
    External,
    ContainsSetjmp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Function {
    pub name: String,
    pub params: Vec<Param>,
    pub ret: Type,
    pub variadic: bool,
    pub slots: Vec<Slot>,
    /// First block is the entry. Empty for external declarations.
    pub blocks: Vec<Block>,
    pub external: bool,
    /// Number of numbered exits when this function was produced by outlining
    /// a multi-exit region; each return yields a code in `0..exits`.
    pub exits: Option<u32>,
}

impl Function {
    pub fn new(name: impl Into<String>, params: Vec<Param>, ret: Type) -> Self {
        Function {
            name: name.into(),
            params,
            ret,
            variadic: false,
            slots: Vec::new(),
            blocks: Vec::new(),
            external: false,
            exits: None,
        }
    }

    pub fn declaration(name: impl Into<String>, params: Vec<Param>, ret: Type) -> Self {
        Function { external: true, ..Function::new(name, params, ret) }
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn block(&self, label: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn block_mut(&mut self, label: &str) -> Option<&mut Block> {
        self.blocks.iter_mut().find(|b| b.label == label)
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn contains_setjmp(&self) -> bool {
        self.blocks
            .iter()
            .flat_map(|b| &b.instructions)
            .any(|i| matches!(i.op, Op::SetJmp(_)))
    }

    /// Register name → type, covering params and every instruction result.
    pub fn register_types(&self) -> BTreeMap<&str, Type> {
        let mut out: BTreeMap<&str, Type> =
            self.params.iter().map(|p| (p.name.as_str(), p.ty)).collect();
        for inst in self.blocks.iter().flat_map(|b| &b.instructions) {
            if let Some((r, t)) = &inst.result {
                out.insert(r, *t);
            }
        }
        out
    }

    /// Every register, slot and label name used by the function.
    pub fn local_names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        out.extend(self.params.iter().map(|p| p.name.clone()));
        out.extend(self.slots.iter().map(|s| s.name.clone()));
        for b in &self.blocks {
            out.insert(b.label.clone());
            for i in &b.instructions {
                if let Some(r) = i.def() {
                    out.insert(r.to_string());
                }
            }
        }
        out
    }

    /// Direct callees (deduplicated, sorted).
    pub fn direct_callees(&self) -> BTreeSet<&str> {
        self.blocks
            .iter()
            .flat_map(|b| &b.instructions)
            .filter_map(|i| match &i.op {
                Op::Call(f, _) => Some(f.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len() + 1).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Global {
    pub name: String,
    pub ty: Type,
    pub init: Const,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Module {
    pub name: String,
    pub globals: Vec<Global>,
    pub functions: Vec<Function>,
    pub exported: BTreeSet<String>,
    /// Functions whose address is known to leave the module.
    pub visible: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown function `@{0}`")]
pub struct UnknownFunction(pub String);

impl Module {
    pub fn new(name: impl Into<String>) -> Self {
        Module { name: name.into(), ..Default::default() }
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&Global> {
        self.globals.iter().find(|g| g.name == name)
    }

    /// Abstract address of a function: its ordinal times 16, so the low
    /// four bits are always free for tagging.
    pub fn function_address(&self, name: &str) -> Result<i64, UnknownFunction> {
        self.function_index(name)
            .map(|i| i as i64 * FUNCTION_ALIGN)
            .ok_or_else(|| UnknownFunction(name.to_string()))
    }

    /// Inverse of [`Module::function_address`] for untagged addresses.
    pub fn function_at(&self, addr: i64) -> Option<&Function> {
        if addr < 0 || addr % FUNCTION_ALIGN != 0 {
            return None;
        }
        self.functions.get((addr / FUNCTION_ALIGN) as usize)
    }

    pub fn address_taken(&self) -> BTreeSet<&str> {
        self.functions
            .iter()
            .flat_map(|f| &f.blocks)
            .flat_map(|b| &b.instructions)
            .filter_map(|i| match &i.op {
                Op::AddrOfFunc(f) => Some(f.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn attributes(&self, name: &str) -> Result<BTreeSet<Attribute>, UnknownFunction> {
        let f = self.function(name).ok_or_else(|| UnknownFunction(name.to_string()))?;
        let mut out = BTreeSet::new();
        if f.external {
            out.insert(Attribute::External);
        }
        if f.contains_setjmp() {
            out.insert(Attribute::ContainsSetjmp);
        }
        if self.address_taken().contains(name) {
            out.insert(Attribute::AddressTaken);
        }
        Ok(out)
    }

    /// A fresh function name derived from `base`.
    pub fn fresh_function_name(&self, base: &str) -> String {
        if self.function(base).is_none() {
            return base.to_string();
        }
        (1..)
            .map(|i| format!("{base}.{i}"))
            .find(|n| self.function(n).is_none())
            .unwrap()
    }

    /// Globals that are only ever read: every `global_addr` of them feeds
    /// loads exclusively.
    pub fn read_only_globals(&self) -> BTreeSet<&str> {
        let mut written: BTreeSet<&str> = BTreeSet::new();
        for f in &self.functions {
            let mut addr_regs: BTreeMap<&str, &str> = BTreeMap::new();
            for i in f.blocks.iter().flat_map(|b| &b.instructions) {
                if let (Op::GlobalAddr(g), Some(r)) = (&i.op, i.def()) {
                    addr_regs.insert(r, g);
                }
            }
            for b in &f.blocks {
                for i in &b.instructions {
                    let load_ptr = match &i.op {
                        Op::Load(p) => Some(p.as_str()),
                        _ => None,
                    };
                    for u in i.op.uses() {
                        if let Some(g) = addr_regs.get(u) {
                            if Some(u) != load_ptr {
                                written.insert(g);
                            }
                        }
                    }
                }
                for u in b.terminator.uses() {
                    if let Some(g) = addr_regs.get(u) {
                        written.insert(g);
                    }
                }
            }
        }
        self.globals
            .iter()
            .map(|g| g.name.as_str())
            .filter(|g| !written.contains(g))
            .collect()
    }
}

/// Generates register/label names that do not collide with a function's
/// existing names.
#[derive(Debug, Clone)]
pub struct NameGen {
    taken: BTreeSet<String>,
}

impl NameGen {
    pub fn for_function(f: &Function) -> Self {
        NameGen { taken: f.local_names() }
    }

    pub fn reserve(&mut self, name: impl Into<String>) {
        self.taken.insert(name.into());
    }

    pub fn fresh(&mut self, base: &str) -> String {
        let name = if !self.taken.contains(base) {
            base.to_string()
        } else {
            (1..).map(|i| format!("{base}.{i}")).find(|n| !self.taken.contains(n)).unwrap()
        };
        self.taken.insert(name.clone());
        name
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn function_addresses_are_aligned_ordinals() {
        let m = parse_module(
            "module m
             func @a() -> void { e: ret }
             func @b() -> void { e: ret }
             func @c() -> void { e: ret }",
        )
        .unwrap();
        assert_eq!(m.function_address("a").unwrap(), 0);
        assert_eq!(m.function_address("c").unwrap(), 32);
        for f in &m.functions {
            assert_eq!(m.function_address(&f.name).unwrap() & 0xF, 0);
        }
        assert_eq!(m.function_address("zz"), Err(UnknownFunction("zz".into())));
        assert_eq!(m.function_at(16).unwrap().name, "b");
        assert!(m.function_at(18).is_none());
    }

    #[test]
    fn name_gen_avoids_collisions() {
        let f = parse_module("module m func @f(%x: i64) -> i64 { x.1: ret %x }").unwrap();
        let mut g = NameGen::for_function(&f.functions[0]);
        assert_eq!(g.fresh("x"), "x.2");
        assert_eq!(g.fresh("y"), "y");
        assert_eq!(g.fresh("y"), "y.1");
    }
}

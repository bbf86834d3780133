use std::collections::{BTreeSet, HashMap};

use super::*;
use crate::analysis::{Cfg, DomTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationKind {
    Duplicate,
    Unresolved,
    Type,
    Undefined,
    Dominance,
    Structure,
}

impl ViolationKind {
    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::Duplicate => "duplicate-name",
            ViolationKind::Unresolved => "unresolved-target",
            ViolationKind::Type => "type",
            ViolationKind::Undefined => "undefined-register",
            ViolationKind::Dominance => "dominance",
            ViolationKind::Structure => "structure",
        }
    }
}

/// One broken invariant, located as precisely as possible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub function: Option<String>,
    pub block: Option<String>,
    /// Instruction index within the block; the terminator has index
    /// `instructions.len()`.
    pub instruction: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.kind.name())?;
        if let Some(func) = &self.function {
            write!(f, " @{func}")?;
        }
        if let Some(b) = &self.block {
            write!(f, " {b}")?;
        }
        if let Some(i) = self.instruction {
            write!(f, " #{i}")?;
        }
        write!(f, ": {}", self.message)
    }
}

struct Ctx<'a> {
    m: &'a Module,
    out: Vec<Violation>,
}

impl Ctx<'_> {
    fn push(&mut self, kind: ViolationKind, f: Option<&str>, b: Option<&str>, i: Option<usize>, msg: String) {
        self.out.push(Violation {
            kind,
            function: f.map(str::to_string),
            block: b.map(str::to_string),
            instruction: i,
            message: msg,
        });
    }
}

/// Checks every structural and typing invariant of the IR. Returns an empty
/// list iff the module is valid.
pub fn validate(m: &Module) -> Vec<Violation> {
    let mut cx = Ctx { m, out: Vec::new() };
    let mut seen = BTreeSet::new();
    for g in &m.globals {
        if !seen.insert(g.name.as_str()) {
            cx.push(ViolationKind::Duplicate, None, None, None, format!("global `@{}` defined twice", g.name));
        }
        if g.ty == Type::Void {
            cx.push(ViolationKind::Type, None, None, None, format!("global `@{}` has type void", g.name));
        } else if !g.init.fits(g.ty) {
            cx.push(ViolationKind::Type, None, None, None, format!("initializer of `@{}` does not fit {}", g.name, g.ty));
        }
    }
    let mut fnames = BTreeSet::new();
    for f in &m.functions {
        if !fnames.insert(f.name.as_str()) {
            cx.push(ViolationKind::Duplicate, Some(&f.name), None, None, "function defined twice".into());
        }
    }
    for (set, what) in [(&m.exported, "export"), (&m.visible, "visible")] {
        for n in set {
            if !fnames.contains(n.as_str()) {
                cx.push(ViolationKind::Unresolved, Some(n), None, None, format!("`{what}` names an unknown function"));
            }
        }
    }
    for f in &m.functions {
        check_function(&mut cx, f);
    }
    cx.out
}

/// Checks a single function against the declarations of `m`. `f` need not
/// be a member of `m`.
pub fn validate_function(m: &Module, f: &Function) -> Vec<Violation> {
    let mut cx = Ctx { m, out: Vec::new() };
    check_function(&mut cx, f);
    cx.out
}

fn check_function(cx: &mut Ctx, f: &Function) {
    let fname = Some(f.name.as_str());
    use ViolationKind as K;
    let mut locals = BTreeSet::new();
    for p in &f.params {
        if p.ty == Type::Void {
            cx.push(K::Type, fname, None, None, format!("parameter `%{}` has type void", p.name));
        }
        if !locals.insert(p.name.as_str()) {
            cx.push(K::Duplicate, fname, None, None, format!("parameter `%{}` declared twice", p.name));
        }
    }
    if f.external {
        if !f.blocks.is_empty() || !f.slots.is_empty() {
            cx.push(K::Structure, fname, None, None, "external function has a body".into());
        }
        return;
    }
    if f.blocks.is_empty() {
        cx.push(K::Structure, fname, None, None, "function has no blocks".into());
        return;
    }
    if let Some(k) = f.exits {
        if k == 0 || (k >= 2 && f.ret != Type::I32) {
            cx.push(K::Type, fname, None, None, format!("`exits {k}` on a function returning {}", f.ret));
        }
    }
    let mut slots = BTreeSet::new();
    for s in &f.slots {
        if s.ty == Type::Void {
            cx.push(K::Type, fname, None, None, format!("slot `%{}` has type void", s.name));
        }
        if !slots.insert(s.name.as_str()) {
            cx.push(K::Duplicate, fname, None, None, format!("slot `%{}` declared twice", s.name));
        }
    }
    let mut labels = BTreeSet::new();
    for b in &f.blocks {
        if !labels.insert(b.label.as_str()) {
            cx.push(K::Duplicate, fname, Some(&b.label), None, "label defined twice".into());
        }
    }

    // register definitions: name -> (type, block, index)
    let mut defs: HashMap<&str, (Type, Option<(usize, usize)>)> =
        f.params.iter().map(|p| (p.name.as_str(), (p.ty, None))).collect();
    for (bi, b) in f.blocks.iter().enumerate() {
        for (ii, inst) in b.instructions.iter().enumerate() {
            if let Some((r, t)) = &inst.result {
                if *t == Type::Void {
                    cx.push(K::Type, fname, Some(&b.label), Some(ii), format!("register `%{r}` has type void"));
                }
                if defs.insert(r, (*t, Some((bi, ii)))).is_some() {
                    cx.push(K::Duplicate, fname, Some(&b.label), Some(ii), format!("register `%{r}` defined twice"));
                }
            }
        }
    }

    let cfg = Cfg::new(f);
    let dt = DomTree::new(&cfg);
    if !cfg.preds[0].is_empty() {
        cx.push(K::Structure, fname, Some(&f.blocks[0].label), None, "entry block has predecessors".into());
    }

    for (bi, b) in f.blocks.iter().enumerate() {
        let bl = Some(b.label.as_str());
        // operand lookup with definedness and dominance checks
        let ty_of = |cx: &mut Ctx, r: &str, at: usize| -> Option<Type> {
            let Some(&(t, site)) = defs.get(r) else {
                cx.push(K::Undefined, fname, bl, Some(at), format!("use of undefined register `%{r}`"));
                return None;
            };
            if let Some((db, di)) = site {
                let ok = if db == bi { di < at } else { !cfg.reachable(bi) || dt.dominates(db, bi) };
                if !ok {
                    cx.push(K::Dominance, fname, bl, Some(at), format!("definition of `%{r}` does not dominate this use"));
                }
            }
            Some(t)
        };
        let n = b.instructions.len();
        for (ii, inst) in b.instructions.iter().enumerate() {
            let err = |cx: &mut Ctx, kind: K, msg: String| cx.push(kind, fname, bl, Some(ii), msg);
            let uses: Vec<Option<Type>> = inst.op.uses().iter().map(|u| ty_of(cx, u, ii)).collect();
            let rty = inst.result.as_ref().map(|(_, t)| *t);
            let need_result = |cx: &mut Ctx, want: Option<Type>| {
                match (rty, want) {
                    (None, _) => cx.push(K::Structure, fname, bl, Some(ii), format!("`{}` needs a result", inst.op.opcode())),
                    (Some(t), Some(w)) if t != w => {
                        cx.push(K::Type, fname, bl, Some(ii), format!("`{}` produces {w}, not {t}", inst.op.opcode()))
                    }
                    _ => {}
                }
            };
            let no_result = |cx: &mut Ctx| {
                if rty.is_some() {
                    cx.push(K::Structure, fname, bl, Some(ii), format!("`{}` has no result", inst.op.opcode()));
                }
            };
            match &inst.op {
                Op::Const(c) => {
                    need_result(cx, None);
                    if let Some(t) = rty {
                        if !c.fits(t) {
                            err(cx, K::Type, format!("constant {c} does not fit {t}"));
                        }
                    }
                }
                Op::Bin(op, ..) => {
                    need_result(cx, None);
                    if let (Some(a), Some(b), Some(t)) = (uses[0], uses[1], rty) {
                        let kind_ok = if op.is_float() { t.is_float() } else { t.is_int() };
                        if a != t || b != t || !kind_ok {
                            err(cx, K::Type, format!("`{}` on {a}, {b} -> {t}", op.name()));
                        }
                    }
                }
                Op::Icmp(..) | Op::Fcmp(..) => {
                    need_result(cx, Some(Type::I1));
                    let float = matches!(inst.op, Op::Fcmp(..));
                    if let (Some(a), Some(b)) = (uses[0], uses[1]) {
                        let kind_ok = if float { a.is_float() } else { a.is_int() };
                        if a != b || !kind_ok {
                            err(cx, K::Type, format!("`{}` on {a}, {b}", inst.op.opcode()));
                        }
                    }
                }
                Op::Cast(c, _) => {
                    need_result(cx, None);
                    if let (Some(a), Some(t)) = (uses[0], rty) {
                        let ok = match c {
                            CastOp::ZExt => a.is_int() && t.is_int() && a.bits() < t.bits(),
                            CastOp::Trunc => a.is_int() && t.is_int() && a.bits() > t.bits(),
                            CastOp::SIToFP => a.is_int() && t.is_float(),
                            CastOp::FPToSI => a.is_float() && t.is_int(),
                            CastOp::FPExt => a == Type::F32 && t == Type::F64,
                            CastOp::FPTrunc => a == Type::F64 && t == Type::F32,
                        };
                        if !ok {
                            err(cx, K::Type, format!("`{}` from {a} to {t}", c.name()));
                        }
                    }
                }
                Op::SlotAddr(s) => {
                    need_result(cx, Some(Type::Ptr));
                    if f.slot(s).is_none() {
                        err(cx, K::Unresolved, format!("unknown slot `%{s}`"));
                    }
                }
                Op::GlobalAddr(g) => {
                    need_result(cx, Some(Type::Ptr));
                    if cx.m.global(g).is_none() {
                        err(cx, K::Unresolved, format!("unknown global `@{g}`"));
                    }
                }
                Op::Load(_) => {
                    need_result(cx, None);
                    if uses[0].is_some_and(|t| t != Type::Ptr) {
                        err(cx, K::Type, "load address is not a ptr".into());
                    }
                }
                Op::Store(..) => {
                    no_result(cx);
                    if uses[1].is_some_and(|t| t != Type::Ptr) {
                        err(cx, K::Type, "store address is not a ptr".into());
                    }
                }
                Op::Call(callee, _) => match cx.m.function(callee) {
                    None => err(cx, K::Unresolved, format!("call to undeclared function `@{callee}`")),
                    Some(g) => {
                        let arity_ok =
                            if g.variadic { uses.len() >= g.params.len() } else { uses.len() == g.params.len() };
                        if !arity_ok {
                            err(cx, K::Type, format!("`@{callee}` takes {} arguments, got {}", g.params.len(), uses.len()));
                        }
                        for (k, (u, p)) in uses.iter().zip(&g.params).enumerate() {
                            if u.is_some_and(|t| t != p.ty) {
                                err(cx, K::Type, format!("argument {k} of `@{callee}` must be {}", p.ty));
                            }
                        }
                        match rty {
                            Some(t) if t != g.ret => err(cx, K::Type, format!("`@{callee}` returns {}, not {t}", g.ret)),
                            _ => {}
                        }
                    }
                },
                Op::ICall(..) => {
                    if uses[0].is_some_and(|t| t != Type::I64) {
                        err(cx, K::Type, "icall callee must be an i64 function address".into());
                    }
                }
                Op::AddrOfFunc(g) => {
                    need_result(cx, Some(Type::I64));
                    if cx.m.function(g).is_none() {
                        err(cx, K::Unresolved, format!("address of undeclared function `@{g}`"));
                    }
                }
                Op::Print(_) => no_result(cx),
                Op::SetJmp(_) => {
                    need_result(cx, Some(Type::I32));
                    if uses[0].is_some_and(|t| t != Type::Ptr) {
                        err(cx, K::Type, "setjmp buffer is not a ptr".into());
                    }
                }
                Op::LongJmp(..) => {
                    no_result(cx);
                    if uses[0].is_some_and(|t| t != Type::Ptr) || uses[1].is_some_and(|t| t != Type::I32) {
                        err(cx, K::Type, "longjmp takes (ptr, i32)".into());
                    }
                }
                Op::MayThrow(_, h) => {
                    no_result(cx);
                    if uses[0].is_some_and(|t| t != Type::I1) {
                        err(cx, K::Type, "may_throw condition must be i1".into());
                    }
                    if f.block(h).is_none() {
                        err(cx, K::Unresolved, format!("unknown handler block `{h}`"));
                    } else if h == &f.blocks[0].label {
                        err(cx, K::Structure, "handler cannot be the entry block".into());
                    }
                    if ii + 1 != n {
                        err(cx, K::Structure, "may_throw must be the last instruction before the terminator".into());
                    }
                }
            }
        }

        let term = &b.terminator;
        let tys: Vec<Option<Type>> = term.uses().iter().map(|u| ty_of(cx, u, n)).collect();
        for t in term.targets() {
            if f.block(t).is_none() {
                cx.push(K::Unresolved, fname, bl, Some(n), format!("branch to unknown label `{t}`"));
            }
        }
        match term {
            Terminator::CondBr(..) => {
                if tys[0].is_some_and(|t| t != Type::I1) {
                    cx.push(K::Type, fname, bl, Some(n), format!("condbr condition must be i1, not {}", tys[0].unwrap()));
                }
            }
            Terminator::Switch { cases, .. } => {
                if tys[0].is_some_and(|t| !t.is_int()) {
                    cx.push(K::Type, fname, bl, Some(n), "switch scrutinee must be an integer".into());
                }
                let mut keys = BTreeSet::new();
                for (k, _) in cases {
                    if !keys.insert(*k) {
                        cx.push(K::Duplicate, fname, bl, Some(n), format!("switch case {k} repeated"));
                    }
                }
            }
            Terminator::Ret(v) => match (v, f.ret) {
                (None, Type::Void) => {}
                (None, t) => cx.push(K::Type, fname, bl, Some(n), format!("missing return value of type {t}")),
                (Some(_), Type::Void) => cx.push(K::Type, fname, bl, Some(n), "void function returns a value".into()),
                (Some(_), t) => {
                    if tys[0].is_some_and(|u| u != t) {
                        cx.push(K::Type, fname, bl, Some(n), format!("returns {}, expected {t}", tys[0].unwrap()));
                    }
                }
            },
            Terminator::Br(_) | Terminator::Unreachable => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn violations(src: &str) -> Vec<Violation> {
        validate(&parse::parse_module_unchecked(src).unwrap())
    }

    #[test]
    fn valid_module_has_no_violations() {
        assert!(violations("module m func @f(%x: i64) -> i64 { e: ret %x }").is_empty());
    }

    #[test]
    fn use_not_dominated_by_definition() {
        let v = violations(
            "module m func @f(%c: i1) -> i64 {
               e: condbr %c, a, j
               a: %x = const i64 1
                  br j
               j: ret %x }",
        );
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Dominance);
        assert_eq!(v[0].block.as_deref(), Some("j"));
    }

    #[test]
    fn call_to_undeclared_function() {
        let v = violations("module m func @f() -> void { e: call @nope() ret }");
        assert_eq!(v[0].kind, ViolationKind::Unresolved);
        assert_eq!(v[0].function.as_deref(), Some("f"));
        assert_eq!(v[0].instruction, Some(0));
    }

    #[test]
    fn may_throw_placement() {
        let v = violations(
            "module m func @f(%c: i1) -> void {
               e: may_throw %c, h
                  print %c
                  ret
               h: ret }",
        );
        assert!(v.iter().any(|x| x.kind == ViolationKind::Structure));
    }

    #[test]
    fn entry_with_predecessor() {
        let v = violations("module m func @f() -> void { e: br e }");
        assert!(v.iter().any(|x| x.kind == ViolationKind::Structure));
    }
}

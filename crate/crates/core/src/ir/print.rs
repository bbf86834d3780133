use std::fmt::Write;

use super::*;

/// Renders a module in the canonical text form accepted by
/// [`parse_module`].
pub fn print_module(m: &Module) -> String {
    let mut out = String::new();
    writeln!(out, "module {}", m.name).unwrap();
    if !m.globals.is_empty() {
        out.push('\n');
        for g in &m.globals {
            writeln!(out, "global @{}: {} = {}", g.name, g.ty, g.init).unwrap();
        }
    }
    if !m.exported.is_empty() || !m.visible.is_empty() {
        out.push('\n');
        for e in &m.exported {
            writeln!(out, "export @{e}").unwrap();
        }
        for v in &m.visible {
            writeln!(out, "visible @{v}").unwrap();
        }
    }
    for f in &m.functions {
        out.push('\n');
        print_function(&mut out, f);
    }
    out
}

fn print_function(out: &mut String, f: &Function) {
    if f.external {
        let mut params: Vec<String> = f.params.iter().map(|p| p.ty.to_string()).collect();
        if f.variadic {
            params.push("...".into());
        }
        writeln!(out, "declare @{}({}) -> {}", f.name, params.join(", "), f.ret).unwrap();
        return;
    }
    let mut params: Vec<String> = f.params.iter().map(|p| format!("%{}: {}", p.name, p.ty)).collect();
    if f.variadic {
        params.push("...".into());
    }
    write!(out, "func @{}({}) -> {}", f.name, params.join(", "), f.ret).unwrap();
    if let Some(k) = f.exits {
        write!(out, " exits {k}").unwrap();
    }
    out.push_str(" {\n");
    for s in &f.slots {
        writeln!(out, "  slot %{}: {}", s.name, s.ty).unwrap();
    }
    let types = f.register_types();
    let ty_of = |r: &str| types.get(r).copied().unwrap_or(Type::I64);
    for b in &f.blocks {
        if b.shared {
            writeln!(out, "{}: [shared]", b.label).unwrap();
        } else {
            writeln!(out, "{}:", b.label).unwrap();
        }
        for i in &b.instructions {
            out.push_str("  ");
            print_instruction(out, i, &ty_of);
            out.push('\n');
        }
        out.push_str("  ");
        print_terminator(out, &b.terminator);
        out.push('\n');
    }
    out.push_str("}\n");
}

fn args(a: &[String]) -> String {
    a.iter().map(|r| format!("%{r}")).collect::<Vec<_>>().join(", ")
}

fn print_instruction(out: &mut String, i: &Instruction, ty_of: &dyn Fn(&str) -> Type) {
    if let Some((r, _)) = &i.result {
        write!(out, "%{r} = ").unwrap();
    }
    let rty = i.result.as_ref().map(|(_, t)| *t);
    match &i.op {
        Op::Const(c) => write!(out, "const {} {c}", rty.unwrap_or(Type::I64)),
        Op::Bin(b, x, y) => write!(out, "{} {} %{x}, %{y}", b.name(), rty.unwrap_or_else(|| ty_of(x))),
        Op::Icmp(p, x, y) => write!(out, "icmp {} {} %{x}, %{y}", p.name(), ty_of(x)),
        Op::Fcmp(p, x, y) => write!(out, "fcmp {} {} %{x}, %{y}", p.name(), ty_of(x)),
        Op::Cast(c, x) => write!(out, "{} {} %{x} to {}", c.name(), ty_of(x), rty.unwrap_or(Type::I64)),
        Op::SlotAddr(s) => write!(out, "slot_addr %{s}"),
        Op::GlobalAddr(g) => write!(out, "global_addr @{g}"),
        Op::Load(p) => write!(out, "load {} %{p}", rty.unwrap_or(Type::I64)),
        Op::Store(v, p) => write!(out, "store %{v}, %{p}"),
        Op::Call(f, a) => match rty {
            Some(t) => write!(out, "call {t} @{f}({})", args(a)),
            None => write!(out, "call @{f}({})", args(a)),
        },
        Op::ICall(c, a) => match rty {
            Some(t) => write!(out, "icall {t} %{c}({})", args(a)),
            None => write!(out, "icall %{c}({})", args(a)),
        },
        Op::AddrOfFunc(f) => write!(out, "addr_of_func @{f}"),
        Op::Print(v) => write!(out, "print %{v}"),
        Op::SetJmp(b) => write!(out, "setjmp %{b}"),
        Op::LongJmp(b, v) => write!(out, "longjmp %{b}, %{v}"),
        Op::MayThrow(c, h) => write!(out, "may_throw %{c}, {h}"),
    }
    .unwrap();
}

fn print_terminator(out: &mut String, t: &Terminator) {
    match t {
        Terminator::Br(l) => write!(out, "br {l}"),
        Terminator::CondBr(c, a, b) => write!(out, "condbr %{c}, {a}, {b}"),
        Terminator::Switch { value, cases, default } => {
            let cs: Vec<String> = cases.iter().map(|(k, l)| format!("{k} -> {l}")).collect();
            write!(out, "switch %{value}, [{}], default {default}", cs.join(", "))
        }
        Terminator::Ret(Some(v)) => write!(out, "ret %{v}"),
        Terminator::Ret(None) => write!(out, "ret"),
        Terminator::Unreachable => write!(out, "unreachable"),
    }
    .unwrap();
}

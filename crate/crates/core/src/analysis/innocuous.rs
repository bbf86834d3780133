use std::collections::{BTreeSet, HashMap};

use crate::ir::{BinOp, Const, Function, Module, Op, Type};

/// Blocks whose execution cannot change global memory state and cannot trap.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InnocuousSet {
    pub blocks: BTreeSet<String>,
}

impl InnocuousSet {
    pub fn contains(&self, label: &str) -> bool {
        self.blocks.contains(label)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Conservative classification: calls of any kind disqualify a block, as do
/// output, non-local control transfer and any access that is not to one of
/// the function's own slots (or a read of a never-written global).
pub fn innocuous_blocks(m: &Module, f: &Function) -> InnocuousSet {
    let read_only = m.read_only_globals();
    let mut defs: HashMap<&str, &Op> = HashMap::new();
    for i in f.blocks.iter().flat_map(|b| &b.instructions) {
        if let Some(r) = i.def() {
            defs.insert(r, &i.op);
        }
    }
    let own_slot = |p: &str, ty: Type| match defs.get(p) {
        Some(Op::SlotAddr(s)) => f.slot(s).is_some_and(|s| s.ty == ty),
        _ => false,
    };
    let const_global = |p: &str, ty: Type| match defs.get(p) {
        Some(Op::GlobalAddr(g)) => read_only.contains(g.as_str()) && m.global(g).is_some_and(|g| g.ty == ty),
        _ => false,
    };
    let nonzero = |r: &str| match defs.get(r) {
        Some(Op::Const(Const::Int(v))) => *v != 0,
        Some(Op::Const(Const::Float(v))) => *v != 0.0,
        _ => false,
    };
    let types = f.register_types();
    let ty_of = |r: &str| types.get(r).copied().unwrap_or(Type::Void);
    let mut out = InnocuousSet::default();
    for b in &f.blocks {
        let ok = b.instructions.iter().all(|i| match &i.op {
            Op::Store(v, p) => own_slot(p, ty_of(v)),
            Op::Load(p) => {
                let ty = i.result.as_ref().map(|r| r.1).unwrap_or(Type::Void);
                own_slot(p, ty) || const_global(p, ty)
            }
            Op::Bin(BinOp::SDiv | BinOp::SRem | BinOp::FDiv, _, d) => nonzero(d),
            Op::Call(..) | Op::ICall(..) | Op::Print(_) | Op::SetJmp(_) | Op::LongJmp(..) | Op::MayThrow(..) => false,
            _ => true,
        });
        if ok {
            out.blocks.insert(b.label.clone());
        }
    }
    out
}

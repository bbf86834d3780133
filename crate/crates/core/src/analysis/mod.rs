//! Static analyses shared by fission and fusion.

mod cfg;
mod dom;
mod flow;
mod freq;
mod innocuous;
mod loops;

pub use cfg::Cfg;
pub use dom::{dominator_tree, DomTree};
pub use flow::{escape_set, Atom, EscapeSet, ValueFlow};
pub use freq::{block_frequency, FreqMap};
pub use innocuous::{innocuous_blocks, InnocuousSet};
pub use loops::{loop_info, Loop, LoopInfo, DEFAULT_TRIP_COUNT};

use crate::ir::Function;

/// The per-function analyses fission consumes, computed together.
#[derive(Debug, Clone)]
pub struct FunctionAnalyses {
    pub cfg: Cfg,
    pub dom: DomTree,
    pub loops: LoopInfo,
    pub freq: FreqMap,
}

impl FunctionAnalyses {
    pub fn new(f: &Function, default_trip: u64) -> Self {
        let cfg = Cfg::new(f);
        let dom = DomTree::new(&cfg);
        let loops = loop_info(f, &cfg, &dom, default_trip);
        let freq = block_frequency(&cfg, &loops);
        FunctionAnalyses { cfg, dom, loops, freq }
    }
}

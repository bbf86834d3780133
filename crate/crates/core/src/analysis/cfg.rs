use std::collections::HashMap;

use crate::ir::Function;

/// Index-based control-flow graph of one function. Edges to unknown labels
/// are dropped; block 0 is the entry.
#[derive(Debug, Clone)]
pub struct Cfg {
    pub succs: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
    /// Reverse postorder of the blocks reachable from the entry.
    pub rpo: Vec<usize>,
    /// Position of each block in `rpo`, `None` when unreachable.
    pub rpo_index: Vec<Option<usize>>,
}

impl Cfg {
    pub fn new(f: &Function) -> Cfg {
        let n = f.blocks.len();
        let index: HashMap<&str, usize> =
            f.blocks.iter().enumerate().map(|(i, b)| (b.label.as_str(), i)).collect();
        let succs: Vec<Vec<usize>> = f
            .blocks
            .iter()
            .map(|b| b.successors().into_iter().filter_map(|l| index.get(l).copied()).collect())
            .collect();
        let mut preds = vec![Vec::new(); n];
        for (u, ss) in succs.iter().enumerate() {
            for &v in ss {
                preds[v].push(u);
            }
        }
        let mut post = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        if n > 0 {
            // iterative DFS producing a postorder
            let mut stack: Vec<(usize, usize)> = vec![(0, 0)];
            seen[0] = true;
            while let Some((node, next)) = stack.pop() {
                if next < succs[node].len() {
                    stack.push((node, next + 1));
                    let s = succs[node][next];
                    if !seen[s] {
                        seen[s] = true;
                        stack.push((s, 0));
                    }
                } else {
                    post.push(node);
                }
            }
        }
        post.reverse();
        let mut rpo_index = vec![None; n];
        for (i, &b) in post.iter().enumerate() {
            rpo_index[b] = Some(i);
        }
        Cfg { succs, preds, rpo: post, rpo_index }
    }

    pub fn len(&self) -> usize {
        self.succs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.succs.is_empty()
    }

    pub fn reachable(&self, b: usize) -> bool {
        self.rpo_index[b].is_some()
    }

    pub fn edge_count(&self) -> usize {
        self.succs.iter().map(Vec::len).sum()
    }
}

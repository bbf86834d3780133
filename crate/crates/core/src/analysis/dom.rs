use super::Cfg;
use crate::ir::Function;

/// Dominator tree over the reachable blocks of a function, computed with the
/// Cooper–Harvey–Kennedy iterative scheme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomTree {
    /// Immediate dominator; `None` for the root and for unreachable blocks.
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    pub root: usize,
    pub reachable: Vec<bool>,
    pre: Vec<usize>,
    post: Vec<usize>,
}

impl DomTree {
    pub fn new(cfg: &Cfg) -> DomTree {
        let n = cfg.len();
        let mut idom: Vec<Option<usize>> = vec![None; n];
        if n == 0 {
            return DomTree {
                parent: vec![],
                children: vec![],
                root: 0,
                reachable: vec![],
                pre: vec![],
                post: vec![],
            };
        }
        idom[0] = Some(0);
        let order = |b: usize| cfg.rpo_index[b].unwrap();
        let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| {
            while a != b {
                while order(a) > order(b) {
                    a = idom[a].unwrap();
                }
                while order(b) > order(a) {
                    b = idom[b].unwrap();
                }
            }
            a
        };
        let mut changed = true;
        while changed {
            changed = false;
            for &b in cfg.rpo.iter().skip(1) {
                let mut new_idom: Option<usize> = None;
                for &p in &cfg.preds[b] {
                    if idom[p].is_none() {
                        continue;
                    }
                    new_idom = Some(match new_idom {
                        None => p,
                        Some(cur) => intersect(&idom, p, cur),
                    });
                }
                if new_idom.is_some() && idom[b] != new_idom {
                    idom[b] = new_idom;
                    changed = true;
                }
            }
        }
        idom[0] = None;
        let reachable: Vec<bool> = (0..n).map(|b| cfg.reachable(b)).collect();
        let mut children = vec![Vec::new(); n];
        for b in 0..n {
            if let Some(p) = idom[b] {
                children[p].push(b);
            }
        }
        let mut pre = vec![usize::MAX; n];
        let mut post = vec![usize::MAX; n];
        let mut clock = 0;
        let mut stack = vec![(0usize, false)];
        while let Some((b, done)) = stack.pop() {
            if done {
                post[b] = clock;
                clock += 1;
                continue;
            }
            pre[b] = clock;
            clock += 1;
            stack.push((b, true));
            for &c in children[b].iter().rev() {
                stack.push((c, false));
            }
        }
        DomTree { parent: idom, children, root: 0, reachable, pre, post }
    }

    /// `a` dominates `b` (reflexive). False when either is unreachable.
    pub fn dominates(&self, a: usize, b: usize) -> bool {
        self.reachable[a] && self.reachable[b] && self.pre[a] <= self.pre[b] && self.post[b] <= self.post[a]
    }

    /// Blocks of the subtree rooted at `head`, in preorder.
    pub fn subtree(&self, head: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![head];
        while let Some(b) = stack.pop() {
            out.push(b);
            for &c in self.children[b].iter().rev() {
                stack.push(c);
            }
        }
        out
    }

    pub fn subtree_size(&self, head: usize) -> usize {
        (self.post[head] - self.pre[head]).div_ceil(2)
    }
}

/// Dominator tree of `f`; unreachable blocks are ignored.
pub fn dominator_tree(f: &Function) -> DomTree {
    DomTree::new(&Cfg::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn tree(src: &str) -> (Function, DomTree) {
        let m = parse_module(src).unwrap();
        let f = m.functions[0].clone();
        let t = dominator_tree(&f);
        (f, t)
    }

    #[test]
    fn chain() {
        let (_, t) = tree("module m func @f() -> void { b0: br b1 b1: br b2 b2: ret }");
        assert_eq!(t.parent, vec![None, Some(0), Some(1)]);
        assert_eq!(t.subtree_size(0), 3);
        assert_eq!(t.subtree(1), vec![1, 2]);
    }

    #[test]
    fn diamond() {
        let (_, t) = tree(
            "module m func @f(%c: i1) -> void { e: condbr %c, a, b a: br j b: br j j: ret }",
        );
        assert_eq!(t.parent[3], Some(0));
        assert!(t.dominates(0, 3));
        assert!(!t.dominates(1, 3));
        assert_eq!(t.subtree_size(1), 1);
    }

    #[test]
    fn unreachable_blocks_are_ignored() {
        let (_, t) = tree("module m func @f() -> void { e: ret dead: ret }");
        assert!(!t.reachable[1]);
        assert_eq!(t.parent[1], None);
        assert!(!t.dominates(0, 1));
    }
}

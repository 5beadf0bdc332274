//! Control-flow graph and dominator tree.

use super::{Block, Function};

pub struct Cfg {
    succs: Vec<Vec<Block>>,
    preds: Vec<Vec<Block>>,
    /// Reverse postorder over reachable blocks.
    pub rpo: Vec<Block>,
    rpo_pos: Vec<u32>,
    reachable: Vec<bool>,
}

impl Cfg {
    pub fn new(f: &Function) -> Cfg {
        let n = f.block_count();
        let mut succs = vec![Vec::new(); n];
        let mut preds = vec![Vec::new(); n];
        for &b in &f.blocks {
            for s in f.succs(b) {
                succs[b.0 as usize].push(s);
                preds[s.0 as usize].push(b);
            }
        }
        // Iterative postorder DFS from the entry.
        let mut post = Vec::new();
        let mut visited = vec![false; n];
        let mut stack: Vec<(Block, usize)> = vec![(f.entry(), 0)];
        visited[f.entry().0 as usize] = true;
        while let Some(&mut (b, ref mut i)) = stack.last_mut() {
            if *i < succs[b.0 as usize].len() {
                let s = succs[b.0 as usize][*i];
                *i += 1;
                if !visited[s.0 as usize] {
                    visited[s.0 as usize] = true;
                    stack.push((s, 0));
                }
            } else {
                post.push(b);
                stack.pop();
            }
        }
        let rpo: Vec<Block> = post.into_iter().rev().collect();
        let mut rpo_pos = vec![u32::MAX; n];
        for (i, &b) in rpo.iter().enumerate() {
            rpo_pos[b.0 as usize] = i as u32;
        }
        Cfg {
            succs,
            preds,
            rpo,
            rpo_pos,
            reachable: visited,
        }
    }

    pub fn succs(&self, b: Block) -> &[Block] {
        &self.succs[b.0 as usize]
    }

    pub fn preds(&self, b: Block) -> &[Block] {
        &self.preds[b.0 as usize]
    }

    pub fn is_reachable(&self, b: Block) -> bool {
        self.reachable[b.0 as usize]
    }

    pub fn rpo_pos(&self, b: Block) -> u32 {
        self.rpo_pos[b.0 as usize]
    }
}

/// Dominator tree built with the iterative intersection algorithm over
/// reverse postorder. Queries run in O(1) on dominator-tree DFS intervals.
pub struct DomTree {
    idom: Vec<Option<Block>>,
    children: Vec<Vec<Block>>,
    pre: Vec<u32>,
    post: Vec<u32>,
}

impl DomTree {
    pub fn build(f: &Function, cfg: &Cfg) -> DomTree {
        let n = f.block_count();
        let entry = f.entry();
        let mut idom: Vec<Option<Block>> = vec![None; n];
        idom[entry.0 as usize] = Some(entry);
        let mut changed = true;
        while changed {
            changed = false;
            for &b in cfg.rpo.iter().skip(1) {
                let mut new_idom: Option<Block> = None;
                for &p in cfg.preds(b) {
                    if idom[p.0 as usize].is_none() {
                        continue;
                    }
                    new_idom = Some(match new_idom {
                        None => p,
                        Some(cur) => Self::intersect(&idom, cfg, cur, p),
                    });
                }
                if let Some(ni) = new_idom {
                    if idom[b.0 as usize] != Some(ni) {
                        idom[b.0 as usize] = Some(ni);
                        changed = true;
                    }
                }
            }
        }
        let mut children = vec![Vec::new(); n];
        for &b in &cfg.rpo {
            if b != entry {
                if let Some(p) = idom[b.0 as usize] {
                    children[p.0 as usize].push(b);
                }
            }
        }
        // DFS numbering of the dominator tree for interval queries.
        let mut pre = vec![0u32; n];
        let mut post = vec![0u32; n];
        let mut counter = 0u32;
        let mut stack: Vec<(Block, usize)> = vec![(entry, 0)];
        pre[entry.0 as usize] = {
            counter += 1;
            counter
        };
        while let Some(&mut (b, ref mut i)) = stack.last_mut() {
            if *i < children[b.0 as usize].len() {
                let c = children[b.0 as usize][*i];
                *i += 1;
                counter += 1;
                pre[c.0 as usize] = counter;
                stack.push((c, 0));
            } else {
                counter += 1;
                post[b.0 as usize] = counter;
                stack.pop();
            }
        }
        DomTree {
            idom,
            children,
            pre,
            post,
        }
    }

    fn intersect(idom: &[Option<Block>], cfg: &Cfg, mut a: Block, mut b: Block) -> Block {
        while a != b {
            while cfg.rpo_pos(a) > cfg.rpo_pos(b) {
                a = idom[a.0 as usize].expect("processed");
            }
            while cfg.rpo_pos(b) > cfg.rpo_pos(a) {
                b = idom[b.0 as usize].expect("processed");
            }
        }
        a
    }

    /// Immediate dominator; the entry maps to itself.
    pub fn idom(&self, b: Block) -> Option<Block> {
        self.idom[b.0 as usize]
    }

    pub fn children(&self, b: Block) -> &[Block] {
        &self.children[b.0 as usize]
    }

    /// Reflexive dominance.
    pub fn dominates(&self, a: Block, b: Block) -> bool {
        self.pre[a.0 as usize] <= self.pre[b.0 as usize]
            && self.post[b.0 as usize] <= self.post[a.0 as usize]
    }
}

/// Dominance between instruction positions: does executing `a` always
/// precede executing `b`? Within one block this is index order.
pub fn dominates_point(dt: &DomTree, a: (Block, usize), b: (Block, usize)) -> bool {
    if a.0 == b.0 {
        a.1 <= b.1
    } else {
        dt.dominates(a.0, b.0)
    }
}

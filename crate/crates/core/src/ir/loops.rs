//! Natural loop discovery, the loop nesting forest, and loop-simplify
//! (dedicated preheader insertion).
//!
//! A back edge is an edge whose target dominates its source; the natural
//! loop of a header is the union of reverse-reachable blocks from its
//! latches. Retreating edges whose target does not dominate the source mark
//! irreducible regions: no loop is formed there and the pass refuses such
//! functions.

use std::collections::BTreeSet;

use super::dom::{Cfg, DomTree};
use super::{Block, Function, InstKind};

#[derive(Copy, Clone, PartialEq, Eq, Debug, PartialOrd, Ord)]
pub struct LoopId(pub u32);

#[derive(Clone, Debug)]
pub struct LoopInfo {
    pub header: Block,
    pub latches: Vec<Block>,
    pub blocks: BTreeSet<Block>,
    pub parent: Option<LoopId>,
    pub preheader: Option<Block>,
    pub depth: u32,
}

#[derive(Clone, Debug, Default)]
pub struct LoopForest {
    pub loops: Vec<LoopInfo>,
    /// Innermost containing loop per block id.
    pub innermost: Vec<Option<LoopId>>,
    /// Retreating edges that are not back edges (target fails to dominate
    /// source): the irreducible regions.
    pub irreducible: Vec<(Block, Block)>,
}

impl LoopForest {
    pub fn loop_info(&self, id: LoopId) -> &LoopInfo {
        &self.loops[id.0 as usize]
    }

    pub fn innermost_of(&self, b: Block) -> Option<LoopId> {
        self.innermost.get(b.0 as usize).copied().flatten()
    }

    pub fn parent_chain(&self, mut id: LoopId) -> Vec<LoopId> {
        let mut chain = vec![id];
        while let Some(p) = self.loops[id.0 as usize].parent {
            chain.push(p);
            id = p;
        }
        chain
    }

    pub fn contains(&self, id: LoopId, b: Block) -> bool {
        self.loops[id.0 as usize].blocks.contains(&b)
    }
}

pub fn build_loops(f: &Function, cfg: &Cfg, dt: &DomTree) -> LoopForest {
    // DFS intervals on the CFG to classify retreating edges.
    let n = f.block_count();
    let mut pre = vec![0u32; n];
    let mut post = vec![0u32; n];
    let mut counter = 0u32;
    let mut visited = vec![false; n];
    let mut stack: Vec<(Block, usize)> = vec![(f.entry(), 0)];
    visited[f.entry().0 as usize] = true;
    counter += 1;
    pre[f.entry().0 as usize] = counter;
    while let Some(&mut (b, ref mut i)) = stack.last_mut() {
        if *i < cfg.succs(b).len() {
            let s = cfg.succs(b)[*i];
            *i += 1;
            if !visited[s.0 as usize] {
                visited[s.0 as usize] = true;
                counter += 1;
                pre[s.0 as usize] = counter;
                stack.push((s, 0));
            }
        } else {
            counter += 1;
            post[b.0 as usize] = counter;
            stack.pop();
        }
    }
    let is_dfs_ancestor = |a: Block, b: Block| {
        pre[a.0 as usize] <= pre[b.0 as usize] && post[b.0 as usize] <= post[a.0 as usize]
    };

    let mut forest = LoopForest {
        loops: Vec::new(),
        innermost: vec![None; n],
        irreducible: Vec::new(),
    };
    // Group latches by header.
    let mut headers: Vec<(Block, Vec<Block>)> = Vec::new();
    for &b in &cfg.rpo {
        for &s in cfg.succs(b) {
            if dt.dominates(s, b) {
                match headers.iter_mut().find(|(h, _)| *h == s) {
                    Some((_, latches)) => latches.push(b),
                    None => headers.push((s, vec![b])),
                }
            } else if is_dfs_ancestor(s, b) {
                forest.irreducible.push((b, s));
            }
        }
    }
    for (header, latches) in headers {
        // Natural loop: reverse flood from the latches, stopping at the
        // header.
        let mut blocks: BTreeSet<Block> = BTreeSet::new();
        blocks.insert(header);
        let mut work: Vec<Block> = latches.clone();
        while let Some(b) = work.pop() {
            if blocks.insert(b) {
                for &p in cfg.preds(b) {
                    work.push(p);
                }
            }
        }
        forest.loops.push(LoopInfo {
            header,
            latches,
            blocks,
            parent: None,
            preheader: None,
            depth: 0,
        });
    }
    // Nesting: the parent is the smallest strictly-larger loop containing
    // the header.
    let sizes: Vec<usize> = forest.loops.iter().map(|l| l.blocks.len()).collect();
    for i in 0..forest.loops.len() {
        let mut best: Option<(usize, usize)> = None;
        for j in 0..forest.loops.len() {
            if i == j {
                continue;
            }
            if forest.loops[j].blocks.contains(&forest.loops[i].header)
                && forest.loops[j].blocks.is_superset(&forest.loops[i].blocks)
                && sizes[j] > sizes[i]
                && best.map(|(s, _)| sizes[j] < s).unwrap_or(true)
            {
                best = Some((sizes[j], j));
            }
        }
        forest.loops[i].parent = best.map(|(_, j)| LoopId(j as u32));
    }
    for i in 0..forest.loops.len() {
        forest.loops[i].depth = forest.parent_chain(LoopId(i as u32)).len() as u32;
    }
    // Innermost loop per block: the smallest containing loop.
    for &b in &f.blocks {
        let mut best: Option<(usize, LoopId)> = None;
        for (i, l) in forest.loops.iter().enumerate() {
            if l.blocks.contains(&b) && best.map(|(s, _)| sizes[i] < s).unwrap_or(true) {
                best = Some((sizes[i], LoopId(i as u32)));
            }
        }
        forest.innermost[b.0 as usize] = best.map(|(_, id)| id);
    }
    // Dedicated preheaders: a unique non-latch predecessor of the header
    // whose only successor is the header.
    for l in &mut forest.loops {
        let outside: Vec<Block> = cfg
            .preds(l.header)
            .iter()
            .copied()
            .filter(|p| !l.blocks.contains(p))
            .collect();
        if outside.len() == 1 && cfg.succs(outside[0]).len() == 1 {
            l.preheader = Some(outside[0]);
        }
    }
    forest
}

/// Inserts a dedicated preheader in front of every loop header that lacks
/// one, rerouting outside edges and splitting header phis. Returns whether
/// anything changed. Semantics-preserving by construction.
pub fn loop_simplify(f: &mut Function) -> bool {
    let mut changed = false;
    loop {
        let cfg = Cfg::new(f);
        let dt = DomTree::build(f, &cfg);
        let forest = build_loops(f, &cfg, &dt);
        let Some(l) = forest.loops.iter().find(|l| l.preheader.is_none()) else {
            return changed;
        };
        let header = l.header;
        let outside: Vec<Block> = cfg
            .preds(header)
            .iter()
            .copied()
            .filter(|p| !l.blocks.contains(p))
            .collect();
        let label = f.fresh_block_label(&format!("{}.ph", f.block(header).label));
        let ph = f.new_block_before(header, label);
        changed = true;

        // Split header phi incomings that arrive from outside the loop.
        let header_insts: Vec<_> = f.block(header).insts.clone();
        for id in header_insts {
            let InstKind::Phi { ty, incomings } = f.inst(id).kind.clone() else {
                continue;
            };
            let (from_outside, from_latches): (Vec<_>, Vec<_>) = incomings
                .into_iter()
                .partition(|(p, _)| outside.contains(p));
            let merged = if from_outside.len() == 1 {
                from_outside[0].1
            } else {
                // Several outside predecessors merge in the preheader.
                f.push_inst_named(
                    ph,
                    InstKind::Phi {
                        ty,
                        incomings: from_outside.clone(),
                    },
                    "ph",
                )
                .expect("phi produces a value")
            };
            let mut incomings = from_latches;
            incomings.push((ph, merged));
            if let InstKind::Phi {
                incomings: dest, ..
            } = &mut f.inst_mut(id).kind
            {
                *dest = incomings;
            }
        }
        // Retarget outside edges at the preheader.
        for p in &outside {
            if let Some(t) = f.terminator(*p) {
                let kind = &mut f.inst_mut(t).kind;
                match kind {
                    InstKind::Br { target } => {
                        if *target == header {
                            *target = ph;
                        }
                    }
                    InstKind::CondBr {
                        then_dest,
                        else_dest,
                        ..
                    } => {
                        if *then_dest == header {
                            *then_dest = ph;
                        }
                        if *else_dest == header {
                            *else_dest = ph;
                        }
                    }
                    _ => {}
                }
            }
        }
        f.push_inst(ph, InstKind::Br { target: header });
        // A header that was the entry hands the entry role to its preheader;
        // new_block_before already placed ph ahead of it in the layout.
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse::parse_program;
    use crate::ir::print::print_program;
    use crate::ir::verify_program;

    fn analyzed(text: &str) -> (Function, LoopForest) {
        let p = parse_program(text).unwrap();
        let f = p.functions.into_iter().next().unwrap();
        let cfg = Cfg::new(&f);
        let dt = DomTree::build(&f, &cfg);
        let forest = build_loops(&f, &cfg, &dt);
        (f, forest)
    }

    const SINGLE_LOOP: &str = concat!(
        "func @main() -> i64 {\n",
        "entry:\n",
        "  %zero = const 0\n",
        "  %n = const 10\n",
        "  %one = const 1\n",
        "  br loop\n",
        "loop:\n",
        "  %i = phi i64 [ %zero, entry ], [ %i2, loop ]\n",
        "  %i2 = add %i, %one\n",
        "  %c = icmp slt %i2, %n\n",
        "  cond_br %c, loop, done\n",
        "done:\n",
        "  ret %i2\n",
        "}\n",
    );

    #[test]
    fn single_back_edge_forms_one_loop_with_preheader() {
        let (f, forest) = analyzed(SINGLE_LOOP);
        assert_eq!(forest.loops.len(), 1);
        let l = &forest.loops[0];
        assert_eq!(l.header, f.find_block("loop").unwrap());
        assert_eq!(l.latches, vec![f.find_block("loop").unwrap()]);
        // The entry block is a dedicated preheader already.
        assert_eq!(l.preheader, Some(f.entry()));
        assert!(forest.irreducible.is_empty());
    }

    #[test]
    fn loop_simplify_inserts_missing_preheader() {
        // Two outside edges into the header: no dedicated preheader.
        let text = concat!(
            "func @main(%c: i64) -> i64 {\n",
            "entry:\n",
            "  %zero = const 0\n",
            "  %one = const 1\n",
            "  %n = const 4\n",
            "  cond_br %c, a, b\n",
            "a:\n",
            "  br loop\n",
            "b:\n",
            "  br loop\n",
            "loop:\n",
            "  %i = phi i64 [ %zero, a ], [ %one, b ], [ %i2, loop ]\n",
            "  %i2 = add %i, %one\n",
            "  %cc = icmp slt %i2, %n\n",
            "  cond_br %cc, loop, done\n",
            "done:\n",
            "  ret %i2\n",
            "}\n",
        );
        let p = parse_program(text).unwrap();
        let mut f = p.functions.into_iter().next().unwrap();
        assert!(loop_simplify(&mut f));
        let prog = crate::ir::Program {
            externs: vec![],
            functions: vec![f.clone()],
        };
        verify_program(&prog).unwrap();
        let cfg = Cfg::new(&f);
        let dt = DomTree::build(&f, &cfg);
        let forest = build_loops(&f, &cfg, &dt);
        let ph = forest.loops[0].preheader.expect("preheader inserted");
        assert_eq!(f.block(ph).label, "loop.ph");
        // The preheader merges the two outside incomings through a new phi.
        assert_eq!(f.block(ph).insts.len(), 2);
        // Round-trip of the transformed function still parses.
        let text2 = print_program(&prog);
        parse_program(&text2).unwrap();
    }

    #[test]
    fn nested_loops_have_parent_links() {
        let text = concat!(
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %zero = const 0\n",
            "  %one = const 1\n",
            "  %n = const 3\n",
            "  br outer\n",
            "outer:\n",
            "  %i = phi i64 [ %zero, entry ], [ %i2, outer_latch ]\n",
            "  br inner_ph\n",
            "inner_ph:\n",
            "  br inner\n",
            "inner:\n",
            "  %j = phi i64 [ %zero, inner_ph ], [ %j2, inner ]\n",
            "  %j2 = add %j, %one\n",
            "  %cj = icmp slt %j2, %n\n",
            "  cond_br %cj, inner, outer_latch\n",
            "outer_latch:\n",
            "  %i2 = add %i, %one\n",
            "  %ci = icmp slt %i2, %n\n",
            "  cond_br %ci, outer, done\n",
            "done:\n",
            "  ret %i2\n",
            "}\n",
        );
        let (f, forest) = analyzed(text);
        assert_eq!(forest.loops.len(), 2);
        let inner_idx = forest
            .loops
            .iter()
            .position(|l| l.header == f.find_block("inner").unwrap())
            .unwrap();
        let outer_idx = forest
            .loops
            .iter()
            .position(|l| l.header == f.find_block("outer").unwrap())
            .unwrap();
        assert_eq!(
            forest.loops[inner_idx].parent,
            Some(LoopId(outer_idx as u32))
        );
        assert_eq!(forest.loops[outer_idx].parent, None);
        assert_eq!(forest.loops[inner_idx].depth, 2);
        // Innermost assignment: the inner header belongs to the inner loop.
        assert_eq!(
            forest.innermost_of(f.find_block("inner").unwrap()),
            Some(LoopId(inner_idx as u32))
        );
    }

    #[test]
    fn irreducible_edge_is_flagged() {
        // Two entry points into a cycle between a and b.
        let text = concat!(
            "func @main(%c: i64) -> i64 {\n",
            "entry:\n",
            "  cond_br %c, a, b\n",
            "a:\n",
            "  cond_br %c, b, done\n",
            "b:\n",
            "  cond_br %c, a, done\n",
            "done:\n",
            "  %z = const 0\n",
            "  ret %z\n",
            "}\n",
        );
        let (_, forest) = analyzed(text);
        assert!(forest.loops.is_empty());
        assert!(!forest.irreducible.is_empty());
    }
}

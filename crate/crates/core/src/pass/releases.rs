//! Release insertion: each translation's pin ends where the raw addresses
//! derived from it die.
//!
//! The derived set of a translation is its result plus every gep twin
//! rooted in it. Liveness of that set is confined to blocks dominated by
//! the translation (raw values never pass through phis), so a release can
//! be placed after the last use in every block where the set dies, and on
//! every edge into a block where it is dead on entry — splitting the edge
//! when the target has other predecessors. Every path that executes the
//! translation reaches exactly one release.

use std::collections::BTreeSet;

use crate::ir::dom::Cfg;
use crate::ir::liveness::liveness;
use crate::ir::{Block, Function, InstId, InstKind, Value};

/// The raw values derived from a translation result: the result itself and
/// gep chains over it.
pub(crate) fn derived_set(f: &Function, result: Value) -> BTreeSet<Value> {
    let mut d: BTreeSet<Value> = BTreeSet::new();
    d.insert(result);
    let mut changed = true;
    while changed {
        changed = false;
        for &b in &f.blocks {
            for &id in &f.block(b).insts {
                let inst = f.inst(id);
                if let (InstKind::Gep { base, .. }, Some(r)) = (&inst.kind, inst.result) {
                    if d.contains(base) && d.insert(r) {
                        changed = true;
                    }
                }
            }
        }
    }
    d
}

/// True when some member of the derived set reaches a use that must keep
/// it alive beyond what releases can see (returned, stored as data, passed
/// to a call, cast, freed, merged through a phi, or re-translated). Such
/// translations get no release; their slot dies with the frame.
fn has_escaping_use(f: &Function, d: &BTreeSet<Value>) -> bool {
    for &b in &f.blocks {
        for &id in &f.block(b).insts {
            let escaped = match &f.inst(id).kind {
                InstKind::Phi { incomings, .. } => {
                    incomings.iter().any(|(_, v)| d.contains(v))
                }
                InstKind::Ret { value } => value.map(|v| d.contains(&v)).unwrap_or(false),
                InstKind::Store { value, .. } => d.contains(value),
                InstKind::Call { args, .. } => args.iter().any(|a| d.contains(a)),
                InstKind::PtrToInt { value } => d.contains(value),
                InstKind::Hfree { ptr } => d.contains(ptr),
                InstKind::Hrealloc { ptr, .. } => d.contains(ptr),
                InstKind::Translate { ptr } => d.contains(ptr),
                _ => false,
            };
            if escaped {
                return true;
            }
        }
    }
    false
}

fn uses_member(f: &Function, id: InstId, d: &BTreeSet<Value>) -> bool {
    let mut used = false;
    match &f.inst(id).kind {
        InstKind::Phi { .. } => {}
        kind => kind.for_each_operand(|v| used |= d.contains(&v)),
    }
    used
}

#[derive(Debug)]
enum ReleasePoint {
    After { block: Block, index: usize },
    OnEdge { from: Block, to: Block },
}

pub fn insert_releases(f: &mut Function) {
    let translates: Vec<InstId> = f
        .blocks
        .iter()
        .flat_map(|&b| f.block(b).insts.iter().copied())
        .filter(|&id| matches!(f.inst(id).kind, InstKind::Translate { .. }))
        .collect();
    for tid in translates {
        insert_releases_for(f, tid);
    }
}

fn insert_releases_for(f: &mut Function, tid: InstId) {
    let l = f.inst(tid).result.expect("translate produces a value");
    let d = derived_set(f, l);
    if has_escaping_use(f, &d) {
        return;
    }
    let cfg = Cfg::new(f);
    let live = liveness(f, &cfg);
    let live_in = |b: Block| live.live_in(b).iter().any(|v| d.contains(v));
    let live_out = |b: Block| live.live_out(b).iter().any(|v| d.contains(v));
    let (lb, li) = f.position_of(tid).expect("translate in layout");

    let mut points: Vec<ReleasePoint> = Vec::new();
    for &b in &f.blocks {
        let active = b == lb || live_in(b);
        if !active {
            continue;
        }
        let start = if b == lb { li } else { 0 };
        if !live_out(b) {
            // Dies inside this block: after the last use, or right after
            // the translation itself when the result is never used.
            let mut last = if b == lb { li } else { start };
            for (idx, &id) in f.block(b).insts.iter().enumerate().skip(start) {
                if uses_member(f, id, &d) {
                    last = idx;
                }
            }
            points.push(ReleasePoint::After {
                block: b,
                index: last,
            });
        } else {
            // Lives out on some edges; dies on entry to other successors.
            for &s in cfg.succs(b) {
                if !live_in(s) {
                    points.push(ReleasePoint::OnEdge { from: b, to: s });
                }
            }
        }
    }

    // Edge releases first (they add blocks, not indices), then in-block
    // releases from the highest index down so indices stay valid.
    let mut edge_points = Vec::new();
    let mut block_points = Vec::new();
    for p in points {
        match p {
            ReleasePoint::OnEdge { .. } => edge_points.push(p),
            ReleasePoint::After { .. } => block_points.push(p),
        }
    }
    for p in edge_points {
        let ReleasePoint::OnEdge { from, to } = p else {
            unreachable!()
        };
        if cfg.preds(to).len() == 1 {
            // Sole predecessor: the top of the target (after its phis) is
            // on exactly the dying paths.
            let at = first_non_phi_index(f, to);
            f.insert_inst_at(to, at, InstKind::Release { translation: l }, "v");
        } else {
            split_edge_with_release(f, from, to, l);
        }
    }
    block_points.sort_by_key(|p| match p {
        ReleasePoint::After { block, index } => (block.0, std::cmp::Reverse(*index)),
        _ => unreachable!(),
    });
    for p in block_points {
        let ReleasePoint::After { block, index } = p else {
            unreachable!()
        };
        f.insert_inst_at(block, index + 1, InstKind::Release { translation: l }, "v");
    }
}

fn first_non_phi_index(f: &Function, b: Block) -> usize {
    f.block(b)
        .insts
        .iter()
        .position(|&id| !matches!(f.inst(id).kind, InstKind::Phi { .. }))
        .unwrap_or(f.block(b).insts.len())
}

/// Splits the edge `from -> to` with a fresh block holding the release.
fn split_edge_with_release(f: &mut Function, from: Block, to: Block, l: Value) {
    let label = f.fresh_block_label(&format!("{}.rel", f.block(to).label));
    let eb = f.new_block_before(to, label);
    f.push_inst(eb, InstKind::Release { translation: l });
    f.push_inst(eb, InstKind::Br { target: to });
    // Retarget the branch and the phis.
    let term = f.terminator(from).expect("terminated block");
    match &mut f.inst_mut(term).kind {
        InstKind::Br { target } => {
            if *target == to {
                *target = eb;
            }
        }
        InstKind::CondBr {
            then_dest,
            else_dest,
            ..
        } => {
            if *then_dest == to {
                *then_dest = eb;
            }
            if *else_dest == to {
                *else_dest = eb;
            }
        }
        _ => {}
    }
    let to_insts = f.block(to).insts.clone();
    for id in to_insts {
        if let InstKind::Phi { incomings, .. } = &mut f.inst_mut(id).kind {
            for (p, _) in incomings.iter_mut() {
                if *p == from {
                    *p = eb;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::loops::loop_simplify;
    use crate::ir::parse::parse_program;
    use crate::ir::print::print_function;
    use crate::pass::{cleanup, insert_translations, rewrite_allocations};

    fn transformed(text: &str) -> Function {
        let p = parse_program(text).unwrap();
        let mut f = p.functions[0].clone();
        rewrite_allocations(&mut f, &Default::default());
        loop_simplify(&mut f);
        insert_translations(&mut f, true).unwrap();
        insert_releases(&mut f);
        f
    }

    fn printed(f: &Function) -> String {
        let mut s = String::new();
        print_function(&mut s, f);
        s
    }

    #[test]
    fn single_use_release_follows_directly() {
        let text = concat!(
            "func @main(%p: ptr) -> i64 {\n",
            "entry:\n",
            "  %v = load i64, %p\n",
            "  ret %v\n",
            "}\n",
        );
        let f = transformed(text);
        let s = printed(&f);
        let lines: Vec<&str> = s.lines().collect();
        let load = lines.iter().position(|l| l.contains("load i64")).unwrap();
        assert!(
            lines[load + 1].contains("release"),
            "release directly after the last use: {s}"
        );
    }

    #[test]
    fn branch_with_different_last_uses_releases_per_path() {
        let text = concat!(
            "func @main(%p: ptr, %c: i64) -> i64 {\n",
            "entry:\n",
            "  %v = load i64, %p\n",
            "  cond_br %c, a, b\n",
            "a:\n",
            "  %w = load i64, %p\n",
            "  br join\n",
            "b:\n",
            "  br join\n",
            "join:\n",
            "  %r = phi i64 [ %w, a ], [ %v, b ]\n",
            "  ret %r\n",
            "}\n",
        );
        let f = transformed(text);
        let s = printed(&f);
        // The translation is shared (entry dominates both loads); it stays
        // live into arm a but dies entering arm b.
        assert_eq!(s.matches("translate %p").count(), 1, "{s}");
        assert_eq!(s.matches("release").count(), 2, "one per path: {s}");
        let a_pos = s.find("\na:").unwrap();
        let b_pos = s.find("\nb:").unwrap();
        let join_pos = s.find("\njoin:").unwrap();
        let a_text = &s[a_pos..b_pos];
        let b_text = &s[b_pos..join_pos];
        assert!(a_text.contains("release"), "{s}");
        assert!(b_text.contains("release"), "{s}");
    }

    #[test]
    fn dead_translation_pairs_are_cleaned_up() {
        // A store through one pointer and an unrelated dead gep chain: the
        // chain's handle-form original loses all uses after rewiring and is
        // removed; a dead translate+release pair would be too.
        let text = concat!(
            "func @main(%p: ptr) -> i64 {\n",
            "entry:\n",
            "  %zero = const 0\n",
            "  %q = gep %p, %zero\n",
            "  store %q, %zero\n",
            "  ret %zero\n",
            "}\n",
        );
        let p = parse_program(text).unwrap();
        let mut f = p.functions[0].clone();
        loop_simplify(&mut f);
        insert_translations(&mut f, true).unwrap();
        insert_releases(&mut f);
        cleanup(&mut f);
        let s = printed(&f);
        // The original %q has no users left; it is gone.
        assert!(!s.contains("%q = gep %p"), "orphaned handle gep removed: {s}");
        assert_eq!(s.matches("translate").count(), 1, "{s}");
        assert_eq!(s.matches("release").count(), 1, "{s}");
    }

    #[test]
    fn loop_carried_pin_releases_after_the_loop() {
        let text = concat!(
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %n = const 80\n",
            "  %p = call @malloc(%n)\n",
            "  %zero = const 0\n",
            "  %eight = const 8\n",
            "  br loop\n",
            "loop:\n",
            "  %i = phi i64 [ %zero, entry ], [ %i2, loop ]\n",
            "  %q = gep %p, %i\n",
            "  store %q, %i\n",
            "  %i2 = add %i, %eight\n",
            "  %c = icmp slt %i2, %n\n",
            "  cond_br %c, loop, done\n",
            "done:\n",
            "  ret %i2\n",
            "}\n",
        );
        let f = transformed(text);
        let s = printed(&f);
        // The hoisted translation stays pinned across the whole loop; its
        // release lands in (or on the edge into) the exit block.
        let done_pos = s.find("done").unwrap();
        let release_pos = s.find("release").unwrap();
        assert!(
            release_pos > done_pos,
            "release must come after the loop exits: {s}"
        );
    }

    #[test]
    fn every_path_gets_exactly_one_release() {
        // Critical edge: the translation dies on the edge loop->done if the
        // loop body used it, while the entry path to done never translated.
        let text = concat!(
            "func @main(%p: ptr, %c: i64) -> i64 {\n",
            "entry:\n",
            "  %zero = const 0\n",
            "  cond_br %c, use, done\n",
            "use:\n",
            "  %v = load i64, %p\n",
            "  br done\n",
            "done:\n",
            "  %r = phi i64 [ %v, use ], [ %zero, entry ]\n",
            "  ret %r\n",
            "}\n",
        );
        let f = transformed(text);
        let s = printed(&f);
        assert_eq!(s.matches("translate %p").count(), 1, "{s}");
        assert_eq!(s.matches("release").count(), 1, "{s}");
        // The release sits on the `use` path, not in `done` (which the
        // untranslated path also reaches).
        let use_pos = s.find("\nuse:").unwrap();
        let done_pos = s.find("\ndone:").unwrap();
        let rel = s.find("release").unwrap();
        assert!(rel > use_pos && rel < done_pos, "{s}");
    }
}

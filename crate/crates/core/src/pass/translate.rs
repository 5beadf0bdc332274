//! Translation insertion with loop hoisting.
//!
//! For each value that may hold a handle at run time, the memory accesses
//! reached through gep-only derivation chains are grouped into a dominance
//! forest. Each tree gets one translation of the base value, placed either
//! before the terminator of the preheader of the outermost loop that
//! contains the tree root but not the base's definition, or immediately
//! before the root when no such loop exists. Chain geps are then twinned
//! into raw address arithmetic fed by the translation, and the accesses are
//! rewired onto the raw chain.
//!
//! Values that escape the access world — stored as data, passed to calls,
//! returned, cast to integers, freed, or merged through phis — keep their
//! handle form untouched; a pointer phi is itself a fresh translation root
//! for its own consumers. This keeps handle bits stable wherever the
//! program can observe them and lets pins cover exactly the raw chains.

use std::collections::BTreeMap;

use crate::ir::dom::{dominates_point, Cfg, DomTree};
use crate::ir::loops::{build_loops, LoopForest};
use crate::ir::pg::{build_pg, PtrRole};
use crate::ir::{Block, Function, InstId, InstKind, Value, ValueDef};

use super::PassError;

/// One inserted translation and the tree it serves.
#[derive(Clone, Debug)]
pub struct PlannedTranslation {
    /// The maybe-handle base value being translated.
    pub base: Value,
    /// The inserted translate instruction.
    pub translate: InstId,
    /// Result value of the translation.
    pub result: Value,
    /// Header of the loop this translation was hoisted out of, when
    /// hoisting applied.
    pub hoisted_to: Option<Block>,
    /// Number of accesses rewired onto this translation's raw chain.
    pub accesses: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TranslationPlan {
    pub trees: Vec<PlannedTranslation>,
}

impl TranslationPlan {
    pub fn hoisted(&self) -> usize {
        self.trees.iter().filter(|t| t.hoisted_to.is_some()).count()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum NodeKind {
    Access,
    Chain,
}

#[derive(Copy, Clone, Debug)]
struct ChainNode {
    inst: InstId,
    kind: NodeKind,
}

pub fn insert_translations(f: &mut Function, hoist: bool) -> Result<TranslationPlan, PassError> {
    if !hoist {
        return Ok(insert_translations_per_access(f));
    }
    let pg = build_pg(f);
    let mut plan = TranslationPlan::default();
    let roots: Vec<Value> = pg.maybe_handle.clone();
    for base in roots {
        // Gather the access-reaching chain: geps rooted at `base` (handle
        // arithmetic) plus the loads/stores addressed through them.
        let mut nodes: Vec<ChainNode> = Vec::new();
        let mut work: Vec<Value> = vec![base];
        while let Some(v) = work.pop() {
            for use_ in pg.consumers_of(v) {
                match use_.role {
                    PtrRole::LoadAddr | PtrRole::StoreAddr => nodes.push(ChainNode {
                        inst: use_.inst,
                        kind: NodeKind::Access,
                    }),
                    PtrRole::GepBase => {
                        let gep_result = f
                            .inst(use_.inst)
                            .result
                            .expect("gep produces a value");
                        nodes.push(ChainNode {
                            inst: use_.inst,
                            kind: NodeKind::Chain,
                        });
                        work.push(gep_result);
                    }
                    // Phi incomings keep handle form (the phi is its own
                    // root); translate inputs are already translations.
                    PtrRole::PhiIncoming | PtrRole::TranslateInput => {}
                }
            }
        }
        // Chain geps that never reach an access stay in handle form.
        prune_accessless_chains(f, &mut nodes);
        if !nodes.iter().any(|n| n.kind == NodeKind::Access) {
            continue;
        }
        translate_forest(f, base, nodes, &mut plan)?;
    }
    Ok(plan)
}

/// Drops chain geps none of whose transitive consumers is a kept access.
fn prune_accessless_chains(f: &Function, nodes: &mut Vec<ChainNode>) {
    loop {
        let kept_values: Vec<Value> = nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Chain)
            .map(|n| f.inst(n.inst).result.expect("gep result"))
            .collect();
        let needed = |value: Value| {
            nodes.iter().any(|n| {
                let mut uses_it = false;
                f.inst(n.inst).kind.for_each_operand(|o| uses_it |= o == value);
                uses_it && matches!(n.kind, NodeKind::Access | NodeKind::Chain)
            })
        };
        let before = nodes.len();
        let mut keep: Vec<ChainNode> = Vec::new();
        for n in nodes.iter() {
            match n.kind {
                NodeKind::Access => keep.push(*n),
                NodeKind::Chain => {
                    let r = f.inst(n.inst).result.expect("gep result");
                    let _ = &kept_values;
                    if needed(r) {
                        keep.push(*n);
                    }
                }
            }
        }
        let changed = keep.len() != before;
        *nodes = keep;
        if !changed {
            return;
        }
    }
}

fn translate_forest(
    f: &mut Function,
    base: Value,
    mut nodes: Vec<ChainNode>,
    plan: &mut TranslationPlan,
) -> Result<(), PassError> {
    let cfg = Cfg::new(f);
    let dt = DomTree::build(f, &cfg);
    let forest = build_loops(f, &cfg, &dt);

    // Sort by position: dominators come first within a tree.
    let pos: BTreeMap<InstId, (Block, usize)> = nodes
        .iter()
        .map(|n| (n.inst, f.position_of(n.inst).expect("node in layout")))
        .collect();
    nodes.sort_by_key(|n| {
        let (b, i) = pos[&n.inst];
        (cfg.rpo_pos(b), i)
    });
    nodes.dedup_by_key(|n| n.inst);

    // Dominance forest: a node's tree is the earliest node dominating it.
    let mut tree_of: BTreeMap<InstId, usize> = BTreeMap::new();
    let mut tree_roots: Vec<InstId> = Vec::new();
    for n in &nodes {
        let np = pos[&n.inst];
        let root = nodes
            .iter()
            .filter(|m| m.inst != n.inst)
            .filter(|m| dominates_point(&dt, pos[&m.inst], np))
            .min_by_key(|m| (cfg.rpo_pos(pos[&m.inst].0), pos[&m.inst].1))
            .and_then(|m| tree_of.get(&m.inst).copied());
        match root {
            Some(t) => {
                tree_of.insert(n.inst, t);
            }
            None => {
                tree_of.insert(n.inst, tree_roots.len());
                tree_roots.push(n.inst);
            }
        }
    }

    let def_block = match f.def_of(base).expect("ssa value has a def") {
        ValueDef::Param(_) => None,
        ValueDef::Inst(id) => Some(f.position_of(*id).expect("def in layout").0),
    };

    // One translation per tree, shared when two trees hoist to the same
    // preheader.
    let mut hoist_cache: BTreeMap<Block, Value> = BTreeMap::new();
    for (tree_idx, &root) in tree_roots.iter().enumerate() {
        let root_block = pos[&root].0;
        let hoist_target = find_nesting_loop(&forest, root_block, def_block);
        let (translation, translate_id, hoisted_to) = match hoist_target {
            Some(loop_id) => {
                let info = forest.loop_info(loop_id);
                let ph = info.preheader.ok_or_else(|| PassError::MissingPreheader {
                    function: f.name.clone(),
                    header: f.block(info.header).label.clone(),
                })?;
                if let Some(&l) = hoist_cache.get(&ph) {
                    (l, None, Some(info.header))
                } else {
                    let term = f.block(ph).insts.len() - 1;
                    let (id, l) =
                        f.insert_inst_at(ph, term, InstKind::Translate { ptr: base }, "t");
                    let l = l.expect("translate produces a value");
                    hoist_cache.insert(ph, l);
                    (l, Some(id), Some(info.header))
                }
            }
            None => {
                // Immediately before the root.
                let (b, i) = f.position_of(root).expect("root in layout");
                let (id, l) = f.insert_inst_at(b, i, InstKind::Translate { ptr: base }, "t");
                (l.expect("translate produces a value"), Some(id), None)
            }
        };

        // Rewire this tree: twin chain geps onto the raw side, repoint
        // access addresses.
        let members: Vec<ChainNode> = nodes
            .iter()
            .copied()
            .filter(|n| tree_of[&n.inst] == tree_idx)
            .collect();
        let mut raw_twin: BTreeMap<Value, Value> = BTreeMap::new();
        raw_twin.insert(base, translation);
        let mut accesses = 0;
        for m in &members {
            match m.kind {
                NodeKind::Chain => {
                    let InstKind::Gep {
                        base: gb,
                        offset,
                    } = f.inst(m.inst).kind
                    else {
                        unreachable!("chain nodes are geps")
                    };
                    let raw_base = raw_twin[&gb];
                    let (b, i) = f.position_of(m.inst).expect("gep in layout");
                    let (_, twin) = f.insert_inst_at(
                        b,
                        i + 1,
                        InstKind::Gep {
                            base: raw_base,
                            offset,
                        },
                        "raw",
                    );
                    let orig = f.inst(m.inst).result.expect("gep result");
                    raw_twin.insert(orig, twin.expect("gep produces a value"));
                }
                NodeKind::Access => {
                    let kind = &mut f.inst_mut(m.inst).kind;
                    match kind {
                        InstKind::Load { addr, .. } | InstKind::Store { addr, .. } => {
                            *addr = raw_twin[addr];
                        }
                        _ => unreachable!("access nodes are loads or stores"),
                    }
                    accesses += 1;
                }
            }
        }
        if let Some(id) = translate_id {
            plan.trees.push(PlannedTranslation {
                base,
                translate: id,
                result: translation,
                hoisted_to,
                accesses,
            });
        } else if let Some(t) = plan
            .trees
            .iter_mut()
            .find(|t| t.result == translation)
        {
            t.accesses += accesses;
        }
    }
    Ok(())
}

/// The hoisting rule: the outermost loop that contains the instruction's
/// block but not the definition of the pointer being translated. `None`
/// means no enclosing loop qualifies and the translation stays at the root.
fn find_nesting_loop(
    forest: &LoopForest,
    at: Block,
    def_block: Option<Block>,
) -> Option<crate::ir::loops::LoopId> {
    let innermost = forest.innermost_of(at)?;
    let mut best = None;
    for l in forest.parent_chain(innermost) {
        let contains_def = def_block
            .map(|d| forest.contains(l, d))
            .unwrap_or(false);
        if !contains_def {
            best = Some(l);
        }
    }
    best
}

/// The no-hoist variant: a translation immediately before every memory
/// access whose address is not already raw, with the original handle
/// arithmetic left in place.
fn insert_translations_per_access(f: &mut Function) -> TranslationPlan {
    let mut plan = TranslationPlan::default();
    let raw = super::raw_provable(f);
    for b in f.blocks.clone() {
        let mut idx = 0;
        while idx < f.block(b).insts.len() {
            let id = f.block(b).insts[idx];
            let addr = match &f.inst(id).kind {
                InstKind::Load { addr, .. } | InstKind::Store { addr, .. } => *addr,
                _ => {
                    idx += 1;
                    continue;
                }
            };
            if raw.contains(&addr) {
                idx += 1;
                continue;
            }
            let (tid, l) = f.insert_inst_at(b, idx, InstKind::Translate { ptr: addr }, "t");
            let l = l.expect("translate produces a value");
            match &mut f.inst_mut(id).kind {
                InstKind::Load { addr, .. } | InstKind::Store { addr, .. } => *addr = l,
                _ => unreachable!(),
            }
            plan.trees.push(PlannedTranslation {
                base: addr,
                translate: tid,
                result: l,
                hoisted_to: None,
                accesses: 1,
            });
            idx += 2;
        }
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::loops::loop_simplify;
    use crate::ir::parse::parse_program;
    use crate::ir::print::print_function;
    use crate::ir::Program;

    fn prepare(text: &str) -> Function {
        let p = parse_program(text).unwrap();
        let mut f = p.functions[0].clone();
        super::super::rewrite_allocations(&mut f, &Default::default());
        loop_simplify(&mut f);
        f
    }

    fn printed(f: &Function) -> String {
        let mut s = String::new();
        print_function(&mut s, f);
        s
    }

    fn verify(f: &Function) {
        let prog = Program {
            externs: vec![],
            functions: vec![f.clone()],
        };
        // Unknown callees are fine here; structure and dominance are not.
        match crate::ir::verify_function(&prog, f) {
            Ok(()) | Err(crate::ir::VerifyError::UnknownCallee { .. }) => {}
            Err(e) => panic!("verify failed: {e}\n{}", printed(f)),
        }
    }

    const LOOP_INVARIANT: &str = concat!(
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
        "  %first = gep %p, %zero\n",
        "  %v = load i64, %first\n",
        "  ret %v\n",
        "}\n",
    );

    #[test]
    fn loop_invariant_base_hoists_to_preheader() {
        let mut f = prepare(LOOP_INVARIANT);
        let plan = insert_translations(&mut f, true).unwrap();
        verify(&f);
        let s = printed(&f);
        // The loop access dominates the post-loop access, so one hoisted
        // translation covers both.
        assert_eq!(plan.trees.len(), 1, "{s}");
        assert_eq!(plan.hoisted(), 1, "{s}");
        assert_eq!(plan.trees[0].accesses, 2, "{s}");
        // The hoisted translate sits in entry, before the branch.
        let entry_text: Vec<&str> = s.lines().skip(1).take_while(|l| *l != "loop:").collect();
        assert!(
            entry_text.iter().any(|l| l.contains("translate %p")),
            "{s}"
        );
        // The loop body addresses the store through the raw twin.
        assert!(s.contains("store %raw"), "{s}");
    }

    #[test]
    fn base_defined_inside_loop_is_translated_in_place() {
        // The pointer is reloaded every iteration: its definition lives in
        // the loop, so no enclosing loop qualifies for hoisting.
        let text = concat!(
            "func @main(%pp: ptr) -> i64 {\n",
            "entry:\n",
            "  %zero = const 0\n",
            "  %one = const 1\n",
            "  %n = const 4\n",
            "  br loop\n",
            "loop:\n",
            "  %i = phi i64 [ %zero, entry ], [ %i2, loop ]\n",
            "  %p = load ptr, %pp\n",
            "  %v = load i64, %p\n",
            "  %i2 = add %i, %one\n",
            "  %c = icmp slt %i2, %n\n",
            "  cond_br %c, loop, done\n",
            "done:\n",
            "  ret %i2\n",
            "}\n",
        );
        let mut f = prepare(text);
        let plan = insert_translations(&mut f, true).unwrap();
        verify(&f);
        let s = printed(&f);
        // %pp (the parameter) hoists out of the loop; %p (defined inside)
        // must be translated inside the loop body.
        let loop_start = s.find("loop:").unwrap();
        let done_start = s.find("done:").unwrap();
        let body = &s[loop_start..done_start];
        assert!(body.contains("translate %p\n"), "{s}");
        let hoisted: Vec<_> = plan
            .trees
            .iter()
            .filter(|t| t.hoisted_to.is_some())
            .collect();
        assert_eq!(hoisted.len(), 1, "only the parameter chain hoists: {s}");
    }

    #[test]
    fn straight_line_access_translates_immediately_before() {
        let text = concat!(
            "func @main(%p: ptr) -> i64 {\n",
            "entry:\n",
            "  %v = load i64, %p\n",
            "  ret %v\n",
            "}\n",
        );
        let mut f = prepare(text);
        let plan = insert_translations(&mut f, true).unwrap();
        verify(&f);
        let s = printed(&f);
        assert_eq!(plan.trees.len(), 1);
        assert_eq!(plan.hoisted(), 0);
        let lines: Vec<&str> = s.lines().collect();
        let t = lines.iter().position(|l| l.contains("translate %p")).unwrap();
        assert!(lines[t + 1].contains("load i64"), "{s}");
    }

    #[test]
    fn no_hoist_translates_every_access() {
        let mut f = prepare(LOOP_INVARIANT);
        let plan = insert_translations(&mut f, false).unwrap();
        verify(&f);
        let s = printed(&f);
        assert_eq!(plan.trees.len(), 2, "one per access: {s}");
        assert_eq!(plan.hoisted(), 0);
        // The loop-body translate addresses the handle-form gep result.
        let loop_start = s.find("loop:").unwrap();
        assert!(s[loop_start..].contains("translate %q"), "{s}");
    }

    #[test]
    fn escaping_uses_keep_handle_form() {
        // The pointer is stored to memory and passed to an internal call;
        // both uses must keep the handle, while the load goes raw.
        let text = concat!(
            "func @take(%x: ptr) -> i64 {\n",
            "entry:\n",
            "  %v = load i64, %x\n",
            "  ret %v\n",
            "}\n",
            "\n",
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %n = const 32\n",
            "  %p = call @malloc(%n)\n",
            "  %cell = call @malloc(%n)\n",
            "  store %cell, %p\n",
            "  %r = call @take(%p)\n",
            "  %v = load i64, %p\n",
            "  ret %v\n",
            "}\n",
        );
        let p = parse_program(text).unwrap();
        let mut f = p.functions[1].clone();
        super::super::rewrite_allocations(&mut f, &Default::default());
        loop_simplify(&mut f);
        insert_translations(&mut f, true).unwrap();
        verify(&f);
        let s = printed(&f);
        // The store's VALUE operand and the call argument still name %p.
        assert!(s.contains(", %p\n"), "store value keeps handle form: {s}");
        assert!(s.contains("call @take(%p)"), "{s}");
        // The store's address goes through a translation of %cell.
        assert!(s.contains("translate %cell"), "{s}");
    }

    #[test]
    fn sibling_accesses_in_one_loop_share_one_translation() {
        let text = concat!(
            "func @main(%c: i64) -> i64 {\n",
            "entry:\n",
            "  %n = const 64\n",
            "  %p = call @malloc(%n)\n",
            "  %zero = const 0\n",
            "  %one = const 1\n",
            "  %lim = const 8\n",
            "  br loop\n",
            "loop:\n",
            "  %i = phi i64 [ %zero, entry ], [ %i2, latch ]\n",
            "  cond_br %c, a, b\n",
            "a:\n",
            "  %qa = gep %p, %i\n",
            "  store %qa, %i\n",
            "  br latch\n",
            "b:\n",
            "  %qb = gep %p, %one\n",
            "  store %qb, %i\n",
            "  br latch\n",
            "latch:\n",
            "  %i2 = add %i, %one\n",
            "  %cc = icmp slt %i2, %lim\n",
            "  cond_br %cc, loop, done\n",
            "done:\n",
            "  ret %i2\n",
            "}\n",
        );
        let mut f = prepare(text);
        let plan = insert_translations(&mut f, true).unwrap();
        verify(&f);
        // Both arms hoist to the same preheader; the translation is shared.
        let translates = printed(&f).matches("translate %p").count();
        assert_eq!(translates, 1, "{}", printed(&f));
        assert_eq!(plan.trees.len(), 1);
        assert_eq!(plan.trees[0].accesses, 2);
    }
}

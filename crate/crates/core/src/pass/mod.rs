//! The program transformation: allocation rewriting, translation insertion
//! with loop hoisting, liveness-based release insertion, interference-graph
//! pin-slot allocation, safepoint placement, and escape handling for
//! external calls.
//!
//! Pipeline order: rewrite allocations, loop-simplify, insert translations,
//! insert releases, clean up dead pairs, insert safepoints, handle escapes,
//! allocate pin slots, erase releases. Slot allocation runs after escape
//! handling so escape pins get slots from the same coloring; releases are
//! erased last because slot allocation consumes them.

mod releases;
mod slots;
mod translate;

pub use releases::insert_releases;
pub use slots::{allocate_pin_slots, brute_force_max_overlap, PinSlotAssignment};
pub use translate::{insert_translations, PlannedTranslation, TranslationPlan};

use std::collections::BTreeSet;

use thiserror::Error;

use super::ir::dom::{Cfg, DomTree};
use super::ir::loops::{build_loops, loop_simplify};
use super::ir::{
    verify_function, verify_program, Block, Function, InstId, InstKind, Program, Ty, VerifyError,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PassError {
    #[error("function @{function}: irreducible control flow on edges {edges:?}")]
    Irreducible {
        function: String,
        edges: Vec<(String, String)>,
    },
    #[error("function @{function}: loop header {header} has no preheader after loop-simplify")]
    MissingPreheader { function: String, header: String },
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

#[derive(Clone, Debug)]
pub struct PassOptions {
    /// Hoist translations out of loops; disabled by `--no-hoist`.
    pub hoist: bool,
    /// Pin tracking: slot allocation and safepoint insertion; disabled by
    /// `--no-tracking` for ablation runs.
    pub tracking: bool,
    /// Keep release instructions in the output instead of erasing them.
    pub keep_releases: bool,
    /// Call sites (by callee name) exempted from allocation rewriting.
    pub rewrite_opt_out: BTreeSet<String>,
}

impl Default for PassOptions {
    fn default() -> Self {
        PassOptions {
            hoist: true,
            tracking: true,
            keep_releases: false,
            rewrite_opt_out: BTreeSet::new(),
        }
    }
}

/// Per-function artifacts of the transformation.
#[derive(Clone, Debug, Default)]
pub struct FunctionReport {
    pub plan: TranslationPlan,
    pub slots: PinSlotAssignment,
    pub safepoints: usize,
    pub escape_translations: usize,
    pub rewritten_allocations: usize,
}

#[derive(Clone, Debug)]
pub struct PassOutput {
    pub program: Program,
    pub reports: Vec<FunctionReport>,
}

impl PassOutput {
    pub fn report_for(&self, name: &str) -> Option<&FunctionReport> {
        self.program
            .functions
            .iter()
            .position(|f| f.name == name)
            .map(|i| &self.reports[i])
    }

    /// True when at least one translation was hoisted to a loop preheader
    /// anywhere in the program.
    pub fn any_hoist_applied(&self) -> bool {
        self.reports
            .iter()
            .any(|r| r.plan.trees.iter().any(|t| t.hoisted_to.is_some()))
    }

    pub fn slot_count(&self, name: &str) -> u32 {
        self.report_for(name).map(|r| r.slots.slot_count).unwrap_or(0)
    }
}

/// Runs the whole pipeline over a program.
pub fn run_pass(program: &Program, options: &PassOptions) -> Result<PassOutput, PassError> {
    let mut out = Program {
        externs: program.externs.clone(),
        functions: Vec::new(),
    };
    let mut reports = Vec::new();
    for f in &program.functions {
        let (tf, report) = transform_function(f, options)?;
        out.functions.push(tf);
        reports.push(report);
    }
    verify_program(&out)?;
    Ok(PassOutput {
        program: out,
        reports,
    })
}

fn transform_function(
    f: &Function,
    options: &PassOptions,
) -> Result<(Function, FunctionReport), PassError> {
    let mut f = f.clone();
    let mut report = FunctionReport::default();

    report.rewritten_allocations = rewrite_allocations(&mut f, &options.rewrite_opt_out);
    loop_simplify(&mut f);

    // Reducibility gate: hoisting and back-edge safepoints presume natural
    // loops with preheaders.
    {
        let cfg = Cfg::new(&f);
        let dt = DomTree::build(&f, &cfg);
        let forest = build_loops(&f, &cfg, &dt);
        if !forest.irreducible.is_empty() {
            return Err(PassError::Irreducible {
                function: f.name.clone(),
                edges: forest
                    .irreducible
                    .iter()
                    .map(|(a, b)| (f.block(*a).label.clone(), f.block(*b).label.clone()))
                    .collect(),
            });
        }
    }

    report.plan = insert_translations(&mut f, options.hoist)?;
    insert_releases(&mut f);
    cleanup(&mut f);
    if options.tracking {
        report.safepoints = insert_safepoints(&mut f);
    }
    report.escape_translations = handle_escapes(&mut f);
    if options.tracking {
        report.slots = allocate_pin_slots(&f);
    }
    if !options.keep_releases {
        erase_releases(&mut f);
    }
    verify_function_standalone(&f)?;
    Ok((f, report))
}

fn verify_function_standalone(f: &Function) -> Result<(), VerifyError> {
    // Call signatures are checked at program level by run_pass; here we
    // want the structural SSA checks for the single function.
    let program = Program {
        externs: Vec::new(),
        functions: Vec::new(),
    };
    match verify_function(&program, f) {
        Err(VerifyError::UnknownCallee { .. }) | Err(VerifyError::BadCall { .. }) | Ok(()) => {
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// Renames allocation-routine call targets to their handle counterparts:
/// `malloc`/`calloc` become `halloc` (with an explicit size product for
/// calloc), `realloc` becomes `hrealloc`, `free` becomes `hfree`. Call
/// sites whose callee is listed in `opt_out` are left alone.
pub fn rewrite_allocations(f: &mut Function, opt_out: &BTreeSet<String>) -> usize {
    let mut rewritten = 0;
    for b in f.blocks.clone() {
        let insts = f.block(b).insts.clone();
        for (_idx, id) in insts.into_iter().enumerate() {
            let InstKind::Call { callee, args, .. } = &f.inst(id).kind else {
                continue;
            };
            if opt_out.contains(callee) {
                continue;
            }
            let callee = callee.clone();
            let args = args.clone();
            let new_kind = match callee.as_str() {
                "malloc" => InstKind::Halloc { size: args[0] },
                "calloc" => {
                    // calloc(n, m): materialize the byte count first. All
                    // backing memory is zero-filled, so halloc suffices.
                    let pos = f
                        .block(b)
                        .insts
                        .iter()
                        .position(|&x| x == id)
                        .expect("call still in its block");
                    let (_, prod) = f.insert_inst_at(
                        b,
                        pos,
                        InstKind::Bin {
                            op: super::ir::BinOp::Mul,
                            lhs: args[0],
                            rhs: args[1],
                        },
                        "bytes",
                    );
                    InstKind::Halloc {
                        size: prod.expect("mul produces a value"),
                    }
                }
                "realloc" => InstKind::Hrealloc {
                    ptr: args[0],
                    size: args[1],
                },
                "free" => InstKind::Hfree { ptr: args[0] },
                _ => continue,
            };
            f.inst_mut(id).kind = new_kind;
            rewritten += 1;
        }
    }
    rewritten
}

/// Places safepoint polls at the paper-named sites: every function entry,
/// every loop back edge (in the latch, before its terminator), and
/// immediately before each external call. Returns the number inserted.
pub fn insert_safepoints(f: &mut Function) -> usize {
    let mut count = 0;
    // Entry poll.
    f.insert_inst_at(f.entry(), 0, InstKind::Safepoint, "v");
    count += 1;
    // Back edges: one poll per latch block.
    let cfg = Cfg::new(f);
    let dt = DomTree::build(f, &cfg);
    let forest = build_loops(f, &cfg, &dt);
    let mut latches: BTreeSet<Block> = BTreeSet::new();
    for l in &forest.loops {
        latches.extend(l.latches.iter().copied());
    }
    for latch in latches {
        let term = f.block(latch).insts.len() - 1;
        f.insert_inst_at(latch, term, InstKind::Safepoint, "v");
        count += 1;
    }
    // Before external calls (allocation intrinsics are runtime calls, not
    // escapes, and already carry no external flag).
    for b in f.blocks.clone() {
        let mut idx = 0;
        while idx < f.block(b).insts.len() {
            let id = f.block(b).insts[idx];
            if matches!(&f.inst(id).kind, InstKind::Call { external: true, .. }) {
                f.insert_inst_at(b, idx, InstKind::Safepoint, "v");
                count += 1;
                idx += 1;
            }
            idx += 1;
        }
    }
    count
}

/// Escape handling: every pointer-typed argument of an external call is
/// routed through a translation (pinning it for the duration), the raw
/// address is what escapes, and the pin is released when the call returns.
/// Arguments that are already raw results of a live translation are passed
/// through unchanged.
pub fn handle_escapes(f: &mut Function) -> usize {
    let mut inserted = 0;
    let raw = raw_provable(f);
    for b in f.blocks.clone() {
        let mut idx = 0;
        while idx < f.block(b).insts.len() {
            let id = f.block(b).insts[idx];
            let InstKind::Call {
                args,
                external: true,
                ..
            } = &f.inst(id).kind
            else {
                idx += 1;
                continue;
            };
            let args = args.clone();
            let mut call_idx = idx;
            let mut releases = Vec::new();
            for (argpos, arg) in args.iter().enumerate() {
                if f.value_ty(*arg) != Ty::Ptr || raw.contains(arg) {
                    continue;
                }
                let (_, l) = f.insert_inst_at(
                    b,
                    call_idx,
                    InstKind::Translate { ptr: *arg },
                    "esc",
                );
                let l = l.expect("translate produces a value");
                call_idx += 1;
                if let InstKind::Call { args, .. } = &mut f.inst_mut(id).kind {
                    args[argpos] = l;
                }
                releases.push(l);
                inserted += 1;
            }
            let mut after = call_idx + 1;
            for l in releases {
                f.insert_inst_at(b, after, InstKind::Release { translation: l }, "v");
                after += 1;
            }
            idx = after.max(idx + 1);
        }
    }
    inserted
}

/// Values provably raw after the pass: translation results and geps rooted
/// in them.
pub(crate) fn raw_provable(f: &Function) -> BTreeSet<super::ir::Value> {
    let mut raw = BTreeSet::new();
    let mut changed = true;
    while changed {
        changed = false;
        for &b in &f.blocks {
            for &id in &f.block(b).insts {
                let inst = f.inst(id);
                let Some(r) = inst.result else { continue };
                if raw.contains(&r) {
                    continue;
                }
                let is_raw = match &inst.kind {
                    InstKind::Translate { .. } => true,
                    InstKind::Gep { base, .. } => raw.contains(base),
                    _ => false,
                };
                if is_raw {
                    raw.insert(r);
                    changed = true;
                }
            }
        }
    }
    raw
}

/// Removes dead translate/release pairs and orphaned address arithmetic
/// left behind by the rewiring.
pub fn cleanup(f: &mut Function) {
    loop {
        let uses = f.use_counts();
        let mut dead: BTreeSet<InstId> = BTreeSet::new();
        // Translates used only by their releases die together with them.
        for &b in &f.blocks {
            for &id in &f.block(b).insts {
                let inst = f.inst(id);
                match &inst.kind {
                    InstKind::Translate { .. } => {
                        let r = inst.result.expect("translate produces a value");
                        let release_uses: Vec<InstId> = f
                            .blocks
                            .iter()
                            .flat_map(|&bb| f.block(bb).insts.iter().copied())
                            .filter(|&rid| {
                                matches!(&f.inst(rid).kind, InstKind::Release { translation } if *translation == r)
                            })
                            .collect();
                        if uses.get(&r).copied().unwrap_or(0) == release_uses.len() {
                            dead.insert(id);
                            dead.extend(release_uses);
                        }
                    }
                    InstKind::Gep { .. } => {
                        let r = inst.result.expect("gep produces a value");
                        if uses.get(&r).copied().unwrap_or(0) == 0 {
                            dead.insert(id);
                        }
                    }
                    _ => {}
                }
            }
        }
        if dead.is_empty() {
            return;
        }
        f.remove_insts(&dead);
    }
}

/// Strips release metadata before the program runs.
pub fn erase_releases(f: &mut Function) {
    let mut releases: BTreeSet<InstId> = BTreeSet::new();
    for &b in &f.blocks {
        for &id in &f.block(b).insts {
            if matches!(f.inst(id).kind, InstKind::Release { .. }) {
                releases.insert(id);
            }
        }
    }
    f.remove_insts(&releases);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse::parse_program;
    use crate::ir::print::print_program;

    #[test]
    fn rewrite_renames_allocation_calls() {
        let text = concat!(
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %n = const 32\n",
            "  %p = call @malloc(%n)\n",
            "  %q = call @calloc(%n, %n)\n",
            "  %r = call @realloc(%q, %n)\n",
            "  call @free(%p)\n",
            "  call @free(%r)\n",
            "  %z = const 0\n",
            "  ret %z\n",
            "}\n",
        );
        let p = parse_program(text).unwrap();
        let mut f = p.functions[0].clone();
        let n = rewrite_allocations(&mut f, &BTreeSet::new());
        assert_eq!(n, 5);
        let printed = {
            let mut s = String::new();
            crate::ir::print::print_function(&mut s, &f);
            s
        };
        assert!(printed.contains("%p = halloc %n"));
        assert!(printed.contains("halloc %bytes"));
        assert!(printed.contains("%r = hrealloc %q, %n"));
        assert!(printed.contains("hfree %p"));
        assert!(!printed.contains("@malloc"));
    }

    #[test]
    fn rewrite_without_allocations_is_identity() {
        let text = concat!(
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %z = const 0\n",
            "  ret %z\n",
            "}\n",
        );
        let p = parse_program(text).unwrap();
        let mut f = p.functions[0].clone();
        let before = print_program(&p);
        assert_eq!(rewrite_allocations(&mut f, &BTreeSet::new()), 0);
        let after = {
            let prog = Program {
                externs: vec![],
                functions: vec![f],
            };
            print_program(&prog)
        };
        assert_eq!(before, after);
    }

    #[test]
    fn opt_out_leaves_selected_sites_alone() {
        let text = concat!(
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %n = const 32\n",
            "  %p = call @malloc(%n)\n",
            "  call @free(%p)\n",
            "  %z = const 0\n",
            "  ret %z\n",
            "}\n",
        );
        let p = parse_program(text).unwrap();
        let mut f = p.functions[0].clone();
        let skip: BTreeSet<String> = ["malloc".to_string()].into();
        assert_eq!(rewrite_allocations(&mut f, &skip), 1);
        let printed = {
            let mut s = String::new();
            crate::ir::print::print_function(&mut s, &f);
            s
        };
        assert!(printed.contains("call @malloc"));
        assert!(printed.contains("hfree"));
    }

    #[test]
    fn safepoints_cover_entry_back_edges_and_external_calls() {
        let text = concat!(
            "extern @out(i64)\n",
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %zero = const 0\n",
            "  %one = const 1\n",
            "  %n = const 4\n",
            "  br loop\n",
            "loop:\n",
            "  %i = phi i64 [ %zero, entry ], [ %i2, loop ]\n",
            "  %i2 = add %i, %one\n",
            "  %c = icmp slt %i2, %n\n",
            "  cond_br %c, loop, done\n",
            "done:\n",
            "  call @out(%i2)\n",
            "  ret %i2\n",
            "}\n",
        );
        let p = parse_program(text).unwrap();
        let mut f = p.functions[0].clone();
        let n = insert_safepoints(&mut f);
        assert_eq!(n, 3, "entry + one back edge + one external call");
        // Entry poll is the first instruction.
        let first = f.block(f.entry()).insts[0];
        assert!(matches!(f.inst(first).kind, InstKind::Safepoint));
        // The latch poll sits right before the loop terminator.
        let loop_b = f.find_block("loop").unwrap();
        let insts = &f.block(loop_b).insts;
        assert!(matches!(
            f.inst(insts[insts.len() - 2]).kind,
            InstKind::Safepoint
        ));
        // The call poll precedes the call.
        let done = f.find_block("done").unwrap();
        let insts = &f.block(done).insts;
        assert!(matches!(f.inst(insts[0]).kind, InstKind::Safepoint));
    }

    #[test]
    fn loop_free_call_free_function_gets_entry_poll_only() {
        let text = "func @main() -> i64 {\nentry:\n  %z = const 0\n  ret %z\n}\n";
        let p = parse_program(text).unwrap();
        let mut f = p.functions[0].clone();
        assert_eq!(insert_safepoints(&mut f), 1);
    }

    #[test]
    fn escapes_translate_pointer_args_and_release_after() {
        let text = concat!(
            "extern @ext_cmp(ptr, ptr, i64) -> i64\n",
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %n = const 16\n",
            "  %p = call @malloc(%n)\n",
            "  %q = call @malloc(%n)\n",
            "  %r = call @ext_cmp(%p, %q, %n)\n",
            "  ret %r\n",
            "}\n",
        );
        let p = parse_program(text).unwrap();
        let mut f = p.functions[0].clone();
        rewrite_allocations(&mut f, &BTreeSet::new());
        let n = handle_escapes(&mut f);
        assert_eq!(n, 2, "both pointer args escape; the i64 does not");
        let printed = {
            let mut s = String::new();
            crate::ir::print::print_function(&mut s, &f);
            s
        };
        let call_pos = printed.find("call @ext_cmp").unwrap();
        let t1 = printed.find("translate %p").unwrap();
        let t2 = printed.find("translate %q").unwrap();
        assert!(t1 < call_pos && t2 < call_pos);
        let r1 = printed.rfind("release").unwrap();
        assert!(r1 > call_pos, "release follows the call");
        assert!(printed.contains("call @ext_cmp(%esc"));
    }

    #[test]
    fn integer_only_external_call_is_unchanged() {
        let text = concat!(
            "extern @out(i64)\n",
            "func @main() -> i64 {\n",
            "entry:\n",
            "  %z = const 0\n",
            "  call @out(%z)\n",
            "  ret %z\n",
            "}\n",
        );
        let p = parse_program(text).unwrap();
        let mut f = p.functions[0].clone();
        assert_eq!(handle_escapes(&mut f), 0);
    }

    #[test]
    fn irreducible_input_is_refused_with_block_names() {
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
        let p = parse_program(text).unwrap();
        match run_pass(&p, &PassOptions::default()) {
            Err(PassError::Irreducible { edges, .. }) => assert!(!edges.is_empty()),
            other => panic!("expected irreducible error, got {other:?}"),
        }
    }
}

//! The transparency oracle: transformed-mode output must equal direct-mode
//! output under every barrier/defrag schedule. Handles must behave exactly
//! like the pointers they replaced.

use crate::ir::Program;

use super::{run, BarrierSchedule, ExecConfig, ExecError, ExecMode, Trace};

#[derive(Clone, Debug)]
pub struct Divergence {
    /// Minimized schedule still exhibiting the divergence.
    pub schedule: BarrierSchedule,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct EquivalenceReport {
    pub schedules_checked: usize,
    pub divergences: Vec<Divergence>,
}

impl EquivalenceReport {
    pub fn equivalent(&self) -> bool {
        self.divergences.is_empty()
    }
}

fn observable(t: &Trace) -> (i64, &[i64]) {
    (t.ret, &t.outputs)
}

fn compare(
    baseline: &Trace,
    transformed: &Program,
    schedule: &BarrierSchedule,
    proto: &ExecConfig,
) -> Option<String> {
    let cfg = ExecConfig {
        mode: ExecMode::Handle,
        schedule: schedule.clone(),
        ..proto.clone()
    };
    match run(transformed, &cfg) {
        Ok(t) => {
            if observable(&t) != observable(baseline) {
                Some(format!(
                    "outputs diverge: direct ret {} outs {:?}, handle ret {} outs {:?}",
                    baseline.ret,
                    &baseline.outputs,
                    t.ret,
                    &t.outputs
                ))
            } else {
                None
            }
        }
        Err(e) => Some(format!("handle-mode fault: {e}")),
    }
}

/// Runs the original program in direct mode and the transformed program in
/// handle mode under every schedule, reporting each divergence with a
/// greedily minimized schedule.
pub fn check_equivalence(
    original: &Program,
    transformed: &Program,
    schedules: &[BarrierSchedule],
    proto: &ExecConfig,
) -> Result<EquivalenceReport, ExecError> {
    let direct_cfg = ExecConfig {
        mode: ExecMode::Direct,
        schedule: BarrierSchedule::default(),
        ..proto.clone()
    };
    let baseline = run(original, &direct_cfg)?;
    let mut divergences = Vec::new();
    for schedule in schedules {
        if let Some(detail) = compare(&baseline, transformed, schedule, proto) {
            let minimized = minimize(&baseline, transformed, schedule, proto);
            let detail = compare(&baseline, transformed, &minimized, proto).unwrap_or(detail);
            divergences.push(Divergence {
                schedule: minimized,
                detail,
            });
        }
    }
    Ok(EquivalenceReport {
        schedules_checked: schedules.len(),
        divergences,
    })
}

/// Greedy event dropping: keep removing events while the divergence
/// persists.
fn minimize(
    baseline: &Trace,
    transformed: &Program,
    schedule: &BarrierSchedule,
    proto: &ExecConfig,
) -> BarrierSchedule {
    let mut current = schedule.clone();
    loop {
        let mut shrunk = None;
        for i in 0..current.events.len() {
            let mut candidate = current.clone();
            candidate.events.remove(i);
            if compare(baseline, transformed, &candidate, proto).is_some() {
                shrunk = Some(candidate);
                break;
            }
        }
        match shrunk {
            Some(c) => current = c,
            None => return current,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::BarrierEvent;
    use crate::ir::parse::parse_program;
    use crate::pass::{run_pass, PassOptions};

    const PROGRAM: &str = concat!(
        "extern @out(i64)\n",
        "func @main() -> i64 {\n",
        "entry:\n",
        "  %n = const 64\n",
        "  %p = call @malloc(%n)\n",
        "  %junk = call @malloc(%n)\n",
        "  call @free(%junk)\n",
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
        "  %q0 = gep %p, %eight\n",
        "  %v = load i64, %q0\n",
        "  call @out(%v)\n",
        "  ret %v\n",
        "}\n",
    );

    #[test]
    fn transformed_program_is_equivalent_under_schedules() {
        let p = parse_program(PROGRAM).unwrap();
        let out = run_pass(&p, &PassOptions::default()).unwrap();
        let schedules = vec![
            BarrierSchedule::default(),
            BarrierSchedule::every(1, 12, None),
            BarrierSchedule::every(3, 12, Some(32)),
        ];
        let report =
            check_equivalence(&p, &out.program, &schedules, &ExecConfig::default()).unwrap();
        assert!(report.equivalent(), "{:?}", report.divergences);
        assert_eq!(report.schedules_checked, 3);
    }

    #[test]
    fn empty_schedule_is_trivially_required() {
        let p = parse_program(PROGRAM).unwrap();
        let out = run_pass(&p, &PassOptions::default()).unwrap();
        let report = check_equivalence(
            &p,
            &out.program,
            &[BarrierSchedule::default()],
            &ExecConfig::default(),
        )
        .unwrap();
        assert!(report.equivalent(), "{:?}", report.divergences);
    }

    #[test]
    fn broken_pass_variant_is_caught_and_minimized() {
        // Mutated pass: every release is torn out of its death point and
        // re-inserted immediately after its translation, unpinning objects
        // while raw addresses are still live. Relocation under any barrier
        // then leaves the loop writing through a stale address, which must
        // surface as a fault or output divergence.
        let p = parse_program(PROGRAM).unwrap();
        let out = run_pass(
            &p,
            &PassOptions {
                keep_releases: true,
                ..PassOptions::default()
            },
        )
        .unwrap();
        let mut broken = out.program.clone();
        let f = &mut broken.functions[0];
        let mut releases = Vec::new();
        for &b in &f.blocks.clone() {
            for &id in &f.block(b).insts.clone() {
                if let crate::ir::InstKind::Release { translation } = f.inst(id).kind {
                    releases.push((id, translation));
                }
            }
        }
        let ids: std::collections::BTreeSet<_> = releases.iter().map(|(id, _)| *id).collect();
        f.remove_insts(&ids);
        for (_, translation) in releases {
            let def = match f.def_of(translation) {
                Some(crate::ir::ValueDef::Inst(id)) => *id,
                _ => continue,
            };
            let (b, i) = f.position_of(def).unwrap();
            f.insert_inst_at(
                b,
                i + 1,
                crate::ir::InstKind::Release { translation },
                "v",
            );
        }
        let schedules = vec![BarrierSchedule::every(1, 12, None)];
        let report =
            check_equivalence(&p, &broken, &schedules, &ExecConfig::default()).unwrap();
        assert!(
            !report.equivalent(),
            "premature releases must break transparency under relocation"
        );
        // The minimized schedule still triggers it with fewer events.
        assert!(report.divergences[0].schedule.events.len() <= 12);
        assert!(!report.divergences[0].schedule.events.is_empty());
    }
}

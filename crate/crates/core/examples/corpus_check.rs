use alaska_core::interp::equiv::check_equivalence;
use alaska_core::interp::{BarrierSchedule, ExecConfig};
use alaska_core::ir::generate::random_program;
use alaska_core::pass::{run_pass, PassOptions};

fn main() {
    let mut failures = 0;
    for seed in 0..60u64 {
        let p = random_program(seed);
        let kept = run_pass(
            &p,
            &PassOptions { keep_releases: true, ..PassOptions::default() },
        )
        .unwrap_or_else(|e| panic!("seed {seed}: pass failed: {e}"));
        let erased = run_pass(&p, &PassOptions::default()).unwrap();
        let schedules = vec![
            BarrierSchedule::default(),
            BarrierSchedule::every(1, 64, None),
            BarrierSchedule::every(3, 64, Some(64)),
        ];
        for (label, out) in [("kept", &kept), ("erased", &erased)] {
            match check_equivalence(&p, &out.program, &schedules, &ExecConfig::default()) {
                Ok(r) if r.equivalent() => {}
                Ok(r) => {
                    failures += 1;
                    println!("seed {seed} [{label}]: DIVERGENCE: {}", r.divergences[0].detail);
                }
                Err(e) => {
                    failures += 1;
                    println!("seed {seed} [{label}]: baseline error: {e}");
                }
            }
        }
    }
    println!("done, {failures} failures");
}

//! The end-to-end defragmentation experiment driver.
//!
//! Runs a workload against the handle world under a virtual clock, wakes
//! the controller on its schedule, executes the partial passes it requests
//! (with pause durations from the cost model), and samples the heap at a
//! fixed tick cadence. The CSV schema is stable:
//! `tick,live,extent,resident,frag,mode,pause_ms,moves`.

use std::time::Duration;

use crate::anchorage::AnchorageConfig;
use crate::control::{control_tick, Action, ControlParams, ControlState, Mode};
use crate::runtime::{HandleWorld, PauseModel, RuntimeError};

use super::workload::{PinPolicy, Workload, WorkloadSpec};

pub const TICK: Duration = Duration::from_millis(1);

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub spec: WorkloadSpec,
    pub params: ControlParams,
    pub controller_enabled: bool,
    pub anchorage: AnchorageConfig,
    pub pause_model: PauseModel,
    pub pin_policy: PinPolicy,
    pub sample_every_ticks: u64,
}

impl ExperimentConfig {
    pub fn new(spec: WorkloadSpec, params: ControlParams) -> ExperimentConfig {
        ExperimentConfig {
            spec,
            params,
            controller_enabled: true,
            anchorage: AnchorageConfig::default(),
            pause_model: PauseModel::default(),
            pin_policy: PinPolicy::None,
            sample_every_ticks: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetricSample {
    pub tick: u64,
    pub live: u64,
    pub extent: u64,
    pub resident: u64,
    pub frag: f64,
    pub mode: Mode,
    /// Cumulative stop-the-world time, milliseconds.
    pub pause_ms: f64,
    /// Cumulative relocated objects.
    pub moves: u64,
}

#[derive(Clone, Debug)]
pub struct ControllerTraceRow {
    pub t_ns: u64,
    pub mode: Mode,
    pub frag: f64,
    pub action: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub samples: Vec<MetricSample>,
    pub trace: Vec<ControllerTraceRow>,
    pub wall: Duration,
    pub cumulative_defrag: Duration,
    pub passes: u64,
    pub total_moved_bytes: u64,
    pub peak_resident: u64,
    pub peak_frag: f64,
    /// Every back-off the controller computed after a productive pass.
    pub sleeps: Vec<Duration>,
    /// Fraction of wall time spent defragmenting over the whole run, which
    /// starts and (after cooldown) ends in the waiting state.
    pub overhead: f64,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, RuntimeError> {
    let mut world = HandleWorld::new(cfg.anchorage.clone());
    let mut workload = Workload::new(cfg.spec.clone());
    let mut state = ControlState::new();
    let mut trace: Vec<ControllerTraceRow> = Vec::new();
    let mut samples = Vec::new();
    let mut sleeps = Vec::new();
    let mut now_ns: u64 = 0;
    let mut cumulative_pause = Duration::ZERO;
    let mut moves: u64 = 0;
    let mut moved_bytes: u64 = 0;
    let mut passes: u64 = 0;
    let mut peak_resident = 0u64;
    let mut peak_frag = 0f64;
    let ops_per_tick = cfg.spec.op_count.div_ceil(cfg.spec.duration_ticks.max(1));

    let mut controller_round = |world: &mut HandleWorld,
                                workload: &Workload,
                                state: &mut ControlState,
                                now_ns: &mut u64,
                                trace: &mut Vec<ControllerTraceRow>,
                                sleeps: &mut Vec<Duration>,
                                cumulative_pause: &mut Duration,
                                moves: &mut u64,
                                moved_bytes: &mut u64,
                                passes: &mut u64| {
        // Decisions happen at the scheduled wake time.
        let mut vt = state.next_wake_ns.max(*now_ns);
        loop {
            let stats = world.stats();
            let action = control_tick(state, &cfg.params, stats.frag_ratio, stats.extent_bytes, vt);
            match action {
                Action::Sleep(d) => {
                    trace.push(ControllerTraceRow {
                        t_ns: vt,
                        mode: state.mode,
                        frag: stats.frag_ratio,
                        action: format!("sleep:{}us", d.as_micros()),
                    });
                    if state.mode == Mode::Defragmenting {
                        sleeps.push(d);
                    }
                    break;
                }
                Action::RunPartialPass { budget_bytes } => {
                    let pins = cfg.pin_policy.build_map(workload);
                    let report = world.defrag(&pins, budget_bytes);
                    let pause = cfg.pause_model.pause_for(report.moved_bytes);
                    trace.push(ControllerTraceRow {
                        t_ns: vt,
                        mode: state.mode,
                        frag: stats.frag_ratio,
                        action: format!(
                            "pass:budget={budget_bytes},moved={},pause={}us",
                            report.moved_bytes,
                            pause.as_micros()
                        ),
                    });
                    vt += pause.as_nanos() as u64;
                    *cumulative_pause += pause;
                    *moves += report.moved_objects;
                    *moved_bytes += report.moved_bytes;
                    *passes += 1;
                    state.note_pass(pause, report.moved_bytes);
                    // Immediately re-tick for the post-pass decision.
                }
            }
        }
        *now_ns = (*now_ns).max(vt);
    };

    for tick in 0..cfg.spec.duration_ticks {
        for _ in 0..ops_per_tick {
            if workload.finished() {
                break;
            }
            workload.step(&mut world)?;
        }
        now_ns += TICK.as_nanos() as u64;
        while cfg.controller_enabled && state.next_wake_ns <= now_ns {
            controller_round(
                &mut world,
                &workload,
                &mut state,
                &mut now_ns,
                &mut trace,
                &mut sleeps,
                &mut cumulative_pause,
                &mut moves,
                &mut moved_bytes,
                &mut passes,
            );
        }
        if tick % cfg.sample_every_ticks == 0 {
            let stats = world.stats();
            peak_resident = peak_resident.max(stats.resident_bytes);
            peak_frag = peak_frag.max(stats.frag_ratio);
            samples.push(MetricSample {
                tick,
                live: stats.live_bytes,
                extent: stats.extent_bytes,
                resident: stats.resident_bytes,
                frag: stats.frag_ratio,
                mode: state.mode,
                pause_ms: cumulative_pause.as_secs_f64() * 1e3,
                moves,
            });
        }
    }
    // Cooldown: let the controller settle back into waiting so overhead
    // windows start and end in the same state.
    let mut rounds = 0;
    while cfg.controller_enabled && state.mode == Mode::Defragmenting && rounds < 100_000 {
        now_ns = now_ns.max(state.next_wake_ns);
        controller_round(
            &mut world,
            &workload,
            &mut state,
            &mut now_ns,
            &mut trace,
            &mut sleeps,
            &mut cumulative_pause,
            &mut moves,
            &mut moved_bytes,
            &mut passes,
        );
        rounds += 1;
    }
    let stats = world.stats();
    samples.push(MetricSample {
        tick: cfg.spec.duration_ticks,
        live: stats.live_bytes,
        extent: stats.extent_bytes,
        resident: stats.resident_bytes,
        frag: stats.frag_ratio,
        mode: state.mode,
        pause_ms: cumulative_pause.as_secs_f64() * 1e3,
        moves,
    });
    let wall = Duration::from_nanos(now_ns);
    let overhead = if now_ns == 0 {
        0.0
    } else {
        cumulative_pause.as_secs_f64() / wall.as_secs_f64()
    };
    Ok(ExperimentResult {
        samples,
        trace,
        wall,
        cumulative_defrag: cumulative_pause,
        passes,
        total_moved_bytes: moved_bytes,
        peak_resident,
        peak_frag,
        sleeps,
        overhead,
    })
}

pub const CSV_HEADER: &str = "tick,live,extent,resident,frag,mode,pause_ms,moves";

pub fn to_csv(result: &ExperimentResult) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in &result.samples {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{},{:.3},{}\n",
            s.tick, s.live, s.extent, s.resident, s.frag, s.mode, s.pause_ms, s.moves
        ));
    }
    out
}

pub fn trace_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("timestamp,mode,frag,action\n");
    for r in &result.trace {
        out.push_str(&format!(
            "{},{},{:.4},{}\n",
            r.t_ns, r.mode, r.frag, r.action
        ));
    }
    out
}

/// A gnuplot script rendering the time series next to its CSV.
pub fn gnuplot_script(csv_path: &str) -> String {
    format!(
        concat!(
            "set datafile separator ','\n",
            "set key autotitle columnhead\n",
            "set xlabel 'tick (ms)'\n",
            "set ylabel 'bytes'\n",
            "set y2label 'fragmentation ratio'\n",
            "set y2tics\n",
            "plot '{csv}' using 1:2 with lines title 'live', \\\n",
            "     '{csv}' using 1:3 with lines title 'extent', \\\n",
            "     '{csv}' using 1:4 with lines title 'resident', \\\n",
            "     '{csv}' using 1:5 axes x1y2 with lines title 'frag'\n",
        ),
        csv = csv_path
    )
}

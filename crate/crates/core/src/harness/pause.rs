//! The pause study: a fixed ~1 MiB relocation budget fired at a fixed
//! interval while synthetic mutators churn the heap, measuring pause
//! durations and per-operation latency.
//!
//! Runs under the virtual clock. The global operation sequence and the
//! pinned subset are independent of the mutator count — parked mutators
//! contribute nothing to a stop-the-world pause — so pause times depend on
//! relocation work alone. Mutator contexts still hold real pin frames and
//! the unified map is built by scanning them.

use std::time::Duration;

use crate::anchorage::AnchorageConfig;
use crate::pin::{GlobalPinMap, MutatorContext};
use crate::runtime::{HandleWorld, PauseModel, RuntimeError};

use super::workload::{PinPolicy, Workload, WorkloadSpec};

#[derive(Clone, Debug)]
pub struct PauseStudyConfig {
    pub spec: WorkloadSpec,
    pub pause_interval: Duration,
    pub mutators: usize,
    pub pauses: u64,
    pub move_budget: u64,
    pub pin_policy: PinPolicy,
    pub anchorage: AnchorageConfig,
    pub pause_model: PauseModel,
    /// Modeled cost of one workload operation.
    pub op_cost: Duration,
}

impl PauseStudyConfig {
    pub fn new(spec: WorkloadSpec, pause_interval: Duration, mutators: usize) -> PauseStudyConfig {
        PauseStudyConfig {
            spec,
            pause_interval,
            mutators,
            pauses: 50,
            move_budget: 1 << 20,
            pin_policy: PinPolicy::Fraction(0.05),
            anchorage: AnchorageConfig::default(),
            pause_model: PauseModel {
                fixed: Duration::from_micros(100),
                throughput_bytes_per_sec: 256 << 20,
            },
            op_cost: Duration::from_nanos(500),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PauseStudyResult {
    pub mutators: usize,
    pub pause_durations: Vec<Duration>,
    pub op_latencies: Vec<Duration>,
    pub pauses_executed: u64,
    pub total_moved_bytes: u64,
}

impl PauseStudyResult {
    pub fn mean_pause(&self) -> Duration {
        if self.pause_durations.is_empty() {
            return Duration::ZERO;
        }
        self.pause_durations.iter().sum::<Duration>() / self.pause_durations.len() as u32
    }

    pub fn latency_percentile(&self, p: f64) -> Duration {
        if self.op_latencies.is_empty() {
            return Duration::ZERO;
        }
        let mut sorted = self.op_latencies.clone();
        sorted.sort();
        let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
        sorted[idx]
    }
}

pub fn run_pause_study(cfg: &PauseStudyConfig) -> Result<PauseStudyResult, RuntimeError> {
    let mut world = HandleWorld::new(cfg.anchorage.clone());
    let mut workload = Workload::new(cfg.spec.clone());
    // Pin frames live in per-mutator contexts; pinned handles are dealt
    // round-robin so the union is identical for every mutator count.
    let mut mutators: Vec<MutatorContext> = (0..cfg.mutators.max(1))
        .map(|_| MutatorContext::new())
        .collect();
    let mut pause_durations = Vec::new();
    let mut op_latencies = Vec::new();
    let mut total_moved = 0u64;
    let mut now = Duration::ZERO;
    let mut next_pause = cfg.pause_interval;
    let mut pauses_done = 0u64;
    let mut pending_pause = Duration::ZERO;

    while pauses_done < cfg.pauses {
        if workload.finished() {
            break;
        }
        // One op; its latency absorbs any pause that just happened.
        workload.step(&mut world)?;
        now += cfg.op_cost;
        op_latencies.push(cfg.op_cost + pending_pause);
        pending_pause = Duration::ZERO;

        if now >= next_pause {
            // Publish pins into the mutator frames, round-robin by id.
            let pin_ids: Vec<u32> = cfg.pin_policy.build_map(&workload).iter().collect();
            let slots = pin_ids.len().div_ceil(mutators.len()).max(1);
            for ctx in &mut mutators {
                ctx.frame_push(0, slots);
            }
            for (i, id) in pin_ids.iter().enumerate() {
                let m = i % mutators.len();
                let slot = i / mutators.len();
                let value = crate::handle::Handle::encode(*id, 0)
                    .expect("live ids are in range")
                    .bits();
                mutators[m].pin(slot, value).expect("slot fits");
            }
            let unified = GlobalPinMap::scan_contexts(mutators.iter());
            let report = world.defrag(&unified, cfg.move_budget);
            total_moved += report.moved_bytes;
            let pause = cfg.pause_model.pause_for(report.moved_bytes);
            pause_durations.push(pause);
            now += pause;
            pending_pause = pause;
            pauses_done += 1;
            next_pause += cfg.pause_interval;
            for ctx in &mut mutators {
                ctx.frame_pop();
            }
        }
    }
    Ok(PauseStudyResult {
        mutators: cfg.mutators,
        pause_durations,
        op_latencies,
        pauses_executed: pauses_done,
        total_moved_bytes: total_moved,
    })
}

/// Spearman rank correlation with average ranks for ties; zero variance in
/// either variable yields 0 (no trend can be claimed from constants).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).expect("no NaNs"));
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..rx.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx).powi(2);
        vy += (ry[i] - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

pub fn pause_csv(results: &[PauseStudyResult]) -> String {
    let mut out = String::from("mutators,pause_idx,pause_us,mean_op_us,p99_op_us\n");
    for r in results {
        let mean_op = if r.op_latencies.is_empty() {
            0.0
        } else {
            r.op_latencies.iter().map(|d| d.as_secs_f64()).sum::<f64>()
                / r.op_latencies.len() as f64
                * 1e6
        };
        let p99 = r.latency_percentile(0.99).as_secs_f64() * 1e6;
        for (i, p) in r.pause_durations.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{:.3},{:.3},{:.3}\n",
                r.mutators,
                i,
                p.as_secs_f64() * 1e6,
                mean_op,
                p99
            ));
        }
    }
    out
}

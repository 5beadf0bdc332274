//! Fragmentation experiment harness: drives an allocation workload against
//! the defragmenting runtime under the virtual clock, emitting a CSV time
//! series and a gnuplot script. Also runs the pause study.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};

use alaska_cli::parse_size;
use alaska_core::anchorage::AnchorageConfig;
use alaska_core::control::ControlParams;
use alaska_core::harness::{
    gnuplot_script, pause_csv, run_experiment, run_pause_study, to_csv, trace_csv,
    ExperimentConfig, PauseStudyConfig, PinPolicy, SizeDist, WorkloadKind, WorkloadSpec,
};
use alaska_core::runtime::PauseModel;

#[derive(Copy, Clone, ValueEnum)]
enum WorkloadArg {
    LruChurn,
    UniformRandom,
    Ramp,
}

#[derive(Parser)]
#[command(
    name = "alaska-bench",
    about = "Defragmentation experiments and the pause study"
)]
struct Args {
    /// Workload shape.
    #[arg(long, value_enum, default_value = "lru-churn")]
    workload: WorkloadArg,
    /// Live-byte cap, e.g. 10MiB.
    #[arg(long, default_value = "10MiB")]
    live_cap: String,
    /// Object size in bytes (fixed), or lo..hi for a range.
    #[arg(long, default_value = "500")]
    obj_size: String,
    /// Number of workload operations.
    #[arg(long, default_value_t = 0)]
    ops: u64,
    /// Virtual-millisecond ticks the workload is spread over.
    #[arg(long, default_value_t = 4000)]
    ticks: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1.2)]
    f_lb: f64,
    #[arg(long, default_value_t = 1.5)]
    f_ub: f64,
    #[arg(long, default_value_t = 0.01)]
    o_lb: f64,
    #[arg(long, default_value_t = 0.05)]
    o_ub: f64,
    #[arg(long, default_value_t = 0.25)]
    alpha: f64,
    #[arg(long, default_value_t = 500)]
    poll_interval_ms: u64,
    /// Run the workload without the controller (baseline).
    #[arg(long)]
    disable_controller: bool,
    /// Fraction of live objects pinned during passes.
    #[arg(long, default_value_t = 0.0)]
    pin_fraction: f64,
    /// Sub-heap span, e.g. 1MiB.
    #[arg(long, default_value = "1MiB")]
    sub_heap_span: String,
    /// Modeled page size.
    #[arg(long, default_value = "4096")]
    page_size: String,
    /// Modeled relocation throughput, e.g. 64MiB (per second).
    #[arg(long, default_value = "64MiB")]
    move_throughput: String,
    /// Output CSV path; a .gp gnuplot script lands next to it.
    #[arg(long)]
    out: PathBuf,
    /// Also write the controller decision trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,

    /// Run the pause study instead of the fragmentation experiment.
    #[arg(long)]
    pause_study: bool,
    /// Pause-study: interval between forced pauses.
    #[arg(long, default_value_t = 500)]
    pause_interval_ms: u64,
    /// Pause-study: mutator counts, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8])]
    mutators: Vec<usize>,
    /// Pause-study: number of pauses per mutator count.
    #[arg(long, default_value_t = 50)]
    pauses: u64,
    /// Pause-study: per-pause relocation budget, e.g. 1MiB.
    #[arg(long, default_value = "1MiB")]
    move_budget: String,
}

fn obj_size_dist(text: &str) -> Result<SizeDist> {
    if let Some((lo, hi)) = text.split_once("..") {
        Ok(SizeDist::Range(parse_size(lo)?, parse_size(hi)?))
    } else {
        Ok(SizeDist::Fixed(parse_size(text)?))
    }
}

fn main() -> Result<()> {
    let args = Args::parse();
    let live_cap = parse_size(&args.live_cap)?;
    let obj_size = obj_size_dist(&args.obj_size)?;
    let kind = match args.workload {
        WorkloadArg::LruChurn => WorkloadKind::LruChurn,
        WorkloadArg::UniformRandom => WorkloadKind::UniformRandom,
        WorkloadArg::Ramp => WorkloadKind::Ramp,
    };
    // Default operation count: three times the cap's worth of inserts.
    let mean_size = match obj_size {
        SizeDist::Fixed(n) => n,
        SizeDist::Range(lo, hi) => (lo + hi) / 2,
    };
    let ops = if args.ops > 0 {
        args.ops
    } else {
        3 * live_cap / mean_size.max(1)
    };
    let spec = WorkloadSpec {
        kind,
        live_cap_bytes: live_cap,
        obj_size,
        op_count: ops,
        seed: args.seed,
        duration_ticks: args.ticks,
    };
    let params = ControlParams {
        f_lb: args.f_lb,
        f_ub: args.f_ub,
        o_lb: args.o_lb,
        o_ub: args.o_ub,
        alpha: args.alpha,
        poll_interval: Duration::from_millis(args.poll_interval_ms),
    };
    params.validate().context("controller parameters")?;
    let anchorage = AnchorageConfig {
        page_size: parse_size(&args.page_size)?,
        sub_heap_span: parse_size(&args.sub_heap_span)?,
        ..AnchorageConfig::default()
    };
    let pause_model = PauseModel {
        fixed: Duration::from_micros(100),
        throughput_bytes_per_sec: parse_size(&args.move_throughput)?,
    };
    let pin_policy = if args.pin_fraction <= 0.0 {
        PinPolicy::None
    } else if args.pin_fraction >= 1.0 {
        PinPolicy::All
    } else {
        PinPolicy::Fraction(args.pin_fraction)
    };

    if args.pause_study {
        let mut results = Vec::new();
        for &m in &args.mutators {
            let mut cfg = PauseStudyConfig::new(
                spec.clone(),
                Duration::from_millis(args.pause_interval_ms),
                m,
            );
            cfg.pauses = args.pauses;
            cfg.move_budget = parse_size(&args.move_budget)?;
            cfg.anchorage = anchorage.clone();
            let r = run_pause_study(&cfg).context("pause study")?;
            println!(
                "mutators={} pauses={} mean_pause={:.3}ms moved={}B",
                m,
                r.pauses_executed,
                r.mean_pause().as_secs_f64() * 1e3,
                r.total_moved_bytes
            );
            results.push(r);
        }
        std::fs::write(&args.out, pause_csv(&results))
            .with_context(|| format!("writing {}", args.out.display()))?;
        return Ok(());
    }

    let cfg = ExperimentConfig {
        spec,
        params,
        controller_enabled: !args.disable_controller,
        anchorage,
        pause_model,
        pin_policy,
        sample_every_ticks: 1,
    };
    let result = run_experiment(&cfg).context("experiment")?;
    std::fs::write(&args.out, to_csv(&result))
        .with_context(|| format!("writing {}", args.out.display()))?;
    let gp = args.out.with_extension("gp");
    std::fs::write(&gp, gnuplot_script(&args.out.to_string_lossy()))
        .with_context(|| format!("writing {}", gp.display()))?;
    if let Some(path) = &args.trace {
        std::fs::write(path, trace_csv(&result))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let last = result.samples.last().expect("at least one sample");
    println!(
        "passes={} moved={}B reclaimed-peak: resident={}B frag={:.3} | final: resident={}B frag={:.3} | overhead={:.4} wall={:.1}s",
        result.passes,
        result.total_moved_bytes,
        result.peak_resident,
        result.peak_frag,
        last.resident,
        last.frag,
        result.overhead,
        result.wall.as_secs_f64(),
    );
    Ok(())
}

//! Executes a textual IR program in direct or handle mode, optionally
//! injecting barrier/defrag events from a JSON schedule, and reports the
//! observable outputs plus runtime counters.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};

use alaska_core::interp::{run, BarrierSchedule, ExecConfig, ExecMode};
use alaska_core::ir::parse::parse_program;

#[derive(Copy, Clone, ValueEnum)]
enum Mode {
    Direct,
    Handle,
}

#[derive(Parser)]
#[command(name = "alaska-run", about = "Reference interpreter for .tir programs")]
struct Args {
    /// Program to execute (.tir).
    #[arg(long)]
    program: PathBuf,
    /// Execution mode: direct allocation or the handle runtime.
    #[arg(long, value_enum)]
    mode: Mode,
    /// JSON barrier/defrag schedule, e.g.
    /// {"events":[{"at_safepoint":3,"budget_bytes":4096}]}.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Write runtime counters as CSV (counter,value).
    #[arg(long)]
    counters: Option<PathBuf>,
    /// Deterministic seed for the runtime's external randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Instruction budget before the run is aborted.
    #[arg(long, default_value_t = 50_000_000)]
    step_limit: u64,
}

fn main() -> Result<()> {
    let args = Args::parse();
    let text = std::fs::read_to_string(&args.program)
        .with_context(|| format!("reading {}", args.program.display()))?;
    let program = parse_program(&text).context("parsing program")?;
    let schedule = match &args.schedule {
        Some(path) => {
            let json = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<BarrierSchedule>(&json)
                .with_context(|| format!("parsing schedule {}", path.display()))?
        }
        None => BarrierSchedule::default(),
    };
    let cfg = ExecConfig {
        mode: match args.mode {
            Mode::Direct => ExecMode::Direct,
            Mode::Handle => ExecMode::Handle,
        },
        seed: args.seed,
        step_limit: args.step_limit,
        schedule,
        ..ExecConfig::default()
    };
    let trace = run(&program, &cfg).context("executing program")?;
    for v in &trace.outputs {
        println!("out {v}");
    }
    println!("ret {}", trace.ret);
    if let Some(path) = &args.counters {
        let c = &trace.counters;
        let csv = format!(
            "counter,value\nsteps,{}\ntranslates,{}\npins,{}\nreleases,{}\nnoop_releases,{}\nsafepoints,{}\nbarriers,{}\nmoves,{}\nmoved_bytes,{}\nallocs,{}\nfrees,{}\nmax_live_pins,{}\n",
            c.steps,
            c.translates,
            c.pins,
            c.releases,
            c.noop_releases,
            c.safepoints,
            c.barriers,
            c.moves,
            c.moved_bytes,
            c.allocs,
            c.frees,
            c.max_live_pins,
        );
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

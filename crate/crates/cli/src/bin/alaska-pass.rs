//! Transforms a textual IR program to use handles: rewrites allocation
//! calls, inserts and hoists translations, places safepoints, and handles
//! escapes to external functions.

use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;

use alaska_core::ir::parse::parse_program;
use alaska_core::ir::print::print_program;
use alaska_core::pass::{run_pass, PassOptions};

#[derive(Parser)]
#[command(name = "alaska-pass", about = "Handle transformation pass over .tir programs")]
struct Args {
    /// Input program (.tir).
    #[arg(long)]
    input: PathBuf,
    /// Output path for the transformed program.
    #[arg(long)]
    output: PathBuf,
    /// Disable loop hoisting: translate before every memory access.
    #[arg(long)]
    no_hoist: bool,
    /// Omit pin tracking (slots and safepoints), for ablation runs.
    #[arg(long)]
    no_tracking: bool,
    /// Keep release instructions in the output instead of erasing them.
    #[arg(long)]
    keep_releases: bool,
    /// Callee names whose call sites are exempt from allocation rewriting.
    #[arg(long, value_delimiter = ',')]
    no_rewrite: Vec<String>,
}

fn main() -> Result<()> {
    let args = Args::parse();
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let program = parse_program(&text).context("parsing input program")?;
    let options = PassOptions {
        hoist: !args.no_hoist,
        tracking: !args.no_tracking,
        keep_releases: args.keep_releases,
        rewrite_opt_out: args.no_rewrite.into_iter().collect::<BTreeSet<_>>(),
    };
    let out = run_pass(&program, &options).context("transforming program")?;
    std::fs::write(&args.output, print_program(&out.program))
        .with_context(|| format!("writing {}", args.output.display()))?;
    for (f, report) in out.program.functions.iter().zip(&out.reports) {
        eprintln!(
            "@{}: {} translations ({} hoisted), {} slots, {} safepoints, {} escape pins",
            f.name,
            report.plan.trees.len(),
            report.plan.hoisted(),
            report.slots.slot_count,
            report.safepoints,
            report.escape_translations,
        );
    }
    Ok(())
}

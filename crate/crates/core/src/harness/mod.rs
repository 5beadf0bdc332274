//! Workload generation, experiment drivers for the defragmentation
//! studies, and CSV/plot-script emission.

pub mod experiment;
pub mod pause;
pub mod workload;

pub use experiment::{
    gnuplot_script, run_experiment, to_csv, trace_csv, ExperimentConfig, ExperimentResult,
    MetricSample, CSV_HEADER,
};
pub use pause::{pause_csv, run_pause_study, spearman, PauseStudyConfig, PauseStudyResult};
pub use workload::{PinPolicy, SizeDist, Workload, WorkloadKind, WorkloadSpec};

//! Configuration, persistence, sweeps, ablations and reporting used by the
//! `dlbs` command-line tool.

pub mod ablation;
pub mod config;
pub mod record;
pub mod report;

pub use ablation::{run_ablation, AblationRow};
pub use config::{Problem, RunConfig};
pub use record::{run_single, run_sweep, RunRecord, RunStatus};
pub use report::{aggregate, write_report, AggregateReport, PairSpec};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "DLBS_OUT";

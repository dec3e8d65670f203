//! Command implementations behind the `falcon-lab` binary.

pub mod config;
pub mod pipeline;
pub mod sweep;
pub mod verify;

pub use config::{BoundsSettings, ExperimentConfig};
pub use pipeline::{adapt, eval, gen_data, pretrain, report_csv, Datasets, EvalOutput, SplitRef};
pub use sweep::{run_sweep, SweepAxis, SweepParam, SweepResult, SweepSpec};
pub use verify::{verify_bounds, write_bounds_report, BoundsReport};

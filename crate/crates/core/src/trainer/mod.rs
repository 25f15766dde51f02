//! Run configuration, checkpoints, the training loop, evaluation and sweeps.

pub mod checkpoint;
pub mod config;
mod plot;
pub mod run;
pub mod sweep;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{NormSource, PlanSource, RunConfig, SplitPolicy};
pub use plot::curves;
pub use run::{epochs_csv, evaluate, evaluate_set, load_sets, train, EpochLog, EvalReport, PreparedSet, SetMetrics, TrainSummary, Trainer};
pub use sweep::{ranked_summary, sweep, sweep_csv, SweepOptions, SweepRow, CI_EPOCH_CAP, SWEEP_HEADER};

//! Synthetic position-sensitive tasks, training and evaluation.

mod analysis;
mod data;
mod train;

pub use analysis::{
    attention_csv, band_mass, export_attention, run_parallel, sweep_csv, sweep_k, uniform_band_mass, SweepRow,
    BAND_RADIUS,
};
pub use data::{gen_offset_copy, Batch, TaskGenerator, TaskKind, TaskSpec};
pub use train::{
    batch_accuracy, extrapolate_eval, train, EpochRecord, EvalOutcome, Experiment, RunMetrics, Schedule,
};

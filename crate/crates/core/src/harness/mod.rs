//! Experiment layer: synthetic tasks, training, evaluation and sweeps.

mod dataset;
mod eval;
mod models;
mod report;
mod sweep;
mod train;

pub use dataset::{Dataset, Splits, SyntheticTask};
pub use eval::{evaluate, predictions, probe_sites, ratio_summary, variance_ratio, SiteRatio, ZERO_VARIANCE};
pub use models::Architecture;
pub use report::{
    histogram, layer_correlation_report, render_sweep_table, LayerCorrelation, ReportError, HISTOGRAM_BINS,
};
pub use sweep::{
    decode_csv, encode_csv, run_point, sweep, sweep_to_files, Method, SweepConfig, SweepError, SweepInputs,
    SweepResult, SweepRow,
};
pub use train::{train, TrainConfig, TrainError, WeightDecay, BN_MOMENTUM};

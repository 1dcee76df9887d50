//! Training the weighted three-term objective and its baselines on the toy
//! task, plus the ablation bench.

mod bench;
mod config;
mod train;

pub use bench::{bench, render_table, BenchReport, CellSummary, SeedResult, BENCH_REPORT_VERSION};
pub use config::{
    parse_config, read_config, BenchCell, BenchConfig, CareConfig, ConfigError, DataConfig, ExperimentConfig, Method,
    Resolved,
};
pub use train::{
    care_objective, evaluate, prepare_data, train, CareWeights, DataSummary, Metrics, StepLoss, TrainData, TrainReport,
    Trainer, TRAIN_REPORT_VERSION,
};

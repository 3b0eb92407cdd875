//! Orchestration of preference training runs: configuration, the training
//! loop, reports, checkpoints and token heatmaps.

pub mod checkpoint;
pub mod config;
pub mod heatmap;
pub mod report;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Method, QuantileScope, RunConfig};
pub use heatmap::{dump_token_heatmap, token_heatmap, HeatmapRow};
pub use report::{emit_report, read_report, RunReport, CODE_VERSION, SCHEMA_VERSION};
pub use train::{
    generate_data, prepare, train, train_all_methods, train_prepared, worker_threads, Prepared,
    TrainOutcome,
};

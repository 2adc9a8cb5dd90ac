//! End-to-end runs: configuration, data sets, inference and the batch
//! commands.

pub mod benchmark;
pub mod commands;
pub mod config;
pub mod data;
pub mod infer;

pub use commands::{
    cmd_baseline, cmd_eval_benchmark, cmd_eval_tracks, cmd_generate, cmd_infer, cmd_train, ModelKind,
};
pub use config::RunConfig;
pub use infer::{infer_scene, InferStats, Models};

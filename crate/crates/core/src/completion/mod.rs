//! Trajectory completion for matched track fragments.

pub mod model;
pub mod track;
pub mod training;

pub use model::{
    completion_loss, decode_initial_trajectory, make_time_queries, refine_trajectory, CompletionConfig,
    CompletionInput, CompletionNet, TimeQuery, Variant,
};
pub use track::{complete_track, CompletedTrack, GapPolicy};
pub use training::{completion_eval_loss, predict_sample, train_completion};

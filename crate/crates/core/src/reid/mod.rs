//! Re-identification: which post-occlusion tracklet continues a history.

pub mod input;
pub mod matching;
pub mod model;
pub mod training;

pub use input::{InputConfig, ReidInput};
pub use matching::{
    build_score_matrix, fuse_scores, greedy_match, greedy_match_indices, AffinityResult, AssociationConfig,
    ScoreMatrix,
};
pub use model::{map_affinity, motion_affinity, Affinities, Branch, ReidConfig, ReidNet};
pub use training::{
    argmax, reid_eval_loss, reid_sample_loss, reid_train_step, sample_scores, train_reid,
};

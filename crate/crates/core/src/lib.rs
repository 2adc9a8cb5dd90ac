//! Offline tracklet re-identification and occlusion track completion.
//!
//! Histories and futures of fragmented vehicle tracks are associated with a
//! learned motion branch and a lane-map branch, and the missing segment of
//! every matched pair is regressed by a time-query decoder refined against
//! the lane graph. A synthetic scene generator with pseudo-occlusions
//! provides training and evaluation data.

pub mod baselines;
pub mod completion;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod lanes;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod reid;
pub mod spatial;
pub mod synth;
pub mod tracklet;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{from_local_frame, to_local_frame, wrap_angle, Pose2D};
pub use lanes::{build_lane_graph, LaneGraph, LanePolyline, LanePose, Lanelet};
pub use tracklet::{candidate_filter, tracklet_features, Observation, TrackId, Tracklet, TrackletFeatures};

//! Network-ready inputs: scaled tracklet features and lane sequences in a
//! common local frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::lanes::{LaneGraph, LANE_FEATURE_WIDTH};
use crate::nn::Tensor;
use crate::tracklet::{tracklet_features, tracklet_in_frame, Tracklet, FEATURE_WIDTH, FEATURE_WIDTH_NO_VELOCITY};

pub const POS_SCALE: f64 = 20.0;
pub const TIME_SCALE: f64 = 5.0;
pub const VEL_SCALE: f64 = 10.0;

/// Observations of `trk` with `t > t_end - window`.
pub fn crop_tail(trk: &Tracklet, window: f64) -> Tracklet {
    let end = trk.end_time();
    let obs: Vec<_> = trk.obs.iter().filter(|o| o.t > end - window + 1e-9).cloned().collect();
    Tracklet { obs, ..trk.clone() }
}

/// Observations of `trk` with `t < t_start + window`.
pub fn crop_head(trk: &Tracklet, window: f64) -> Tracklet {
    let start = trk.start_time();
    let obs: Vec<_> = trk.obs.iter().filter(|o| o.t < start + window - 1e-9).cloned().collect();
    Tracklet { obs, ..trk.clone() }
}

/// Scaled features of a tracklet already in the working frame, one row per
/// observation: `[x, y, theta, t, cos, sin(, vx, vy)]`.
pub fn scaled_features(trk: &Tracklet, t0: f64, velocity: bool) -> Result<Tensor> {
    let f = tracklet_features(trk, &Pose2D::ORIGIN, t0, velocity)?;
    let mut data = f.data;
    for row in data.chunks_mut(f.width) {
        row[0] /= POS_SCALE;
        row[1] /= POS_SCALE;
        row[3] /= TIME_SCALE;
        if velocity {
            row[6] /= VEL_SCALE;
            row[7] /= VEL_SCALE;
        }
    }
    Tensor::from_vec(f.rows, f.width, data)
}

pub fn feature_width(velocity: bool) -> usize {
    if velocity {
        FEATURE_WIDTH
    } else {
        FEATURE_WIDTH_NO_VELOCITY
    }
}

/// Right-padded batch of sequences as per-step `B x width` tensors with
/// validity masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub steps: Vec<Tensor>,
    pub masks: Vec<Vec<bool>>,
    /// Position (meters, working frame) of every valid entry, by step then row.
    pub pos: Vec<Vec<[f64; 2]>>,
    pub lens: Vec<usize>,
}

impl SeqBatch {
    pub fn new(seqs: &[(Tensor, Vec<[f64; 2]>)], width: usize) -> Self {
        let b = seqs.len();
        let t_max = seqs.iter().map(|s| s.0.rows()).max().unwrap_or(0);
        let mut steps = Vec::with_capacity(t_max);
        let mut masks = Vec::with_capacity(t_max);
        let mut pos = Vec::with_capacity(t_max);
        for k in 0..t_max {
            let mut m = Tensor::zeros(b, width);
            let mut mk = vec![false; b];
            let mut pk = Vec::new();
            for (i, (f, p)) in seqs.iter().enumerate() {
                if k < f.rows() {
                    m.row_mut(i).copy_from_slice(f.row(k));
                    mk[i] = true;
                    pk.push(p[k]);
                }
            }
            steps.push(m);
            masks.push(mk);
            pos.push(pk);
        }
        Self {
            steps,
            masks,
            pos,
            lens: seqs.iter().map(|s| s.0.rows()).collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// Lane poses flattened to `P x 8` features plus per-lanelet gather indices
/// for sequence encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneInput {
    pub pose_features: Tensor,
    pub pose_pos: Vec<[f64; 2]>,
    /// Lanelet of each pose.
    pub owner: Vec<usize>,
    /// For step `k`, the pose row of every lanelet (`None` once it ended).
    pub seq_index: Vec<Vec<Option<usize>>>,
    pub seq_masks: Vec<Vec<bool>>,
    pub n_lane: usize,
}

impl LaneInput {
    /// `graph` must already be in the working frame. `None` when empty.
    pub fn new(graph: &LaneGraph) -> Option<Self> {
        if graph.is_empty() {
            return None;
        }
        let mut data = Vec::new();
        let mut pose_pos = Vec::new();
        let mut owner = Vec::new();
        let mut offsets = Vec::new();
        for (i, ll) in graph.lanelets.iter().enumerate() {
            offsets.push(pose_pos.len());
            for p in &ll.poses {
                let mut f = p.features(&Pose2D::ORIGIN);
                f[0] /= POS_SCALE;
                f[1] /= POS_SCALE;
                data.extend_from_slice(&f);
                pose_pos.push(p.xy());
                owner.push(i);
            }
        }
        let n_lane = graph.n_lane();
        let l = graph.max_poses();
        let mut seq_index = Vec::with_capacity(l);
        let mut seq_masks = Vec::with_capacity(l);
        for k in 0..l {
            let idx: Vec<Option<usize>> = graph
                .lanelets
                .iter()
                .zip(&offsets)
                .map(|(ll, &o)| (k < ll.poses.len()).then_some(o + k))
                .collect();
            seq_masks.push(idx.iter().map(Option::is_some).collect());
            seq_index.push(idx);
        }
        let p = pose_pos.len();
        Some(Self {
            pose_features: Tensor::from_vec(p, LANE_FEATURE_WIDTH, data).expect("row width"),
            pose_pos,
            owner,
            seq_index,
            seq_masks,
            n_lane,
        })
    }
}

/// Windowing and cropping used when preparing Re-ID inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputConfig {
    /// Seconds of history kept (latest observations).
    pub history_window: f64,
    /// Seconds of each future candidate kept (earliest observations).
    pub future_window: f64,
    /// Lanelets with a pose within this distance of any kept observation
    /// are used by the map branch.
    pub lane_crop_radius: f64,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            history_window: 2.5,
            future_window: 3.0,
            lane_crop_radius: 30.0,
        }
    }
}

/// Everything the Re-ID networks consume for one history and its candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidInput {
    pub history: Tensor,
    pub history_pos: Vec<[f64; 2]>,
    pub candidates: SeqBatch,
    pub lanes: Option<LaneInput>,
}

impl ReidInput {
    /// Builds inputs in the frame `origin` (given in the tracklets' frame).
    /// Lanes are only prepared when `graph` is given.
    pub fn new(
        history: &Tracklet,
        futures: &[&Tracklet],
        graph: Option<&LaneGraph>,
        origin: &Pose2D,
        cfg: &InputConfig,
    ) -> Result<Self> {
        if history.obs.is_empty() {
            return Err(Error::Empty(format!("history {}", history.id)));
        }
        let h = crop_tail(history, cfg.history_window);
        let fs: Vec<Tracklet> = futures.iter().map(|f| crop_head(f, cfg.future_window)).collect();
        if let Some(f) = fs.iter().find(|f| f.obs.is_empty()) {
            return Err(Error::Empty(format!("candidate {}", f.id)));
        }
        let lanes = match graph {
            Some(g) => {
                let pts: Vec<[f64; 2]> = std::iter::once(&h)
                    .chain(&fs)
                    .flat_map(|t| t.obs.iter().map(|o| [o.x, o.y]))
                    .collect();
                let ids = g.lanelets_near(&pts, cfg.lane_crop_radius);
                LaneInput::new(&g.local_subgraph(&ids, origin))
            }
            None => None,
        };
        let h = tracklet_in_frame(&h, origin);
        let t0 = h.end_time();
        let xy = |t: &Tracklet| t.obs.iter().map(|o| [o.x, o.y]).collect::<Vec<_>>();
        let mut seqs = Vec::with_capacity(fs.len());
        for f in &fs {
            let f = tracklet_in_frame(f, origin);
            seqs.push((scaled_features(&f, t0, true)?, xy(&f)));
        }
        Ok(Self {
            history: scaled_features(&h, t0, true)?,
            history_pos: xy(&h),
            candidates: SeqBatch::new(&seqs, FEATURE_WIDTH),
            lanes,
        })
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates.batch()
    }
}

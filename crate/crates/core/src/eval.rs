//! Gap-recovery metrics on pseudo-occlusion samples and simplified
//! track-level identity metrics.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, Pose2D};
use crate::tracklet::{TrackId, Tracklet};

pub const DEFAULT_MISS_THRESHOLD: f64 = 2.0;
pub const DEFAULT_MATCH_RADIUS: f64 = 2.0;

/// Fraction of samples whose prediction equals the labelled index.
pub fn association_accuracy(predictions: &[Option<usize>], gt: &[usize]) -> Result<f64> {
    if predictions.len() != gt.len() {
        return Err(Error::Shape {
            op: "association_accuracy",
            lhs: (predictions.len(), 1),
            rhs: (gt.len(), 1),
        });
    }
    if gt.is_empty() {
        return Err(Error::Empty("association predictions".into()));
    }
    let hits = predictions.iter().zip(gt).filter(|(p, g)| **p == Some(**g)).count();
    Ok(hits as f64 / gt.len() as f64)
}

fn check_aligned(op: &'static str, pred: &[Vec<Pose2D>], gt: &[Vec<Pose2D>]) -> Result<usize> {
    if pred.len() != gt.len() {
        return Err(Error::Shape { op, lhs: (pred.len(), 0), rhs: (gt.len(), 0) });
    }
    let mut n = 0;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::Shape { op, lhs: (p.len(), 3), rhs: (g.len(), 3) });
        }
        n += p.len();
    }
    Ok(n)
}

fn mean_over_points(
    op: &'static str,
    pred: &[Vec<Pose2D>],
    gt: &[Vec<Pose2D>],
    f: impl Fn(&Pose2D, &Pose2D) -> f64,
) -> Result<f64> {
    let n = check_aligned(op, pred, gt)?;
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .flat_map(|(p, g)| p.iter().zip(g))
        .map(|(a, b)| f(a, b))
        .sum();
    Ok(sum / n as f64)
}

/// Mean Euclidean position error over every timestamp of every trajectory.
pub fn ade(pred: &[Vec<Pose2D>], gt: &[Vec<Pose2D>]) -> Result<f64> {
    mean_over_points("ade", pred, gt, |a, b| a.distance(b))
}

/// Mean absolute wrapped yaw error, in degrees.
pub fn yaw_error_deg(pred: &[Vec<Pose2D>], gt: &[Vec<Pose2D>]) -> Result<f64> {
    mean_over_points("yaw_error", pred, gt, |a, b| angle_diff(a.theta, b.theta).abs()).map(f64::to_degrees)
}

/// Fraction of trajectories whose largest pointwise error exceeds
/// `threshold` meters. Trajectories are paired by position; unequal
/// lengths are compared over the common prefix.
pub fn miss_rate(pred: &[Vec<Pose2D>], gt: &[Vec<Pose2D>], threshold: f64) -> f64 {
    let n = pred.len().min(gt.len());
    if n == 0 {
        return 0.0;
    }
    let misses = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| p.iter().zip(g.iter()).any(|(a, b)| a.distance(b) > threshold))
        .count();
    misses as f64 / n as f64
}

/// Identity switches and recall of `pred` against `gt`, per-frame greedy
/// center matching within `radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityMetrics {
    pub ids: usize,
    pub recall: f64,
    pub matched: usize,
    pub total: usize,
}

fn frame_key(t: f64) -> i64 {
    (t * 1e6).round() as i64
}

pub fn ids_and_recall(pred: &[Tracklet], gt: &[Tracklet], radius: f64) -> IdentityMetrics {
    match_frames(pred, gt, radius).0
}

/// Per-frame assignment `(frame key, predicted id) -> ground-truth id`.
type Assignment = BTreeMap<(i64, TrackId), TrackId>;

fn match_frames(pred: &[Tracklet], gt: &[Tracklet], radius: f64) -> (IdentityMetrics, Assignment) {
    type Boxes = Vec<(TrackId, [f64; 2])>;
    let mut frames: BTreeMap<i64, (Boxes, Boxes)> = BTreeMap::new();
    for t in gt {
        for o in &t.obs {
            frames.entry(frame_key(o.t)).or_default().0.push((t.id, [o.x, o.y]));
        }
    }
    for t in pred {
        for o in &t.obs {
            frames.entry(frame_key(o.t)).or_default().1.push((t.id, [o.x, o.y]));
        }
    }
    let mut last_match: BTreeMap<TrackId, TrackId> = BTreeMap::new();
    let (mut ids, mut matched, mut total) = (0, 0, 0);
    let mut assignment = Assignment::new();
    for (key, (mut g, mut p)) in frames {
        // id order makes the result independent of input order
        g.sort_by_key(|b| b.0);
        p.sort_by_key(|b| b.0);
        total += g.len();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (i, gb) in g.iter().enumerate() {
            for (j, pb) in p.iter().enumerate() {
                let d = (gb.1[0] - pb.1[0]).hypot(gb.1[1] - pb.1[1]);
                if d <= radius {
                    pairs.push((d, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut g_used = vec![false; g.len()];
        let mut p_used = vec![false; p.len()];
        for (_, i, j) in pairs {
            if g_used[i] || p_used[j] {
                continue;
            }
            g_used[i] = true;
            p_used[j] = true;
            matched += 1;
            let (gid, pid) = (g[i].0, p[j].0);
            assignment.insert((key, pid), gid);
            if let Some(prev) = last_match.insert(gid, pid) {
                if prev != pid {
                    ids += 1;
                }
            }
        }
    }
    let m = IdentityMetrics {
        ids,
        recall: if total == 0 { 1.0 } else { matched as f64 / total as f64 },
        matched,
        total,
    };
    (m, assignment)
}

/// Recovered stretches of `pred` paired with ground truth. A stretch is a
/// maximal run of observations whose source is neither `Observed` nor
/// unset; its ground-truth track is the one matched to the observation
/// just before it. Stretches without a match or with ground truth missing
/// at some timestamp are skipped.
pub fn recovered_segments(pred: &[Tracklet], gt: &[Tracklet], radius: f64) -> (Vec<Vec<Pose2D>>, Vec<Vec<Pose2D>>) {
    use crate::tracklet::PoseSource;
    let (_, assignment) = match_frames(pred, gt, radius);
    let gt_by_id: BTreeMap<TrackId, BTreeMap<i64, Pose2D>> = gt
        .iter()
        .map(|t| (t.id, t.obs.iter().map(|o| (frame_key(o.t), o.pose())).collect()))
        .collect();
    let recovered = |s: Option<PoseSource>| matches!(s, Some(PoseSource::Model | PoseSource::Linear));
    let (mut ps, mut gs) = (Vec::new(), Vec::new());
    let mut sorted: Vec<&Tracklet> = pred.iter().collect();
    sorted.sort_by_key(|t| t.id);
    for t in sorted {
        let mut i = 0;
        while i < t.obs.len() {
            if !recovered(t.obs[i].source) {
                i += 1;
                continue;
            }
            let start = i;
            while i < t.obs.len() && recovered(t.obs[i].source) {
                i += 1;
            }
            let Some(prev) = start.checked_sub(1).map(|k| &t.obs[k]) else { continue };
            let Some(gid) = assignment.get(&(frame_key(prev.t), t.id)) else { continue };
            let track = &gt_by_id[gid];
            let g: Option<Vec<Pose2D>> = t.obs[start..i].iter().map(|o| track.get(&frame_key(o.t)).copied()).collect();
            if let Some(g) = g {
                ps.push(t.obs[start..i].iter().map(|o| o.pose()).collect());
                gs.push(g);
            }
        }
    }
    (ps, gs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub association_accuracy: Option<f64>,
    pub ade: Option<f64>,
    /// Degrees.
    pub yaw_error: Option<f64>,
    pub miss_rate: Option<f64>,
    pub ids: Option<usize>,
    pub recall: Option<f64>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn empty(n_samples: usize) -> Self {
        Self {
            association_accuracy: None,
            ade: None,
            yaw_error: None,
            miss_rate: None,
            ids: None,
            recall: None,
            n_samples,
        }
    }

    /// Gap-recovery metrics over aligned trajectories.
    pub fn with_trajectories(mut self, pred: &[Vec<Pose2D>], gt: &[Vec<Pose2D>], miss_threshold: f64) -> Result<Self> {
        self.ade = Some(ade(pred, gt)?);
        self.yaw_error = Some(yaw_error_deg(pred, gt)?);
        self.miss_rate = Some(miss_rate(pred, gt, miss_threshold));
        Ok(self)
    }

    pub fn with_identity(mut self, m: &IdentityMetrics) -> Self {
        self.ids = Some(m.ids);
        self.recall = Some(m.recall);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
        let num = |v: Option<f64>, unit: &str| v.map_or("-".to_string(), |v| format!("{v:.3}{unit}"));
        let rows = [
            ("samples", self.n_samples.to_string()),
            ("association accuracy", pct(self.association_accuracy)),
            ("ADE", num(self.ade, " m")),
            ("yaw error", num(self.yaw_error, " deg")),
            ("miss rate", pct(self.miss_rate)),
            ("IDS", self.ids.map_or("-".to_string(), |v| v.to_string())),
            ("recall", pct(self.recall)),
        ];
        for (k, v) in rows {
            writeln!(f, "{k:<22}{v:>12}")?;
        }
        Ok(())
    }
}

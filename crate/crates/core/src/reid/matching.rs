//! Score fusion, the association score matrix, and greedy matching.

use serde::{Deserialize, Serialize};

use super::model::ReidNet;
use crate::error::{Error, Result};
use crate::lanes::LaneGraph;
use crate::par;
use crate::tracklet::{candidate_filter, TrackId, Tracklet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinityResult {
    pub c_motion: f64,
    pub c_map: f64,
    pub c_final: f64,
    pub pair: (TrackId, TrackId),
}

/// `w * c_map + (1 - w) * c_motion`.
pub fn fuse_scores(c_motion: f64, c_map: f64, w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Invalid(format!("fusion weight {w} outside [0, 1]")));
    }
    Ok(w * c_map + (1.0 - w) * c_motion)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationConfig {
    /// Death memory: candidates must start more than `tau` seconds after
    /// the history ends.
    pub tau: f64,
    /// A pair is dropped when both branch scores are below this value.
    pub threshold: f64,
    /// Weight of the map branch in the fused score.
    pub w: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            tau: 1.5,
            threshold: 0.9,
            w: 0.5,
        }
    }
}

/// Row-major `n x N` association scores between histories (rows) and
/// candidate tracklets (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: Vec<TrackId>,
    pub cols: Vec<TrackId>,
    pub c_motion: Vec<f64>,
    pub c_map: Vec<f64>,
    pub scores: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ScoreMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.cols.len() + j]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.cols.len() + j]
    }

    pub fn affinity(&self, i: usize, j: usize) -> AffinityResult {
        let k = i * self.cols.len() + j;
        AffinityResult {
            c_motion: self.c_motion[k],
            c_map: self.c_map[k],
            c_final: self.scores[k],
            pair: (self.rows[i], self.cols[j]),
        }
    }
}

/// Scores every (history, tracklet) pair. Pairs failing the death-memory
/// filter, of a different class, or with both branch scores below the
/// threshold are invalid.
pub fn build_score_matrix(
    histories: &[Tracklet],
    tracklets: &[Tracklet],
    graph: &LaneGraph,
    motion: &ReidNet,
    map: &ReidNet,
    cfg: &AssociationConfig,
) -> Result<ScoreMatrix> {
    fuse_scores(0.0, 0.0, cfg.w)?;
    let n_cols = tracklets.len();
    let per_row: Vec<Result<Vec<(usize, f64, f64)>>> = par::map(histories, |h| {
        let cands: Vec<&Tracklet> = candidate_filter(h, tracklets, cfg.tau)
            .into_iter()
            .filter(|c| c.class == h.class)
            .collect();
        if cands.is_empty() {
            return Ok(Vec::new());
        }
        let cm = motion.score(h, &cands, None)?.scores;
        let cp = map.score(h, &cands, Some(graph))?.scores;
        Ok(cands
            .iter()
            .zip(cm.iter().zip(&cp))
            .map(|(c, (&a, &b))| {
                let j = tracklets.iter().position(|t| std::ptr::eq(t, *c)).expect("candidate from list");
                (j, a, b)
            })
            .collect())
    });
    let n = histories.len();
    let mut m = ScoreMatrix {
        rows: histories.iter().map(|h| h.id).collect(),
        cols: tracklets.iter().map(|t| t.id).collect(),
        c_motion: vec![0.0; n * n_cols],
        c_map: vec![0.0; n * n_cols],
        scores: vec![0.0; n * n_cols],
        valid: vec![false; n * n_cols],
    };
    for (i, r) in per_row.into_iter().enumerate() {
        for (j, a, b) in r? {
            let k = i * n_cols + j;
            m.c_motion[k] = a;
            m.c_map[k] = b;
            m.scores[k] = fuse_scores(a, b, cfg.w)?;
            m.valid[k] = !(a < cfg.threshold && b < cfg.threshold);
        }
    }
    Ok(m)
}

/// Greedy matching on a raw row-major matrix: repeatedly takes the highest
/// valid score whose row and column are both free. Ties go to the lowest
/// `(row, col)`. NaN scores are treated as invalid.
pub fn greedy_match_indices(scores: &[f64], valid: &[bool], n_cols: usize) -> Vec<(usize, usize)> {
    let mut entries: Vec<(usize, usize, f64)> = scores
        .iter()
        .zip(valid)
        .enumerate()
        .filter(|(_, (s, &v))| v && !s.is_nan())
        .map(|(k, (&s, _))| (k / n_cols, k % n_cols, s))
        .collect();
    entries.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let n_rows = if n_cols == 0 { 0 } else { scores.len() / n_cols };
    let mut row_used = vec![false; n_rows];
    let mut col_used = vec![false; n_cols];
    let mut out = Vec::new();
    for (i, j, _) in entries {
        if !row_used[i] && !col_used[j] {
            row_used[i] = true;
            col_used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Greedy matching of a score matrix into (history id, future id) pairs,
/// in selection order.
pub fn greedy_match(m: &ScoreMatrix) -> Vec<(TrackId, TrackId)> {
    greedy_match_indices(&m.scores, &m.valid, m.n_cols())
        .into_iter()
        .map(|(i, j)| (m.rows[i], m.cols[j]))
        .collect()
}

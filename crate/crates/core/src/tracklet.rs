//! Observations, tracklets, and the per-tracklet motion features fed to the
//! networks.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate, to_local, wrap, Pose2D};

/// Opaque tracklet identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrackId(pub u64);

impl std::fmt::Display for TrackId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Where a pose in an output track came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    Observed,
    Model,
    Linear,
}

/// One timed box observation of a vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub s: f64,
    pub vx: f64,
    pub vy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PoseSource>,
}

impl Observation {
    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.x, self.y, self.theta)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.t, self.x, self.y, self.theta, self.l, self.w, self.h, self.s, self.vx, self.vy,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("observation at t={}", self.t)));
        }
        if !(0.0..=1.0).contains(&self.s) {
            return Err(Error::Invalid(format!("confidence {} outside [0,1]", self.s)));
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Invalid(format!(
                "box size ({}, {}, {}) must be positive",
                self.l, self.w, self.h
            )));
        }
        if !(self.theta > -PI && self.theta <= PI) {
            return Err(Error::Invalid(format!("yaw {} outside (-pi, pi]", self.theta)));
        }
        Ok(())
    }
}

/// A contiguous, time-ordered fragment of one object's track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: TrackId,
    pub class: String,
    pub obs: Vec<Observation>,
}

impl Tracklet {
    /// Builds a tracklet, checking that it is non-empty and strictly
    /// increasing in time.
    pub fn new(id: TrackId, class: impl Into<String>, obs: Vec<Observation>) -> Result<Self> {
        let trk = Self {
            id,
            class: class.into(),
            obs,
        };
        trk.validate()?;
        Ok(trk)
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs.is_empty() {
            return Err(Error::Empty(format!("tracklet {}", self.id)));
        }
        for o in &self.obs {
            o.validate()?;
        }
        if self.obs.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::Invalid(format!(
                "tracklet {} timestamps not strictly increasing",
                self.id
            )));
        }
        Ok(())
    }

    pub fn first(&self) -> &Observation {
        &self.obs[0]
    }

    pub fn last(&self) -> &Observation {
        &self.obs[self.obs.len() - 1]
    }

    pub fn start_time(&self) -> f64 {
        self.first().t
    }

    pub fn end_time(&self) -> f64 {
        self.last().t
    }

    pub fn duration(&self) -> f64 {
        self.end_time() - self.start_time()
    }

    /// Observations with `t` inside `[from, to]`.
    pub fn window(&self, from: f64, to: f64) -> Vec<Observation> {
        self.obs
            .iter()
            .filter(|o| o.t >= from - 1e-9 && o.t <= to + 1e-9)
            .cloned()
            .collect()
    }

    /// The last `max_poses` observations.
    pub fn tail(&self, max_poses: usize) -> Tracklet {
        let start = self.obs.len().saturating_sub(max_poses.max(1));
        Tracklet {
            id: self.id,
            class: self.class.clone(),
            obs: self.obs[start..].to_vec(),
        }
    }

    /// The first `max_poses` observations.
    pub fn head(&self, max_poses: usize) -> Tracklet {
        let end = self.obs.len().min(max_poses.max(1));
        Tracklet {
            id: self.id,
            class: self.class.clone(),
            obs: self.obs[..end].to_vec(),
        }
    }
}

/// Row-major `T x width` motion features in a local frame.
///
/// Columns are `[x, y, theta, t, cos, sin]`, followed by `[vx, vy]` when
/// velocities are included.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackletFeatures {
    pub rows: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl TrackletFeatures {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

pub const FEATURE_WIDTH: usize = 8;
pub const FEATURE_WIDTH_NO_VELOCITY: usize = 6;

pub fn tracklet_features(
    trk: &Tracklet,
    origin: &Pose2D,
    t0: f64,
    include_velocity: bool,
) -> Result<TrackletFeatures> {
    if trk.obs.is_empty() {
        return Err(Error::Empty(format!("tracklet {}", trk.id)));
    }
    let width = if include_velocity {
        FEATURE_WIDTH
    } else {
        FEATURE_WIDTH_NO_VELOCITY
    };
    let mut data = Vec::with_capacity(trk.obs.len() * width);
    for o in &trk.obs {
        let p = to_local(&o.pose(), origin);
        let (s, c) = p.theta.sin_cos();
        data.extend_from_slice(&[p.x, p.y, p.theta, o.t - t0, c, s]);
        if include_velocity {
            let (vx, vy) = rotate(o.vx, o.vy, -origin.theta);
            data.extend_from_slice(&[vx, vy]);
        }
    }
    Ok(TrackletFeatures {
        rows: trk.obs.len(),
        width,
        data,
    })
}

/// Future candidates for `history`: tracklets whose first observation comes
/// more than `tau` seconds after the history's last one. Input order is kept.
pub fn candidate_filter<'a>(
    history: &Tracklet,
    all: &'a [Tracklet],
    tau: f64,
) -> Vec<&'a Tracklet> {
    let end = history.end_time();
    all.iter()
        .filter(|c| c.id != history.id && c.start_time() - end > tau)
        .collect()
}

/// Re-expresses a tracklet in another frame (poses and velocities).
pub(crate) fn tracklet_in_frame(trk: &Tracklet, origin: &Pose2D) -> Tracklet {
    let obs = trk
        .obs
        .iter()
        .map(|o| {
            let p = to_local(&o.pose(), origin);
            let (vx, vy) = rotate(o.vx, o.vy, -origin.theta);
            Observation {
                x: p.x,
                y: p.y,
                theta: wrap(p.theta),
                vx,
                vy,
                ..o.clone()
            }
        })
        .collect();
    Tracklet {
        id: trk.id,
        class: trk.class.clone(),
        obs,
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    pub fn obs(t: f64, x: f64, y: f64, theta: f64) -> Observation {
        Observation {
            t,
            x,
            y,
            theta,
            l: 4.5,
            w: 1.9,
            h: 1.6,
            s: 0.9,
            vx: 0.0,
            vy: 0.0,
            source: None,
        }
    }

    pub fn straight(id: u64, t0: f64, n: usize, x0: f64, vx: f64) -> Tracklet {
        let obs = (0..n)
            .map(|i| {
                let t = t0 + 0.5 * i as f64;
                Observation {
                    vx,
                    ..obs(t, x0 + vx * 0.5 * i as f64, 0.0, 0.0)
                }
            })
            .collect();
        Tracklet::new(TrackId(id), "car", obs).unwrap()
    }
}

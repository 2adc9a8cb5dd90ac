//! Gap filling between a history and its matched future.

use serde::{Deserialize, Serialize};

use super::model::{CompletionInput, CompletionNet};
use crate::baselines::{linear_interpolate, missing_times};
use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::lanes::LaneGraph;
use crate::tracklet::{Observation, PoseSource, TrackId, Tracklet};

/// Gaps larger than either bound go to the network; the rest are filled
/// linearly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapPolicy {
    pub max_linear_distance: f64,
    pub max_linear_time: f64,
}

impl Default for GapPolicy {
    fn default() -> Self {
        Self {
            max_linear_distance: 3.0,
            max_linear_time: 1.8,
        }
    }
}

impl GapPolicy {
    pub fn use_model(&self, distance: f64, time: f64) -> bool {
        distance > self.max_linear_distance || time > self.max_linear_time
    }
}

/// Recovered observations for the missing sample times of one gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedTrack {
    pub id: TrackId,
    pub obs: Vec<Observation>,
    pub source: PoseSource,
    /// Set when the map variant had no lanes to refine against.
    pub refinement_skipped: bool,
}

impl CompletedTrack {
    pub fn poses(&self) -> Vec<Pose2D> {
        self.obs.iter().map(Observation::pose).collect()
    }

    /// `history`, the recovered observations and `future` as one tracklet
    /// carrying the history's id.
    pub fn merge(&self, history: &Tracklet, future: &Tracklet) -> Result<Tracklet> {
        let obs = history.obs.iter().chain(&self.obs).chain(&future.obs).cloned().collect();
        Tracklet::new(history.id, history.class.clone(), obs)
    }
}

/// Fills the gap between `history` and `future` at the `rate` Hz grid.
/// With `net == None` every gap is filled linearly.
pub fn complete_track(
    history: &Tracklet,
    future: &Tracklet,
    graph: Option<&LaneGraph>,
    net: Option<&CompletionNet>,
    policy: &GapPolicy,
    rate: f64,
) -> Result<CompletedTrack> {
    if history.obs.is_empty() || future.obs.is_empty() {
        return Err(Error::Empty("completion endpoints".into()));
    }
    let (a, b) = (history.last(), future.first());
    if b.t <= a.t {
        return Err(Error::Invalid(format!(
            "future {} starts at {} but history {} ends at {}",
            future.id, b.t, history.id, a.t
        )));
    }
    let gap = b.t - a.t;
    let dist = (b.x - a.x).hypot(b.y - a.y);
    let times = missing_times(a.t, b.t, rate);
    let mut skipped = false;
    let (poses, source) = match net {
        Some(net) if policy.use_model(dist, gap) && !times.is_empty() => {
            let inp = CompletionInput::new(history, future, graph, rate, &net.cfg)?;
            let (local, sk) = net.predict(&inp);
            skipped = sk;
            (inp.to_input_frame(&local), PoseSource::Model)
        }
        _ => (linear_interpolate(a, b, rate), PoseSource::Linear),
    };
    if let Some(p) = poses.iter().find(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("recovered pose {p:?} for track {}", history.id)));
    }
    let s = 0.5 * (a.s + b.s);
    let mut obs: Vec<Observation> = times
        .iter()
        .zip(&poses)
        .map(|(&t, p)| {
            let u = (t - a.t) / gap;
            let lerp = |x: f64, y: f64| x + u * (y - x);
            Observation {
                t,
                x: p.x,
                y: p.y,
                theta: p.theta,
                l: lerp(a.l, b.l),
                w: lerp(a.w, b.w),
                h: lerp(a.h, b.h),
                s,
                vx: 0.0,
                vy: 0.0,
                source: Some(source),
            }
        })
        .collect();
    // central differences over the recovered points and both endpoints
    let pts: Vec<(f64, f64, f64)> = std::iter::once((a.t, a.x, a.y))
        .chain(obs.iter().map(|o| (o.t, o.x, o.y)))
        .chain(std::iter::once((b.t, b.x, b.y)))
        .collect();
    for (i, o) in obs.iter_mut().enumerate() {
        let (p, n) = (pts[i], pts[i + 2]);
        o.vx = (n.1 - p.1) / (n.0 - p.0);
        o.vy = (n.2 - p.2) / (n.0 - p.0);
    }
    Ok(CompletedTrack {
        id: history.id,
        obs,
        source,
        refinement_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::completion::model::{CompletionConfig, Variant};
    use crate::tracklet::test_util::{obs, straight};

    fn gap_pair(dist: f64, time: f64) -> (Tracklet, Tracklet) {
        let h = Tracklet::new(TrackId(1), "car", vec![obs(0.0, -1.0, 0.0, 0.0), obs(0.5, 0.0, 0.0, 0.0)]).unwrap();
        let f = Tracklet::new(
            TrackId(2),
            "car",
            vec![obs(0.5 + time, dist, 0.0, 0.0), obs(1.0 + time, dist + 1.0, 0.0, 0.0)],
        )
        .unwrap();
        (h, f)
    }

    #[test]
    fn policy_reference_gaps() {
        let net = CompletionNet::new(Variant::Motion, CompletionConfig { hidden: 4, ..Default::default() }, 0).unwrap();
        let p = GapPolicy::default();
        for (d, t, model) in [(2.5, 2.0, true), (2.5, 1.0, false), (4.0, 1.0, true)] {
            assert_eq!(p.use_model(d, t), model);
            let (h, f) = gap_pair(d, t);
            let c = complete_track(&h, &f, None, Some(&net), &p, 2.0).unwrap();
            assert_eq!(c.source, if model { PoseSource::Model } else { PoseSource::Linear });
        }
        assert!(!p.use_model(3.0, 1.8));
    }

    #[test]
    fn fills_grid_with_interpolated_boxes() {
        let (h, mut f) = gap_pair(6.0, 3.0);
        f.obs[0].l = 5.5;
        f.obs[0].s = 0.5;
        let c = complete_track(&h, &f, None, None, &GapPolicy::default(), 2.0).unwrap();
        let ts: Vec<f64> = c.obs.iter().map(|o| o.t).collect();
        assert_eq!(ts, vec![1.0, 1.5, 2.0, 2.5, 3.0]);
        assert!((c.obs[2].l - 5.0).abs() < 1e-12);
        assert!(c.obs.iter().all(|o| (o.s - 0.7).abs() < 1e-12));
        assert!((c.obs[0].vx - 2.0).abs() < 1e-12);
        let merged = c.merge(&h, &f).unwrap();
        assert_eq!(merged.obs.len(), 9);
    }

    #[test]
    fn linear_path_is_exact_on_constant_velocity() {
        let full = straight(3, 0.0, 12, 5.0, 6.0);
        let h = Tracklet { obs: full.obs[..3].to_vec(), ..full.clone() };
        let f = Tracklet { obs: full.obs[9..].to_vec(), ..full.clone() };
        let c = complete_track(&h, &f, None, None, &GapPolicy::default(), 2.0).unwrap();
        assert_eq!(c.obs.len(), 6);
        for (o, g) in c.obs.iter().zip(&full.obs[3..9]) {
            assert!((o.x - g.x).abs() < 1e-9 && (o.y - g.y).abs() < 1e-9 && (o.t - g.t).abs() < 1e-12);
        }
    }

    #[test]
    fn overlapping_future_is_rejected() {
        let (h, f) = gap_pair(5.0, 2.0);
        assert!(complete_track(&f, &h, None, None, &GapPolicy::default(), 2.0).is_err());
        let same = complete_track(&h, &h, None, None, &GapPolicy::default(), 2.0);
        assert!(same.is_err());
    }
}

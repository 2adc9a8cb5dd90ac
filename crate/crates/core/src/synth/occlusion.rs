//! Pseudo-occlusion samples: a ground-truth track is cut, its continuation
//! hidden for a random duration, and every other track is masked the same
//! way to produce distractor candidates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{derive_seed, NoiseConfig, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::{rotate, to_local, wrap, Pose2D};
use crate::lanes::LaneGraph;
use crate::tracklet::{tracklet_in_frame, TrackId, Tracklet};

/// Bit set on the ids of candidate fragments so they never collide with the
/// history id of the same vehicle.
pub const FRAGMENT_ID_BIT: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Longest history kept, in seconds (`poses / rate`).
    pub max_history: f64,
    pub min_occlusion: f64,
    pub max_occlusion: f64,
    /// Time after the occlusion that must still contain an observation.
    pub visible_margin: f64,
    /// Exact history length instead of a random one.
    pub fixed_history: Option<f64>,
    /// Exact occlusion duration for the target track.
    pub fixed_occlusion: Option<f64>,
    /// Lanelets within this distance of any input observation are kept.
    pub lane_crop_radius: f64,
    /// Candidate heads (seconds) used for the lane crop.
    pub crop_future_horizon: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            max_history: 2.5,
            min_occlusion: 1.5,
            max_occlusion: 12.5,
            visible_margin: 0.2,
            fixed_history: None,
            fixed_occlusion: None,
            lane_crop_radius: 30.0,
            crop_future_horizon: 3.0,
        }
    }
}

/// One Re-ID / completion training or evaluation example, expressed in the
/// frame of the history's last observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOcclusionSample {
    pub scene_id: u64,
    pub target: TrackId,
    /// Global pose of the sample frame.
    pub origin: Pose2D,
    pub sample_rate: f64,
    pub history: Tracklet,
    pub future_candidates: Vec<Tracklet>,
    pub gt_match_index: usize,
    pub occlusion_duration: f64,
    /// Hidden ground-truth poses of the target, in time order.
    pub masked_gt: Vec<Pose2D>,
    pub masked_times: Vec<f64>,
    pub lanes: LaneGraph,
}

impl PseudoOcclusionSample {
    pub fn gt_future(&self) -> &Tracklet {
        &self.future_candidates[self.gt_match_index]
    }

    /// History length in seconds, counting one sample period per pose.
    pub fn history_length(&self) -> f64 {
        self.history.obs.len() as f64 / self.sample_rate
    }

    /// Checks the sample against the ranges of `cfg`.
    pub fn check(&self, cfg: &MaskConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if self.history.obs.is_empty() || self.history_length() > cfg.max_history + 1e-9 {
            return fail(format!("history length {}", self.history_length()));
        }
        let d = self.occlusion_duration;
        if !(d >= cfg.min_occlusion - 1e-9 && d <= cfg.max_occlusion + 1e-9) {
            return fail(format!("occlusion duration {d}"));
        }
        if self.gt_match_index >= self.future_candidates.len() {
            return fail("gt_match_index out of range".into());
        }
        if self.future_candidates.iter().any(|c| c.obs.is_empty()) {
            return fail("empty candidate".into());
        }
        let t_h = self.history.end_time();
        if self
            .future_candidates
            .iter()
            .any(|c| c.start_time() - t_h <= cfg.min_occlusion)
        {
            return fail("candidate starts inside the occlusion window".into());
        }
        Ok(())
    }
}

/// Whether `trk` is long enough to be a pseudo-occlusion target.
pub fn is_maskable(trk: &Tracklet, rate: f64, cfg: &MaskConfig) -> bool {
    let need = cfg.fixed_occlusion.unwrap_or(cfg.min_occlusion) + cfg.visible_margin;
    let hist = cfg.fixed_history.map_or(1, |h| (h * rate).round().max(1.0) as usize);
    trk.obs.len() > hist && trk.duration() > need + (hist - 1) as f64 / rate && trk.duration() > cfg.min_occlusion + 2.0 / rate
}

/// Builds the pseudo-occlusion sample for `target` in `scene`. The result
/// depends only on `(scene, seed, target, cfg)`.
pub fn mask_pseudo_occlusion(
    scene: &SceneRecord,
    seed: u64,
    target: TrackId,
    cfg: &MaskConfig,
) -> Result<PseudoOcclusionSample> {
    let trk = scene
        .track(target)
        .ok_or_else(|| Error::Invalid(format!("track {target} not in scene {}", scene.scene_id)))?;
    let rate = scene.sample_rate;
    if !is_maskable(trk, rate, cfg) {
        return Err(Error::Invalid(format!(
            "track {target} too short ({:.2} s) for a pseudo-occlusion",
            trk.duration()
        )));
    }
    if let Some(f) = cfg.fixed_occlusion {
        if !(cfg.min_occlusion..=cfg.max_occlusion).contains(&f) {
            return Err(Error::Invalid(format!("fixed occlusion {f} outside range")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ scene.scene_id.rotate_left(17), target.0));
    let t_end = trk.end_time();
    let max_poses = ((cfg.max_history * rate) + 1e-9).floor().max(1.0) as usize;
    let fixed_hist = cfg.fixed_history.map(|h| ((h * rate).round() as usize).clamp(1, max_poses));
    let min_d = cfg.fixed_occlusion.unwrap_or(cfg.min_occlusion);

    // cut index: enough poses before it, enough track after it
    let valid: Vec<usize> = (0..trk.obs.len())
        .filter(|&i| fixed_hist.is_none_or(|n| i + 1 >= n))
        .filter(|&i| t_end - trk.obs[i].t - cfg.visible_margin >= min_d - 1e-9)
        .collect();
    let Some(&cut) = valid.get(rng.random_range(0..valid.len().max(1))) else {
        return Err(Error::Invalid(format!("track {target} has no valid cut")));
    };
    let t_h = trk.obs[cut].t;
    let n_hist = fixed_hist.unwrap_or_else(|| rng.random_range(1..=max_poses.min(cut + 1)));
    let d = match cfg.fixed_occlusion {
        Some(f) => f,
        None => {
            let hi = cfg.max_occlusion.min(t_end - t_h - cfg.visible_margin);
            if hi > cfg.min_occlusion {
                rng.random_range(cfg.min_occlusion..=hi)
            } else {
                cfg.min_occlusion
            }
        }
    };

    let history = Tracklet {
        id: trk.id,
        class: trk.class.clone(),
        obs: trk.obs[cut + 1 - n_hist..=cut].to_vec(),
    };
    let masked: Vec<_> = trk.obs.iter().filter(|o| o.t > t_h && o.t <= t_h + d).cloned().collect();
    let fragment = |src: &Tracklet, d: f64| Tracklet {
        id: TrackId(src.id.0 | FRAGMENT_ID_BIT),
        class: src.class.clone(),
        obs: src.obs.iter().filter(|o| o.t > t_h + d).cloned().collect(),
    };

    let mut candidates = vec![fragment(trk, d)];
    for other in &scene.gt_tracks {
        if other.id == trk.id {
            continue;
        }
        let hi = cfg.max_occlusion.min(other.end_time() - t_h - cfg.visible_margin);
        if hi < cfg.min_occlusion {
            continue;
        }
        let dk = if hi > cfg.min_occlusion {
            rng.random_range(cfg.min_occlusion..=hi)
        } else {
            hi
        };
        let f = fragment(other, dk);
        if !f.obs.is_empty() {
            candidates.push(f);
        }
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(&mut rng);
    let gt_match_index = order.iter().position(|&i| i == 0).unwrap();
    let candidates: Vec<Tracklet> = order.into_iter().map(|i| candidates[i].clone()).collect();

    let origin = history.last().pose();
    let mut crop_pts: Vec<[f64; 2]> = history.obs.iter().map(|o| [o.x, o.y]).collect();
    for c in &candidates {
        let t0 = c.start_time();
        crop_pts.extend(
            c.obs
                .iter()
                .filter(|o| o.t <= t0 + cfg.crop_future_horizon)
                .map(|o| [o.x, o.y]),
        );
    }
    let ids = scene.lane_graph.lanelets_near(&crop_pts, cfg.lane_crop_radius);

    Ok(PseudoOcclusionSample {
        scene_id: scene.scene_id,
        target,
        origin,
        sample_rate: rate,
        history: tracklet_in_frame(&history, &origin),
        future_candidates: candidates.iter().map(|c| tracklet_in_frame(c, &origin)).collect(),
        gt_match_index,
        occlusion_duration: d,
        masked_gt: masked.iter().map(|o| to_local(&o.pose(), &origin)).collect(),
        masked_times: masked.iter().map(|o| o.t).collect(),
        lanes: scene.lane_graph.local_subgraph(&ids, &origin),
    })
}

/// All samples of a scene: one per maskable track, in track order.
pub fn scene_samples(scene: &SceneRecord, seed: u64, cfg: &MaskConfig) -> Vec<PseudoOcclusionSample> {
    scene
        .gt_tracks
        .iter()
        .filter(|t| is_maskable(t, scene.sample_rate, cfg))
        .filter_map(|t| mask_pseudo_occlusion(scene, seed, t.id, cfg).ok())
        .collect()
}

/// Rotates every tracklet, hidden pose, and lanelet of a sample about the
/// sample-frame origin. The sample origin is updated so global poses are
/// unchanged.
pub fn rotate_sample(sample: &PseudoOcclusionSample, angle: f64) -> PseudoOcclusionSample {
    let rot_trk = |t: &Tracklet| Tracklet {
        obs: t
            .obs
            .iter()
            .map(|o| {
                let (x, y) = rotate(o.x, o.y, angle);
                let (vx, vy) = rotate(o.vx, o.vy, angle);
                let mut o = o.clone();
                o.x = x;
                o.y = y;
                o.vx = vx;
                o.vy = vy;
                o.theta = wrap(o.theta + angle);
                o
            })
            .collect(),
        ..t.clone()
    };
    PseudoOcclusionSample {
        origin: Pose2D::new(sample.origin.x, sample.origin.y, wrap(sample.origin.theta - angle)),
        history: rot_trk(&sample.history),
        future_candidates: sample.future_candidates.iter().map(rot_trk).collect(),
        masked_gt: sample
            .masked_gt
            .iter()
            .map(|p| {
                let (x, y) = rotate(p.x, p.y, angle);
                Pose2D::new(x, y, wrap(p.theta + angle))
            })
            .collect(),
        lanes: sample.lanes.rotated(angle),
        ..sample.clone()
    }
}

/// Training augmentation: a random rotation in `[-rot_range, rot_range]`
/// followed by Gaussian noise on the input tracklets (never on the hidden
/// ground truth).
pub fn augment_sample(
    sample: &PseudoOcclusionSample,
    seed: u64,
    rot_range: f64,
    noise: &NoiseConfig,
) -> PseudoOcclusionSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = if rot_range > 0.0 {
        rng.random_range(-rot_range..=rot_range)
    } else {
        0.0
    };
    let mut out = if angle != 0.0 { rotate_sample(sample, angle) } else { sample.clone() };
    if noise.xy > 0.0 || noise.theta > 0.0 || noise.v > 0.0 {
        let g = |sd: f64| Normal::new(0.0, sd).expect("non-negative std");
        let (nxy, nth, nv) = (g(noise.xy), g(noise.theta), g(noise.v));
        let mut jitter = |t: &mut Tracklet| {
            for o in &mut t.obs {
                o.x += nxy.sample(&mut rng);
                o.y += nxy.sample(&mut rng);
                o.theta = wrap(o.theta + nth.sample(&mut rng));
                o.vx += nv.sample(&mut rng);
                o.vy += nv.sample(&mut rng);
            }
        };
        jitter(&mut out.history);
        for c in &mut out.future_candidates {
            jitter(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::{generate_scene, GeneratorConfig};
    use crate::synth::templates::Template;
    use crate::tracklet::{candidate_filter, Observation};
    use std::f64::consts::PI;

    fn scene(seed: u64) -> SceneRecord {
        generate_scene(seed, &GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn samples_satisfy_invariants() {
        let cfg = MaskConfig::default();
        let mut n = 0;
        for s in 0..6 {
            let sc = scene(s);
            for smp in scene_samples(&sc, 99, &cfg) {
                smp.check(&cfg).unwrap();
                // candidates all pass the death-memory filter
                let passed = candidate_filter(&smp.history, &smp.future_candidates, 1.5);
                assert_eq!(passed.len(), smp.future_candidates.len());
                assert_eq!(smp.gt_future().id.0, smp.target.0 | FRAGMENT_ID_BIT);
                assert_eq!(smp.history.last().x, 0.0);
                n += 1;
            }
        }
        assert!(n > 30);
    }

    #[test]
    fn deterministic_per_scene_seed_and_track() {
        let sc = scene(3);
        let cfg = MaskConfig::default();
        let id = sc.gt_tracks.iter().find(|t| is_maskable(t, 2.0, &cfg)).unwrap().id;
        let a = mask_pseudo_occlusion(&sc, 5, id, &cfg).unwrap();
        let b = mask_pseudo_occlusion(&sc, 5, id, &cfg).unwrap();
        assert_eq!(a, b);
    }

    fn track_of(duration: f64) -> SceneRecord {
        let n = (duration * 2.0).round() as usize + 1;
        let obs = (0..n)
            .map(|k| Observation {
                t: k as f64 * 0.5,
                x: k as f64 * 5.0,
                y: 0.0,
                theta: 0.0,
                l: 4.5,
                w: 2.0,
                h: 1.6,
                s: 0.9,
                vx: 10.0,
                vy: 0.0,
                source: None,
            })
            .collect();
        let mut sc = scene(0);
        sc.template = Template::Straight;
        sc.gt_tracks = vec![Tracklet::new(TrackId(1), "car", obs).unwrap()];
        sc
    }

    #[test]
    fn long_track_leaves_one_visible_pose() {
        let sc = track_of(12.5);
        let cfg = MaskConfig::default();
        for seed in 0..200 {
            let s = mask_pseudo_occlusion(&sc, seed, TrackId(1), &cfg).unwrap();
            assert!(s.occlusion_duration <= 12.3 + 1e-9);
            assert!(!s.gt_future().obs.is_empty());
        }
    }

    #[test]
    fn too_short_track_is_error() {
        let sc = track_of(2.5);
        assert!(mask_pseudo_occlusion(&sc, 0, TrackId(1), &MaskConfig::default()).is_err());
        let sc = track_of(3.0);
        assert!(mask_pseudo_occlusion(&sc, 0, TrackId(1), &MaskConfig::default()).is_ok());
    }

    #[test]
    fn fixed_protocol_lengths() {
        let cfg = MaskConfig {
            fixed_history: Some(2.0),
            fixed_occlusion: Some(6.0),
            ..MaskConfig::default()
        };
        let sc = track_of(15.0);
        let s = mask_pseudo_occlusion(&sc, 4, TrackId(1), &cfg).unwrap();
        assert_eq!(s.history.obs.len(), 4);
        assert_eq!(s.occlusion_duration, 6.0);
        assert_eq!(s.masked_gt.len(), 12);
    }

    #[test]
    fn augmentation_identity_rotation_and_labels() {
        let sc = scene(8);
        let s = scene_samples(&sc, 1, &MaskConfig::default()).remove(0);
        assert_eq!(augment_sample(&s, 3, 0.0, &NoiseConfig::ZERO), s);

        let r = rotate_sample(&s, PI);
        for (a, b) in s.history.obs.iter().zip(&r.history.obs) {
            assert!((a.x + b.x).abs() < 1e-9 && (a.y + b.y).abs() < 1e-9);
            assert!(crate::geometry::angle_diff(b.theta, a.theta + PI).abs() < 1e-9);
        }
        let noisy = augment_sample(&s, 3, 0.5, &NoiseConfig::default());
        assert_eq!(noisy.gt_match_index, s.gt_match_index);
        // hidden targets are only rotated, never jittered: distances kept
        let d = |v: &[Pose2D]| (v[0].x - v[1].x).hypot(v[0].y - v[1].y);
        if s.masked_gt.len() > 1 {
            assert!((d(&s.masked_gt) - d(&noisy.masked_gt)).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_keeps_global_poses() {
        let sc = scene(9);
        let s = scene_samples(&sc, 1, &MaskConfig::default()).remove(0);
        let r = rotate_sample(&s, 0.7);
        let g = |smp: &PseudoOcclusionSample, i: usize| {
            crate::geometry::from_local(&smp.future_candidates[0].obs[i].pose(), &smp.origin)
        };
        let (a, b) = (g(&s, 0), g(&r, 0));
        assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
    }
}

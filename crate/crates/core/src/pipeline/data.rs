//! Scene sets, sample extraction and injected fragmentation for a run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FragmentConfig, RunConfig};
use crate::error::Result;
use crate::par;
use crate::synth::{derive_seed, generate_scene, scene_samples, GeneratorConfig, MaskConfig, PseudoOcclusionSample, SceneRecord, FRAGMENT_ID_BIT};
use crate::tracklet::{TrackId, Tracklet};

const SCENE_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const FRAGMENT_STREAM: u64 = 3;

/// All scenes of a run, training scenes first. Scene ids are indices.
pub fn generate_scenes(cfg: &RunConfig) -> Result<Vec<SceneRecord>> {
    let n = cfg.data.train_scenes + cfg.data.test_scenes;
    let base = derive_seed(cfg.seed, SCENE_STREAM);
    let idx: Vec<usize> = (0..n).collect();
    par::map(&idx, |&i| {
        let g = GeneratorConfig {
            template: cfg.data.templates[i % cfg.data.templates.len()],
            ..cfg.data.generator.clone()
        };
        let mut s = generate_scene(derive_seed(base, i as u64), &g)?;
        s.scene_id = i as u64;
        Ok(s)
    })
    .into_iter()
    .collect()
}

/// Fitting, validation and test scenes.
pub struct Split<'a> {
    pub fit: &'a [SceneRecord],
    pub val: &'a [SceneRecord],
    pub test: &'a [SceneRecord],
}

pub fn split_scenes<'a>(cfg: &RunConfig, scenes: &'a [SceneRecord]) -> Split<'a> {
    let n_train = cfg.data.train_scenes.min(scenes.len());
    let n_fit = cfg.n_fit_scenes().min(n_train);
    Split {
        fit: &scenes[..n_fit],
        val: &scenes[n_fit..n_train],
        test: &scenes[n_train..],
    }
}

/// Pseudo-occlusion samples of `scenes`, in scene order. A scene's samples
/// depend only on the run seed, the scene and `mask`.
pub fn samples_of(cfg: &RunConfig, scenes: &[SceneRecord], mask: &MaskConfig) -> Vec<PseudoOcclusionSample> {
    let base = derive_seed(cfg.seed, SAMPLE_STREAM);
    par::map(scenes, |s| scene_samples(s, derive_seed(base, s.scene_id), mask))
        .into_iter()
        .flatten()
        .collect()
}

/// Cuts some tracks of `scene` in two. The piece after the cut keeps its
/// observations but gets the id `id | FRAGMENT_ID_BIT`.
pub fn fragment_tracks(scene: &SceneRecord, cfg: &FragmentConfig, seed: u64) -> Vec<Tracklet> {
    let rate = scene.sample_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, scene.scene_id));
    let mut out = Vec::new();
    for t in &scene.gt_tracks {
        let roll: f64 = rng.random();
        let piece = (cfg.min_piece * rate).ceil() as usize + 1;
        let min_steps = (cfg.min_gap * rate).ceil() as usize;
        let max_steps = (cfg.max_gap * rate).floor() as usize;
        let n = t.obs.len();
        if roll >= cfg.fraction || n < 2 * piece + min_steps - 1 {
            out.push(t.clone());
            continue;
        }
        // steps between the last kept head pose and the first tail pose
        let steps = rng.random_range(min_steps..=max_steps.min(n + 1 - 2 * piece).max(min_steps));
        let head_end = rng.random_range(piece - 1..=n - piece - steps);
        let head = t.obs[..=head_end].to_vec();
        let tail = t.obs[head_end + steps..].to_vec();
        out.push(Tracklet { obs: head, ..t.clone() });
        out.push(Tracklet {
            id: TrackId(t.id.0 | FRAGMENT_ID_BIT),
            obs: tail,
            class: t.class.clone(),
        });
    }
    out.sort_by_key(|t| t.id);
    out
}

/// Test scenes with their tracks replaced by fragments.
pub fn fragment_scenes(cfg: &RunConfig, scenes: &[SceneRecord]) -> Vec<SceneRecord> {
    let seed = derive_seed(cfg.seed, FRAGMENT_STREAM);
    scenes
        .iter()
        .map(|s| SceneRecord {
            gt_tracks: fragment_tracks(s, &cfg.fragments, seed),
            ..s.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.train_scenes = 6;
        c.data.test_scenes = 3;
        c
    }

    #[test]
    fn scenes_are_deterministic_and_split() {
        let c = small();
        let a = generate_scenes(&c).unwrap();
        assert_eq!(a, generate_scenes(&c).unwrap());
        assert_eq!(a.len(), 9);
        assert!(a.iter().enumerate().all(|(i, s)| s.scene_id == i as u64));
        let sp = split_scenes(&c, &a);
        assert_eq!((sp.fit.len(), sp.val.len(), sp.test.len()), (5, 1, 3));
        let s1 = samples_of(&c, sp.fit, &c.data.mask);
        assert!(!s1.is_empty());
        assert_eq!(s1, samples_of(&c, sp.fit, &c.data.mask));
    }

    #[test]
    fn fragmentation_cuts_with_a_gap() {
        let mut c = small();
        c.fragments.fraction = 1.0;
        let scenes = generate_scenes(&c).unwrap();
        let fr = fragment_scenes(&c, &scenes[6..]);
        let mut cuts = 0;
        for (s, f) in scenes[6..].iter().zip(&fr) {
            for t in &f.gt_tracks {
                if t.id.0 & FRAGMENT_ID_BIT == 0 {
                    continue;
                }
                cuts += 1;
                let head = f.gt_tracks.iter().find(|h| h.id.0 == t.id.0 & !FRAGMENT_ID_BIT).unwrap();
                let gap = t.start_time() - head.end_time();
                assert!(gap >= c.fragments.min_gap - 1e-9 && gap <= c.fragments.max_gap + 1e-9, "{gap}");
                assert!(head.duration() + 0.5 >= c.fragments.min_piece);
                assert!(t.duration() + 0.5 >= c.fragments.min_piece);
                let orig = s.track(head.id).unwrap();
                assert_eq!(orig.obs.len() as f64, head.obs.len() as f64 + t.obs.len() as f64 + gap * 2.0 - 1.0);
            }
        }
        assert!(cuts > 10);
    }
}

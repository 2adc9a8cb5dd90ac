//! Declarative run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::completion::{CompletionConfig, GapPolicy, Variant};
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_MATCH_RADIUS, DEFAULT_MISS_THRESHOLD};
use crate::reid::{AssociationConfig, ReidConfig};
use crate::synth::{GeneratorConfig, MaskConfig, Template};
use crate::train::{AugmentConfig, TrainConfig};

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Ground-truth scenes, train and test.
    pub scenes: PathBuf,
    /// Test scenes with injected fragmentation, the inference input.
    pub fragments: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            scenes: "data/scenes.jsonl".into(),
            fragments: "data/fragments.jsonl".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    /// Relative paths are resolved against `base`.
    pub fn resolve(&self, base: &Path) -> Paths {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Paths {
            scenes: r(&self.scenes),
            fragments: r(&self.fragments),
            checkpoints: r(&self.checkpoints),
            reports: r(&self.reports),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Scene `i` uses `templates[i % len]`.
    pub templates: Vec<Template>,
    pub generator: GeneratorConfig,
    /// Masking used for training and Re-ID evaluation.
    pub mask: MaskConfig,
    /// Fixed-length masking used for the completion benchmark.
    pub completion_mask: MaskConfig,
    /// Trailing fraction of the training scenes held out for validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            test_scenes: 50,
            templates: Template::ALL.to_vec(),
            generator: GeneratorConfig::default(),
            mask: MaskConfig::default(),
            completion_mask: MaskConfig {
                fixed_history: Some(2.0),
                fixed_occlusion: Some(6.0),
                ..MaskConfig::default()
            },
            val_fraction: 0.1,
        }
    }
}

/// Injected fragmentation of the test scenes: a chosen track loses a
/// window of observations and continues under a new id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FragmentConfig {
    /// Probability that a long-enough track is cut.
    pub fraction: f64,
    pub min_gap: f64,
    pub max_gap: f64,
    /// Shortest piece kept on either side of the cut, seconds.
    pub min_piece: f64,
}

impl Default for FragmentConfig {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            min_gap: 2.0,
            max_gap: 5.0,
            min_piece: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub miss_threshold: f64,
    pub match_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            miss_threshold: DEFAULT_MISS_THRESHOLD,
            match_radius: DEFAULT_MATCH_RADIUS,
        }
    }
}

fn reid_schedule() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        batch_size: 32,
        lr: 3e-3,
        decay_factor: 0.6,
        decay_every: 5,
        ..TrainConfig::default()
    }
}

fn completion_schedule() -> TrainConfig {
    TrainConfig {
        decay_factor: 0.5,
        ..reid_schedule()
    }
}

/// Desk-trained branches score true pairs mostly between 0.5 and 0.85, so
/// the library's 0.9 gate would reject nearly every match.
fn desk_association() -> AssociationConfig {
    AssociationConfig {
        threshold: 0.5,
        ..AssociationConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub reid: ReidConfig,
    pub completion: CompletionConfig,
    pub completion_variant: Variant,
    pub reid_schedule: TrainConfig,
    pub completion_schedule: TrainConfig,
    pub augment: AugmentConfig,
    pub association: AssociationConfig,
    pub gap: GapPolicy,
    pub fragments: FragmentConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_CONFIG_SCHEMA_VERSION,
            seed: 0,
            paths: Paths::default(),
            data: DataConfig::default(),
            reid: ReidConfig::default(),
            completion: CompletionConfig::default(),
            completion_variant: Variant::MotionMap,
            reid_schedule: reid_schedule(),
            completion_schedule: completion_schedule(),
            augment: AugmentConfig::default(),
            association: desk_association(),
            gap: GapPolicy::default(),
            fragments: FragmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.schema_version != RUN_CONFIG_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "run config schema {} (expected {RUN_CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let d = &self.data;
        if d.train_scenes < 2 || d.test_scenes == 0 {
            return bad("need at least two training scenes and one test scene");
        }
        if d.templates.is_empty() {
            return bad("templates is empty");
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        d.generator.validate()?;
        self.reid_schedule.validate()?;
        self.completion_schedule.validate()?;
        let a = &self.association;
        if !(a.tau >= 0.0) || !(0.0..=1.0).contains(&a.threshold) || !(0.0..=1.0).contains(&a.w) {
            return bad("association: tau >= 0, threshold and w in [0, 1]");
        }
        let f = &self.fragments;
        if !(0.0..=1.0).contains(&f.fraction) || !(f.min_gap > 0.0 && f.min_gap <= f.max_gap) || !(f.min_piece > 0.0) {
            return bad("fragments: fraction in [0, 1], 0 < min_gap <= max_gap, min_piece > 0");
        }
        if !(self.gap.max_linear_distance >= 0.0 && self.gap.max_linear_time >= 0.0) {
            return bad("gap thresholds must be non-negative");
        }
        if !(self.eval.miss_threshold >= 0.0 && self.eval.match_radius > 0.0) {
            return bad("eval thresholds must be positive");
        }
        Ok(())
    }

    /// Hex sha256 of everything that determines results, which excludes
    /// `paths`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("paths");
        }
        let bytes = serde_json::to_vec(&v).expect("value serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Number of training scenes used for fitting; the rest of the
    /// training scenes are validation.
    pub fn n_fit_scenes(&self) -> usize {
        let n = self.data.train_scenes;
        let val = ((n as f64) * self.data.val_fraction).round() as usize;
        n - val.min(n - 1)
    }
}

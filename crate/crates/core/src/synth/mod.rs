//! Synthetic driving scenes and pseudo-occlusion samples.

pub mod occlusion;
pub mod scene;
pub mod stats;
pub mod templates;

pub use occlusion::{
    augment_sample, is_maskable, mask_pseudo_occlusion, rotate_sample, scene_samples, MaskConfig,
    PseudoOcclusionSample, FRAGMENT_ID_BIT,
};
pub use scene::{
    derive_seed, generate_scene, read_scenes, scene_from_line, scene_to_line, write_scenes,
    GeneratorConfig, NoiseConfig, SceneRecord, SCENE_SCHEMA_VERSION,
};
pub use stats::SampleStats;
pub use templates::{MapTemplate, Route, Template};

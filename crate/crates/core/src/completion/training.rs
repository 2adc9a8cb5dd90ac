//! Supervised training of the completion network on masked segments.

use super::model::{completion_loss_var, CompletionInput, CompletionNet};
use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::nn::{Bound, ParamStore, Tape, Var};
use crate::synth::occlusion::PseudoOcclusionSample;
use crate::train::{self, AugmentConfig, EpochLog, TrainConfig, TrainReport};

/// Decoder inputs and gap-frame targets of one sample.
pub fn completion_example(net: &CompletionNet, s: &PseudoOcclusionSample) -> Result<(CompletionInput, Vec<Pose2D>)> {
    let fut = s
        .future_candidates
        .get(s.gt_match_index)
        .ok_or_else(|| Error::Invalid(format!("sample {}/{} has no matched future", s.scene_id, s.target)))?;
    let lanes = (net.variant == super::model::Variant::MotionMap).then_some(&s.lanes);
    let inp = CompletionInput::new(&s.history, fut, lanes, s.sample_rate, &net.cfg)?;
    if inp.queries.len() != s.masked_gt.len() {
        return Err(Error::Shape {
            op: "completion_example",
            lhs: (inp.queries.len(), 3),
            rhs: (s.masked_gt.len(), 3),
        });
    }
    let gt = inp.to_gap_frame(&s.masked_gt);
    Ok((inp, gt))
}

pub fn completion_sample_loss(net: &CompletionNet, t: &mut Tape, p: &Bound, s: &PseudoOcclusionSample) -> Result<Var> {
    let (inp, gt) = completion_example(net, s)?;
    completion_loss_var(net, t, p, &inp, &gt)
}

pub fn completion_eval_loss(net: &CompletionNet, samples: &[PseudoOcclusionSample]) -> Result<f64> {
    let loss = |t: &mut Tape, p: &Bound, s: &PseudoOcclusionSample| completion_sample_loss(net, t, p, s);
    train::mean_loss(&net.store, samples, &loss)
}

/// Trains `net` and leaves the best-validation parameters in place.
pub fn train_completion(
    net: &mut CompletionNet,
    train_set: &[PseudoOcclusionSample],
    val_set: &[PseudoOcclusionSample],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    first_epoch: usize,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog, &ParamStore),
) -> Result<TrainReport> {
    let shape = net.clone();
    train_set.iter().chain(val_set).try_for_each(|s| completion_example(&shape, s).map(drop))?;
    let loss = |t: &mut Tape, p: &Bound, s: &PseudoOcclusionSample| completion_sample_loss(&shape, t, p, s);
    let augment = |s: &PseudoOcclusionSample, seed: u64| aug.apply(s, seed);
    train::fit(&mut net.store, train_set, val_set, cfg, first_epoch, seed, &loss, &augment, on_epoch)
}

/// Predicted hidden segment of a sample, in the sample frame.
pub fn predict_sample(net: &CompletionNet, s: &PseudoOcclusionSample) -> Result<Vec<Pose2D>> {
    let (inp, _) = completion_example(net, s)?;
    let (local, _) = net.predict(&inp);
    Ok(inp.to_input_frame(&local))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::completion::model::{CompletionConfig, Variant};
    use crate::synth::occlusion::{scene_samples, MaskConfig};
    use crate::synth::scene::{generate_scene, GeneratorConfig};

    fn samples(n: u64) -> Vec<PseudoOcclusionSample> {
        let g = GeneratorConfig::default();
        (0..n)
            .flat_map(|i| scene_samples(&generate_scene(i, &g).unwrap(), i, &MaskConfig::default()))
            .collect()
    }

    fn ade(net: &CompletionNet, set: &[PseudoOcclusionSample]) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for s in set {
            for (p, g) in predict_sample(net, s).unwrap().iter().zip(&s.masked_gt) {
                sum += p.distance(g);
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn examples_align_with_masked_truth() {
        let net = CompletionNet::new(Variant::MotionMap, CompletionConfig::default(), 0).unwrap();
        for s in samples(3) {
            let (inp, gt) = completion_example(&net, &s).unwrap();
            assert_eq!(inp.queries.len(), gt.len());
            assert_eq!(inp.anchor.len(), gt.len());
        }
    }

    #[test]
    fn short_training_lowers_ade() {
        let all = samples(10);
        let (tr, te) = all.split_at(all.len() * 3 / 4);
        let cfg = CompletionConfig { hidden: 8, ..CompletionConfig::default() };
        let mut net = CompletionNet::new(Variant::Motion, cfg, 4).unwrap();
        let before = ade(&net, te);
        let tc = TrainConfig { epochs: 4, batch_size: 16, lr: 3e-3, ..TrainConfig::default() };
        train_completion(&mut net, tr, &[], &tc, &AugmentConfig::default(), 0, 2, |_, _| {}).unwrap();
        let after = ade(&net, te);
        assert!(after < before, "{after} vs {before}");
    }
}

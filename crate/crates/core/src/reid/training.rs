//! Focal-loss training and sample-level prediction for the Re-ID branches.

use super::input::ReidInput;
use super::model::ReidNet;
use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::nn::losses::{FOCAL_ALPHA, FOCAL_GAMMA};
use crate::nn::{AdamW, Bound, ParamStore, Tape, Var};
use crate::synth::occlusion::PseudoOcclusionSample;
use crate::train::{self, AugmentConfig, EpochLog, TrainConfig, TrainReport};

/// Network inputs of a sample, used as-is in the sample frame.
pub fn sample_input(net: &ReidNet, s: &PseudoOcclusionSample) -> Result<ReidInput> {
    let refs: Vec<_> = s.future_candidates.iter().collect();
    let lanes = (net.branch == super::model::Branch::Map).then_some(&s.lanes);
    ReidInput::new(&s.history, &refs, lanes, &Pose2D::ORIGIN, &net.cfg.input)
}

fn check_label(s: &PseudoOcclusionSample) -> Result<()> {
    if s.gt_match_index >= s.future_candidates.len() {
        return Err(Error::Invalid(format!(
            "sample {}/{} has no positive candidate",
            s.scene_id, s.target
        )));
    }
    Ok(())
}

/// Mean focal loss over the candidates of one sample.
pub fn reid_sample_loss(net: &ReidNet, t: &mut Tape, p: &Bound, s: &PseudoOcclusionSample) -> Result<Var> {
    check_label(s)?;
    let inp = sample_input(net, s)?;
    let (z, _) = net.logits(t, p, &inp);
    let labels: Vec<f64> = (0..inp.n_candidates())
        .map(|j| if j == s.gt_match_index { 1.0 } else { 0.0 })
        .collect();
    let l = t.focal_loss(z, labels, FOCAL_ALPHA, FOCAL_GAMMA);
    Ok(t.mean(l))
}

/// One AdamW update on `batch`; returns the batch's mean loss before it.
pub fn reid_train_step(net: &mut ReidNet, batch: &[PseudoOcclusionSample], opt: &AdamW) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    batch.iter().try_for_each(check_label)?;
    let frozen = net.clone();
    let loss = |t: &mut Tape, p: &Bound, s: &PseudoOcclusionSample| reid_sample_loss(&frozen, t, p, s);
    train::train_step(&mut net.store, batch, &loss, opt, 0.0)
}

/// Mean loss of `net` on `samples` without augmentation.
pub fn reid_eval_loss(net: &ReidNet, samples: &[PseudoOcclusionSample]) -> Result<f64> {
    let loss = |t: &mut Tape, p: &Bound, s: &PseudoOcclusionSample| reid_sample_loss(net, t, p, s);
    train::mean_loss(&net.store, samples, &loss)
}

/// Trains `net` and leaves the best-validation parameters in place.
pub fn train_reid(
    net: &mut ReidNet,
    train_set: &[PseudoOcclusionSample],
    val_set: &[PseudoOcclusionSample],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    first_epoch: usize,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog, &ParamStore),
) -> Result<TrainReport> {
    train_set.iter().chain(val_set).try_for_each(check_label)?;
    let shape = net.clone();
    let loss = |t: &mut Tape, p: &Bound, s: &PseudoOcclusionSample| reid_sample_loss(&shape, t, p, s);
    let augment = |s: &PseudoOcclusionSample, seed: u64| aug.apply(s, seed);
    train::fit(&mut net.store, train_set, val_set, cfg, first_epoch, seed, &loss, &augment, on_epoch)
}

/// Candidate scores for one sample.
pub fn sample_scores(net: &ReidNet, s: &PseudoOcclusionSample) -> Result<Vec<f64>> {
    Ok(net.affinities(&sample_input(net, s)?).scores)
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_nan() && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

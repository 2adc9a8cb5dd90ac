//! Held-out pseudo-occlusion benchmark for the learned models and the
//! non-learned references.

use serde::{Deserialize, Serialize};

use crate::baselines::{cvm_associate, linear_interpolate};
use crate::completion::{predict_sample, CompletionNet};
use crate::error::Result;
use crate::eval::{association_accuracy, EvalReport};
use crate::geometry::Pose2D;
use crate::par;
use crate::reid::{argmax, fuse_scores, sample_scores, ReidNet};
use crate::synth::PseudoOcclusionSample;

/// Samples with at least `min_candidates` candidates.
pub fn with_min_candidates(samples: &[PseudoOcclusionSample], min_candidates: usize) -> Vec<PseudoOcclusionSample> {
    samples
        .iter()
        .filter(|s| s.future_candidates.len() >= min_candidates)
        .cloned()
        .collect()
}

fn accuracy_report(pred: &[Option<usize>], samples: &[PseudoOcclusionSample]) -> Result<EvalReport> {
    let gt: Vec<usize> = samples.iter().map(|s| s.gt_match_index).collect();
    let mut r = EvalReport::empty(samples.len());
    r.association_accuracy = Some(association_accuracy(pred, &gt)?);
    Ok(r)
}

pub fn cvm_report(samples: &[PseudoOcclusionSample], tau: f64) -> Result<EvalReport> {
    let pred = par::map(samples, |s| cvm_associate(&s.history, &s.future_candidates, tau));
    accuracy_report(&pred, samples)
}

/// Association accuracy of each branch alone and of the fused score, each
/// taking the best-scoring candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidBenchmark {
    pub motion: EvalReport,
    pub map: EvalReport,
    pub fused: EvalReport,
}

pub fn reid_benchmark(samples: &[PseudoOcclusionSample], motion: &ReidNet, map: &ReidNet, w: f64) -> Result<ReidBenchmark> {
    let scores: Vec<Result<(Vec<f64>, Vec<f64>)>> =
        par::map(samples, |s| Ok((sample_scores(motion, s)?, sample_scores(map, s)?)));
    let mut pm = Vec::with_capacity(samples.len());
    let mut pp = Vec::with_capacity(samples.len());
    let mut pf = Vec::with_capacity(samples.len());
    for r in scores {
        let (a, b) = r?;
        let fused: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| fuse_scores(x, y, w)).collect::<Result<_>>()?;
        pm.push(argmax(&a));
        pp.push(argmax(&b));
        pf.push(argmax(&fused));
    }
    Ok(ReidBenchmark {
        motion: accuracy_report(&pm, samples)?,
        map: accuracy_report(&pp, samples)?,
        fused: accuracy_report(&pf, samples)?,
    })
}

fn truth(samples: &[PseudoOcclusionSample]) -> Vec<Vec<Pose2D>> {
    samples.iter().map(|s| s.masked_gt.clone()).collect()
}

/// Gap recovery with the true future, in the sample frame.
pub fn completion_report(samples: &[PseudoOcclusionSample], net: &CompletionNet, miss_threshold: f64) -> Result<EvalReport> {
    let pred: Vec<Vec<Pose2D>> = par::map(samples, |s| predict_sample(net, s)).into_iter().collect::<Result<_>>()?;
    EvalReport::empty(samples.len()).with_trajectories(&pred, &truth(samples), miss_threshold)
}

pub fn linear_report(samples: &[PseudoOcclusionSample], miss_threshold: f64) -> Result<EvalReport> {
    let pred: Vec<Vec<Pose2D>> = samples
        .iter()
        .map(|s| linear_interpolate(s.history.last(), s.gt_future().first(), s.sample_rate))
        .collect();
    EvalReport::empty(samples.len()).with_trajectories(&pred, &truth(samples), miss_threshold)
}

//! Mini-batch training loop shared by the Re-ID and completion networks.
//!
//! Per-sample gradients are computed on independent tapes (in parallel when
//! the `parallel` feature is on) and summed in sample order, so results do
//! not depend on the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adamw_step, clip_grad_norm, AdamW, Bound, ParamStore, StepDecay, Tape, Tensor, Var};
use crate::par;
use crate::synth::occlusion::{augment_sample, PseudoOcclusionSample};
use crate::synth::scene::{derive_seed, NoiseConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            decay_factor: 0.6,
            decay_every: 10,
            weight_decay: 1e-2,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Invalid("batch_size and decay_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.decay_factor > 0.0 && self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::Invalid("learning-rate settings out of range".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            initial: self.lr,
            factor: self.decay_factor,
            every: self.decay_every,
        }
    }
}

/// Training-time augmentation of pseudo-occlusion samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotations are drawn uniformly from `[-rotation, rotation]` radians.
    pub rotation: f64,
    pub noise: NoiseConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation: std::f64::consts::PI / 8.0,
            noise: NoiseConfig {
                xy: 0.05,
                theta: 0.01,
                v: 0.1,
            },
        }
    }
}

impl AugmentConfig {
    pub fn apply(&self, s: &PseudoOcclusionSample, seed: u64) -> PseudoOcclusionSample {
        augment_sample(s, seed, self.rotation, &self.noise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Loss of one sample built on `t` from the bound parameters.
pub trait SampleLoss<S>: Fn(&mut Tape, &Bound, &S) -> Result<Var> + Sync {}
impl<S, F: Fn(&mut Tape, &Bound, &S) -> Result<Var> + Sync> SampleLoss<S> for F {}

/// Mean loss and mean gradient over `batch`.
pub fn batch_gradients<S: Sync>(
    store: &ParamStore,
    batch: &[S],
    loss: &impl SampleLoss<S>,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let per: Vec<Result<(f64, Vec<Tensor>)>> = par::map(batch, |s| {
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let l = loss(&mut t, &b, s)?;
        let v = t.value(l).item();
        let mut g = t.backward(l);
        Ok((v, store.collect_grads(&b, &mut g)))
    });
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for r in per {
        let (v, g) = r?;
        total += v;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let n = batch.len() as f64;
    let mut grads = acc.unwrap();
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok((total / n, grads))
}

/// Mean loss over `samples` with frozen parameters.
pub fn mean_loss<S: Sync>(store: &ParamStore, samples: &[S], loss: &impl SampleLoss<S>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let vals = par::map(samples, |s| {
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let l = loss(&mut t, &b, s)?;
        Ok::<f64, Error>(t.value(l).item())
    });
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / samples.len() as f64)
}

/// One optimizer update on `batch`. Returns the batch loss before the update.
pub fn train_step<S: Sync>(
    store: &mut ParamStore,
    batch: &[S],
    loss: &impl SampleLoss<S>,
    opt: &AdamW,
    clip_norm: f64,
) -> Result<f64> {
    let (l, mut grads) = batch_gradients(store, batch, loss)?;
    if !l.is_finite() {
        return Err(Error::Diverged(format!("batch loss {l} at optimizer step {}", store.step())));
    }
    if clip_norm > 0.0 {
        clip_grad_norm(&mut grads, clip_norm);
    }
    adamw_step(store, &grads, opt)?;
    Ok(l)
}

/// Trains epochs `first_epoch..cfg.epochs` (0-based) and leaves the
/// best-validation parameters in `store`. Resuming from a checkpoint taken
/// after epoch `k` with `first_epoch = k` replays the same shuffles.
/// `augment(sample, seed)` produces the training view of a sample for one
/// epoch. `on_epoch` sees every epoch log as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn fit<S: Sync + Send + Clone>(
    store: &mut ParamStore,
    train: &[S],
    val: &[S],
    cfg: &TrainConfig,
    first_epoch: usize,
    seed: u64,
    loss: &impl SampleLoss<S>,
    augment: &(impl Fn(&S, u64) -> S + Sync),
    mut on_epoch: impl FnMut(&EpochLog, &ParamStore),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let schedule = cfg.schedule();
    let mut logs = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in first_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let lr = schedule.lr(epoch);
        let opt = AdamW {
            lr,
            weight_decay: cfg.weight_decay,
            ..AdamW::default()
        };
        let epoch_seed = derive_seed(seed, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<S> = par::map(chunk, |&i| augment(&train[i], derive_seed(epoch_seed, i as u64 + 1)));
            let l = train_step(store, &batch, loss, &opt, cfg.clip_norm)
                .map_err(|e| match e {
                    Error::Diverged(m) => Error::Diverged(format!("epoch {}, batch {bi}: {m}", epoch + 1)),
                    other => other,
                })?;
            sum += l * chunk.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = if val.is_empty() { train_loss } else { mean_loss(store, val, loss)? };
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("validation loss {val_loss} after epoch {}", epoch + 1)));
        }
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_loss,
        };
        on_epoch(&log, store);
        logs.push(log);
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch + 1, val_loss, store.clone()));
        }
    }
    let (best_epoch, best_val_loss) = match best {
        Some((e, v, s)) => {
            *store = s;
            (e, v)
        }
        None => (0, f64::NAN),
    };
    Ok(TrainReport {
        epochs: logs,
        best_epoch,
        best_val_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Linear;
    use rand_chacha::ChaCha8Rng;

    // least squares on y = 2x + 1
    fn setup() -> (ParamStore, Linear, Vec<(f64, f64)>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 1, 1, true, &mut rng).unwrap();
        let data = (0..32).map(|i| (i as f64 / 16.0 - 1.0, 2.0 * (i as f64 / 16.0 - 1.0) + 1.0)).collect();
        (store, lin, data)
    }

    fn loss_of(lin: &Linear) -> impl SampleLoss<(f64, f64)> + '_ {
        move |t: &mut Tape, p: &Bound, s: &(f64, f64)| {
            let x = t.constant(Tensor::scalar(s.0));
            let y = lin.forward(t, p, x);
            let d = t.add_scalar(y, -s.1);
            let d2 = t.mul(d, d);
            Ok(t.sum(d2))
        }
    }

    #[test]
    fn fit_converges_and_keeps_best() {
        let (mut store, lin, data) = setup();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 8,
            lr: 0.05,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let rep = fit(&mut store, &data, &data, &cfg, 0, 1, &loss_of(&lin), &|s, _| *s, |_, _| seen += 1).unwrap();
        assert_eq!(seen, 60);
        assert!(rep.best_epoch >= 1 && rep.best_epoch <= 60);
        assert!(rep.best_val_loss < 1e-3, "{}", rep.best_val_loss);
        let final_val = mean_loss(&store, &data, &loss_of(&lin)).unwrap();
        assert_eq!(final_val, rep.best_val_loss);
    }

    #[test]
    fn fit_is_deterministic() {
        let run = || {
            let (mut store, lin, data) = setup();
            let cfg = TrainConfig { epochs: 3, batch_size: 5, ..TrainConfig::default() };
            fit(&mut store, &data, &[], &cfg, 0, 9, &loss_of(&lin), &|s, _| *s, |_, _| {}).unwrap();
            store.iter().flat_map(|p| p.value.data().to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_replays_next_epoch() {
        let (mut full, lin, data) = setup();
        let cfg = TrainConfig { epochs: 4, batch_size: 5, ..TrainConfig::default() };
        let mut logs = Vec::new();
        let mut partial = full.clone();
        fit(&mut full, &data, &[], &cfg, 0, 3, &loss_of(&lin), &|s, _| *s, |l, _| logs.push(l.clone())).unwrap();
        let two = TrainConfig { epochs: 2, ..cfg.clone() };
        // resume from the state after the last epoch, not the restored best
        let mut last = None;
        fit(&mut partial, &data, &data[..3], &two, 0, 3, &loss_of(&lin), &|s, _| *s, |_, s| last = Some(s.clone())).unwrap();
        let mut partial = last.unwrap();
        let mut resumed = Vec::new();
        fit(&mut partial, &data, &[], &cfg, 2, 3, &loss_of(&lin), &|s, _| *s, |l, _| resumed.push(l.clone())).unwrap();
        assert_eq!(resumed[0], logs[2]);
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let (mut store, lin, data) = setup();
        let l = loss_of(&lin);
        let before = mean_loss(&store, &data, &l).unwrap();
        let opt = AdamW { lr: 1e-3, weight_decay: 0.0, ..AdamW::default() };
        train_step(&mut store, &data, &l, &opt, 0.0).unwrap();
        assert!(mean_loss(&store, &data, &l).unwrap() < before);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (mut store, lin, _) = setup();
        let bad = vec![(f64::NAN, 0.0)];
        let e = train_step(&mut store, &bad, &loss_of(&lin), &AdamW::default(), 0.0).unwrap_err();
        assert!(matches!(e, Error::Diverged(_)), "{e}");
        assert!(batch_gradients(&store, &Vec::<(f64, f64)>::new(), &loss_of(&lin)).is_err());
    }
}

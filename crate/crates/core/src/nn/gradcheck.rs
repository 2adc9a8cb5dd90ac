//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so gradients that are both
/// essentially zero do not report huge relative errors.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            tol: self.tol.min(other.tol),
        }
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Weights that reduce a non-scalar output to a scalar, `sum(w .* y)`.
fn projection(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks d f / d x for a function of one input tensor.
pub fn grad_check(f: impl Fn(&mut Tape, Var) -> Var, x: &Tensor, tol: f64) -> GradCheckReport {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv);
    let (r, c) = tape.shape(out);
    let w = projection(r, c, 0x5eed);
    let grads = tape.backward_with(out, w.clone());
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let eval = |inp: Tensor| {
        let mut t = Tape::new();
        let v = t.constant(inp);
        let o = f(&mut t, v);
        dot(t.value(o), &w)
    };
    let mut max_err: f64 = 0.0;
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[k] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[k] -= FD_STEP;
        let num = (eval(xp) - eval(xm)) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_error(analytic.data()[k], num));
    }
    GradCheckReport {
        max_rel_error: max_err,
        checked: x.len(),
        tol,
    }
}

/// Checks the gradient of a scalar-valued network output with respect to
/// the parameters of `store`. At most `max_coords` randomly chosen scalars
/// are probed (all of them when the store is smaller).
pub fn grad_check_params(
    store: &ParamStore,
    f: impl Fn(&mut Tape, &Bound) -> Var,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = f(&mut tape, &bound);
    let (r, c) = tape.shape(out);
    let w = projection(r, c, seed ^ 0xabcd);
    let mut grads = tape.backward_with(out, w.clone());
    let analytic = store.collect_grads(&bound, &mut grads);

    let mut coords: Vec<(usize, usize)> = store
        .iter()
        .enumerate()
        .flat_map(|(p, param)| (0..param.value.len()).map(move |k| (p, k)))
        .collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..max_coords {
            let j = rng.random_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }

    let mut probe = store.clone();
    let eval = |probe: &ParamStore| {
        let mut t = Tape::new();
        let b = probe.bind_frozen(&mut t);
        let o = f(&mut t, &b);
        dot(t.value(o), &w)
    };
    let mut max_err: f64 = 0.0;
    for &(p, k) in &coords {
        let id = super::params::ParamId(p);
        let orig = probe.get(id).value.data()[k];
        probe.get_mut(id).value.data_mut()[k] = orig + FD_STEP;
        let fp = eval(&probe);
        probe.get_mut(id).value.data_mut()[k] = orig - FD_STEP;
        let fm = eval(&probe);
        probe.get_mut(id).value.data_mut()[k] = orig;
        let num = (fp - fm) / (2.0 * FD_STEP);
        max_err = max_err.max(rel_error(analytic[p].data()[k], num));
    }
    GradCheckReport {
        max_rel_error: max_err,
        checked: coords.len(),
        tol,
    }
}

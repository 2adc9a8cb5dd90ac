//! Scalar loss definitions and their tape counterparts.

use std::f64::consts::{PI, TAU};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FOCAL_ALPHA: f64 = 0.5;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const COORD_WEIGHT: f64 = 1.0;
pub const YAW_WEIGHT: f64 = 0.5;

/// Binary focal loss of a probability `k` against label `y`:
/// `-alpha_t (1 - k_t)^gamma log k_t`.
pub fn focal_loss(k: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let (kt, at) = if y { (k, alpha) } else { (1.0 - k, 1.0 - alpha) };
    if kt >= 1.0 {
        return 0.0;
    }
    -at * (1.0 - kt).powf(gamma) * kt.max(f64::MIN_POSITIVE).ln()
}

/// Standard smooth-L1: `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
pub fn smooth_l1(x: f64) -> f64 {
    super::tape::smooth_l1(x)
}

/// Shifts `gt` by a multiple of 2π so that `|pred - result| <= π`.
pub fn adjust_yaw(pred: f64, gt: f64) -> f64 {
    let mut adj = gt + TAU * ((pred - gt) / TAU).round();
    // rounding can land exactly on the far side of ±π
    if pred - adj > PI {
        adj += TAU;
    } else if adj - pred > PI {
        adj -= TAU;
    }
    adj
}

/// Mean `|pred - adjust_yaw(pred, gt)|`.
pub fn yaw_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let s: f64 = pred.iter().zip(gt).map(|(&p, &g)| (p - adjust_yaw(p, g)).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Mean smooth-L1 of the per-point Euclidean residual.
pub fn coord_loss(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| smooth_l1((p[0] - g[0]).hypot(p[1] - g[1])))
        .sum();
    Ok(s / pred.len() as f64)
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape { op: "loss", lhs: (a, 1), rhs: (b, 1) });
    }
    if a == 0 {
        return Err(Error::Empty("loss inputs".into()));
    }
    Ok(())
}

/// Tape version of [`coord_loss`]: `pred` is `n x 2`, `gt` holds `n` points.
pub fn coord_loss_var(t: &mut Tape, pred: Var, gt: &[[f64; 2]]) -> Var {
    let g = Tensor::from_vec(gt.len(), 2, gt.iter().flat_map(|p| *p).collect()).unwrap();
    let g = t.constant(g);
    let d = t.sub(pred, g);
    let n = t.row_norm(d);
    let l = t.smooth_l1(n);
    t.mean(l)
}

/// Tape version of [`yaw_loss`]: `pred` is `n x 1`. The 2π shift is chosen
/// from the current prediction and treated as a constant.
pub fn yaw_loss_var(t: &mut Tape, pred: Var, gt: &[f64]) -> Var {
    let adj: Vec<f64> = t
        .value(pred)
        .data()
        .iter()
        .zip(gt)
        .map(|(&p, &g)| adjust_yaw(p, g))
        .collect();
    let a = t.constant(Tensor::from_vec(gt.len(), 1, adj).unwrap());
    let d = t.sub(pred, a);
    let d = t.abs(d);
    t.mean(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn focal_reference_values() {
        assert_eq!(focal_loss(1.0, true, FOCAL_ALPHA, FOCAL_GAMMA), 0.0);
        let v = focal_loss(0.5, true, FOCAL_ALPHA, FOCAL_GAMMA);
        // 0.5 * 0.25 * ln 2
        assert!((v - 0.125 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.086643).abs() < 1e-6);
        assert_eq!(v, focal_loss(0.5, false, FOCAL_ALPHA, FOCAL_GAMMA));
        assert!(focal_loss(0.0, true, FOCAL_ALPHA, FOCAL_GAMMA).is_finite());
    }

    #[test]
    fn focal_matches_logit_form() {
        for &z in &[-3.0, -0.2, 0.0, 0.7, 4.0] {
            let k = 1.0 / (1.0 + (-z as f64).exp());
            for y in [true, false] {
                let (l, _) = super::super::tape::focal_with_grad(z, if y { 1.0 } else { 0.0 }, 0.5, 2.0);
                assert!((l - focal_loss(k, y, 0.5, 2.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(coord_loss(&[[0.5, 0.0]], &[[0.0, 0.0]]).unwrap(), 0.125);
        assert_eq!(coord_loss(&[[0.0, 2.0]], &[[0.0, 0.0]]).unwrap(), 1.5);
        assert_eq!(coord_loss(&[[1.0, 2.0]], &[[1.0, 2.0]]).unwrap(), 0.0);
    }

    #[test]
    fn yaw_reference_value() {
        let adj = adjust_yaw(0.1, 6.2);
        assert!((adj - (6.2 - TAU)).abs() < 1e-12);
        assert!((yaw_loss(&[0.1], &[6.2]).unwrap() - 0.18319).abs() < 1e-4);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(yaw_loss(&[0.0, 1.0], &[0.0]).is_err());
        assert!(coord_loss(&[], &[]).is_err());
    }

    #[test]
    fn tape_losses_agree_with_scalar() {
        let pred = [[0.3, -0.2], [2.0, 1.0]];
        let gt = [[0.0, 0.0], [0.0, 0.0]];
        let mut t = Tape::new();
        let p = t.constant(Tensor::from_vec(2, 2, vec![0.3, -0.2, 2.0, 1.0]).unwrap());
        let l = coord_loss_var(&mut t, p, &gt);
        assert!((t.value(l).item() - coord_loss(&pred, &gt).unwrap()).abs() < 1e-15);
        let y = t.constant(Tensor::from_vec(2, 1, vec![0.1, -3.0]).unwrap());
        let ly = yaw_loss_var(&mut t, y, &[6.2, 3.0]);
        assert!((t.value(ly).item() - yaw_loss(&[0.1, -3.0], &[6.2, 3.0]).unwrap()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn adjusted_yaw_within_pi(p in -50.0f64..50.0, g in -50.0f64..50.0) {
            let a = adjust_yaw(p, g);
            prop_assert!((p - a).abs() <= PI + 1e-12);
            let k = ((a - g) / TAU).round();
            prop_assert!((a - g - k * TAU).abs() < 1e-9);
        }

        #[test]
        fn focal_non_negative(k in 0.0f64..=1.0, y: bool) {
            let l = focal_loss(k, y, FOCAL_ALPHA, FOCAL_GAMMA);
            prop_assert!(l >= 0.0);
            let exact = if y { k == 1.0 } else { k == 0.0 };
            prop_assert_eq!(l == 0.0, exact);
        }
    }
}

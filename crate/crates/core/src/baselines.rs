//! Non-learned references: constant-velocity association and linear gap
//! interpolation.

use crate::geometry::{angle_diff, wrap, Pose2D};
use crate::tracklet::{Observation, Tracklet};

/// Absolute times of the sample-grid points strictly between `t0` and `t1`:
/// `round((t1 - t0) * rate) - 1` of them, spaced one period apart.
pub fn missing_times(t0: f64, t1: f64, rate: f64) -> Vec<f64> {
    let n = ((t1 - t0) * rate).round() as i64 - 1;
    (1..=n.max(0)).map(|k| t0 + k as f64 / rate).collect()
}

/// Constant-velocity association: the history's last pose is extrapolated
/// with its last velocity to each candidate's first timestamp, and the
/// closest candidate wins. Candidates that start within `tau` of the
/// history's end are ignored. Returns an index into `futures`.
pub fn cvm_associate(history: &Tracklet, futures: &[Tracklet], tau: f64) -> Option<usize> {
    let last = history.last();
    let t_end = last.t;
    let mut best: Option<(usize, f64)> = None;
    for (j, f) in futures.iter().enumerate() {
        if f.id == history.id || f.start_time() - t_end <= tau {
            continue;
        }
        let first = f.first();
        let dt = first.t - t_end;
        let px = last.x + last.vx * dt;
        let py = last.y + last.vy * dt;
        let d = (first.x - px).hypot(first.y - py);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
}

/// Linear interpolation between two observations at the missing grid times.
/// Position is linear; yaw follows the shorter arc.
pub fn linear_interpolate(end: &Observation, start: &Observation, rate: f64) -> Vec<Pose2D> {
    let span = start.t - end.t;
    let dtheta = angle_diff(start.theta, end.theta);
    missing_times(end.t, start.t, rate)
        .into_iter()
        .map(|t| {
            let u = (t - end.t) / span;
            Pose2D::new(
                end.x + u * (start.x - end.x),
                end.y + u * (start.y - end.y),
                wrap(end.theta + u * dtheta),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::from_local;
    use crate::tracklet::test_util::obs;
    use crate::tracklet::TrackId;
    use proptest::prelude::*;

    fn trk(id: u64, o: Vec<Observation>) -> Tracklet {
        Tracklet::new(TrackId(id), "car", o).unwrap()
    }

    fn with_v(mut o: Observation, vx: f64, vy: f64) -> Observation {
        o.vx = vx;
        o.vy = vy;
        o
    }

    #[test]
    fn cvm_picks_extrapolated_candidate() {
        let h = trk(0, vec![with_v(obs(0.0, 0.0, 0.0, 0.0), 10.0, 0.0)]);
        let a = trk(1, vec![obs(2.0, 20.0, 0.0, 0.0)]);
        let b = trk(2, vec![obs(2.0, 5.0, 15.0, 0.0)]);
        assert_eq!(cvm_associate(&h, &[b.clone(), a.clone()], 1.5), Some(1));
        // distances 0 and hypot(15, 15)
        let d_b = (5.0f64 - 20.0).hypot(15.0);
        assert!((d_b - 21.2132).abs() < 1e-4);
        assert_eq!(cvm_associate(&h, &[], 1.5), None);
        // candidate inside the death memory is skipped
        let c = trk(3, vec![obs(1.0, 10.0, 0.0, 0.0)]);
        assert_eq!(cvm_associate(&h, &[c, b], 1.5), Some(1));
    }

    #[test]
    fn cvm_zero_velocity_nearest_start() {
        let h = trk(0, vec![with_v(obs(0.0, 1.0, 1.0, 0.0), 0.0, 0.0)]);
        let f: Vec<Tracklet> = [(9.0, 0.0), (2.0, 2.0), (-4.0, 0.0)]
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| trk(i as u64 + 1, vec![obs(3.0, x, y, 0.0)]))
            .collect();
        assert_eq!(cvm_associate(&h, &f, 1.5), Some(1));
    }

    #[test]
    fn linear_reference_cases() {
        let a = obs(0.0, 0.0, 0.0, 0.0);
        let b = obs(2.5, 10.0, 0.0, 0.0);
        let xs: Vec<f64> = linear_interpolate(&a, &b, 2.0).iter().map(|p| p.x).collect();
        assert_eq!(xs.len(), 4);
        for (x, e) in xs.iter().zip([2.0, 4.0, 6.0, 8.0]) {
            assert!((x - e).abs() < 1e-12);
        }
        let same = linear_interpolate(&a, &obs(2.0, 0.0, 0.0, 0.0), 2.0);
        assert!(same.iter().all(|p| *p == Pose2D::ORIGIN));

        let y0 = obs(0.0, 0.0, 0.0, 3.0);
        let y1 = obs(1.0, 0.0, 0.0, -3.0);
        let mid = linear_interpolate(&y0, &y1, 2.0);
        assert_eq!(mid.len(), 1);
        // halfway along the short arc through pi
        assert!(mid[0].theta.abs() > 3.0);
        assert!(angle_diff(mid[0].theta, std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn constant_velocity_gap_is_exact() {
        let t = crate::tracklet::test_util::straight(0, 0.0, 10, 0.0, 7.0);
        let poses = linear_interpolate(&t.obs[1], &t.obs[8], 2.0);
        for (p, o) in poses.iter().zip(&t.obs[2..8]) {
            assert!((p.x - o.x).abs() < 1e-9 && (p.y - o.y).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_time_counts() {
        assert_eq!(missing_times(1.0, 3.0, 2.0), vec![1.5, 2.0, 2.5]);
        assert!(missing_times(0.0, 0.5, 2.0).is_empty());
        assert_eq!(missing_times(0.0, 5.0, 2.0).len(), 9);
    }

    proptest! {
        #[test]
        fn interpolation_is_collinear(x0 in -50.0f64..50.0, y0 in -50.0f64..50.0,
                                      x1 in -50.0f64..50.0, y1 in -50.0f64..50.0, k in 2usize..20) {
            let a = obs(0.0, x0, y0, 0.1);
            let b = obs(k as f64 * 0.5, x1, y1, -2.0);
            for p in linear_interpolate(&a, &b, 2.0) {
                let cross = (x1 - x0) * (p.y - y0) - (y1 - y0) * (p.x - x0);
                prop_assert!(cross.abs() < 1e-9 * (1.0 + (x1 - x0).hypot(y1 - y0)).powi(2));
            }
        }

        #[test]
        fn cvm_rigid_invariance(seed in 0u64..200, ang in -3.1f64..3.1, dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let h = trk(0, vec![with_v(obs(0.0, 0.0, 0.0, 0.0), r.random_range(-10.0..10.0), r.random_range(-10.0..10.0))]);
            let f: Vec<Tracklet> = (0..5)
                .map(|i| trk(i + 1, vec![obs(r.random_range(1.6..6.0), r.random_range(-40.0..40.0), r.random_range(-40.0..40.0), 0.0)]))
                .collect();
            let origin = Pose2D::new(dx, dy, ang);
            let move_t = |t: &Tracklet| {
                let mut t = t.clone();
                for o in &mut t.obs {
                    let p = from_local(&o.pose(), &origin);
                    let (vx, vy) = crate::geometry::rotate(o.vx, o.vy, ang);
                    o.x = p.x; o.y = p.y; o.theta = p.theta; o.vx = vx; o.vy = vy;
                }
                t
            };
            let f2: Vec<Tracklet> = f.iter().map(move_t).collect();
            prop_assert_eq!(cvm_associate(&h, &f, 1.5), cvm_associate(&move_t(&h), &f2, 1.5));
        }
    }
}

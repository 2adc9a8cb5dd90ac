//! SE(2) frame math in the bird's-eye-view plane.
//!
//! Yaw is counter-clockwise positive and always reported in `(-pi, pi]`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar pose: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub const ORIGIN: Pose2D = Pose2D {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn distance(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::NonFinite(format!("angle {a}")));
    }
    Ok(wrap(a))
}

/// Infallible wrap for values already known to be finite.
pub(crate) fn wrap(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    // rem_euclid maps -pi to pi already; guard the rounding edge at +pi + eps.
    if r <= -PI {
        r += TAU;
    }
    r
}

/// Shortest signed angular difference `a - b`, wrapped.
pub(crate) fn angle_diff(a: f64, b: f64) -> f64 {
    wrap(a - b)
}

/// Rotates a vector by `angle`.
#[inline]
pub(crate) fn rotate(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x - s * y, s * x + c * y)
}

fn check_finite(poses: &[Pose2D], origin: &Pose2D) -> Result<()> {
    if !origin.is_finite() {
        return Err(Error::NonFinite(format!("frame origin {origin:?}")));
    }
    if let Some(p) = poses.iter().find(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("pose {p:?}")));
    }
    Ok(())
}

/// Expresses global poses in the frame whose origin is `origin`.
pub fn to_local_frame(poses: &[Pose2D], origin: &Pose2D) -> Result<Vec<Pose2D>> {
    check_finite(poses, origin)?;
    Ok(poses.iter().map(|p| to_local(p, origin)).collect())
}

/// Inverse of [`to_local_frame`].
pub fn from_local_frame(poses: &[Pose2D], origin: &Pose2D) -> Result<Vec<Pose2D>> {
    check_finite(poses, origin)?;
    Ok(poses.iter().map(|p| from_local(p, origin)).collect())
}

#[inline]
pub(crate) fn to_local(p: &Pose2D, origin: &Pose2D) -> Pose2D {
    let (x, y) = rotate(p.x - origin.x, p.y - origin.y, -origin.theta);
    Pose2D::new(x, y, wrap(p.theta - origin.theta))
}

#[inline]
pub(crate) fn from_local(p: &Pose2D, origin: &Pose2D) -> Pose2D {
    let (x, y) = rotate(p.x, p.y, origin.theta);
    Pose2D::new(x + origin.x, y + origin.y, wrap(p.theta + origin.theta))
}

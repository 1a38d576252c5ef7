//! SE(2) poses and angle arithmetic.

use std::f64::consts::{PI, TAU};
use std::ops::Mul;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into the half-open interval (-π, π].
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::invalid(format!("non-finite angle {a}")));
    }
    Ok(wrap(a))
}

/// Infallible wrap for values already known to be finite.
pub(crate) fn wrap(a: f64) -> f64 {
    // rem_euclid lands in [0, 2π]; fold the upper half down.
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Rigid-body pose in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    /// Builds a pose, wrapping `theta`. Non-finite components are rejected.
    pub fn new(x: f64, y: f64, theta: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::invalid(format!("non-finite position ({x}, {y})")));
        }
        Ok(Self {
            x,
            y,
            theta: wrap_angle(theta)?,
        })
    }

    /// Like [`Pose2::new`] for callers that already hold finite values.
    pub(crate) fn from_parts(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// `self ⊕ other`: apply `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::from_parts(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::from_parts(
            -c * self.x - s * self.y,
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// `self⁻¹ ⊕ other`: pose of `other` seen from `self`.
    pub fn relative(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2::from_parts(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)
    }

    /// Tangent-vector form `[x, y, theta]` used by the least-squares residuals.
    pub fn to_vector(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }

    pub fn translation_distance(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl Mul for Pose2 {
    type Output = Pose2;

    fn mul(self, rhs: Pose2) -> Pose2 {
        self.compose(&rhs)
    }
}

pub fn se2_compose(a: &Pose2, b: &Pose2) -> Result<Pose2> {
    check_finite(a)?;
    check_finite(b)?;
    Ok(a.compose(b))
}

pub fn se2_relative(a: &Pose2, b: &Pose2) -> Result<Pose2> {
    check_finite(a)?;
    check_finite(b)?;
    Ok(a.relative(b))
}

fn check_finite(p: &Pose2) -> Result<()> {
    if p.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite pose {p:?}")))
    }
}

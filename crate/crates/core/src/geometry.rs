//! SE(2) pose algebra and Gaussian beliefs over planar frame alignments.
//!
//! Convention: a pose `T^a_b` maps points expressed in frame `b` into frame
//! `a`, `p^a = R(theta) p^b + t`. Composition chains frames left to right,
//! `compose(T^a_b, T^b_c) = T^a_c`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("angle is not finite: {0}")]
    NonFiniteAngle(f64),
    #[error("covariance is not symmetric positive definite")]
    NotPositiveDefinite,
}

/// Wraps an angle into `(-pi, pi]`, rejecting NaN and infinities.
pub fn wrap_angle(a: f64) -> Result<f64, GeometryError> {
    if !a.is_finite() {
        return Err(GeometryError::NonFiniteAngle(a));
    }
    Ok(normalize_angle(a))
}

/// Infallible wrap into `(-pi, pi]`. Non-finite input propagates as NaN.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    // rem_euclid may round up to exactly TAU for tiny negative inputs
    if r > PI {
        r -= TAU;
    }
    if r <= -PI {
        r += TAU;
    }
    r
}

/// Planar rigid transform `(x, y, theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// `compose(self, other)`: `self = T^a_b`, `other = T^b_c`, returns `T^a_c`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Maps a point from the child frame into the parent frame.
    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// Translation distance and absolute wrapped heading difference.
    pub fn distance_to(&self, other: &Pose2) -> (f64, f64) {
        let dt = (self.translation() - other.translation()).norm();
        let dth = normalize_angle(self.theta - other.theta).abs();
        (dt, dth)
    }
}

/// Ground-truth alignment `T^{odom_i}_{odom_j}` at one instant, from each
/// robot's pose in its own odometry frame and in the world frame.
pub fn gt_alignment(
    odom_pose_i: &Pose2,
    world_pose_i: &Pose2,
    odom_pose_j: &Pose2,
    world_pose_j: &Pose2,
) -> Pose2 {
    let odom_i_from_world = odom_pose_i.compose(&world_pose_i.inverse());
    let odom_j_from_world = odom_pose_j.compose(&world_pose_j.inverse());
    odom_i_from_world.compose(&odom_j_from_world.inverse())
}

/// Gaussian belief over `[x, y, theta]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3 {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

impl Gaussian3 {
    pub fn new(mean: Pose2, cov: Matrix3<f64>) -> Result<Self, GeometryError> {
        let g = Self {
            mean: mean.to_vector(),
            cov: symmetrize(&cov),
        };
        if !g.is_healthy(f64::INFINITY) {
            return Err(GeometryError::NotPositiveDefinite);
        }
        Ok(g)
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::from_vector(&self.mean)
    }

    /// Symmetric to 1e-9 with every eigenvalue in `(0, max_eig)`.
    pub fn is_healthy(&self, max_eig: f64) -> bool {
        if !self.mean.iter().all(|v| v.is_finite()) || !self.cov.iter().all(|v| v.is_finite()) {
            return false;
        }
        if (self.cov - self.cov.transpose()).abs().max() > 1e-9 {
            return false;
        }
        let eig = SymmetricEigen::new(self.cov).eigenvalues;
        eig.iter().all(|&l| l > 0.0 && l < max_eig)
    }
}

pub(crate) fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

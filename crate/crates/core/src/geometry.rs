//! Planar rigid-motion arithmetic and Gaussian utilities.
//!
//! Poses live on SE(2) and are stored as `(x, y, theta)` with `theta` wrapped
//! to `(-pi, pi]`. Tangent vectors are ordered `(x, y, theta)` and act on the
//! right: `retract(p, d) = p * Exp(d)`. Every Jacobian in this crate is taken
//! with respect to that right perturbation.
//!
//! Bearings are measured counterclockwise from the pose heading.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::error::{Result, SlamError};

/// Minimum pose-to-point distance for which a bearing is defined.
pub const MIN_RANGE: f64 = 1e-9;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let wrapped = angle.rem_euclid(TAU);
    if wrapped > PI {
        wrapped - TAU
    } else {
        wrapped
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A planar pose.
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

impl fmt::Display for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pose2({:.6}, {:.6}, {:.6})", self.x, self.y, self.theta)
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        rotation(self.theta)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    /// `self * other`.
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
            -c * self.x - s * self.y,
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// `self^-1 * other`: `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2::new(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)
    }

    /// Right-multiplicative manifold update `self * Exp(delta)`.
    pub fn retract(&self, delta: &Vector3<f64>) -> Pose2 {
        self.compose(&Pose2::exp(delta))
    }

    /// `Log(self^-1 * other)`, the inverse of [`Pose2::retract`].
    pub fn local(&self, other: &Pose2) -> Vector3<f64> {
        self.between(other).log()
    }

    /// Maps a point from this pose's frame to the world frame.
    pub fn transform_from(&self, p: &Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// Maps a world point into this pose's frame.
    pub fn transform_to(&self, p: &Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Point2::new(c * dx + s * dy, -s * dx + c * dy)
    }

    /// World position of a landmark seen at `(range, bearing)` from this pose.
    pub fn project(&self, range: f64, bearing: f64) -> Point2 {
        let (s, c) = bearing.sin_cos();
        self.transform_from(&Point2::new(range * c, range * s))
    }

    pub fn exp(tangent: &Vector3<f64>) -> Pose2 {
        let theta = tangent[2];
        let (a, b) = v_coefficients(theta);
        let x = a * tangent[0] - b * tangent[1];
        let y = b * tangent[0] + a * tangent[1];
        Pose2::new(x, y, theta)
    }

    pub fn log(&self) -> Vector3<f64> {
        let theta = self.theta;
        let (a, b) = v_coefficients(theta);
        // V^-1 = [[a, b], [-b, a]] / (a^2 + b^2)
        let det = a * a + b * b;
        let x = (a * self.x + b * self.y) / det;
        let y = (-b * self.x + a * self.y) / det;
        Vector3::new(x, y, theta)
    }
}

/// Coefficients of `V(theta) = [[a, -b], [b, a]]` from the SE(2) exponential.
fn v_coefficients(theta: f64) -> (f64, f64) {
    if theta.abs() < 1e-6 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, theta / 2.0 - theta * t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta)
    }
}

pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Predicted range/bearing and its Jacobians.
#[derive(Clone, Copy, Debug)]
pub struct RangeBearing {
    pub range: f64,
    pub bearing: f64,
    /// 2x3 Jacobian with respect to the pose tangent.
    pub d_pose: Matrix2x3<f64>,
    /// 2x2 Jacobian with respect to the point.
    pub d_point: Matrix2<f64>,
}

impl RangeBearing {
    pub fn measurement(&self) -> Vector2<f64> {
        Vector2::new(self.range, self.bearing)
    }

    /// Stacked `[d_pose | d_point]` 2x5 Jacobian.
    pub fn stacked_jacobian(&self) -> nalgebra::Matrix2x5<f64> {
        let mut h = nalgebra::Matrix2x5::zeros();
        h.fixed_view_mut::<2, 3>(0, 0).copy_from(&self.d_pose);
        h.fixed_view_mut::<2, 2>(0, 3).copy_from(&self.d_point);
        h
    }
}

/// Range and bearing of `point` seen from `pose`.
pub fn range_bearing(pose: &Pose2, point: &Point2) -> Result<RangeBearing> {
    let local = pose.transform_to(point);
    let (dx, dy) = (local.x, local.y);
    let r2 = dx * dx + dy * dy;
    let range = r2.sqrt();
    if !(range > MIN_RANGE) {
        return Err(SlamError::CoincidentPoint);
    }
    let bearing = wrap_angle(dy.atan2(dx));

    // d(local)/d(delta_t) = -I, d(local)/d(delta_theta) = (dy, -dx)
    let d_pose = Matrix2x3::new(-dx / range, -dy / range, 0.0, dy / r2, -dx / r2, -1.0);
    // d(local)/d(point) = R^T
    let rt = pose.rotation().transpose();
    let d_local = Matrix2::new(dx / range, dy / range, -dy / r2, dx / r2);
    let d_point = d_local * rt;

    Ok(RangeBearing {
        range,
        bearing,
        d_pose,
        d_point,
    })
}

/// A Gaussian density with a validated covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(SlamError::Domain(format!(
                "covariance is {}x{} but mean has {} entries",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        check_spd(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn nll(&self, x: &DVector<f64>) -> Result<f64> {
        gaussian_nll(&(x - &self.mean), &self.cov)
    }
}

/// Rejects matrices that are asymmetric beyond 1e-12 (relative) or fail Cholesky.
pub fn check_spd(cov: &DMatrix<f64>) -> Result<()> {
    if !cov.is_square() || cov.nrows() == 0 {
        return Err(SlamError::NotPositiveDefinite);
    }
    let scale = cov.amax().max(1.0);
    for i in 0..cov.nrows() {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                return Err(SlamError::NotPositiveDefinite);
            }
        }
    }
    if cov.iter().any(|v| !v.is_finite()) || cov.clone().cholesky().is_none() {
        return Err(SlamError::NotPositiveDefinite);
    }
    Ok(())
}

/// Negative log density of a zero-mean Gaussian at `residual`, including the
/// `0.5 * log det(2 pi cov)` normalization.
pub fn gaussian_nll(residual: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if cov.nrows() != residual.len() || cov.ncols() != residual.len() {
        return Err(SlamError::Domain(format!(
            "residual has {} entries but covariance is {}x{}",
            residual.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(SlamError::NotPositiveDefinite)?;
    let whitened = chol
        .l_dirty()
        .solve_lower_triangular(residual)
        .ok_or(SlamError::NotPositiveDefinite)?;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let dim = residual.len() as f64;
    Ok(0.5 * whitened.norm_squared() + 0.5 * (dim * TAU.ln() + log_det))
}

/// Inverse CDF of the chi-square distribution.
///
/// Two degrees of freedom use the closed form `-2 ln(1 - p)`; other orders
/// bisect the regularized lower incomplete gamma function to 1e-10.
pub fn chi2_quantile(confidence: f64, dof: u32) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(SlamError::Domain(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    if dof == 0 {
        return Err(SlamError::Domain("dof must be at least 1".into()));
    }
    if dof == 2 {
        return Ok(-2.0 * (1.0 - confidence).ln());
    }
    let k = f64::from(dof) / 2.0;
    let cdf = |x: f64| gamma_lr(k, x / 2.0);
    let mut lo = 0.0;
    let mut hi = f64::from(dof).max(1.0);
    while cdf(hi) < confidence {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-10 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < confidence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Gaussian noise model with precomputed whitening.
///
/// `whiten(r) = L^-1 r` where `cov = L L^T`, so `|whiten(r)|^2` is the squared
/// Mahalanobis norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    cov: DMatrix<f64>,
    sqrt_info: DMatrix<f64>,
    log_norm: f64,
}

impl NoiseModel {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        check_spd(&cov)?;
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(SlamError::NotPositiveDefinite)?;
        let l = chol.l();
        let n = cov.nrows();
        let sqrt_info = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(SlamError::NotPositiveDefinite)?;
        let log_det: f64 = l.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_norm = 0.5 * (n as f64 * TAU.ln() + log_det);
        Ok(Self {
            cov,
            sqrt_info,
            log_norm,
        })
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * (sigma * sigma))
    }

    pub fn diagonal(sigmas: &[f64]) -> Result<Self> {
        let d = DVector::from_iterator(sigmas.len(), sigmas.iter().map(|s| s * s));
        Self::new(DMatrix::from_diagonal(&d))
    }

    pub fn from_matrix2(cov: &Matrix2<f64>) -> Result<Self> {
        Self::new(DMatrix::from_iterator(2, 2, cov.iter().copied()))
    }

    pub fn from_matrix3(cov: &Matrix3<f64>) -> Result<Self> {
        Self::new(DMatrix::from_iterator(3, 3, cov.iter().copied()))
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sqrt_information(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }

    /// `0.5 * log det(2 pi cov)`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        &self.sqrt_info * r
    }

    pub fn whiten_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.sqrt_info * m
    }

    pub fn nll(&self, r: &DVector<f64>) -> f64 {
        0.5 * self.whiten(r).norm_squared() + self.log_norm
    }

    /// Covariance scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.cov * factor)
    }
}

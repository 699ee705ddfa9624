//! Planar rigid-body transforms and the manifold difference operator.
//!
//! Everything downstream (residuals, Jacobians, the consensus gate) is built
//! on the three primitives here: composition, inversion and `boxminus`. All
//! angles live in the half-open interval `(-pi, pi]`.

use nalgebra::{Matrix2, Matrix3, Vector3};
use std::f64::consts::PI;

/// Wraps an angle into `(-pi, pi]`. Idempotent and 2*pi-periodic.
///
/// Panics on non-finite input; this is a contract violation, not a
/// recoverable condition.
pub fn normalize_angle(theta: f64) -> f64 {
    assert!(theta.is_finite(), "normalize_angle: non-finite angle {theta}");
    let two_pi = 2.0 * PI;
    let mut a = theta % two_pi; // (-2pi, 2pi)
    if a <= -PI {
        a += two_pi;
    } else if a > PI {
        a -= two_pi;
    }
    a
}

/// An SE(2) element: planar position plus heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose2 {
    x: f64,
    y: f64,
    theta: f64,
}

impl Pose2 {
    /// Builds a pose, wrapping `theta` into `(-pi, pi]`.
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Pose2 {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// 2x2 rotation matrix of the heading.
    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    /// Group composition: `self` followed by `other` in `self`'s frame.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    /// Group inverse: `p.inverse().compose(&p)` is the identity.
    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -c * self.x - s * self.y,
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Rigid transform taking `self`'s frame to `other`'s frame:
    /// `inverse(self) . other`.
    pub fn relative(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    /// Manifold difference: the local-frame discrepancy `inverse(z) . self`,
    /// with the angle component wrapped. `p.boxminus(&p)` is exactly zero.
    pub fn boxminus(&self, z: &Pose2) -> Residual3 {
        let d = z.inverse().compose(self);
        Residual3 {
            dx: d.x,
            dy: d.y,
            dtheta: d.theta,
        }
    }

    /// Retraction used by the solver: a local perturbation applied in the
    /// body frame, `self . Pose2(delta)`.
    pub fn boxplus(&self, delta: &Vector3<f64>) -> Pose2 {
        self.compose(&Pose2::new(delta.x, delta.y, delta.z))
    }

    /// Adjoint of the group element, mapping local perturbations between
    /// frames: for small `d`, `vec(T d T^-1) = adjoint(T) * vec(d)`.
    pub fn adjoint(&self) -> Matrix3<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix3::new(c, -s, self.y, s, c, -self.x, 0.0, 0.0, 1.0)
    }
}

/// Local-frame measurement discrepancy: the `e` of a quadratic edge term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residual3 {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl Residual3 {
    pub fn zero() -> Self {
        Residual3 {
            dx: 0.0,
            dy: 0.0,
            dtheta: 0.0,
        }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.dx, self.dy, self.dtheta)
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dtheta.is_finite()
    }
}

/// Symmetric 3x3 information matrix (inverse covariance) of a `Residual3`.
///
/// Constructed from the six upper-triangular entries in row-major order,
/// matching the on-disk edge layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfoMat3 {
    m: Matrix3<f64>,
}

/// Eigenvalue slack below zero tolerated when accepting a matrix as
/// positive semi-definite.
pub const PSD_EIGENVALUE_SLACK: f64 = 1e-9;

impl InfoMat3 {
    /// From `[m11, m12, m13, m22, m23, m33]`.
    pub fn from_upper(u: [f64; 6]) -> Self {
        let m = Matrix3::new(u[0], u[1], u[2], u[1], u[3], u[4], u[2], u[4], u[5]);
        InfoMat3 { m }
    }

    /// Symmetrizes an arbitrary matrix: `(m + m^T) / 2`.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        InfoMat3 {
            m: (m + m.transpose()) * 0.5,
        }
    }

    pub fn identity() -> Self {
        InfoMat3 {
            m: Matrix3::identity(),
        }
    }

    pub fn diagonal(dxx: f64, dyy: f64, dtt: f64) -> Self {
        InfoMat3 {
            m: Matrix3::from_diagonal(&Vector3::new(dxx, dyy, dtt)),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn upper(&self) -> [f64; 6] {
        [
            self.m[(0, 0)],
            self.m[(0, 1)],
            self.m[(0, 2)],
            self.m[(1, 1)],
            self.m[(1, 2)],
            self.m[(2, 2)],
        ]
    }

    /// All eigenvalues above `-PSD_EIGENVALUE_SLACK`.
    pub fn is_positive_semidefinite(&self) -> bool {
        self.m
            .symmetric_eigenvalues()
            .iter()
            .all(|&l| l >= -PSD_EIGENVALUE_SLACK)
    }

    /// Strictly positive definite (Cholesky succeeds). Required for any
    /// edge that participates in a chi-square test.
    pub fn is_positive_definite(&self) -> bool {
        self.m.cholesky().is_some()
    }

    /// The quadratic form `e^T M e`.
    pub fn quadratic_form(&self, e: &Residual3) -> f64 {
        let v = e.as_vector();
        (v.transpose() * self.m * v)[(0, 0)]
    }

    /// `s * M`, used for the scaled-odometry objective. The stored edge
    /// information is never mutated; scaling happens on the fly.
    pub fn scaled(&self, s: f64) -> InfoMat3 {
        InfoMat3 { m: self.m * s }
    }

    /// Congruence transform `J^T M J`, used when an edge is re-anchored to
    /// the opposite orientation.
    pub fn congruence(&self, j: &Matrix3<f64>) -> InfoMat3 {
        InfoMat3::from_matrix(&(j.transpose() * self.m * j))
    }
}

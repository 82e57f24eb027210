//! Kinematic chains, forward kinematics, geometric Jacobians and damped
//! least-squares inverse kinematics.
//!
//! Everything here is a pure function of its inputs; the same chain can be
//! shared freely across threads.

mod chain;
mod fk;
mod ik;

pub use chain::{fixtures, load_chain, ChainDocument, ChainModel, JointDocument, JointKind, JointSpec};
pub use fk::{forward_kinematics, jacobian, joint_frames, JointFrame};
pub use ik::{inverse_kinematics, inverse_kinematics_position, IkParams, IkSolution};

use std::ops::{Index, IndexMut};

use nalgebra::{DVector, Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("malformed chain document: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Validation { field: &'static str, reason: String },
    #[error("dimension mismatch: expected {expected} joints, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("target unreachable (position residual {position_residual:.3e} m, orientation residual {orientation_residual:.3e} rad)")]
    Unreachable {
        best: JointVector,
        position_residual: f64,
        orientation_residual: f64,
    },
}

impl KinematicsError {
    pub(crate) fn validation(field: &'static str, reason: impl Into<String>) -> Self {
        Self::Validation {
            field,
            reason: reason.into(),
        }
    }

    /// Name of the offending document field for validation errors.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            Self::Validation { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// End-effector (or any frame) pose in a chain's base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_position(position: Vector3<f64>) -> Self {
        Self::new(position, UnitQuaternion::identity())
    }

    pub fn identity() -> Self {
        Self::from_position(Vector3::zeros())
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.translation.vector, iso.rotation)
    }

    /// Twist-style orientation error taking `current` to `self`, as a rotation
    /// vector (axis times angle) with the angle in `[0, pi]`.
    pub fn orientation_error(&self, current: &UnitQuaternion<f64>) -> Vector3<f64> {
        orientation_error(&self.orientation, current)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Rotation vector of `target * current^-1`, using the quaternion
/// representative with non-negative scalar part.
pub fn orientation_error(target: &UnitQuaternion<f64>, current: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut d = (target * current.inverse()).into_inner();
    if d.w < 0.0 {
        d = -d;
    }
    let v = d.imag();
    let s = v.norm();
    if s < 1e-15 {
        // small-angle limit of 2*atan2(s, w) / s
        return v * 2.0;
    }
    let angle = 2.0 * s.atan2(d.w);
    v * (angle / s)
}

/// Joint positions, one entry per joint of some chain.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointVector(Vec<f64>);

impl JointVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &JointVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<Vec<f64>> for JointVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for JointVector {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

impl From<&DVector<f64>> for JointVector {
    fn from(v: &DVector<f64>) -> Self {
        Self(v.iter().copied().collect())
    }
}

impl Index<usize> for JointVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for JointVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn orientation_error_identity_is_zero() {
        let q = UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3);
        assert!(orientation_error(&q, &q).norm() < 1e-15);
    }

    #[test]
    fn orientation_error_matches_axis_angle() {
        let target = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let e = orientation_error(&target, &UnitQuaternion::identity());
        assert!((e - Vector3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-12);
    }

    #[test]
    fn orientation_error_resolves_double_cover() {
        let target = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.3);
        let flipped = UnitQuaternion::new_unchecked(-target.into_inner());
        let e1 = orientation_error(&target, &UnitQuaternion::identity());
        let e2 = orientation_error(&flipped, &UnitQuaternion::identity());
        assert!((e1 - e2).norm() < 1e-12);
        assert!((e1.norm() - 0.3).abs() < 1e-12);
    }
}

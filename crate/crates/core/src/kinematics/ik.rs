//! Damped least-squares (Levenberg-Marquardt) inverse kinematics.
//!
//! The residual is the twist error between the target and the current
//! end-effector pose: position difference stacked over the rotation vector of
//! `target * current^-1`. Each iteration solves
//! `(J^T J + lambda^2 I) dq = J^T e`, scales `dq` down so that no joint moves
//! more than `step_clip`, and clamps the result into the joint limits. The
//! damping starts at `IkParams::damping`, shrinks after an accepted step and
//! grows after a rejected one.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::fk::{jacobian_from_frames, joint_frames};
use super::{orientation_error, ChainModel, JointVector, KinematicsError, Pose};

// Floor for the adaptive damping. Below this, rank-deficient problems
// (redundant chains in position-only mode) amplify round-off in the
// null space.
const MIN_DAMPING: f64 = 1e-4;
const MAX_DAMPING: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkParams {
    pub damping: f64,
    pub max_iters: usize,
    /// meters
    pub pos_tol: f64,
    /// radians
    pub ori_tol: f64,
    /// Largest per-iteration joint change (rad or m).
    pub step_clip: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            damping: 0.05,
            max_iters: 100,
            pos_tol: 1e-6,
            ori_tol: 1e-6,
            step_clip: 0.2,
        }
    }
}

impl IkParams {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        let checks: [(&'static str, bool); 5] = [
            ("damping", self.damping > 0.0),
            ("max_iters", self.max_iters > 0),
            ("pos_tol", self.pos_tol > 0.0),
            ("ori_tol", self.ori_tol > 0.0),
            ("step_clip", self.step_clip > 0.0),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(KinematicsError::validation(field, "must be strictly positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q: JointVector,
    pub iterations: usize,
    pub position_residual: f64,
    pub orientation_residual: f64,
}

/// Full-pose IK: position and orientation of the end effector.
pub fn inverse_kinematics(
    chain: &ChainModel,
    target: &Pose,
    seed: &JointVector,
    params: &IkParams,
) -> Result<IkSolution, KinematicsError> {
    solve(chain, &target.position, Some(&target.orientation), seed, params)
}

/// Position-only IK; orientation is left free.
pub fn inverse_kinematics_position(
    chain: &ChainModel,
    target: &Vector3<f64>,
    seed: &JointVector,
    params: &IkParams,
) -> Result<IkSolution, KinematicsError> {
    solve(chain, target, None, seed, params)
}

struct Eval {
    error: DVector<f64>,
    jac: DMatrix<f64>,
    pos_res: f64,
    ori_res: f64,
}

impl Eval {
    fn cost(&self) -> f64 {
        self.error.norm_squared()
    }
}

fn evaluate(
    chain: &ChainModel,
    q: &JointVector,
    target_pos: &Vector3<f64>,
    target_ori: Option<&UnitQuaternion<f64>>,
) -> Result<Eval, KinematicsError> {
    let (frames, ee) = joint_frames(chain, q)?;
    let jac_full = jacobian_from_frames(&frames, &ee);
    let dp = target_pos - ee.translation.vector;
    match target_ori {
        Some(ori) => {
            let dr = orientation_error(ori, &ee.rotation);
            let mut error = DVector::zeros(6);
            error.fixed_rows_mut::<3>(0).copy_from(&dp);
            error.fixed_rows_mut::<3>(3).copy_from(&dr);
            Ok(Eval {
                error,
                jac: jac_full,
                pos_res: dp.norm(),
                ori_res: dr.norm(),
            })
        }
        None => Ok(Eval {
            error: DVector::from_column_slice(dp.as_slice()),
            jac: jac_full.rows(0, 3).into_owned(),
            pos_res: dp.norm(),
            ori_res: 0.0,
        }),
    }
}

fn solve(
    chain: &ChainModel,
    target_pos: &Vector3<f64>,
    target_ori: Option<&UnitQuaternion<f64>>,
    seed: &JointVector,
    params: &IkParams,
) -> Result<IkSolution, KinematicsError> {
    chain.check_dim(seed.len())?;
    let n = chain.dof();
    let mut q = chain.clamp(seed);
    let mut cur = evaluate(chain, &q, target_pos, target_ori)?;
    let mut lambda = params.damping;
    let converged = |e: &Eval| e.pos_res <= params.pos_tol && e.ori_res <= params.ori_tol;

    for iter in 0..params.max_iters {
        if converged(&cur) {
            return Ok(IkSolution {
                q,
                iterations: iter,
                position_residual: cur.pos_res,
                orientation_residual: cur.ori_res,
            });
        }
        let jt = cur.jac.transpose();
        let mut lhs = &jt * &cur.jac;
        for d in 0..n {
            lhs[(d, d)] += lambda * lambda;
        }
        let rhs = &jt * &cur.error;
        let Some(chol) = lhs.cholesky() else {
            lambda = (lambda * 4.0).min(MAX_DAMPING);
            continue;
        };
        let mut dq = chol.solve(&rhs);
        let largest = dq.amax();
        if largest > params.step_clip {
            dq *= params.step_clip / largest;
        }
        let candidate = chain.clamp(&JointVector::new(
            q.iter().zip(dq.iter()).map(|(a, b)| a + b).collect(),
        ));
        let next = evaluate(chain, &candidate, target_pos, target_ori)?;
        if next.cost() < cur.cost() {
            q = candidate;
            cur = next;
            lambda = (lambda * 0.5).max(MIN_DAMPING);
        } else {
            lambda = (lambda * 4.0).min(MAX_DAMPING);
        }
    }

    if converged(&cur) {
        return Ok(IkSolution {
            q,
            iterations: params.max_iters,
            position_residual: cur.pos_res,
            orientation_residual: cur.ori_res,
        });
    }
    Err(KinematicsError::Unreachable {
        best: q,
        position_residual: cur.pos_res,
        orientation_residual: cur.ori_res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{fixtures, forward_kinematics};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_params_are_valid() {
        IkParams::default().validate().unwrap();
        let bad = IkParams {
            step_clip: 0.0,
            ..IkParams::default()
        };
        assert_eq!(bad.validate().unwrap_err().field(), Some("step_clip"));
    }

    #[test]
    fn seed_at_target_returns_immediately() {
        let chain = fixtures::spatial6();
        let seed = JointVector::from(&[0.2, 0.3, 0.9, -0.4, 0.6, 0.1][..]);
        let target = forward_kinematics(&chain, &seed).unwrap();
        let sol = inverse_kinematics(&chain, &target, &seed, &IkParams::default()).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.q, seed);
    }

    #[test]
    fn outside_reach_is_unreachable() {
        let chain = fixtures::planar2();
        let target = Vector3::new(0.6, 0.0, 0.0);
        let seed = JointVector::from(&[0.1, 0.2][..]);
        match inverse_kinematics_position(&chain, &target, &seed, &IkParams::default()) {
            Err(KinematicsError::Unreachable {
                best,
                position_residual,
                ..
            }) => {
                assert!(position_residual > 0.09);
                assert!(chain.within_limits(&best, 1e-9));
            }
            other => panic!("expected Unreachable, got {other:?}"),
        }
    }

    #[test]
    fn planar2_round_trip_from_perturbed_seed() {
        let chain = fixtures::planar2();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q_star = JointVector::new(
                chain
                    .joints
                    .iter()
                    .map(|j| rng.random_range(j.limits.0 + 0.1..j.limits.1 - 0.1))
                    .collect(),
            );
            let target = forward_kinematics(&chain, &q_star).unwrap();
            let seed = JointVector::new(q_star.iter().map(|v| v + 0.1).collect());
            let sol = inverse_kinematics(&chain, &target, &seed, &IkParams::default()).unwrap();
            let reached = forward_kinematics(&chain, &sol.q).unwrap();
            assert!((reached.position - target.position).norm() < 1e-6);
        }
    }

    #[test]
    fn redundant_position_only_stays_in_limits() {
        let chain = fixtures::scara4();
        let seed = JointVector::from(&[0.5, -1.0, 0.5, 0.05][..]);
        let target = Vector3::new(0.35, -0.1, 0.12);
        let sol = inverse_kinematics_position(&chain, &target, &seed, &IkParams::default()).unwrap();
        assert!(chain.within_limits(&sol.q, 1e-9));
        let reached = forward_kinematics(&chain, &sol.q).unwrap();
        assert!((reached.position - target).norm() < 1e-6);
    }

    #[test]
    fn limits_clamp_output() {
        let chain = fixtures::scara4();
        // Height above the lift range: solver must stay clamped at the top.
        let seed = JointVector::from(&[0.5, -1.0, 0.5, 0.2][..]);
        let target = Vector3::new(0.35, -0.1, 0.4);
        let err = inverse_kinematics_position(&chain, &target, &seed, &IkParams::default()).unwrap_err();
        let KinematicsError::Unreachable { best, .. } = err else {
            panic!("expected Unreachable")
        };
        assert!(chain.within_limits(&best, 1e-9));
        assert!((best[3] - 0.25).abs() < 1e-12);
    }
}

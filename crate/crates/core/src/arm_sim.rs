//! Per-joint decoupled arm dynamics driven by a PD controller with optional
//! gravity and friction compensation.
//!
//! The plant integrates `I qdd = tau - tau_g(q) + tau_f(qdot)` per joint with
//! semi-implicit Euler, where `tau_g = dU/dq` is the torque needed to hold the
//! links against gravity and `tau_f` is the (dissipative) friction acting on
//! the joint. Compensation adds `tau_g` and `-tau_f` from a model that may be
//! scaled away from the plant to emulate identification error.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{joint_frames, ChainModel, JointKind, JointVector, KinematicsError};

/// Largest integration step accepted by [`step`].
pub const MAX_DT: f64 = 0.05;
/// Control tick of the simulated loop (500 Hz).
pub const DEFAULT_DT: f64 = 0.002;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("dimension mismatch in `{what}`: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("time step {0} outside (0, {MAX_DT}]")]
    InvalidStep(f64),
    #[error("invalid `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("non-finite state at t={t}: q={q:?} qdot={qdot:?}")]
    NonFiniteState { t: f64, q: Vec<f64>, qdot: Vec<f64> },
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), SimError> {
    if expected != got {
        return Err(SimError::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: JointVector,
    pub qdot: Vec<f64>,
    /// seconds, monotonic
    pub t: f64,
}

impl ArmState {
    pub fn at_rest(q: JointVector) -> Self {
        let n = q.len();
        Self {
            q,
            qdot: vec![0.0; n],
            t: 0.0,
        }
    }

    pub fn kinetic_energy(&self, inertia: &[f64]) -> f64 {
        self.qdot
            .iter()
            .zip(inertia)
            .map(|(v, m)| 0.5 * m * v * v)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
}

impl PdGains {
    pub fn uniform(n: usize, kp: f64, kd: f64) -> Self {
        Self {
            kp: vec![kp; n],
            kd: vec![kd; n],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        check_len("kd", self.kp.len(), self.kd.len())?;
        if self.kp.iter().chain(&self.kd).any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(SimError::InvalidParams {
                field: "gains",
                reason: "gains must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    /// Effective per-joint inertia (kg m^2, or kg for prismatic joints).
    pub inertia: Vec<f64>,
    pub viscous_b: Vec<f64>,
    pub coulomb_c: Vec<f64>,
    /// Gravity acceleration in the chain's base frame.
    pub gravity: [f64; 3],
    pub link_masses: Vec<f64>,
    /// Distance of each link's center of mass from its joint, measured
    /// toward the next joint (or the end effector for the last link).
    pub link_com_offsets: Vec<f64>,
}

impl DynamicsParams {
    /// Desk-scale defaults: half the link length for the COM, light links.
    pub fn default_for(chain: &ChainModel) -> Self {
        let n = chain.dof();
        let mut com = Vec::with_capacity(n);
        let mut mass = Vec::with_capacity(n);
        for i in 0..n {
            let len = chain.link_vector(i).norm();
            com.push(0.5 * len);
            mass.push(if chain.joints[i].kind == JointKind::Prismatic { 0.3 } else { 0.4 });
        }
        Self {
            inertia: vec![0.05; n],
            viscous_b: vec![0.05; n],
            coulomb_c: vec![0.02; n],
            gravity: [0.0, 0.0, -9.81],
            link_masses: mass,
            link_com_offsets: com,
        }
    }

    pub fn dof(&self) -> usize {
        self.inertia.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.dof();
        check_len("viscous_b", n, self.viscous_b.len())?;
        check_len("coulomb_c", n, self.coulomb_c.len())?;
        check_len("link_masses", n, self.link_masses.len())?;
        check_len("link_com_offsets", n, self.link_com_offsets.len())?;
        if self.inertia.iter().any(|m| !(*m > 0.0)) {
            return Err(SimError::InvalidParams {
                field: "inertia",
                reason: "entries must be > 0".into(),
            });
        }
        for (field, v) in [
            ("viscous_b", &self.viscous_b),
            ("coulomb_c", &self.coulomb_c),
            ("link_masses", &self.link_masses),
        ] {
            if v.iter().any(|x| !(*x >= 0.0)) {
                return Err(SimError::InvalidParams {
                    field,
                    reason: "entries must be >= 0".into(),
                });
            }
        }
        Ok(())
    }

    /// Potential energy `U(q) = -sum_i m_i g . p_ci(q)`.
    pub fn potential_energy(&self, chain: &ChainModel, q: &JointVector) -> Result<f64, SimError> {
        let g = Vector3::from(self.gravity);
        Ok(com_positions(chain, self, q)?
            .iter()
            .zip(&self.link_masses)
            .map(|(p, m)| -m * g.dot(p))
            .sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensationConfig {
    pub gravity_comp_on: bool,
    pub friction_comp_on: bool,
    /// Scale applied to the compensation model relative to the plant; 1.0 is
    /// exact compensation.
    #[serde(default = "one")]
    pub model_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl CompensationConfig {
    pub fn full() -> Self {
        Self {
            gravity_comp_on: true,
            friction_comp_on: true,
            model_scale: 1.0,
        }
    }

    pub fn none() -> Self {
        Self {
            gravity_comp_on: false,
            friction_comp_on: false,
            model_scale: 1.0,
        }
    }
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// `tau_i = kp_i (q_cmd_i - q_i) - kd_i qdot_i`
pub fn pd_torque(gains: &PdGains, q_cmd: &JointVector, state: &ArmState) -> Result<Vec<f64>, SimError> {
    let n = state.q.len();
    check_len("kp", n, gains.kp.len())?;
    check_len("kd", n, gains.kd.len())?;
    check_len("q_cmd", n, q_cmd.len())?;
    check_len("qdot", n, state.qdot.len())?;
    Ok((0..n)
        .map(|i| gains.kp[i] * (q_cmd[i] - state.q[i]) - gains.kd[i] * state.qdot[i])
        .collect())
}

fn com_positions(chain: &ChainModel, params: &DynamicsParams, q: &JointVector) -> Result<Vec<Vector3<f64>>, SimError> {
    check_len("dynamics", chain.dof(), params.dof())?;
    let (frames, _) = joint_frames(chain, q)?;
    Ok(frames
        .iter()
        .enumerate()
        .map(|(i, jf)| {
            let link = chain.link_vector(i);
            let local = if link.norm() > 0.0 {
                link.normalize() * params.link_com_offsets[i]
            } else {
                Vector3::zeros()
            };
            jf.frame * nalgebra::Point3::from(local)
        })
        .map(|p| p.coords)
        .collect())
}

/// Joint torques that hold the arm static against gravity, `dU/dq`.
pub fn gravity_torque(chain: &ChainModel, params: &DynamicsParams, q: &JointVector) -> Result<Vec<f64>, SimError> {
    let n = chain.dof();
    let g = Vector3::from(params.gravity);
    if g == Vector3::zeros() {
        chain.check_dim(q.len())?;
        check_len("dynamics", n, params.dof())?;
        return Ok(vec![0.0; n]);
    }
    let coms = com_positions(chain, params, q)?;
    let (frames, _) = joint_frames(chain, q)?;
    let mut tau = vec![0.0; n];
    for (j, jf) in frames.iter().enumerate() {
        // Joint j moves every link i >= j.
        for i in j..n {
            let dp = match jf.kind {
                JointKind::Revolute => jf.axis.cross(&(coms[i] - jf.frame.translation.vector)),
                JointKind::Prismatic => jf.axis,
            };
            tau[j] -= params.link_masses[i] * g.dot(&dp);
        }
    }
    Ok(tau)
}

/// Friction acting on the joints: `-b qdot - c sign(qdot)` with `sign(0) = 0`.
pub fn friction_torque(params: &DynamicsParams, qdot: &[f64]) -> Result<Vec<f64>, SimError> {
    check_len("qdot", params.dof(), qdot.len())?;
    Ok(qdot
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let sign = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            -params.viscous_b[i] * v - params.coulomb_c[i] * sign
        })
        .collect())
}

/// One semi-implicit Euler step of the PD-controlled arm. `external` adds
/// torques from outside the controller (e.g. an operator's hand).
#[allow(clippy::too_many_arguments)]
pub fn step(
    chain: &ChainModel,
    params: &DynamicsParams,
    comp: &CompensationConfig,
    gains: &PdGains,
    q_cmd: &JointVector,
    state: &ArmState,
    dt: f64,
    external: Option<&[f64]>,
) -> Result<ArmState, SimError> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(SimError::InvalidStep(dt));
    }
    let n = chain.dof();
    chain.check_dim(state.q.len())?;
    let q_cmd = chain.clamp(q_cmd);
    let tau_pd = pd_torque(gains, &q_cmd, state)?;
    let tau_g = gravity_torque(chain, params, &state.q)?;
    let tau_f = friction_torque(params, &state.qdot)?;
    if let Some(ext) = external {
        check_len("external", n, ext.len())?;
    }

    let mut q = Vec::with_capacity(n);
    let mut qdot = Vec::with_capacity(n);
    for i in 0..n {
        let mut tau = tau_pd[i];
        if comp.gravity_comp_on {
            tau += comp.model_scale * tau_g[i];
        }
        if comp.friction_comp_on {
            tau -= comp.model_scale * tau_f[i];
        }
        if let Some(ext) = external {
            tau += ext[i];
        }
        let qdd = (tau - tau_g[i] + tau_f[i]) / params.inertia[i];
        let mut v = state.qdot[i] + dt * qdd;
        let mut p = state.q[i] + dt * v;
        let (lo, hi) = chain.joints[i].limits;
        if p < lo || p > hi {
            // hard stop
            p = p.clamp(lo, hi);
            v = 0.0;
        }
        q.push(p);
        qdot.push(v);
    }
    let t = state.t + dt;
    if q.iter().chain(&qdot).any(|v| !v.is_finite()) || !t.is_finite() {
        return Err(SimError::NonFiniteState { t, q, qdot });
    }
    Ok(ArmState {
        q: JointVector::new(q),
        qdot,
        t,
    })
}

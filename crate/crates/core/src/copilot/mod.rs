//! The bidirectional leader-follower bus.
//!
//! In teleop mode the leader's end-effector position is mapped into the task
//! workspace and solved onto the follower with IK. In policy mode the follower
//! executes policy commands while its observed pose is mapped back and solved
//! onto the leader, so the two arms stay aligned and switching modes does not
//! jump the follower command.

mod gains;
mod workspace;

pub use gains::{select_gains, ArmControl, GainSchedule};
pub use workspace::WorkspaceMap;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm_sim::{ArmState, SimError};
use crate::kinematics::{
    forward_kinematics, inverse_kinematics, inverse_kinematics_position, ChainModel, IkParams, JointVector,
    KinematicsError, Pose,
};

/// Default switch tolerance in follower end-effector space (m).
pub const DEFAULT_SWITCH_TOL: f64 = 0.005;

/// Per-tick decay of the handover offset after a switch to teleop.
pub const HANDOVER_DECAY: f64 = 0.995;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CopilotError {
    #[error("operation requires {expected:?} mode, bus is in {actual:?}")]
    WrongMode { expected: ControlMode, actual: ControlMode },
    #[error("switch rejected: sync error {sync_error:.4} m exceeds tolerance {tol:.4} m")]
    SwitchRejected { sync_error: f64, tol: f64 },
    #[error("invalid gain schedule: {0}")]
    InvalidGainSchedule(String),
    #[error("invalid workspace map: {0}")]
    InvalidWorkspaceMap(String),
    #[error("workspace map can only change while the session is idle")]
    IdleOnlyViolation,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlMode {
    Teleop,
    Policy,
}

/// Leader and follower chain models.
#[derive(Debug, Clone)]
pub struct ChainPair {
    pub leader: ChainModel,
    pub follower: ChainModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopilotState {
    pub mode: ControlMode,
    pub leader: ArmState,
    pub follower: ArmState,
    /// Operator wrist orientation; passed through to the follower target.
    pub leader_orientation_input: UnitQuaternion<f64>,
    pub last_follower_cmd: JointVector,
    pub last_leader_cmd: JointVector,
    /// Follower-space distance between the mapped leader command and the
    /// observed follower end effector (m).
    pub sync_error: f64,
    /// Follower-space offset added to the teleop target after a handover,
    /// decayed by [`HANDOVER_DECAY`] each teleop tick.
    #[serde(default)]
    pub handover_offset: Vector3<f64>,
    /// Set by an accepted policy-to-teleop switch until the next teleop tick.
    #[serde(default)]
    pub handover_pending: bool,
}

impl CopilotState {
    /// Both arms at rest, commands equal to the observed joints.
    pub fn new(mode: ControlMode, leader_q: JointVector, follower_q: JointVector) -> Self {
        Self {
            mode,
            last_leader_cmd: leader_q.clone(),
            last_follower_cmd: follower_q.clone(),
            leader: ArmState::at_rest(leader_q),
            follower: ArmState::at_rest(follower_q),
            leader_orientation_input: UnitQuaternion::identity(),
            sync_error: 0.0,
            handover_offset: Vector3::zeros(),
            handover_pending: false,
        }
    }
}

/// Commands produced by one bus tick.
#[derive(Debug, Clone, PartialEq)]
pub struct BusCommands {
    pub follower_cmd: JointVector,
    pub leader_cmd: JointVector,
    /// IK failed this tick and the previous command was held.
    pub hold: bool,
}

fn require(cs: &CopilotState, mode: ControlMode) -> Result<(), CopilotError> {
    if cs.mode != mode {
        return Err(CopilotError::WrongMode {
            expected: mode,
            actual: cs.mode,
        });
    }
    Ok(())
}

/// Follower target pose for the leader's current joint state.
pub fn teleop_target(cs: &CopilotState, chains: &ChainPair, wm: &WorkspaceMap) -> Result<Pose, CopilotError> {
    let x_l = forward_kinematics(&chains.leader, &cs.leader.q)?.position;
    Ok(Pose::new(wm.map_leader_to_follower(&x_l), cs.leader_orientation_input))
}

/// Follower command the teleop channel would issue for the current state,
/// without touching the bus state.
pub fn teleop_candidate(
    cs: &CopilotState,
    chains: &ChainPair,
    wm: &WorkspaceMap,
    ik: &IkParams,
) -> Result<(JointVector, bool), CopilotError> {
    let mut target = teleop_target(cs, chains, wm)?;
    target.position += handover_offset(cs, chains, &target)?;
    match inverse_kinematics(&chains.follower, &target, &cs.follower.q, ik) {
        Ok(sol) => Ok((sol.q, false)),
        Err(KinematicsError::Unreachable { .. }) => Ok((cs.last_follower_cmd.clone(), true)),
        Err(e) => Err(e.into()),
    }
}

fn handover_offset(cs: &CopilotState, chains: &ChainPair, target: &Pose) -> Result<Vector3<f64>, CopilotError> {
    if cs.handover_pending {
        let last = forward_kinematics(&chains.follower, &cs.last_follower_cmd)?.position;
        Ok(last - target.position)
    } else {
        Ok(cs.handover_offset)
    }
}

/// Teleop channel: leader FK, workspace map, follower IK seeded with the
/// follower's observed joints. The leader command holds the observed leader
/// joints because the operator's hand moves the leader.
pub fn teleop_tick(
    cs: &mut CopilotState,
    chains: &ChainPair,
    wm: &WorkspaceMap,
    ik: &IkParams,
) -> Result<BusCommands, CopilotError> {
    require(cs, ControlMode::Teleop)?;
    let (follower_cmd, hold) = teleop_candidate(cs, chains, wm, ik)?;
    if cs.handover_pending {
        let target = teleop_target(cs, chains, wm)?;
        cs.handover_offset = handover_offset(cs, chains, &target)?;
        cs.handover_pending = false;
    }
    cs.handover_offset *= HANDOVER_DECAY;
    let leader_cmd = cs.leader.q.clone();
    cs.last_follower_cmd = follower_cmd.clone();
    cs.last_leader_cmd = leader_cmd.clone();
    Ok(BusCommands {
        follower_cmd,
        leader_cmd,
        hold,
    })
}

/// Policy channel: forward the policy command to the follower and servo the
/// leader onto the follower's observed pose mapped into leader space
/// (position-only IK).
pub fn policy_sync_tick(
    cs: &mut CopilotState,
    chains: &ChainPair,
    wm: &WorkspaceMap,
    ik: &IkParams,
    policy_follower_cmd: &JointVector,
) -> Result<BusCommands, CopilotError> {
    require(cs, ControlMode::Policy)?;
    chains.follower.check_dim(policy_follower_cmd.len())?;
    let follower_cmd = chains.follower.clamp(policy_follower_cmd);
    let x_f = forward_kinematics(&chains.follower, &cs.follower.q)?.position;
    let leader_target = wm.map_follower_to_leader(&x_f);
    let (leader_cmd, hold, sync_error) =
        match inverse_kinematics_position(&chains.leader, &leader_target, &cs.leader.q, ik) {
            Ok(sol) => {
                let x_l = forward_kinematics(&chains.leader, &sol.q)?.position;
                let err = (wm.map_leader_to_follower(&x_l) - x_f).norm();
                (sol.q, false, err)
            }
            Err(KinematicsError::Unreachable { position_residual, .. }) => {
                (cs.last_leader_cmd.clone(), true, wm.alpha() * position_residual)
            }
            Err(e) => return Err(e.into()),
        };
    cs.sync_error = sync_error;
    cs.last_follower_cmd = follower_cmd.clone();
    cs.last_leader_cmd = leader_cmd.clone();
    Ok(BusCommands {
        follower_cmd,
        leader_cmd,
        hold,
    })
}

/// Switches the forwarded channel. Handing control to the operator requires
/// the arms to be synchronized within `tol`. The remaining gap between the
/// last policy command and the operator's target is blended out over the
/// first teleop ticks.
pub fn switch_mode(cs: &mut CopilotState, to: ControlMode, tol: f64) -> Result<(), CopilotError> {
    let handover = to == ControlMode::Teleop && cs.mode == ControlMode::Policy;
    if handover && !(cs.sync_error <= tol) {
        return Err(CopilotError::SwitchRejected {
            sync_error: cs.sync_error,
            tol,
        });
    }
    if to == ControlMode::Policy {
        cs.handover_offset = Vector3::zeros();
        cs.handover_pending = false;
    } else if handover {
        cs.handover_pending = true;
    }
    cs.mode = to;
    Ok(())
}

/// Distance between the mapped observed leader end effector and the observed
/// follower end effector (m, follower space).
pub fn alignment_error(cs: &CopilotState, chains: &ChainPair, wm: &WorkspaceMap) -> Result<f64, CopilotError> {
    let x_l = forward_kinematics(&chains.leader, &cs.leader.q)?.position;
    let x_f = forward_kinematics(&chains.follower, &cs.follower.q)?.position;
    Ok((wm.map_leader_to_follower(&x_l) - x_f).norm())
}

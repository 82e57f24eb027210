//! Closed-loop leader/follower session over a task world.
//!
//! One tick: the bus computes both arms' commands for the active mode, both
//! arm plants integrate one step, and the world moves the gripper to the new
//! follower end effector. Frames are captured from the state before the tick
//! together with the commands issued during it.

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

use crate::arm_sim::{self, DynamicsParams, SimError, DEFAULT_DT};
use crate::copilot::{
    self, select_gains, ArmControl, BusCommands, ChainPair, ControlMode, CopilotError, CopilotState, GainSchedule,
    WorkspaceMap, DEFAULT_SWITCH_TOL,
};
use crate::kinematics::{
    fixtures, forward_kinematics, inverse_kinematics, inverse_kinematics_position, IkParams, JointVector,
    KinematicsError, Pose,
};
use crate::policy::{Observation, PolicyError};
use crate::recorder::{Channel, Frame, RecorderError};
use crate::tasks::{self, goal_positions, StageStatus, TaskDescriptor, TaskError, WorldState};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Copilot(#[from] CopilotError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Recorder(#[from] RecorderError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid session setting `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
}

/// Arms, controllers and loop timing shared by every session of an experiment.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub chains: ChainPair,
    pub leader_dyn: DynamicsParams,
    pub follower_dyn: DynamicsParams,
    pub gains: GainSchedule,
    pub ik: IkParams,
    /// Control tick (s).
    pub dt: f64,
    /// Record one frame (and query the policy) every this many ticks.
    pub record_every: usize,
    pub switch_tol: f64,
    /// Leader joints at the centre of the leader workspace.
    pub leader_home: JointVector,
    /// IK seed for placing the follower.
    pub follower_seed: JointVector,
}

impl SessionConfig {
    /// 3-DoF leader driving the 4-DoF SCARA follower.
    pub fn desk_default() -> Self {
        let leader = fixtures::leader3();
        let follower = fixtures::scara4();
        Self {
            leader_dyn: DynamicsParams::default_for(&leader),
            follower_dyn: DynamicsParams::default_for(&follower),
            gains: GainSchedule::default_for(leader.dof(), follower.dof()),
            ik: IkParams::default(),
            dt: DEFAULT_DT,
            record_every: 10,
            switch_tol: DEFAULT_SWITCH_TOL,
            leader_home: JointVector::from(&[0.0, -std::f64::consts::FRAC_PI_3, 2.0 * std::f64::consts::FRAC_PI_3][..]),
            follower_seed: JointVector::from(&[-0.5, 1.2, -0.7, 0.1][..]),
            chains: ChainPair { leader, follower },
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        if !(self.dt > 0.0 && self.dt <= arm_sim::MAX_DT) {
            return Err(SessionError::Sim(SimError::InvalidStep(self.dt)));
        }
        if self.record_every == 0 {
            return Err(SessionError::Config {
                field: "record_every",
                reason: "must be at least 1".into(),
            });
        }
        self.chains.leader.check_dim(self.leader_home.len())?;
        self.chains.follower.check_dim(self.follower_seed.len())?;
        self.leader_dyn.validate()?;
        self.follower_dyn.validate()?;
        self.ik.validate()?;
        Ok(())
    }

    pub fn record_dt(&self) -> f64 {
        self.dt * self.record_every as f64
    }

    pub fn leader_center(&self) -> Result<Vector3<f64>, SessionError> {
        Ok(forward_kinematics(&self.chains.leader, &self.leader_home)?.position)
    }

    /// Map whose leader centre is the leader's home end effector.
    pub fn workspace_map(&self, alpha: f64, task_center: Vector3<f64>) -> Result<WorkspaceMap, SessionError> {
        Ok(WorkspaceMap::new(alpha, self.leader_center()?, task_center)?)
    }
}

/// Feature vector: follower joints, end-effector position and orientation
/// (quaternion with `w >= 0`), gripper aperture, each object's position
/// relative to the end effector and orientation, then each goal's position
/// relative to the end effector.
pub fn observe(q: &JointVector, ee: &Pose, ws: &WorldState, desc: &TaskDescriptor) -> Observation {
    let mut v = Vec::with_capacity(observation_dim(q.len(), desc));
    v.extend_from_slice(q.as_slice());
    v.extend_from_slice(ee.position.as_slice());
    push_quat(&mut v, &ee.orientation);
    v.push(ws.gripper.aperture);
    for o in &ws.objects {
        v.extend_from_slice((o.pose.position - ee.position).as_slice());
        push_quat(&mut v, &o.pose.orientation);
    }
    for g in goal_positions(ws, desc) {
        v.extend_from_slice((g - ee.position).as_slice());
    }
    Observation::new(v)
}

pub fn observation_dim(follower_dof: usize, desc: &TaskDescriptor) -> usize {
    follower_dof + 3 + 4 + 1 + 7 * desc.object_count() + 3 * desc.goal_count()
}

fn push_quat(v: &mut Vec<f64>, q: &UnitQuaternion<f64>) {
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    v.extend_from_slice(&[s * q.w, s * q.i, s * q.j, s * q.k]);
}

/// State captured at the start of a tick.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub mode: ControlMode,
    pub leader_q: JointVector,
    pub follower_q: JointVector,
    pub follower_ee: Pose,
    pub obs: Observation,
}

impl Snapshot {
    pub fn frame(self, cmds: &BusCommands, gripper: f64, inactive_follower_cmd: Option<JointVector>) -> Frame {
        Frame {
            t: self.t,
            mode: self.mode,
            active_channel: Channel::from(self.mode),
            leader_cmd_q: cmds.leader_cmd.clone(),
            leader_obs_q: self.leader_q,
            follower_cmd_q: cmds.follower_cmd.clone(),
            follower_obs_q: self.follower_q,
            follower_ee: self.follower_ee,
            gripper,
            obs: self.obs,
            inactive_follower_cmd,
        }
    }
}

pub struct Session<'a> {
    pub cfg: &'a SessionConfig,
    pub desc: &'a TaskDescriptor,
    pub wm: WorkspaceMap,
    pub bus: CopilotState,
    pub world: WorldState,
    pub gripper_cmd: f64,
    ee: Pose,
    ticks: u64,
    teleop_ctl: (ArmControl, ArmControl),
    policy_ctl: (ArmControl, ArmControl),
}

impl<'a> Session<'a> {
    /// Places the follower at the world's gripper pose and the leader at the
    /// mapped point, both at rest.
    pub fn new(
        cfg: &'a SessionConfig,
        desc: &'a TaskDescriptor,
        wm: WorkspaceMap,
        world: WorldState,
        mode: ControlMode,
    ) -> Result<Self, SessionError> {
        cfg.validate()?;
        let gripper_cmd = world.gripper.aperture;
        let mut s = Self {
            cfg,
            desc,
            wm,
            bus: CopilotState::new(mode, cfg.leader_home.clone(), cfg.follower_seed.clone()),
            ee: Pose::identity(),
            world,
            gripper_cmd,
            ticks: 0,
            teleop_ctl: select_gains(&cfg.gains, ControlMode::Teleop),
            policy_ctl: select_gains(&cfg.gains, ControlMode::Policy),
        };
        let target = s.world.gripper.pose.position;
        s.place_arms(&target)?;
        Ok(s)
    }

    /// Teleports both arms so that the follower end effector is at `x_f`.
    pub fn place_arms(&mut self, x_f: &Vector3<f64>) -> Result<(), SessionError> {
        let chains = &self.cfg.chains;
        let f = inverse_kinematics(
            &chains.follower,
            &Pose::new(*x_f, self.bus.leader_orientation_input),
            &self.cfg.follower_seed,
            &self.cfg.ik,
        )?;
        let x_l = self.wm.map_follower_to_leader(x_f);
        let l = inverse_kinematics_position(&chains.leader, &x_l, &self.cfg.leader_home, &self.cfg.ik)?;
        let t = self.world.t;
        let mode = self.bus.mode;
        self.bus = CopilotState::new(mode, l.q, f.q);
        self.bus.leader.t = t;
        self.bus.follower.t = t;
        self.ee = forward_kinematics(&chains.follower, &self.bus.follower.q)?;
        self.world.gripper.pose = self.ee;
        Ok(())
    }

    pub fn follower_ee(&self) -> &Pose {
        &self.ee
    }

    pub fn leader_ee(&self) -> Result<Pose, SessionError> {
        Ok(forward_kinematics(&self.cfg.chains.leader, &self.bus.leader.q)?)
    }

    pub fn t(&self) -> f64 {
        self.world.t
    }

    pub fn mode(&self) -> ControlMode {
        self.bus.mode
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn is_record_tick(&self) -> bool {
        self.ticks % self.cfg.record_every as u64 == 0
    }

    pub fn observe(&self) -> Observation {
        observe(&self.bus.follower.q, &self.ee, &self.world, self.desc)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            t: self.world.t,
            mode: self.bus.mode,
            leader_q: self.bus.leader.q.clone(),
            follower_q: self.bus.follower.q.clone(),
            follower_ee: self.ee,
            obs: self.observe(),
        }
    }

    pub fn status(&self) -> StageStatus {
        tasks::check_stage(&self.world, self.desc)
    }

    pub fn switch_mode(&mut self, to: ControlMode) -> Result<(), SessionError> {
        copilot::switch_mode(&mut self.bus, to, self.cfg.switch_tol)?;
        Ok(())
    }

    /// Teleop tick. `hand` is the operator's torque on the leader joints.
    pub fn step_teleop(&mut self, hand: &[f64], gripper: f64) -> Result<BusCommands, SessionError> {
        let cmds = copilot::teleop_tick(&mut self.bus, &self.cfg.chains, &self.wm, &self.cfg.ik)?;
        self.advance(&cmds, Some(hand), gripper)?;
        Ok(cmds)
    }

    /// Policy tick forwarding `follower_cmd` and servoing the leader.
    pub fn step_policy(&mut self, follower_cmd: &JointVector, gripper: f64) -> Result<BusCommands, SessionError> {
        let cmds = copilot::policy_sync_tick(&mut self.bus, &self.cfg.chains, &self.wm, &self.cfg.ik, follower_cmd)?;
        self.advance(&cmds, None, gripper)?;
        Ok(cmds)
    }

    fn advance(&mut self, cmds: &BusCommands, hand: Option<&[f64]>, gripper: f64) -> Result<(), SessionError> {
        let cfg = self.cfg;
        let (lc, fc) = match self.bus.mode {
            ControlMode::Teleop => &self.teleop_ctl,
            ControlMode::Policy => &self.policy_ctl,
        };
        self.bus.leader = arm_sim::step(
            &cfg.chains.leader,
            &cfg.leader_dyn,
            &lc.comp,
            &lc.gains,
            &cmds.leader_cmd,
            &self.bus.leader,
            cfg.dt,
            hand,
        )?;
        self.bus.follower = arm_sim::step(
            &cfg.chains.follower,
            &cfg.follower_dyn,
            &fc.comp,
            &fc.gains,
            &cmds.follower_cmd,
            &self.bus.follower,
            cfg.dt,
            None,
        )?;
        self.ee = forward_kinematics(&cfg.chains.follower, &self.bus.follower.q)?;
        self.gripper_cmd = gripper.clamp(0.0, 1.0);
        tasks::advance(&mut self.world, self.desc, &self.ee, self.gripper_cmd, cfg.dt);
        self.ticks += 1;
        Ok(())
    }

    /// Moves to the canonical stage-2 start: target object held cleanly at
    /// carry height, arms placed accordingly.
    pub fn reposition_for_stage2(&mut self) -> Result<(), SessionError> {
        self.world = tasks::reposition_for_stage2(&self.world, self.desc);
        let x = self.world.gripper.pose.position;
        self.place_arms(&x)?;
        self.gripper_cmd = 0.0;
        Ok(())
    }
}

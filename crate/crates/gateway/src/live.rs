//! Interactive session: one copilot session driven by operator messages.
//!
//! Commands are applied between ticks in the order they arrive. In teleop
//! mode the operator's `leader_target` is the point the hand pulls the leader
//! toward; in policy mode the loaded policy (or, without one, the last
//! follower command) drives the follower and the leader follows.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use copilot_core::copilot::{ControlMode, CopilotError, WorkspaceMap};
use copilot_core::expert::HandModel;
use copilot_core::hil::{PolicyRunner, TaskSetup};
use copilot_core::kinematics::JointVector;
use copilot_core::policy::BcPolicy;
use copilot_core::recorder::{Clip, ClipReason, ClipRecorder, RecorderError};
use copilot_core::session::{Session, SessionError};

use crate::protocol::{
    ArmView, ClipAction, EePose, FixtureView, HelloMsg, InboundMsg, ObjectView, RecordingView, StateMsg,
    SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Session(#[from] SessionError),
}

impl From<CopilotError> for CommandError {
    fn from(e: CopilotError) -> Self {
        CommandError::Session(e.into())
    }
}

impl From<RecorderError> for CommandError {
    fn from(e: RecorderError) -> Self {
        CommandError::Session(e.into())
    }
}

impl CommandError {
    /// Error code sent to the client.
    pub fn code(&self) -> &'static str {
        match self {
            CommandError::Session(SessionError::Copilot(CopilotError::IdleOnlyViolation)) => "idle_only_violation",
            CommandError::Session(SessionError::Copilot(CopilotError::SwitchRejected { .. })) => "switch_rejected",
            CommandError::Session(SessionError::Copilot(CopilotError::InvalidWorkspaceMap(_))) => "invalid_scale",
            CommandError::Session(SessionError::Recorder(_)) => "recorder",
            CommandError::Session(_) => "session",
        }
    }
}

pub struct Controller<'a> {
    setup: &'a TaskSetup,
    s: Session<'a>,
    policy: Option<&'a BcPolicy>,
    runner: Option<PolicyRunner<'a>>,
    hold: Option<(JointVector, f64)>,
    hand: HandModel,
    target: Vector3<f64>,
    gripper: f64,
    recorder: ClipRecorder,
    active: bool,
    seq: u64,
    label: String,
}

impl<'a> Controller<'a> {
    /// Opens the task world for `seed` in teleop mode with the leader at rest.
    pub fn new(setup: &'a TaskSetup, policy: Option<&'a BcPolicy>, seed: u64) -> Result<Self, SessionError> {
        let s = setup.open(seed, ControlMode::Teleop)?;
        let target = s.leader_ee()?.position;
        let gripper = s.gripper_cmd;
        Ok(Self {
            setup,
            s,
            policy,
            runner: None,
            hold: None,
            hand: HandModel::default(),
            target,
            gripper,
            recorder: ClipRecorder::new(),
            active: false,
            seq: 0,
            label: format!("live:seed={seed}"),
        })
    }

    pub fn session(&self) -> &Session<'a> {
        &self.s
    }

    pub fn mode(&self) -> ControlMode {
        self.s.mode()
    }

    /// No motion or mode command has been applied yet.
    pub fn is_idle(&self) -> bool {
        !self.active
    }

    pub fn clips(&self) -> &[Clip] {
        self.recorder.buffer()
    }

    pub fn hello(&self, stream_hz: f64) -> HelloMsg {
        let c = &self.setup.session.chains;
        HelloMsg {
            schema_version: SCHEMA_VERSION,
            chains: [c.leader.name.clone(), c.follower.name.clone()],
            task: self.setup.task_id().to_string(),
            alpha: self.s.wm.alpha(),
            stream_hz,
        }
    }

    pub fn apply(&mut self, msg: &InboundMsg) -> Result<(), CommandError> {
        if !matches!(msg, InboundMsg::SetScale { .. }) {
            self.active = true;
        }
        match msg {
            InboundMsg::SetMode { to } => self.set_mode(*to)?,
            InboundMsg::LeaderTarget { position, orientation } => {
                self.target = Vector3::from(*position);
                let [w, x, y, z] = *orientation;
                self.s.bus.leader_orientation_input = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
            }
            InboundMsg::Gripper { value } => self.gripper = *value,
            InboundMsg::Clip { action, reason } => match action {
                ClipAction::Begin => self.recorder.begin(
                    self.setup.task_id(),
                    reason.unwrap_or(ClipReason::Manual),
                    self.s.wm.alpha(),
                    self.s.mode(),
                    self.s.t(),
                    format!("{}:clip={}", self.label, self.recorder.buffer().len()),
                )?,
                ClipAction::End => {
                    self.recorder.end()?;
                }
            },
            InboundMsg::SetScale { alpha, c_l, c_t } => {
                if self.active {
                    return Err(CopilotError::IdleOnlyViolation.into());
                }
                let wm = WorkspaceMap::new(*alpha, Vector3::from(*c_l), Vector3::from(*c_t))?;
                let old = self.s.wm;
                self.s.wm = wm;
                let x_f = self.s.follower_ee().position;
                if let Err(e) = self.s.place_arms(&x_f) {
                    self.s.wm = old;
                    return Err(e.into());
                }
                self.target = self.s.leader_ee()?.position;
            }
        }
        Ok(())
    }

    fn set_mode(&mut self, to: ControlMode) -> Result<(), CommandError> {
        if to == self.s.mode() {
            return Ok(());
        }
        self.s.switch_mode(to)?;
        match to {
            ControlMode::Teleop => {
                self.runner = None;
                self.hold = None;
                self.target = self.s.leader_ee()?.position;
                self.gripper = self.s.gripper_cmd;
            }
            ControlMode::Policy => {
                // a clip only ever holds teleop frames
                if self.recorder.is_open() {
                    match self.recorder.end() {
                        Ok(_) | Err(RecorderError::EmptyClip) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
                self.runner = self.policy.map(|p| PolicyRunner::new(p));
                self.hold = Some((self.s.bus.last_follower_cmd.clone(), self.s.gripper_cmd));
            }
        }
        Ok(())
    }

    /// Advances one control tick.
    pub fn tick(&mut self) -> Result<(), SessionError> {
        let snap = (self.recorder.is_open() && self.s.is_record_tick()).then(|| self.s.snapshot());
        let cmds = match self.s.mode() {
            ControlMode::Teleop => {
                let chains = &self.setup.session.chains;
                let hand = self
                    .hand
                    .torque(&chains.leader, &self.setup.session.ik, &self.target, &self.s.bus.leader)?;
                self.s.step_teleop(&hand, self.gripper)?
            }
            ControlMode::Policy => match (&mut self.runner, &self.hold) {
                (Some(r), _) => r.tick(&mut self.s)?,
                (None, Some((q, g))) => self.s.step_policy(q, *g)?,
                (None, None) => unreachable!("policy mode always has a runner or a hold command"),
            },
        };
        if let Some(snap) = snap {
            self.recorder.append(snap.frame(&cmds, self.s.gripper_cmd, None))?;
        }
        Ok(())
    }

    /// Snapshot of the current tick; `seq` increases by one per call.
    pub fn state(&mut self) -> Result<StateMsg, SessionError> {
        self.seq += 1;
        let s = &self.s;
        let leader_ee = s.leader_ee()?;
        let wm = s.wm;
        Ok(StateMsg {
            seq: self.seq,
            t: s.t(),
            mode: s.mode(),
            leader: ArmView {
                q: s.bus.leader.q.as_slice().to_vec(),
                ee: EePose::from(&leader_ee),
            },
            follower: ArmView {
                q: s.bus.follower.q.as_slice().to_vec(),
                ee: EePose::from(s.follower_ee()),
            },
            objects: s
                .world
                .objects
                .iter()
                .map(|o| ObjectView {
                    id: o.id,
                    class: o.class,
                    pose: EePose::from(&o.pose),
                    attached: o.attached,
                })
                .collect(),
            fixtures: s
                .world
                .fixtures
                .iter()
                .map(|f| FixtureView {
                    id: f.id,
                    class: f.class,
                    pose: EePose::from(&f.pose),
                    extent: f.extent,
                })
                .collect(),
            gripper: s.world.gripper.aperture,
            sync_error: s.bus.sync_error,
            recording: RecordingView {
                clip_open: self.recorder.is_open(),
                clip_count: self.recorder.buffer().len(),
            },
            alpha: wm.alpha(),
            c_l: wm.leader_center().into(),
            c_t: wm.task_center().into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use copilot_core::config::ExperimentConfig;
    use copilot_core::recorder::Channel;

    fn setup() -> TaskSetup {
        ExperimentConfig::default().setup().unwrap()
    }

    #[test]
    fn commands_apply_in_order() {
        let su = setup();
        let mut c = Controller::new(&su, None, 3).unwrap();
        c.apply(&InboundMsg::SetMode { to: ControlMode::Policy }).unwrap();
        c.apply(&InboundMsg::SetMode { to: ControlMode::Teleop }).unwrap();
        assert_eq!(c.mode(), ControlMode::Teleop);
        c.tick().unwrap();
        let st = c.state().unwrap();
        assert_eq!(st.mode, ControlMode::Teleop);
        assert_eq!(st.seq, 1);
        assert_eq!(c.state().unwrap().seq, 2);
    }

    #[test]
    fn scale_only_while_idle() {
        let su = setup();
        let mut c = Controller::new(&su, None, 3).unwrap();
        let cl = c.session().wm.leader_center();
        let ct = c.session().wm.task_center();
        let scale = |a: f64| InboundMsg::SetScale {
            alpha: a,
            c_l: cl.into(),
            c_t: ct.into(),
        };
        c.apply(&scale(2.0)).unwrap();
        assert_eq!(c.session().wm.alpha(), 2.0);
        c.apply(&InboundMsg::Gripper { value: 1.0 }).unwrap();
        let e = c.apply(&scale(0.5)).unwrap_err();
        assert_eq!(e.code(), "idle_only_violation");
        assert_eq!(c.session().wm.alpha(), 2.0);
    }

    #[test]
    fn clip_holds_teleop_frames_only() {
        let su = setup();
        let mut c = Controller::new(&su, None, 3).unwrap();
        c.apply(&InboundMsg::SetMode { to: ControlMode::Policy }).unwrap();
        let begin = InboundMsg::Clip {
            action: ClipAction::Begin,
            reason: None,
        };
        assert_eq!(c.apply(&begin).unwrap_err().code(), "recorder");
        c.apply(&InboundMsg::SetMode { to: ControlMode::Teleop }).unwrap();
        c.apply(&begin).unwrap();
        for _ in 0..200 {
            c.tick().unwrap();
        }
        // switching to policy closes the clip
        c.apply(&InboundMsg::SetMode { to: ControlMode::Policy }).unwrap();
        for _ in 0..50 {
            c.tick().unwrap();
        }
        assert_eq!(c.clips().len(), 1);
        let clip = &c.clips()[0];
        assert_eq!(clip.frames.len(), 20);
        assert!(clip.frames.iter().all(|f| f.active_channel == Channel::Teleop));
        assert_eq!(clip.start_reason, ClipReason::Manual);
    }

    #[test]
    fn policy_hold_keeps_follower_still() {
        let su = setup();
        let mut c = Controller::new(&su, None, 3).unwrap();
        let x0 = c.session().follower_ee().position;
        c.apply(&InboundMsg::SetMode { to: ControlMode::Policy }).unwrap();
        for _ in 0..500 {
            c.tick().unwrap();
        }
        assert!((c.session().follower_ee().position - x0).norm() < 1e-3);
        assert!(c.state().unwrap().sync_error < 1e-3);
    }
}

//! Scripted operator for the teleop channel.
//!
//! The operator plans in the task (follower) workspace: a reference point
//! moves toward the current phase target at a bounded speed and is mapped
//! into leader space with band-limited hand tremor added. The hand pulls the
//! leader toward the IK solution of that point as a joint-space
//! spring-damper. Because the tremor lives in leader space, its effect on
//! the follower scales with the workspace gain.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arm_sim::ArmState;
use crate::kinematics::{inverse_kinematics_position, ChainModel, IkParams, KinematicsError};
use crate::session::{Session, SessionError};
use crate::tasks::{
    self, goal_positions, lateral, object_placed, pole_top_rest, TaskDescriptor, TaskKind, WorldEvent, WorldState,
};

/// Operator hand acting on the leader joints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandModel {
    pub stiffness: f64,
    pub damping: f64,
}

impl Default for HandModel {
    fn default() -> Self {
        Self {
            stiffness: 30.0,
            damping: 2.45,
        }
    }
}

impl HandModel {
    /// Torque pulling the leader toward the joints that put its end effector
    /// at `x_l`. Unreachable points pull toward the closest solution found.
    pub fn torque(
        &self,
        chain: &ChainModel,
        ik: &IkParams,
        x_l: &Vector3<f64>,
        state: &ArmState,
    ) -> Result<Vec<f64>, SessionError> {
        let q_t = match inverse_kinematics_position(chain, x_l, &state.q, ik) {
            Ok(sol) => sol.q,
            Err(KinematicsError::Unreachable { best, .. }) => best,
            Err(e) => return Err(e.into()),
        };
        Ok((0..state.q.len())
            .map(|i| self.stiffness * (q_t[i] - state.q[i]) - self.damping * state.qdot[i])
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    /// Stationary standard deviation of the hand tremor per leader axis (m).
    pub sigma: f64,
    /// Tremor correlation time (s).
    pub tremor_tau: f64,
    /// Reference speed in the task workspace (m/s).
    pub speed: f64,
    /// Lateral gripper-to-object error accepted before closing (m).
    pub grasp_tol: f64,
    /// Lateral disk-to-pole error accepted before inserting (m).
    pub insert_tol: f64,
    /// Longest wait for an alignment before going ahead anyway (s).
    pub settle_timeout: f64,
    /// How long the gripper command is held when opening or closing (s).
    pub gripper_hold: f64,
    pub hand: HandModel,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            sigma: 0.001,
            tremor_tau: 0.05,
            speed: 0.15,
            grasp_tol: 0.0025,
            insert_tol: 0.002,
            settle_timeout: 1.5,
            gripper_hold: 0.1,
            hand: HandModel::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Approach,
    Descend,
    Close,
    Reopen,
    Lift,
    Transport,
    Lower,
    Insert,
    SetDown,
    Release,
    Retreat,
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertAction {
    pub hand: Vec<f64>,
    pub gripper: f64,
}

/// Scripted stand-in for the human expert.
#[derive(Debug, Clone)]
pub struct ExpertDriver {
    pub cfg: ExpertConfig,
    rng: ChaCha8Rng,
    tremor: Vector3<f64>,
    reference: Option<Vector3<f64>>,
    phase: Phase,
    phase_t: f64,
    /// Time the reference has been sitting on the phase target.
    arrived_t: f64,
    object: usize,
    anchor: Vector3<f64>,
}

impl ExpertDriver {
    pub fn new(cfg: ExpertConfig, seed: u64) -> Self {
        Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tremor: Vector3::zeros(),
            reference: None,
            phase: Phase::Approach,
            phase_t: 0.0,
            arrived_t: 0.0,
            object: 0,
            anchor: Vector3::zeros(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn finished(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Current reference point in the task workspace.
    pub fn reference(&self) -> Option<Vector3<f64>> {
        self.reference
    }

    fn enter(&mut self, phase: Phase, ee: &Vector3<f64>) {
        self.phase = phase;
        self.phase_t = 0.0;
        self.arrived_t = 0.0;
        self.anchor = *ee;
    }

    /// Picks up wherever the world is: used at the start and when taking
    /// over from the policy.
    pub fn take_over(&mut self, s: &Session) {
        let ee = s.follower_ee().position;
        self.reference = Some(ee);
        let ws = &s.world;
        let desc = s.desc;
        self.object = next_object(ws, desc).unwrap_or(0);
        let phase = match (ws.gripper.held_object, &ws.gripper.grip) {
            _ if next_object(ws, desc).is_none() && ws.gripper.held_object.is_none() => Phase::Retreat,
            (Some(id), Some(g)) => {
                self.object = id;
                if !g.clean {
                    Phase::SetDown
                } else if ws.threaded {
                    Phase::Insert
                } else {
                    Phase::Lift
                }
            }
            _ if ws.gripper.is_closed() => Phase::Reopen,
            _ => Phase::Approach,
        };
        self.enter(phase, &ee);
    }

    /// Advances the tremor and the plan by one tick and returns the hand
    /// torque and gripper command.
    pub fn act(&mut self, s: &Session) -> Result<ExpertAction, SessionError> {
        if self.reference.is_none() {
            self.take_over(s);
        }
        let before = self.phase;
        let (target, gripper) = self.plan(s);
        let hand = self.track(s, &target, self.phase == before)?;
        Ok(ExpertAction { hand, gripper })
    }

    /// Moves the reference toward `target` at the configured speed and
    /// returns the hand torque for the tremor-perturbed reference.
    pub fn track(&mut self, s: &Session, target: &Vector3<f64>, count_arrival: bool) -> Result<Vec<f64>, SessionError> {
        let dt = s.cfg.dt;
        let r = self.reference.get_or_insert(s.follower_ee().position);
        let gap = target - *r;
        let max = self.cfg.speed * dt;
        if gap.norm() <= max {
            *r = *target;
            if count_arrival {
                self.arrived_t += dt;
            }
        } else {
            *r += gap * (max / gap.norm());
        }
        let x_l = s.wm.map_follower_to_leader(r);
        self.phase_t += dt;
        let x_l = x_l + self.step_tremor(dt);
        self.cfg.hand.torque(&s.cfg.chains.leader, &s.cfg.ik, &x_l, &s.bus.leader)
    }

    fn step_tremor(&mut self, dt: f64) -> Vector3<f64> {
        if self.cfg.sigma == 0.0 {
            return Vector3::zeros();
        }
        let a = (-dt / self.cfg.tremor_tau).exp();
        let b = self.cfg.sigma * (1.0 - a * a).sqrt();
        for i in 0..3 {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            self.tremor[i] = a * self.tremor[i] + b * n;
        }
        self.tremor
    }

    fn arrived(&self) -> bool {
        self.arrived_t > 0.0
    }

    fn plan(&mut self, s: &Session) -> (Vector3<f64>, f64) {
        let ws = &s.world;
        let desc = s.desc;
        let ee = s.follower_ee().position;
        let held = ws.gripper.held_object;
        let obj = ws.objects[self.object].pose.position;
        let carry = desc.heights.carry;
        let offset = if held.is_some() { obj - ee } else { Vector3::zeros() };
        let goal = goal_positions(ws, desc)[self.object];

        // dropped on the way
        if matches!(self.phase, Phase::Lift | Phase::Transport | Phase::Lower | Phase::Insert) && held.is_none() {
            self.enter(Phase::Reopen, &ee);
        }

        match self.phase {
            Phase::Approach => {
                let t = Vector3::new(obj.x, obj.y, carry.max(ee.z.min(carry)));
                if self.arrived() && (ee - t).norm() < 0.01 {
                    self.enter(Phase::Descend, &ee);
                }
                (t, 1.0)
            }
            Phase::Descend => {
                let t = Vector3::new(obj.x, obj.y, obj.z);
                let aligned = lateral(&ee, &obj) < self.cfg.grasp_tol && (ee.z - obj.z).abs() < 0.002;
                if self.arrived() && (aligned || self.arrived_t > self.cfg.settle_timeout) {
                    self.enter(Phase::Close, &ee);
                }
                (t, 1.0)
            }
            Phase::Close => {
                if self.phase_t >= self.cfg.gripper_hold {
                    let next = if held.is_some() { Phase::Lift } else { Phase::Reopen };
                    self.enter(next, &ee);
                }
                (self.anchor, 0.0)
            }
            Phase::Reopen => {
                if self.phase_t >= self.cfg.gripper_hold {
                    self.object = next_object(ws, desc).unwrap_or(self.object);
                    self.enter(Phase::Approach, &ee);
                }
                (Vector3::new(self.anchor.x, self.anchor.y, self.anchor.z + 0.01), 1.0)
            }
            Phase::Lift => {
                let t = Vector3::new(self.anchor.x, self.anchor.y, carry);
                if (ee.z - carry).abs() < 0.005 {
                    self.enter(Phase::Transport, &ee);
                }
                (t, 0.0)
            }
            Phase::Transport => {
                let t = Vector3::new(goal.x - offset.x, goal.y - offset.y, carry);
                if self.arrived() && lateral(&(ee + offset), &goal) < 0.005 {
                    self.enter(Phase::Lower, &ee);
                }
                (t, 0.0)
            }
            Phase::Lower => {
                let (z, tol) = match desc.kind {
                    TaskKind::PegInsert => (pole_top_rest(desc) + 0.008, self.cfg.insert_tol),
                    TaskKind::CubeSort => (desc.object_half_height() + 0.01, 0.01),
                };
                let t = Vector3::new(goal.x - offset.x, goal.y - offset.y, z - offset.z);
                let aligned = lateral(&obj, &goal) < tol;
                if self.arrived() && (aligned || self.arrived_t > self.cfg.settle_timeout) {
                    let next = if desc.kind == TaskKind::PegInsert { Phase::Insert } else { Phase::Release };
                    self.enter(next, &ee);
                }
                (t, 0.0)
            }
            Phase::Insert => {
                let seat = desc.object_half_height();
                // press past the seat so the fingers slide down the disk before letting go
                let t = Vector3::new(goal.x - offset.x, goal.y - offset.y, seat - offset.z - 0.006);
                let jammed = ws.events.contains(&WorldEvent::Jammed)
                    || (!ws.threaded && obj.z >= pole_top_rest(desc) - 1e-9 && ee.z + offset.z < obj.z - 0.004);
                if tasks::disk_inserted(ws, desc) && obj.z < seat + 0.001 {
                    self.enter(Phase::Release, &ee);
                } else if jammed || self.arrived_t > 0.5 {
                    self.enter(Phase::Lower, &ee);
                }
                (t, 0.0)
            }
            Phase::SetDown => {
                let rest = desc.object_half_height();
                let t = Vector3::new(self.anchor.x, self.anchor.y, rest - offset.z);
                if held.is_none() || (self.arrived() && (obj.z - rest).abs() < 0.003) {
                    self.enter(Phase::Reopen, &ee);
                }
                (t, 0.0)
            }
            Phase::Release => {
                if self.phase_t >= self.cfg.gripper_hold {
                    self.enter(Phase::Retreat, &ee);
                }
                (self.anchor, 1.0)
            }
            Phase::Retreat => {
                let t = Vector3::new(self.anchor.x, self.anchor.y, carry);
                if (ee.z - carry).abs() < 0.01 || self.phase_t > 2.0 {
                    match next_object(ws, desc) {
                        Some(id) => {
                            self.object = id;
                            self.enter(Phase::Approach, &ee);
                        }
                        None => self.enter(Phase::Done, &ee),
                    }
                }
                (t, 1.0)
            }
            Phase::Done => (self.anchor, 1.0),
        }
    }
}

/// First object not yet where it belongs.
fn next_object(ws: &WorldState, desc: &TaskDescriptor) -> Option<usize> {
    (0..ws.objects.len()).find(|&i| !object_placed(ws, desc, i))
}

/// Nominal follower path of the expert for a fresh world: over each object,
/// down to it, back up, over its goal and down to the place height.
pub fn nominal_path(ws: &WorldState, desc: &TaskDescriptor, start: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let carry = desc.heights.carry;
    let goals = goal_positions(ws, desc);
    let mut pts = vec![*start];
    for (o, g) in ws.objects.iter().zip(goals) {
        let p = o.pose.position;
        let place = match desc.kind {
            TaskKind::PegInsert => desc.peg.insert_plane - 0.015,
            TaskKind::CubeSort => desc.object_half_height() + 0.01,
        };
        pts.extend([
            Vector3::new(p.x, p.y, carry),
            p,
            Vector3::new(p.x, p.y, carry),
            Vector3::new(g.x, g.y, carry),
            Vector3::new(g.x, g.y, place),
            Vector3::new(g.x, g.y, carry),
        ]);
    }
    pts
}

/// Distance from `x` to a polyline.
pub fn path_distance(path: &[Vector3<f64>], x: &Vector3<f64>) -> f64 {
    if path.len() == 1 {
        return (x - path[0]).norm();
    }
    path.windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            let l2 = d.norm_squared();
            let t = if l2 > 0.0 { ((x - w[0]).dot(&d) / l2).clamp(0.0, 1.0) } else { 0.0 };
            (x - (w[0] + d * t)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

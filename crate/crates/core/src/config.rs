//! Experiment configuration document (JSON).
//!
//! Every field has a default, so `{}` is the desk setup: leader3 driving
//! scara4 on the peg insertion task.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm_sim::{DynamicsParams, DEFAULT_DT};
use crate::copilot::{ChainPair, GainSchedule, WorkspaceMap, DEFAULT_SWITCH_TOL};
use crate::expert::ExpertConfig;
use crate::hil::{HilConfig, TaskSetup};
use crate::kinematics::{fixtures, ChainDocument, ChainModel, IkParams, JointVector};
use crate::metrics::ScalingConfig;
use crate::policy::BcConfig;
use crate::session::{SessionConfig, SessionError};
use crate::tasks::{TaskDescriptor, TaskKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed configuration: {0}")]
    Parse(String),
    #[error("unknown chain fixture `{0}`")]
    UnknownChain(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// A shipped fixture by name, or an inline chain document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChainSpec {
    Named(String),
    Inline(ChainDocument),
}

impl ChainSpec {
    pub fn resolve(&self) -> Result<ChainModel, ConfigError> {
        match self {
            ChainSpec::Named(n) => fixtures::by_name(n).ok_or_else(|| ConfigError::UnknownChain(n.clone())),
            ChainSpec::Inline(doc) => ChainModel::try_from(doc.clone()).map_err(|e| ConfigError::Invalid(e.to_string())),
        }
    }
}

/// Explicit workspace map; by default the leader centre is the leader's home
/// end effector and the task centre is the task's home position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceSpec {
    pub c_l: [f64; 3],
    pub c_t: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub leader: ChainSpec,
    pub follower: ChainSpec,
    pub gains: Option<GainSchedule>,
    pub leader_dynamics: Option<DynamicsParams>,
    pub follower_dynamics: Option<DynamicsParams>,
    pub ik: IkParams,
    pub dt: f64,
    pub record_every: usize,
    pub switch_tol: f64,
    pub leader_home: Option<Vec<f64>>,
    pub follower_seed: Option<Vec<f64>>,
    pub task: TaskKind,
    /// Overrides the built-in descriptor for `task`.
    pub task_descriptor: Option<TaskDescriptor>,
    pub alpha: f64,
    pub workspace: Option<WorkspaceSpec>,
    pub expert: ExpertConfig,
    pub bc: BcConfig,
    /// Scripted demonstrations in the base dataset.
    pub demos: usize,
    pub hil: HilConfig,
    pub scaling: ScalingConfig,
    /// State stream rate of `serve` (Hz).
    pub stream_hz: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = SessionConfig::desk_default();
        Self {
            seed: 7,
            leader: ChainSpec::Named(s.chains.leader.name.clone()),
            follower: ChainSpec::Named(s.chains.follower.name.clone()),
            gains: None,
            leader_dynamics: None,
            follower_dynamics: None,
            ik: IkParams::default(),
            dt: DEFAULT_DT,
            record_every: s.record_every,
            switch_tol: DEFAULT_SWITCH_TOL,
            leader_home: None,
            follower_seed: None,
            task: TaskKind::PegInsert,
            task_descriptor: None,
            alpha: 1.0,
            workspace: None,
            expert: ExpertConfig::default(),
            bc: BcConfig::default(),
            demos: 20,
            hil: HilConfig::default(),
            scaling: ScalingConfig::default(),
            stream_hz: 30.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let c: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(ConfigError::Invalid("`alpha` must be positive".into()));
        }
        if !(self.stream_hz.is_finite() && (1.0..=1000.0).contains(&self.stream_hz)) {
            return Err(ConfigError::Invalid("`stream_hz` must lie in [1, 1000]".into()));
        }
        if self.demos == 0 {
            return Err(ConfigError::Invalid("`demos` must be at least 1".into()));
        }
        self.bc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.hil.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scaling.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.session()?;
        self.descriptor().validate().map_err(SessionError::from)?;
        Ok(())
    }

    pub fn session(&self) -> Result<SessionConfig, ConfigError> {
        let desk = SessionConfig::desk_default();
        let leader = self.leader.resolve()?;
        let follower = self.follower.resolve()?;
        let same_leader = leader == desk.chains.leader;
        let same_follower = follower == desk.chains.follower;
        let pick = |given: &Option<Vec<f64>>, fallback: &JointVector, same: bool, field: &str| {
            match (given, same) {
                (Some(v), _) => Ok(JointVector::from(v.as_slice())),
                (None, true) => Ok(fallback.clone()),
                (None, false) => Err(ConfigError::Invalid(format!("`{field}` is required for a custom chain"))),
            }
        };
        let cfg = SessionConfig {
            leader_dyn: self
                .leader_dynamics
                .clone()
                .unwrap_or_else(|| DynamicsParams::default_for(&leader)),
            follower_dyn: self
                .follower_dynamics
                .clone()
                .unwrap_or_else(|| DynamicsParams::default_for(&follower)),
            gains: self
                .gains
                .clone()
                .unwrap_or_else(|| GainSchedule::default_for(leader.dof(), follower.dof())),
            ik: self.ik,
            dt: self.dt,
            record_every: self.record_every,
            switch_tol: self.switch_tol,
            leader_home: pick(&self.leader_home, &desk.leader_home, same_leader, "leader_home")?,
            follower_seed: pick(&self.follower_seed, &desk.follower_seed, same_follower, "follower_seed")?,
            chains: ChainPair { leader, follower },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn descriptor(&self) -> TaskDescriptor {
        self.task_descriptor
            .clone()
            .unwrap_or_else(|| TaskDescriptor::for_kind(self.task))
    }

    pub fn setup(&self) -> Result<TaskSetup, ConfigError> {
        let session = self.session()?;
        let desc = self.descriptor();
        match self.workspace {
            None => Ok(TaskSetup::new(session, desc, self.alpha)?),
            Some(w) => {
                desc.validate().map_err(SessionError::from)?;
                let wm = WorkspaceMap::new(self.alpha, Vector3::from(w.c_l), Vector3::from(w.c_t))
                    .map_err(SessionError::from)?;
                Ok(TaskSetup { session, desc, wm })
            }
        }
    }
}

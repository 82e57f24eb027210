use serde::{Deserialize, Serialize};

use super::{ControlMode, CopilotError};
use crate::arm_sim::{CompensationConfig, PdGains};

/// PD gains and compensation flags per arm and per mode.
///
/// In policy mode the leader is position-servoed onto the follower's mapped
/// pose, so its gains must be higher than in teleop mode and its friction
/// compensation is off. Both rules are checked on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGainSchedule", into = "RawGainSchedule")]
pub struct GainSchedule {
    teleop_leader: PdGains,
    teleop_follower: PdGains,
    policy_leader: PdGains,
    policy_follower: PdGains,
    teleop_leader_friction_comp: bool,
}

#[derive(Serialize, Deserialize)]
struct RawGainSchedule {
    teleop_leader: PdGains,
    teleop_follower: PdGains,
    policy_leader: PdGains,
    policy_follower: PdGains,
    #[serde(default)]
    policy_leader_friction_comp: bool,
    #[serde(default = "yes")]
    teleop_leader_friction_comp: bool,
}

fn yes() -> bool {
    true
}

impl TryFrom<RawGainSchedule> for GainSchedule {
    type Error = CopilotError;
    fn try_from(raw: RawGainSchedule) -> Result<Self, Self::Error> {
        if raw.policy_leader_friction_comp {
            return Err(CopilotError::InvalidGainSchedule(
                "leader friction compensation must be disabled in policy mode".into(),
            ));
        }
        GainSchedule::new(
            raw.teleop_leader,
            raw.teleop_follower,
            raw.policy_leader,
            raw.policy_follower,
            raw.teleop_leader_friction_comp,
        )
    }
}

impl From<GainSchedule> for RawGainSchedule {
    fn from(gs: GainSchedule) -> Self {
        RawGainSchedule {
            teleop_leader: gs.teleop_leader,
            teleop_follower: gs.teleop_follower,
            policy_leader: gs.policy_leader,
            policy_follower: gs.policy_follower,
            policy_leader_friction_comp: false,
            teleop_leader_friction_comp: gs.teleop_leader_friction_comp,
        }
    }
}

/// Gains and compensation for one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmControl {
    pub gains: PdGains,
    pub comp: CompensationConfig,
}

impl GainSchedule {
    pub fn new(
        teleop_leader: PdGains,
        teleop_follower: PdGains,
        policy_leader: PdGains,
        policy_follower: PdGains,
        teleop_leader_friction_comp: bool,
    ) -> Result<Self, CopilotError> {
        for g in [&teleop_leader, &teleop_follower, &policy_leader, &policy_follower] {
            g.validate()
                .map_err(|e| CopilotError::InvalidGainSchedule(e.to_string()))?;
        }
        if teleop_leader.kp.len() != policy_leader.kp.len() {
            return Err(CopilotError::InvalidGainSchedule("leader gain vectors differ in length".into()));
        }
        if teleop_follower.kp.len() != policy_follower.kp.len() {
            return Err(CopilotError::InvalidGainSchedule("follower gain vectors differ in length".into()));
        }
        let pairs = || policy_leader.kp.iter().zip(&teleop_leader.kp);
        if pairs().any(|(p, t)| p < t) || !pairs().any(|(p, t)| p > t) {
            return Err(CopilotError::InvalidGainSchedule(
                "policy-mode leader kp must dominate teleop-mode kp, strictly in at least one joint".into(),
            ));
        }
        Ok(Self {
            teleop_leader,
            teleop_follower,
            policy_leader,
            policy_follower,
            teleop_leader_friction_comp,
        })
    }

    /// Desk-scale defaults for arms with the default dynamics.
    pub fn default_for(leader_dof: usize, follower_dof: usize) -> Self {
        Self::new(
            PdGains::uniform(leader_dof, 2.0, 0.4),
            PdGains::uniform(follower_dof, 60.0, 3.5),
            PdGains::uniform(leader_dof, 80.0, 4.0),
            PdGains::uniform(follower_dof, 80.0, 4.0),
            true,
        )
        .expect("default schedule satisfies its invariants")
    }

    pub fn teleop_leader(&self) -> &PdGains {
        &self.teleop_leader
    }
    pub fn policy_leader(&self) -> &PdGains {
        &self.policy_leader
    }
    pub fn teleop_follower(&self) -> &PdGains {
        &self.teleop_follower
    }
    pub fn policy_follower(&self) -> &PdGains {
        &self.policy_follower
    }
}

/// Leader and follower control settings for `mode`.
pub fn select_gains(gs: &GainSchedule, mode: ControlMode) -> (ArmControl, ArmControl) {
    match mode {
        ControlMode::Policy => (
            ArmControl {
                gains: gs.policy_leader.clone(),
                comp: CompensationConfig {
                    gravity_comp_on: true,
                    friction_comp_on: false,
                    model_scale: 1.0,
                },
            },
            ArmControl {
                gains: gs.policy_follower.clone(),
                comp: CompensationConfig::full(),
            },
        ),
        ControlMode::Teleop => (
            ArmControl {
                gains: gs.teleop_leader.clone(),
                comp: CompensationConfig {
                    gravity_comp_on: true,
                    friction_comp_on: gs.teleop_leader_friction_comp,
                    model_scale: 1.0,
                },
            },
            ArmControl {
                gains: gs.teleop_follower.clone(),
                comp: CompensationConfig::full(),
            },
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_mode_disables_leader_friction_comp() {
        let gs = GainSchedule::default_for(3, 4);
        let (leader, follower) = select_gains(&gs, ControlMode::Policy);
        assert!(!leader.comp.friction_comp_on);
        assert!(leader.comp.gravity_comp_on);
        assert_eq!(leader.gains, *gs.policy_leader());
        assert!(follower.comp.friction_comp_on);
    }

    #[test]
    fn teleop_mode_uses_lower_leader_gains() {
        let gs = GainSchedule::default_for(3, 4);
        let (leader, _) = select_gains(&gs, ControlMode::Teleop);
        assert_eq!(leader.gains, *gs.teleop_leader());
        assert!(leader.comp.friction_comp_on);
        assert!(leader.gains.kp.iter().zip(&gs.policy_leader().kp).all(|(t, p)| t < p));
    }

    #[test]
    fn rejects_weaker_policy_leader() {
        let err = GainSchedule::new(
            PdGains::uniform(2, 50.0, 1.0),
            PdGains::uniform(3, 10.0, 1.0),
            PdGains::uniform(2, 20.0, 1.0),
            PdGains::uniform(3, 10.0, 1.0),
            true,
        );
        assert!(matches!(err, Err(CopilotError::InvalidGainSchedule(_))));
        // equal everywhere is not an increase either
        let err = GainSchedule::new(
            PdGains::uniform(2, 20.0, 1.0),
            PdGains::uniform(3, 10.0, 1.0),
            PdGains::uniform(2, 20.0, 1.0),
            PdGains::uniform(3, 10.0, 1.0),
            true,
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_policy_leader_friction_comp_in_document() {
        let gs = GainSchedule::default_for(2, 2);
        let mut v = serde_json::to_value(&gs).unwrap();
        serde_json::from_value::<GainSchedule>(v.clone()).unwrap();
        v["policy_leader_friction_comp"] = serde_json::Value::Bool(true);
        assert!(serde_json::from_value::<GainSchedule>(v).is_err());
    }
}

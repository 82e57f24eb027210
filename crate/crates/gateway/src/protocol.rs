//! Wire messages of the `/session` endpoint. One JSON object per WebSocket
//! text message, discriminated by `type`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use copilot_core::copilot::ControlMode;
use copilot_core::recorder::ClipReason;
use copilot_core::kinematics::Pose;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("binary frames are not accepted")]
    Binary,
    #[error("field `{0}` must be finite")]
    NonFinite(&'static str),
    #[error("field `{field}` out of range: {reason}")]
    OutOfRange { field: &'static str, reason: &'static str },
}

impl ProtocolError {
    pub fn code(&self) -> &'static str {
        "malformed_message"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipAction {
    Begin,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InboundMsg {
    SetMode {
        to: ControlMode,
    },
    /// Leader end-effector target in leader space. `orientation` is a unit
    /// quaternion `[w, x, y, z]`.
    LeaderTarget {
        position: [f64; 3],
        #[serde(default = "identity_quat")]
        orientation: [f64; 4],
    },
    /// 1 open, 0 closed.
    Gripper {
        value: f64,
    },
    Clip {
        action: ClipAction,
        #[serde(default)]
        reason: Option<ClipReason>,
    },
    SetScale {
        alpha: f64,
        c_l: [f64; 3],
        c_t: [f64; 3],
    },
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn finite(field: &'static str, v: &[f64]) -> Result<(), ProtocolError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ProtocolError::NonFinite(field))
    }
}

impl InboundMsg {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let m: Self = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        match self {
            InboundMsg::SetMode { .. } => Ok(()),
            InboundMsg::LeaderTarget { position, orientation } => {
                finite("position", position)?;
                finite("orientation", orientation)?;
                let n = orientation.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-3 {
                    return Err(ProtocolError::OutOfRange {
                        field: "orientation",
                        reason: "quaternion must have unit norm",
                    });
                }
                Ok(())
            }
            InboundMsg::Gripper { value } => {
                finite("value", &[*value])?;
                if !(0.0..=1.0).contains(value) {
                    return Err(ProtocolError::OutOfRange {
                        field: "value",
                        reason: "gripper value lies in [0, 1]",
                    });
                }
                Ok(())
            }
            InboundMsg::Clip { .. } => Ok(()),
            InboundMsg::SetScale { alpha, c_l, c_t } => {
                finite("alpha", &[*alpha])?;
                finite("c_l", c_l)?;
                finite("c_t", c_t)?;
                if *alpha <= 0.0 {
                    return Err(ProtocolError::OutOfRange {
                        field: "alpha",
                        reason: "alpha must be positive",
                    });
                }
                Ok(())
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EePose {
    pub position: [f64; 3],
    /// `[w, x, y, z]`
    pub orientation: [f64; 4],
}

impl From<&Pose> for EePose {
    fn from(p: &Pose) -> Self {
        let q = p.orientation.quaternion();
        Self {
            position: p.position.into(),
            orientation: [q.w, q.i, q.j, q.k],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectView {
    pub id: usize,
    pub class: usize,
    pub pose: EePose,
    pub attached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureView {
    pub id: usize,
    pub class: usize,
    pub pose: EePose,
    pub extent: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmView {
    pub q: Vec<f64>,
    pub ee: EePose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordingView {
    pub clip_open: bool,
    /// Clips closed so far in this session.
    pub clip_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMsg {
    pub seq: u64,
    pub t: f64,
    pub mode: ControlMode,
    pub leader: ArmView,
    pub follower: ArmView,
    pub objects: Vec<ObjectView>,
    pub fixtures: Vec<FixtureView>,
    pub gripper: f64,
    pub sync_error: f64,
    pub recording: RecordingView,
    pub alpha: f64,
    pub c_l: [f64; 3],
    pub c_t: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloMsg {
    pub schema_version: u32,
    pub chains: [String; 2],
    pub task: String,
    pub alpha: f64,
    pub stream_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutboundMsg {
    Hello(HelloMsg),
    State(Box<StateMsg>),
    Error { code: String, message: String },
}

impl OutboundMsg {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        OutboundMsg::Error {
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }
}

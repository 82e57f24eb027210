use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::CopilotError;

/// Affine map between the leader's and the follower's Cartesian workspaces:
/// `x_f = alpha (x_l - c_l) + c_t`. Only positions are scaled; orientation
/// passes through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWorkspaceMap", into = "RawWorkspaceMap")]
pub struct WorkspaceMap {
    alpha: f64,
    c_l: Vector3<f64>,
    c_t: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawWorkspaceMap {
    alpha: f64,
    c_l: [f64; 3],
    c_t: [f64; 3],
}

impl TryFrom<RawWorkspaceMap> for WorkspaceMap {
    type Error = CopilotError;
    fn try_from(raw: RawWorkspaceMap) -> Result<Self, Self::Error> {
        WorkspaceMap::new(raw.alpha, Vector3::from(raw.c_l), Vector3::from(raw.c_t))
    }
}

impl From<WorkspaceMap> for RawWorkspaceMap {
    fn from(wm: WorkspaceMap) -> Self {
        RawWorkspaceMap {
            alpha: wm.alpha,
            c_l: wm.c_l.into(),
            c_t: wm.c_t.into(),
        }
    }
}

impl WorkspaceMap {
    pub fn new(alpha: f64, c_l: Vector3<f64>, c_t: Vector3<f64>) -> Result<Self, CopilotError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(CopilotError::InvalidWorkspaceMap(format!("alpha must be > 0, got {alpha}")));
        }
        if !c_l.iter().chain(c_t.iter()).all(|v| v.is_finite()) {
            return Err(CopilotError::InvalidWorkspaceMap("centers must be finite".into()));
        }
        Ok(Self { alpha, c_l, c_t })
    }

    pub fn identity() -> Self {
        Self {
            alpha: 1.0,
            c_l: Vector3::zeros(),
            c_t: Vector3::zeros(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn leader_center(&self) -> Vector3<f64> {
        self.c_l
    }

    pub fn task_center(&self) -> Vector3<f64> {
        self.c_t
    }

    pub fn map_leader_to_follower(&self, x_l: &Vector3<f64>) -> Vector3<f64> {
        self.alpha * (x_l - self.c_l) + self.c_t
    }

    pub fn map_follower_to_leader(&self, x_f: &Vector3<f64>) -> Vector3<f64> {
        (x_f - self.c_t) / self.alpha + self.c_l
    }
}

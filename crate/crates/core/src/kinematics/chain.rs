//! Kinematic chain model and its JSON document format.

use std::collections::HashSet;

use nalgebra::{Isometry3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{JointVector, KinematicsError, Pose};

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// One actuated joint: a fixed origin transform from the parent frame followed
/// by motion about (revolute) or along (prismatic) `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    pub axis: Unit<Vector3<f64>>,
    pub origin_translation: Vector3<f64>,
    pub origin_rotation: UnitQuaternion<f64>,
    /// Closed interval `[lo, hi]`, radians or meters depending on `kind`.
    pub limits: (f64, f64),
}

impl JointSpec {
    pub fn origin(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.origin_translation), self.origin_rotation)
    }

    /// Transform contributed by moving this joint to `value`.
    pub fn motion(&self, value: f64) -> Isometry3<f64> {
        match self.kind {
            JointKind::Revolute => Isometry3::from_parts(
                Translation3::identity(),
                UnitQuaternion::from_axis_angle(&self.axis, value),
            ),
            JointKind::Prismatic => Isometry3::from_parts(
                Translation3::from(self.axis.into_inner() * value),
                UnitQuaternion::identity(),
            ),
        }
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.limits.0, self.limits.1)
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.limits.0 + self.limits.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub ee_offset: Vector3<f64>,
    pub base_pose: Pose,
}

impl ChainModel {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn check_dim(&self, len: usize) -> Result<(), KinematicsError> {
        if len != self.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.dof(),
                got: len,
            });
        }
        Ok(())
    }

    /// Clamps every entry into the joint limits.
    pub fn clamp(&self, q: &JointVector) -> JointVector {
        JointVector::new(
            self.joints
                .iter()
                .zip(q.iter())
                .map(|(j, v)| j.clamp(*v))
                .collect(),
        )
    }

    pub fn within_limits(&self, q: &JointVector, eps: f64) -> bool {
        q.len() == self.dof()
            && self
                .joints
                .iter()
                .zip(q.iter())
                .all(|(j, v)| *v >= j.limits.0 - eps && *v <= j.limits.1 + eps)
    }

    /// Configuration at the middle of every joint range.
    pub fn mid_configuration(&self) -> JointVector {
        JointVector::new(self.joints.iter().map(JointSpec::mid).collect())
    }

    /// Position of joint `i + 1` (or the end effector for the last joint) in
    /// joint `i`'s moving frame. Used to place link centers of mass.
    pub fn link_vector(&self, i: usize) -> Vector3<f64> {
        match self.joints.get(i + 1) {
            Some(next) => next.origin_translation,
            None => self.ee_offset,
        }
    }

    pub fn to_document(&self) -> ChainDocument {
        ChainDocument {
            name: self.name.clone(),
            joints: self
                .joints
                .iter()
                .map(|j| {
                    let (r, p, y) = j.origin_rotation.euler_angles();
                    JointDocument {
                        name: j.name.clone(),
                        kind: j.kind,
                        axis: j.axis.into_inner().into(),
                        origin_xyz: j.origin_translation.into(),
                        origin_rpy: [r, p, y],
                        limits: [j.limits.0, j.limits.1],
                    }
                })
                .collect(),
            ee_offset_xyz: self.ee_offset.into(),
            base_xyz: self.base_pose.position.into(),
            base_rpy: {
                let (r, p, y) = self.base_pose.orientation.euler_angles();
                [r, p, y]
            },
        }
    }
}

/// On-disk representation of a chain (a much simplified URDF).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainDocument {
    pub name: String,
    pub joints: Vec<JointDocument>,
    pub ee_offset_xyz: [f64; 3],
    #[serde(default)]
    pub base_xyz: [f64; 3],
    #[serde(default)]
    pub base_rpy: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDocument {
    pub name: String,
    pub kind: JointKind,
    pub axis: [f64; 3],
    pub origin_xyz: [f64; 3],
    pub origin_rpy: [f64; 3],
    pub limits: [f64; 2],
}

impl TryFrom<ChainDocument> for ChainModel {
    type Error = KinematicsError;

    fn try_from(doc: ChainDocument) -> Result<Self, Self::Error> {
        if doc.joints.is_empty() {
            return Err(KinematicsError::validation("joints", "chain has no joints"));
        }
        let mut seen = HashSet::new();
        let mut joints = Vec::with_capacity(doc.joints.len());
        for jd in doc.joints {
            if !seen.insert(jd.name.clone()) {
                return Err(KinematicsError::validation(
                    "name",
                    format!("duplicate joint name `{}`", jd.name),
                ));
            }
            let all_finite = jd
                .axis
                .iter()
                .chain(&jd.origin_xyz)
                .chain(&jd.origin_rpy)
                .chain(&jd.limits)
                .all(|v| v.is_finite());
            if !all_finite {
                return Err(KinematicsError::validation(
                    "joints",
                    format!("joint `{}` has non-finite entries", jd.name),
                ));
            }
            let axis = Vector3::from(jd.axis);
            if (axis.norm() - 1.0).abs() > UNIT_TOL {
                return Err(KinematicsError::validation(
                    "axis",
                    format!("joint `{}` axis norm {} is not 1", jd.name, axis.norm()),
                ));
            }
            let [lo, hi] = jd.limits;
            if lo > hi {
                return Err(KinematicsError::validation(
                    "limits",
                    format!("joint `{}` has lo {lo} > hi {hi}", jd.name),
                ));
            }
            let [r, p, y] = jd.origin_rpy;
            joints.push(JointSpec {
                name: jd.name,
                kind: jd.kind,
                axis: Unit::new_unchecked(axis),
                origin_translation: Vector3::from(jd.origin_xyz),
                origin_rotation: UnitQuaternion::from_euler_angles(r, p, y),
                limits: (lo, hi),
            });
        }
        let [r, p, y] = doc.base_rpy;
        Ok(ChainModel {
            name: doc.name,
            joints,
            ee_offset: Vector3::from(doc.ee_offset_xyz),
            base_pose: Pose::new(
                Vector3::from(doc.base_xyz),
                UnitQuaternion::from_euler_angles(r, p, y),
            ),
        })
    }
}

/// Parses and validates a chain-model JSON document.
pub fn load_chain(text: &str) -> Result<ChainModel, KinematicsError> {
    let doc: ChainDocument =
        serde_json::from_str(text).map_err(|e| KinematicsError::Parse(e.to_string()))?;
    ChainModel::try_from(doc)
}

/// Chains shipped with the crate.
pub mod fixtures {
    use super::{load_chain, ChainModel};

    pub const PLANAR2: &str = include_str!("../../fixtures/planar2.json");
    pub const PLANAR3: &str = include_str!("../../fixtures/planar3.json");
    pub const SPATIAL6: &str = include_str!("../../fixtures/spatial6.json");
    pub const LEADER3: &str = include_str!("../../fixtures/leader3.json");
    pub const SCARA4: &str = include_str!("../../fixtures/scara4.json");

    pub const NAMES: [&str; 5] = ["planar2", "planar3", "spatial6", "leader3", "scara4"];

    pub fn by_name(name: &str) -> Option<ChainModel> {
        let text = match name {
            "planar2" => PLANAR2,
            "planar3" => PLANAR3,
            "spatial6" => SPATIAL6,
            "leader3" => LEADER3,
            "scara4" => SCARA4,
            _ => return None,
        };
        Some(load_chain(text).expect("shipped fixture is valid"))
    }

    pub fn planar2() -> ChainModel {
        by_name("planar2").unwrap()
    }
    pub fn planar3() -> ChainModel {
        by_name("planar3").unwrap()
    }
    pub fn spatial6() -> ChainModel {
        by_name("spatial6").unwrap()
    }
    pub fn leader3() -> ChainModel {
        by_name("leader3").unwrap()
    }
    pub fn scara4() -> ChainModel {
        by_name("scara4").unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc_with(axis: &str, limits: &str) -> String {
        format!(
            r#"{{"name":"t","joints":[{{"name":"j","kind":"revolute","axis":{axis},
            "origin_xyz":[0,0,0],"origin_rpy":[0,0,0],"limits":{limits}}}],"ee_offset_xyz":[1,0,0]}}"#
        )
    }

    #[test]
    fn planar2_fixture_loads() {
        let chain = fixtures::planar2();
        assert_eq!(chain.dof(), 2);
        assert_eq!(chain.joints[1].origin_translation, Vector3::new(0.3, 0.0, 0.0));
        assert_eq!(chain.ee_offset, Vector3::new(0.2, 0.0, 0.0));
    }

    #[test]
    fn all_fixtures_load() {
        for name in fixtures::NAMES {
            let chain = fixtures::by_name(name).unwrap();
            assert_eq!(chain.name, name);
        }
    }

    #[test]
    fn non_unit_axis_rejected() {
        let err = load_chain(&doc_with("[0,0,2]", "[-1,1]")).unwrap_err();
        assert_eq!(err.field(), Some("axis"));
    }

    #[test]
    fn inverted_limits_rejected() {
        let err = load_chain(&doc_with("[0,0,1]", "[1.0,-1.0]")).unwrap_err();
        assert_eq!(err.field(), Some("limits"));
    }

    #[test]
    fn empty_chain_rejected() {
        let err = load_chain(r#"{"name":"e","joints":[],"ee_offset_xyz":[0,0,0]}"#).unwrap_err();
        assert_eq!(err.field(), Some("joints"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let text = r#"{"name":"d","joints":[
            {"name":"a","kind":"revolute","axis":[0,0,1],"origin_xyz":[0,0,0],"origin_rpy":[0,0,0],"limits":[-1,1]},
            {"name":"a","kind":"revolute","axis":[0,0,1],"origin_xyz":[0,0,0],"origin_rpy":[0,0,0],"limits":[-1,1]}
        ],"ee_offset_xyz":[0,0,0]}"#;
        assert_eq!(load_chain(text).unwrap_err().field(), Some("name"));
    }

    #[test]
    fn malformed_document_is_parse_error() {
        assert!(matches!(load_chain("{not json"), Err(KinematicsError::Parse(_))));
        assert!(matches!(
            load_chain(r#"{"name":"x","joints":[{"name":"j","kind":"helical"}],"ee_offset_xyz":[0,0,0]}"#),
            Err(KinematicsError::Parse(_))
        ));
    }

    #[test]
    fn document_round_trip() {
        for name in fixtures::NAMES {
            let chain = fixtures::by_name(name).unwrap();
            let text = serde_json::to_string(&chain.to_document()).unwrap();
            let back = load_chain(&text).unwrap();
            assert_eq!(back.dof(), chain.dof());
            for (a, b) in back.joints.iter().zip(&chain.joints) {
                assert_eq!(a.name, b.name);
                assert!((a.origin_rotation.angle_to(&b.origin_rotation)).abs() < 1e-12);
            }
        }
    }
}

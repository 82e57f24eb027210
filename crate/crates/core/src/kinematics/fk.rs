use nalgebra::{DMatrix, Isometry3, Translation3, Vector3};

use super::{ChainModel, JointKind, JointVector, KinematicsError, Pose};

/// World-frame placement of one joint at a configuration.
#[derive(Debug, Clone, Copy)]
pub struct JointFrame {
    /// Joint frame after its origin transform and its own motion.
    pub frame: Isometry3<f64>,
    /// Joint axis expressed in the base frame.
    pub axis: Vector3<f64>,
    pub kind: JointKind,
}

/// Frames of every joint plus the end-effector transform.
pub fn joint_frames(
    chain: &ChainModel,
    q: &JointVector,
) -> Result<(Vec<JointFrame>, Isometry3<f64>), KinematicsError> {
    chain.check_dim(q.len())?;
    let mut t = chain.base_pose.to_isometry();
    let mut frames = Vec::with_capacity(chain.dof());
    for (joint, &value) in chain.joints.iter().zip(q.iter()) {
        t *= joint.origin();
        let axis = t.rotation * joint.axis.into_inner();
        t *= joint.motion(value);
        frames.push(JointFrame {
            frame: t,
            axis,
            kind: joint.kind,
        });
    }
    let ee = t * Translation3::from(chain.ee_offset);
    Ok((frames, ee))
}

pub fn forward_kinematics(chain: &ChainModel, q: &JointVector) -> Result<Pose, KinematicsError> {
    let (_, ee) = joint_frames(chain, q)?;
    Ok(Pose::from_isometry(&ee))
}

/// Geometric Jacobian, 6 x n. Rows 0..3 are linear velocity of the end
/// effector, rows 3..6 angular velocity, both in the base frame.
pub fn jacobian(chain: &ChainModel, q: &JointVector) -> Result<DMatrix<f64>, KinematicsError> {
    let (frames, ee) = joint_frames(chain, q)?;
    Ok(jacobian_from_frames(&frames, &ee))
}

pub(crate) fn jacobian_from_frames(frames: &[JointFrame], ee: &Isometry3<f64>) -> DMatrix<f64> {
    let p_ee = ee.translation.vector;
    let mut jac = DMatrix::zeros(6, frames.len());
    for (i, jf) in frames.iter().enumerate() {
        match jf.kind {
            JointKind::Revolute => {
                // Motion about the axis leaves the frame origin in place.
                let lin = jf.axis.cross(&(p_ee - jf.frame.translation.vector));
                jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
                jac.fixed_view_mut::<3, 1>(3, i).copy_from(&jf.axis);
            }
            JointKind::Prismatic => {
                jac.fixed_view_mut::<3, 1>(0, i).copy_from(&jf.axis);
            }
        }
    }
    jac
}

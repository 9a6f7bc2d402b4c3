use super::pose::PoseParameters;
use super::quaternion::Quaternion;
use super::skeleton::SkeletonDefinition;
use super::vec3::{self, Vec3};
use crate::error::{shape_err, Result};
use crate::scalar::Real;

/// Global joint positions of one frame.
///
/// The root sits at `root_translation`. Every other joint `j` with parent `p` is
/// placed at `pos[p] + G[p] * (bone_lengths[j] * rest_directions[j])`, where
/// `G[root] = R(root_orientation)` and `G[j] = G[p] * R(local_rotations[j])`.
/// Quaternions are used as given and should be unit-norm.
pub fn forward_kinematics<T: Real>(
    skeleton: &SkeletonDefinition<T>,
    params: &PoseParameters<T>,
) -> Result<Vec<Vec3<T>>> {
    params.check(skeleton)?;
    let n = skeleton.num_joints();
    let mut positions = vec![[T::zero(); 3]; n];
    let mut global = vec![Quaternion::identity(); n];
    positions[0] = params.root_translation;
    global[0] = params.root_orientation;
    for (j, p) in skeleton.bones() {
        let offset = vec3::scale(skeleton.rest_directions()[j], params.bone_lengths[j]);
        positions[j] = vec3::add(positions[p], global[p].rotate(offset));
        global[j] = global[p].hamilton(params.local_rotations[j - 1]);
    }
    Ok(positions)
}

/// Per-joint distance to the parent joint; 0 for the root.
pub fn extract_bone_lengths<T: Real>(
    positions: &[Vec3<T>],
    skeleton: &SkeletonDefinition<T>,
) -> Result<Vec<T>> {
    if positions.len() != skeleton.num_joints() {
        return Err(shape_err(
            "extract_bone_lengths",
            format!(
                "{} positions for a {}-joint skeleton",
                positions.len(),
                skeleton.num_joints()
            ),
        ));
    }
    let mut lengths = vec![T::zero(); positions.len()];
    for (j, p) in skeleton.bones() {
        lengths[j] = vec3::distance(positions[j], positions[p]);
    }
    Ok(lengths)
}

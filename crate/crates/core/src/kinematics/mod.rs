//! Skeleton representation, quaternion algebra, and forward kinematics.

mod fk;
mod pose;
mod quaternion;
mod skeleton;
pub mod vec3;

pub use fk::{extract_bone_lengths, forward_kinematics};
pub use pose::{PoseParameters, PoseSequence};
pub use quaternion::{compose_quaternions, rotate_by_quaternion, Quaternion};
pub use skeleton::SkeletonDefinition;
pub use vec3::Vec3;

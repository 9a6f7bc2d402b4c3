//! Pose sequence smoothing on the human kinematic manifold, with learned
//! per-joint uncertainty and a geometric human-arm to desktop-robot mapping.
//!
//! The geometry, filtering, corruption, and metric code is generic over the
//! scalar type ([`Real`], implemented for `f32` and `f64`). The autodiff
//! engine is generic as well; model training runs in `f64`.

pub mod baselines;
pub mod corruption;
pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod hpstm;
pub mod kinematics;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod retarget;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Quat = kinematics::Quaternion<f64>;
pub type Quat32 = kinematics::Quaternion<f32>;
pub type Skeleton = kinematics::SkeletonDefinition<f64>;
pub type Skeleton32 = kinematics::SkeletonDefinition<f32>;
pub type PoseSeq = kinematics::PoseSequence<f64>;
pub type PoseSeq32 = kinematics::PoseSequence<f32>;
pub type Params = kinematics::PoseParameters<f64>;
pub type Tensor64 = diffcore::Tensor<f64>;
pub type Graph64 = diffcore::Graph<f64>;

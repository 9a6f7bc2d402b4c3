//! Encoder-decoder attention smoother decoding through forward kinematics.
//!
//! A window of noisy joint positions is embedded frame by frame, encoded with
//! self-attention, and decoded by one learned query per output frame. The
//! decoder output is mapped to root translation, per-joint unit quaternions,
//! and positive bone lengths, and positions come from forward kinematics, so
//! every output frame is a valid skeleton pose. An optional second head emits
//! per-joint Cholesky factors of the position covariance.

mod cholesky;
mod config;
mod model;

pub use cholesky::{
    assemble_cholesky, covariance_from_factor, solve_lower, CovarianceFactors, CHOLESKY_DIAG_FLOOR,
};
pub use config::{Activation, ModelConfig};
pub use model::{
    fk_graph, model_forward, positional_encoding, window_centroid, GraphOutputs, HpstmModel,
    SmoothedWindow, BONE_LENGTH_FLOOR,
};

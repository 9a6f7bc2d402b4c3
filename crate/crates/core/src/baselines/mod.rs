//! Classical smoothers used for comparison and ahead of retargeting.

mod one_euro;
mod particle;
mod savgol;

pub use one_euro::{one_euro_smooth, one_euro_step, OneEuroParams, OneEuroState};
pub use particle::{particle_filter_smooth, ParticleFilter, ParticleFilterParams, ParticleReport};
pub use savgol::{savgol_coefficients, savgol_smooth, SavgolParams};

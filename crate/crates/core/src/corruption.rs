//! Stochastic perturbations of joint-position sequences and the named noise
//! profiles used for training and evaluation.
//!
//! Every function takes an explicit RNG. A zero magnitude skips sampling
//! entirely, so the output is bit-identical to the input.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kinematics::{vec3, PoseSequence, SkeletonDefinition};
use crate::scalar::Real;

const JITTER_RETRIES: usize = 16;
const MIN_BONE_SCALE: f64 = 0.01;

/// How `outlier_max_dev` is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutlierScale {
    /// meters
    #[default]
    Absolute,
    /// fraction of the sequence's bounding-box diagonal
    RangeFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseProfile {
    pub gaussian_sigma: f64,
    pub bone_jitter_rel: f64,
    pub temporal_sigma: f64,
    pub temporal_window: usize,
    pub outlier_prob: f64,
    pub outlier_max_dev: f64,
    #[serde(default)]
    pub outlier_scale: OutlierScale,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseProfile {
    pub fn zero() -> Self {
        Self {
            gaussian_sigma: 0.0,
            bone_jitter_rel: 0.0,
            temporal_sigma: 0.0,
            temporal_window: 1,
            outlier_prob: 0.0,
            outlier_max_dev: 0.0,
            outlier_scale: OutlierScale::Absolute,
            seed: 0,
        }
    }

    /// Training-time mixture: outlier size relative to the motion's extent.
    pub fn stage2() -> Self {
        Self {
            gaussian_sigma: 0.01,
            bone_jitter_rel: 0.03,
            temporal_sigma: 0.015,
            temporal_window: 7,
            outlier_prob: 0.005,
            outlier_max_dev: 0.25,
            outlier_scale: OutlierScale::RangeFraction,
            seed: 0,
        }
    }

    /// Evaluation mixture with absolute outlier size.
    pub fn eval_hard() -> Self {
        Self {
            gaussian_sigma: 0.03,
            bone_jitter_rel: 0.08,
            temporal_sigma: 0.03,
            temporal_window: 7,
            outlier_prob: 0.0025,
            outlier_max_dev: 0.25,
            outlier_scale: OutlierScale::Absolute,
            seed: 0,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "stage2" => Ok(Self::stage2()),
            "eval-hard" => Ok(Self::eval_hard()),
            "none" | "zero" => Ok(Self::zero()),
            other => Err(Error::Config(format!("unknown noise profile '{other}'"))),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mags = [
            self.gaussian_sigma,
            self.bone_jitter_rel,
            self.temporal_sigma,
            self.outlier_max_dev,
        ];
        if mags.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::Config("noise magnitudes must be finite and >= 0".into()));
        }
        if self.temporal_window == 0 || self.temporal_window % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal window must be odd and >= 1, got {}",
                self.temporal_window
            )));
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(Error::Config(format!(
                "outlier probability must lie in [0, 1], got {}",
                self.outlier_prob
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn corrupt_gaussian<T: Real>(seq: &PoseSequence<T>, sigma: f64, rng: &mut ChaCha8Rng) -> PoseSequence<T> {
    let mut out = seq.clone();
    if sigma == 0.0 {
        return out;
    }
    for v in out.as_mut_slice() {
        *v = *v + T::lit(sigma * normal(rng));
    }
    out
}

/// Multiplies every parent-to-child offset of frame `t`, joint `j` by `scales[t][j]`
/// and re-chains positions from the root, so descendants move with their ancestors.
pub fn scale_bones<T: Real>(
    seq: &PoseSequence<T>,
    skeleton: &SkeletonDefinition<T>,
    scales: &[Vec<T>],
) -> Result<PoseSequence<T>> {
    if seq.joints() != skeleton.num_joints() || scales.len() != seq.frames() {
        return Err(shape_err("scale_bones", "sequence, skeleton, and scales disagree"));
    }
    let mut out = seq.clone();
    for (t, s) in scales.iter().enumerate() {
        if s.len() != seq.joints() {
            return Err(shape_err("scale_bones", "one scale per joint required"));
        }
        for (j, p) in skeleton.bones() {
            let offset = vec3::sub(seq.get(t, j), seq.get(t, p));
            out.set(t, j, vec3::add(out.get(t, p), vec3::scale(offset, s[j])));
        }
    }
    Ok(out)
}

pub fn corrupt_bone_jitter<T: Real>(
    seq: &PoseSequence<T>,
    skeleton: &SkeletonDefinition<T>,
    rel_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PoseSequence<T>> {
    if seq.joints() != skeleton.num_joints() {
        return Err(shape_err("corrupt_bone_jitter", "sequence does not match skeleton"));
    }
    if rel_sigma == 0.0 {
        return Ok(seq.clone());
    }
    let scales: Vec<Vec<T>> = (0..seq.frames())
        .map(|_| {
            let mut s = vec![T::one(); seq.joints()];
            for (j, _) in skeleton.bones() {
                let mut scale = 1.0 + rel_sigma * normal(rng);
                let mut tries = 0;
                while scale <= 0.0 && tries < JITTER_RETRIES {
                    scale = 1.0 + rel_sigma * normal(rng);
                    tries += 1;
                }
                s[j] = T::lit(scale.max(MIN_BONE_SCALE));
            }
            s
        })
        .collect();
    scale_bones(seq, skeleton, &scales)
}

/// Centered moving average with truncated windows at the edges.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = x.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Smoothed noise track of length `frames` with population std exactly `sigma`.
pub fn filtered_noise_track(frames: usize, sigma: f64, window: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..frames).map(|_| normal(rng)).collect();
    let smooth = moving_average(&white, window);
    let mean = smooth.iter().sum::<f64>() / frames as f64;
    let var = smooth.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / frames as f64;
    if var <= 0.0 {
        return vec![0.0; frames];
    }
    let k = sigma / var.sqrt();
    smooth.into_iter().map(|v| v * k).collect()
}

pub fn corrupt_temporal_filtered<T: Real>(
    seq: &PoseSequence<T>,
    signal_sigma: f64,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PoseSequence<T>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!("temporal window must be odd, got {window}")));
    }
    let mut out = seq.clone();
    if signal_sigma == 0.0 {
        return Ok(out);
    }
    let (frames, width) = (seq.frames(), seq.joints() * 3);
    let data = out.as_mut_slice();
    for c in 0..width {
        let track = filtered_noise_track(frames, signal_sigma, window, rng);
        for (t, v) in track.into_iter().enumerate() {
            data[t * width + c] = data[t * width + c] + T::lit(v);
        }
    }
    Ok(out)
}

/// Displaces each joint-frame with probability `prob`; returns the selection mask
/// (frame-major, one entry per joint-frame) alongside the sequence.
pub fn corrupt_outliers_with_mask<T: Real>(
    seq: &PoseSequence<T>,
    prob: f64,
    max_dev: f64,
    rng: &mut ChaCha8Rng,
) -> (PoseSequence<T>, Vec<bool>) {
    let mut out = seq.clone();
    let n = seq.frames() * seq.joints();
    if prob == 0.0 {
        return (out, vec![false; n]);
    }
    let mut mask = vec![false; n];
    for (i, m) in mask.iter_mut().enumerate() {
        if rng.random::<f64>() >= prob {
            continue;
        }
        *m = true;
        let dir = loop {
            let d = [normal(rng), normal(rng), normal(rng)];
            let len = vec3::norm(d);
            if len > 1e-12 {
                break vec3::scale(d, 1.0 / len);
            }
        };
        let mag = if max_dev > 0.0 { rng.random_range(0.0..max_dev) } else { 0.0 };
        if mag == 0.0 {
            continue;
        }
        let (t, j) = (i / seq.joints(), i % seq.joints());
        let p = out.get(t, j);
        out.set(t, j, [0, 1, 2].map(|k| p[k] + T::lit(dir[k] * mag)));
    }
    (out, mask)
}

pub fn corrupt_outliers<T: Real>(seq: &PoseSequence<T>, prob: f64, max_dev: f64, rng: &mut ChaCha8Rng) -> PoseSequence<T> {
    corrupt_outliers_with_mask(seq, prob, max_dev, rng).0
}

/// Diagonal of the axis-aligned box containing every joint of every frame.
pub fn bounding_box_diagonal<T: Real>(seq: &PoseSequence<T>) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in seq.as_slice().chunks_exact(3) {
        for k in 0..3 {
            let v = p[k].to_f64_lossy();
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    if seq.as_slice().is_empty() {
        return 0.0;
    }
    vec3::norm(vec3::sub(hi, lo))
}

/// Applies bone jitter, temporal jitter, Gaussian noise, then outliers, drawing
/// from `rng`.
pub fn apply_profile_with_rng<T: Real>(
    seq: &PoseSequence<T>,
    skeleton: &SkeletonDefinition<T>,
    profile: &NoiseProfile,
    rng: &mut ChaCha8Rng,
) -> Result<PoseSequence<T>> {
    profile.validate()?;
    let max_dev = match profile.outlier_scale {
        OutlierScale::Absolute => profile.outlier_max_dev,
        OutlierScale::RangeFraction => profile.outlier_max_dev * bounding_box_diagonal(seq),
    };
    let s = corrupt_bone_jitter(seq, skeleton, profile.bone_jitter_rel, rng)?;
    let s = corrupt_temporal_filtered(&s, profile.temporal_sigma, profile.temporal_window, rng)?;
    let s = corrupt_gaussian(&s, profile.gaussian_sigma, rng);
    Ok(corrupt_outliers(&s, profile.outlier_prob, max_dev, rng))
}

/// [`apply_profile_with_rng`] seeded from `profile.seed`.
pub fn apply_profile<T: Real>(
    seq: &PoseSequence<T>,
    skeleton: &SkeletonDefinition<T>,
    profile: &NoiseProfile,
) -> Result<PoseSequence<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    apply_profile_with_rng(seq, skeleton, profile, &mut rng)
}

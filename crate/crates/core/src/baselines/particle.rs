use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{PoseSequence, Vec3};
use crate::scalar::Real;

const MIN_MEAS_SIGMA: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleFilterParams {
    pub particles: usize,
    /// velocity noise per frame, m/frame
    pub process_sigma: f64,
    /// observation noise, m
    pub meas_sigma: f64,
}

impl Default for ParticleFilterParams {
    fn default() -> Self {
        Self {
            particles: 500,
            process_sigma: 0.01,
            meas_sigma: 0.03,
        }
    }
}

impl ParticleFilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("particle filter needs at least one particle".into()));
        }
        if !(self.process_sigma >= 0.0 && self.meas_sigma >= 0.0) {
            return Err(Error::Config("particle filter sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

/// Diagnostics of a smoothing run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParticleReport {
    pub resamples: usize,
    /// times every weight vanished and the cloud was rebuilt around the observation
    pub reinitializations: usize,
}

/// Constant-velocity bootstrap filter for one 3-D point.
#[derive(Debug, Clone)]
pub struct ParticleFilter {
    params: ParticleFilterParams,
    positions: Vec<Vec3<f64>>,
    velocities: Vec<Vec3<f64>>,
    weights: Vec<f64>,
    report: ParticleReport,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl ParticleFilter {
    /// Every particle starts exactly at `position` with `velocity`.
    pub fn at_state(params: ParticleFilterParams, position: Vec3<f64>, velocity: Vec3<f64>) -> Result<Self> {
        params.validate()?;
        let n = params.particles;
        Ok(Self {
            params,
            positions: vec![position; n],
            velocities: vec![velocity; n],
            weights: vec![1.0 / n as f64; n],
            report: ParticleReport::default(),
        })
    }

    /// Particles spread around `observation` with the measurement noise, at rest.
    pub fn around_observation(
        params: ParticleFilterParams,
        observation: Vec3<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut f = Self::at_state(params, observation, [0.0; 3])?;
        f.scatter(observation, rng);
        Ok(f)
    }

    fn scatter(&mut self, center: Vec3<f64>, rng: &mut ChaCha8Rng) {
        let s = self.params.meas_sigma;
        for (p, v) in self.positions.iter_mut().zip(&mut self.velocities) {
            *p = center.map(|c| if s > 0.0 { c + s * normal(rng) } else { c });
            *v = [0.0; 3];
        }
        let n = self.weights.len() as f64;
        self.weights.iter_mut().for_each(|w| *w = 1.0 / n);
    }

    pub fn report(&self) -> ParticleReport {
        self.report
    }

    pub fn positions(&self) -> &[Vec3<f64>] {
        &self.positions
    }

    fn predict(&mut self, rng: &mut ChaCha8Rng) {
        let s = self.params.process_sigma;
        for (p, v) in self.positions.iter_mut().zip(&mut self.velocities) {
            if s > 0.0 {
                for k in 0..3 {
                    v[k] += s * normal(rng);
                }
            }
            for k in 0..3 {
                p[k] += v[k];
            }
        }
    }

    fn mean(&self) -> Vec3<f64> {
        let mut m = [0.0; 3];
        for (p, w) in self.positions.iter().zip(&self.weights) {
            for k in 0..3 {
                m[k] += w * p[k];
            }
        }
        m
    }

    fn resample(&mut self, rng: &mut ChaCha8Rng) {
        let n = self.weights.len();
        let step = 1.0 / n as f64;
        let mut u = rng.random::<f64>() * step;
        let mut cum = self.weights[0];
        let mut i = 0;
        let mut pos = Vec::with_capacity(n);
        let mut vel = Vec::with_capacity(n);
        for _ in 0..n {
            while u > cum && i + 1 < n {
                i += 1;
                cum += self.weights[i];
            }
            pos.push(self.positions[i]);
            vel.push(self.velocities[i]);
            u += step;
        }
        self.positions = pos;
        self.velocities = vel;
        self.weights.iter_mut().for_each(|w| *w = step);
        self.report.resamples += 1;
    }

    /// Propagates, weights by the observation, returns the posterior mean, and
    /// resamples when the effective sample size drops below half the particles.
    pub fn step(&mut self, observation: Vec3<f64>, rng: &mut ChaCha8Rng) -> Vec3<f64> {
        self.predict(rng);
        let sigma = self.params.meas_sigma.max(MIN_MEAS_SIGMA);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let log_w: Vec<f64> = self
            .positions
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| {
                let d2: f64 = (0..3).map(|k| (p[k] - observation[k]).powi(2)).sum();
                w.ln() - d2 * inv
            })
            .collect();
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        if max.is_finite() {
            for (w, lw) in self.weights.iter_mut().zip(&log_w) {
                *w = (lw - max).exp();
                total += *w;
            }
        }
        if !(total > 0.0 && total.is_finite()) {
            log::warn!("particle filter weights vanished; reinitializing around the observation");
            self.report.reinitializations += 1;
            self.scatter(observation, rng);
            return self.mean();
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
        let estimate = self.mean();
        let ess = 1.0 / self.weights.iter().map(|w| w * w).sum::<f64>();
        if ess < self.weights.len() as f64 / 2.0 {
            self.resample(rng);
        }
        estimate
    }
}

/// Runs an independent filter per joint, each started around the first observation.
pub fn particle_filter_smooth<T: Real>(
    seq: &PoseSequence<T>,
    params: ParticleFilterParams,
    rng: &mut ChaCha8Rng,
) -> Result<(PoseSequence<T>, ParticleReport)> {
    params.validate()?;
    let mut out = seq.clone();
    let mut report = ParticleReport::default();
    if seq.frames() == 0 {
        return Ok((out, report));
    }
    let to64 = |p: Vec3<T>| p.map(|v| v.to_f64_lossy());
    for j in 0..seq.joints() {
        let first = to64(seq.get(0, j));
        let mut f = ParticleFilter::around_observation(params, first, rng)?;
        for t in 0..seq.frames() {
            let est = f.step(to64(seq.get(t, j)), rng);
            out.set(t, j, est.map(T::lit));
        }
        report.resamples += f.report.resamples;
        report.reinitializations += f.report.reinitializations;
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn deterministic_limit_tracks_constant_velocity() {
        let params = ParticleFilterParams {
            particles: 16,
            process_sigma: 0.0,
            meas_sigma: 0.0,
        };
        let x0 = [0.1, -0.2, 0.3];
        let v = [0.01, 0.02, -0.005];
        let mut f = ParticleFilter::at_state(params, x0, v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..200 {
            let truth = [0, 1, 2].map(|k| x0[k] + v[k] * t as f64);
            let est = f.step(truth, &mut rng);
            for k in 0..3 {
                assert!((est[k] - truth[k]).abs() < 1e-9);
            }
        }
        assert_eq!(f.report().reinitializations, 0);
    }

    #[test]
    fn reduces_error_on_static_noisy_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = [0.5, 0.0, 1.0];
        let obs: Vec<Vec3<f64>> = (0..1000)
            .map(|_| truth.map(|c| c + 0.03 * normal(&mut rng)))
            .collect();
        let seq = PoseSequence::from_frames(&obs.iter().map(|o| vec![*o]).collect::<Vec<_>>()).unwrap();
        let params = ParticleFilterParams {
            particles: 200,
            process_sigma: 0.001,
            meas_sigma: 0.03,
        };
        let (out, _) = particle_filter_smooth(&seq, params, &mut rng).unwrap();
        let mse = |s: &PoseSequence<f64>| {
            (0..1000)
                .map(|t| (0..3).map(|k| (s.get(t, 0)[k] - truth[k]).powi(2)).sum::<f64>())
                .sum::<f64>()
                / 1000.0
        };
        assert!(mse(&out) < mse(&seq), "{} vs {}", mse(&out), mse(&seq));
    }

    #[test]
    fn estimate_stays_inside_particle_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ParticleFilterParams {
            particles: 300,
            process_sigma: 0.0,
            meas_sigma: 0.05,
        };
        for trial in 0..20 {
            // at rest and without process noise, prediction leaves the cloud unchanged
            let mut f = ParticleFilter::around_observation(params, [0.0; 3], &mut rng).unwrap();
            let (lo, hi) = f.positions().iter().fold(([f64::MAX; 3], [f64::MIN; 3]), |(lo, hi), p| {
                ([0, 1, 2].map(|k| lo[k].min(p[k])), [0, 1, 2].map(|k| hi[k].max(p[k])))
            });
            let obs = [0.02 * trial as f64, -0.3, 0.1];
            let est = f.step(obs, &mut rng);
            for k in 0..3 {
                assert!(est[k] >= lo[k] - 1e-12 && est[k] <= hi[k] + 1e-12);
            }
        }
    }

    #[test]
    fn rejects_empty_filter() {
        let p = ParticleFilterParams {
            particles: 0,
            ..Default::default()
        };
        assert!(ParticleFilter::at_state(p, [0.0; 3], [0.0; 3]).is_err());
    }
}

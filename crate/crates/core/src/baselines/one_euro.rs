use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{PoseSequence, Vec3};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneEuroParams {
    /// Hz
    pub min_cutoff: f64,
    pub beta: f64,
    /// Hz
    pub d_cutoff: f64,
}

impl Default for OneEuroParams {
    fn default() -> Self {
        Self {
            min_cutoff: 1.0,
            beta: 0.007,
            d_cutoff: 1.0,
        }
    }
}

/// Filter memory for one 3-D signal. Each axis is filtered independently.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OneEuroState {
    prev: Option<(f64, Vec3<f64>, Vec3<f64>)>,
}

impl OneEuroState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.prev.map(|p| p.0)
    }
}

fn alpha(cutoff: f64, dt: f64) -> f64 {
    let tau = 1.0 / (2.0 * std::f64::consts::PI * cutoff);
    1.0 / (1.0 + tau / dt)
}

/// One update at time `t` (seconds). The first sample passes through unchanged.
pub fn one_euro_step(
    state: &mut OneEuroState,
    sample: Vec3<f64>,
    t: f64,
    params: &OneEuroParams,
) -> Result<Vec3<f64>> {
    let Some((t_prev, x_prev, dx_prev)) = state.prev else {
        state.prev = Some((t, sample, [0.0; 3]));
        return Ok(sample);
    };
    if !(t > t_prev) {
        return Err(Error::NonIncreasingTimestamp { prev: t_prev, next: t });
    }
    let dt = t - t_prev;
    let a_d = alpha(params.d_cutoff, dt);
    let mut x = [0.0; 3];
    let mut dx = [0.0; 3];
    for k in 0..3 {
        let raw_dx = (sample[k] - x_prev[k]) / dt;
        dx[k] = a_d * raw_dx + (1.0 - a_d) * dx_prev[k];
        let cutoff = params.min_cutoff + params.beta * dx[k].abs();
        let a = alpha(cutoff, dt);
        x[k] = a * sample[k] + (1.0 - a) * x_prev[k];
    }
    state.prev = Some((t, x, dx));
    Ok(x)
}

/// Filters each joint of a sequence sampled at `fps`.
pub fn one_euro_smooth<T: Real>(seq: &PoseSequence<T>, fps: f64, params: &OneEuroParams) -> Result<PoseSequence<T>> {
    if !(fps > 0.0) {
        return Err(Error::Config(format!("frame rate must be positive, got {fps}")));
    }
    let mut out = seq.clone();
    for j in 0..seq.joints() {
        let mut st = OneEuroState::new();
        for t in 0..seq.frames() {
            let x = seq.get(t, j).map(|v| v.to_f64_lossy());
            let y = one_euro_step(&mut st, x, t as f64 / fps, params)?;
            out.set(t, j, y.map(T::lit));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_sample_passes_and_constant_converges() {
        let p = OneEuroParams::default();
        let c = [0.5, -0.5, 2.0];
        let mut s = OneEuroState::new();
        assert_eq!(one_euro_step(&mut s, c, 0.0, &p).unwrap(), c);
        let mut y = c;
        for i in 1..=100 {
            y = one_euro_step(&mut s, c, i as f64 / 30.0, &p).unwrap();
        }
        for (a, b) in y.iter().zip(c) {
            assert!((a - b).abs() < 1e-9);
        }
        // from a distant start the error decays geometrically
        let mut s = OneEuroState::new();
        one_euro_step(&mut s, [0.0; 3], 0.0, &p).unwrap();
        for i in 1..=300 {
            y = one_euro_step(&mut s, c, i as f64 / 30.0, &p).unwrap();
        }
        for (a, b) in y.iter().zip(c) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_increasing_time() {
        let p = OneEuroParams::default();
        let mut s = OneEuroState::new();
        one_euro_step(&mut s, [0.0; 3], 1.0, &p).unwrap();
        assert!(matches!(
            one_euro_step(&mut s, [0.0; 3], 1.0, &p),
            Err(Error::NonIncreasingTimestamp { .. })
        ));
    }

    fn rise_time(beta: f64) -> usize {
        let p = OneEuroParams { beta, ..Default::default() };
        let mut s = OneEuroState::new();
        one_euro_step(&mut s, [0.0; 3], 0.0, &p).unwrap();
        for i in 1..10_000 {
            let y = one_euro_step(&mut s, [1.0, 0.0, 0.0], i as f64 / 30.0, &p).unwrap();
            if y[0] >= 0.9 {
                return i;
            }
        }
        usize::MAX
    }

    #[test]
    fn rise_time_falls_as_beta_grows() {
        let r: Vec<usize> = [0.0, 0.01, 0.1].iter().map(|b| rise_time(*b)).collect();
        assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
    }

    #[test]
    fn matches_scalar_recursion_oracle() {
        let p = OneEuroParams { min_cutoff: 0.5, beta: 0.3, d_cutoff: 2.0 };
        let xs = [0.0, 0.3, 0.1, 0.8, 0.75, 0.2];
        let mut s = OneEuroState::new();
        let (mut xh, mut dxh) = (xs[0], 0.0);
        let dt = 0.05;
        one_euro_step(&mut s, [xs[0]; 3], 0.0, &p).unwrap();
        for (i, x) in xs.iter().enumerate().skip(1) {
            let r = |fc: f64| {
                let te = 1.0 / (2.0 * std::f64::consts::PI * fc);
                1.0 / (1.0 + te / dt)
            };
            let ad = r(p.d_cutoff);
            dxh = ad * (x - xh) / dt + (1.0 - ad) * dxh;
            let a = r(p.min_cutoff + p.beta * f64::abs(dxh));
            xh = a * x + (1.0 - a) * xh;
            let y = one_euro_step(&mut s, [*x; 3], i as f64 * dt, &p).unwrap();
            assert!((y[0] - xh).abs() < 1e-12);
        }
    }
}

use crate::error::{shape_err, Result};
use crate::scalar::Real;

/// Smallest admissible diagonal entry of a Cholesky factor.
pub const CHOLESKY_DIAG_FLOOR: f64 = 1e-6;

/// Per-frame, per-joint lower-triangular factors `L` with `Sigma = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceFactors<T> {
    frames: usize,
    joints: usize,
    factors: Vec<[[T; 3]; 3]>,
}

/// Builds one factor from six unconstrained values `(d0, d1, d2, l10, l20, l21)`:
/// the diagonal is `max(exp(d_k), 1e-6)`, the strict lower triangle is copied.
pub fn assemble_cholesky<T: Real>(raw: &[T; 6]) -> [[T; 3]; 3] {
    let floor = T::lit(CHOLESKY_DIAG_FLOOR);
    let d = |v: T| v.exp().max(floor);
    let z = T::zero();
    [
        [d(raw[0]), z, z],
        [raw[3], d(raw[1]), z],
        [raw[4], raw[5], d(raw[2])],
    ]
}

/// `L L^T`.
pub fn covariance_from_factor<T: Real>(l: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut s = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s[i][j] = (0..3).map(|k| l[i][k] * l[j][k]).sum();
        }
    }
    s
}

/// Solves `L y = e` by forward substitution.
pub fn solve_lower<T: Real>(l: &[[T; 3]; 3], e: [T; 3]) -> [T; 3] {
    let y0 = e[0] / l[0][0];
    let y1 = (e[1] - l[1][0] * y0) / l[1][1];
    let y2 = (e[2] - l[2][0] * y0 - l[2][1] * y1) / l[2][2];
    [y0, y1, y2]
}

impl<T: Real> CovarianceFactors<T> {
    pub fn new(frames: usize, joints: usize, factors: Vec<[[T; 3]; 3]>) -> Result<Self> {
        if factors.len() != frames * joints {
            return Err(shape_err(
                "CovarianceFactors",
                format!("{} factors for {frames}x{joints}", factors.len()),
            ));
        }
        Ok(Self {
            frames,
            joints,
            factors,
        })
    }

    /// Assembles factors from `frames * joints * 6` raw head outputs.
    pub fn from_raw(frames: usize, joints: usize, raw: &[T]) -> Result<Self> {
        if raw.len() != frames * joints * 6 {
            return Err(shape_err(
                "assemble_cholesky",
                format!("{} raw values for {frames}x{joints}x6", raw.len()),
            ));
        }
        let factors = raw
            .chunks_exact(6)
            .map(|c| assemble_cholesky(&[c[0], c[1], c[2], c[3], c[4], c[5]]))
            .collect();
        Self::new(frames, joints, factors)
    }

    pub fn identity(frames: usize, joints: usize) -> Self {
        let mut id = [[T::zero(); 3]; 3];
        for (i, row) in id.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Self {
            frames,
            joints,
            factors: vec![id; frames * joints],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn get(&self, frame: usize, joint: usize) -> &[[T; 3]; 3] {
        &self.factors[frame * self.joints + joint]
    }

    pub fn covariance(&self, frame: usize, joint: usize) -> [[T; 3]; 3] {
        covariance_from_factor(self.get(frame, joint))
    }

    /// `trace(L L^T)`, the squared Frobenius norm of `L`.
    pub fn trace(&self, frame: usize, joint: usize) -> T {
        self.get(frame, joint)
            .iter()
            .flat_map(|r| r.iter())
            .map(|v| *v * *v)
            .sum()
    }

    pub fn as_slice(&self) -> &[[[T; 3]; 3]] {
        &self.factors
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_give_identity() {
        let l = assemble_cholesky(&[0.0f64; 6]);
        assert_eq!(l, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(covariance_from_factor(&l), l);
    }

    #[test]
    fn log_diagonal_maps_to_diagonal() {
        let l = assemble_cholesky(&[2f64.ln(), 3f64.ln(), 4f64.ln(), 0.0, 0.0, 0.0]);
        for (k, want) in [2.0, 3.0, 4.0].iter().enumerate() {
            assert!((l[k][k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_is_floored() {
        let l = assemble_cholesky(&[-100.0f64, 0.0, 0.0, 0.5, 0.5, 0.5]);
        assert_eq!(l[0][0], CHOLESKY_DIAG_FLOOR);
    }

    #[test]
    fn forward_substitution_inverts() {
        let l = assemble_cholesky(&[0.2f64, -0.4, 0.1, 0.7, -1.2, 0.3]);
        let e = [0.3, -0.5, 0.9];
        let y = solve_lower(&l, e);
        for i in 0..3 {
            let back: f64 = (0..3).map(|k| l[i][k] * y[k]).sum();
            assert!((back - e[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn raw_length_checked() {
        assert!(CovarianceFactors::<f64>::from_raw(2, 2, &[0.0; 23]).is_err());
    }
}

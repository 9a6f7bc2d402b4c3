use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{PoseSequence, Vec3};

/// Weak-perspective camera estimate for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakPerspectiveCamera {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    /// row-major 3x3 intrinsics
    pub intrinsics: [[f64; 3]; 3],
}

impl Default for WeakPerspectiveCamera {
    fn default() -> Self {
        Self {
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
            intrinsics: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }
}

impl WeakPerspectiveCamera {
    pub fn intrinsics_inverse(&self) -> Result<Matrix3<f64>> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("camera scale must be positive, got {}", self.scale)));
        }
        let k = Matrix3::from_fn(|r, c| self.intrinsics[r][c]);
        k.try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Config("camera intrinsics are singular".into()))
    }
}

/// Lifts canonical joints into the camera frame. Each joint's shifted image
/// coordinates `(x + tx, y + ty, 1)` go through the inverse intrinsics, and the
/// first two components plus the canonical depth are divided by the scale.
pub fn unproject_weak_perspective(joints: &[Vec3<f64>], cam: &WeakPerspectiveCamera) -> Result<Vec<Vec3<f64>>> {
    let kinv = cam.intrinsics_inverse()?;
    let inv_s = 1.0 / cam.scale;
    Ok(joints
        .iter()
        .map(|p| {
            let v = kinv * Vector3::new(p[0] + cam.tx, p[1] + cam.ty, 1.0);
            [v[0] * inv_s, v[1] * inv_s, p[2] * inv_s]
        })
        .collect())
}

/// Applies one camera per frame.
pub fn unproject_sequence(seq: &PoseSequence<f64>, cams: &[WeakPerspectiveCamera]) -> Result<PoseSequence<f64>> {
    if cams.len() != seq.frames() {
        return Err(Error::Shape {
            op: "unproject_sequence",
            detail: format!("{} cameras for {} frames", cams.len(), seq.frames()),
        });
    }
    let mut out = seq.clone();
    for (t, cam) in cams.iter().enumerate() {
        out.set_frame(t, &unproject_weak_perspective(&seq.frame(t), cam)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det3(m: &[[f64; 3]; 3]) -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Adjugate over determinant.
    fn inverse_by_cofactors(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let d = det3(m);
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
                let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
                out[r][c] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / d;
            }
        }
        out
    }

    #[test]
    fn identity_camera_keeps_xy() {
        let j = vec![[0.3, -0.2, 0.7], [1.0, 2.0, 3.0]];
        let out = unproject_weak_perspective(&j, &WeakPerspectiveCamera::default()).unwrap();
        assert_eq!(out, j);
    }

    #[test]
    fn doubling_scale_halves_output() {
        let j = vec![[0.3, -0.2, 0.7]];
        let cam = WeakPerspectiveCamera { tx: 0.1, ty: -0.4, ..Default::default() };
        let a = unproject_weak_perspective(&j, &cam).unwrap();
        let b = unproject_weak_perspective(&j, &WeakPerspectiveCamera { scale: 2.0, ..cam }).unwrap();
        for k in 0..3 {
            assert!((b[0][k] - a[0][k] / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_explicit_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut k = [[0.0; 3]; 3];
            for row in k.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.random_range(-2.0..2.0);
                }
            }
            if det3(&k).abs() < 0.1 {
                continue;
            }
            let cam = WeakPerspectiveCamera {
                scale: rng.random_range(0.2..3.0),
                tx: rng.random_range(-1.0..1.0),
                ty: rng.random_range(-1.0..1.0),
                intrinsics: k,
            };
            let j: Vec<Vec3<f64>> = (0..5).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
            let got = unproject_weak_perspective(&j, &cam).unwrap();
            let inv = inverse_by_cofactors(&k);
            for (p, g) in j.iter().zip(&got) {
                let h = [p[0] + cam.tx, p[1] + cam.ty, 1.0];
                for r in 0..2 {
                    let want = (inv[r][0] * h[0] + inv[r][1] * h[1] + inv[r][2] * h[2]) / cam.scale;
                    assert!((g[r] - want).abs() < 1e-12);
                }
                assert!((g[2] - p[2] / cam.scale).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_singular_or_nonpositive() {
        let j = vec![[0.0; 3]];
        let sing = WeakPerspectiveCamera { intrinsics: [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]], ..Default::default() };
        assert!(unproject_weak_perspective(&j, &sing).is_err());
        let neg = WeakPerspectiveCamera { scale: 0.0, ..Default::default() };
        assert!(unproject_weak_perspective(&j, &neg).is_err());
    }
}

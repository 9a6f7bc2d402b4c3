//! Accuracy, smoothness, and bone-consistency metrics.
//!
//! Position errors are reported in millimeters; smoothness in meters per
//! frame^k with unit frame spacing.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kinematics::{extract_bone_lengths, vec3, PoseSequence, SkeletonDefinition, Vec3};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub rr_mpjpe_mm: f64,
    pub mean_accel: f64,
    pub mean_jerk: f64,
    pub bone_mae_mm: f64,
    pub bone_stddev_mm: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "mpjpe_mm,pa_mpjpe_mm,rr_mpjpe_mm,mean_accel,mean_jerk,bone_mae_mm,bone_stddev_mm";

    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.mpjpe_mm,
            self.pa_mpjpe_mm,
            self.rr_mpjpe_mm,
            self.mean_accel,
            self.mean_jerk,
            self.bone_mae_mm,
            self.bone_stddev_mm,
        ]
    }

    /// Frame-weighted average of several reports.
    pub fn weighted_mean(reports: &[(MetricReport, usize)]) -> Self {
        let total: usize = reports.iter().map(|r| r.1).sum();
        let mut acc = [0.0; 7];
        for (r, w) in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v * *w as f64 / total.max(1) as f64;
            }
        }
        Self {
            mpjpe_mm: acc[0],
            pa_mpjpe_mm: acc[1],
            rr_mpjpe_mm: acc[2],
            mean_accel: acc[3],
            mean_jerk: acc[4],
            bone_mae_mm: acc[5],
            bone_stddev_mm: acc[6],
        }
    }
}

fn frame64<T: Real>(seq: &PoseSequence<T>, t: usize) -> Vec<Vec3<f64>> {
    seq.frame(t).into_iter().map(|p| p.map(|v| v.to_f64_lossy())).collect()
}

fn mean_error(a: &[Vec3<f64>], b: &[Vec3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| vec3::distance(*x, *y)).sum::<f64>() / a.len() as f64
}

/// Least-squares similarity transform (`s R x + t`) of `pred` onto `gt`.
pub fn procrustes_align(pred: &[Vec3<f64>], gt: &[Vec3<f64>]) -> Vec<Vec3<f64>> {
    if pred == gt {
        return pred.to_vec();
    }
    let n = pred.len() as f64;
    let mean = |ps: &[Vec3<f64>]| {
        ps.iter()
            .fold(Vector3::zeros(), |acc: Vector3<f64>, p| acc + Vector3::from(*p))
            / n
    };
    let (mp, mg) = (mean(pred), mean(gt));
    let xs: Vec<Vector3<f64>> = pred.iter().map(|p| Vector3::from(*p) - mp).collect();
    let ys: Vec<Vector3<f64>> = gt.iter().map(|p| Vector3::from(*p) - mg).collect();
    let var_x: f64 = xs.iter().map(|x| x.norm_squared()).sum();
    if var_x <= 0.0 {
        return vec![mg.into(); pred.len()];
    }
    let cov: Matrix3<f64> = ys.iter().zip(&xs).map(|(y, x)| y * x.transpose()).sum();
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * v_t;
    let sv = svd.singular_values;
    let trace = sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)];
    let scale = trace / var_x;
    xs.iter().map(|x| (scale * rot * x + mg).into()).collect()
}

fn check_shapes<T: Real>(pred: &PoseSequence<T>, gt: &PoseSequence<T>) -> Result<()> {
    if !pred.same_shape(gt) || pred.frames() == 0 || pred.joints() == 0 {
        return Err(shape_err(
            "compute_accuracy",
            format!(
                "{}x{} vs {}x{}",
                pred.frames(),
                pred.joints(),
                gt.frames(),
                gt.joints()
            ),
        ));
    }
    Ok(())
}

/// `(MPJPE, PA-MPJPE, RR-MPJPE)` in millimeters. Joint 0 is the root.
pub fn compute_accuracy<T: Real>(pred: &PoseSequence<T>, gt: &PoseSequence<T>) -> Result<(f64, f64, f64)> {
    check_shapes(pred, gt)?;
    let (mut raw, mut pa, mut rr) = (0.0, 0.0, 0.0);
    for t in 0..pred.frames() {
        let (p, g) = (frame64(pred, t), frame64(gt, t));
        raw += mean_error(&p, &g);
        pa += mean_error(&procrustes_align(&p, &g), &g);
        let rel = |f: &[Vec3<f64>]| f.iter().map(|x| vec3::sub(*x, f[0])).collect::<Vec<_>>();
        rr += mean_error(&rel(&p), &rel(&g));
    }
    let k = 1000.0 / pred.frames() as f64;
    Ok((raw * k, pa * k, rr * k))
}

fn difference_norm_mean<T: Real>(seq: &PoseSequence<T>, order: usize) -> f64 {
    // binomial weights of the forward difference of the given order
    let w: &[f64] = match order {
        2 => &[1.0, -2.0, 1.0],
        _ => &[-1.0, 3.0, -3.0, 1.0],
    };
    let frames = seq.frames() - order;
    let mut sum = 0.0;
    for t in 0..frames {
        for j in 0..seq.joints() {
            let mut d = [0.0; 3];
            for (i, wi) in w.iter().enumerate() {
                let p = seq.get(t + i, j);
                for k in 0..3 {
                    d[k] += wi * p[k].to_f64_lossy();
                }
            }
            sum += vec3::norm(d);
        }
    }
    sum / (frames * seq.joints()) as f64
}

/// `(MeanAccel, MeanJerk)`: mean norms of second and third differences.
pub fn compute_smoothness<T: Real>(seq: &PoseSequence<T>) -> Result<(f64, f64)> {
    if seq.frames() < 4 {
        return Err(Error::TooShort {
            what: "compute_smoothness",
            needed: 4,
            got: seq.frames(),
        });
    }
    if seq.joints() == 0 {
        return Err(shape_err("compute_smoothness", "no joints"));
    }
    Ok((difference_norm_mean(seq, 2), difference_norm_mean(seq, 3)))
}

/// `(BoneMAE, BoneStdDev)` in millimeters over non-root bones.
pub fn compute_bone_metrics<T: Real>(seq: &PoseSequence<T>, skeleton: &SkeletonDefinition<T>) -> Result<(f64, f64)> {
    if seq.joints() != skeleton.num_joints() || seq.frames() == 0 {
        return Err(shape_err("compute_bone_metrics", "sequence does not match skeleton"));
    }
    let bones: Vec<usize> = skeleton.bones().map(|(j, _)| j).collect();
    if bones.is_empty() {
        return Ok((0.0, 0.0));
    }
    let canon: Vec<f64> = skeleton.canonical_lengths().iter().map(|v| v.to_f64_lossy()).collect();
    let mut lengths = vec![Vec::with_capacity(seq.frames()); seq.joints()];
    for t in 0..seq.frames() {
        let l = extract_bone_lengths(&seq.frame(t), skeleton)?;
        for &j in &bones {
            lengths[j].push(l[j].to_f64_lossy());
        }
    }
    let mut mae = 0.0;
    let mut sd = 0.0;
    for &j in &bones {
        let ls = &lengths[j];
        mae += ls.iter().map(|l| (l - canon[j]).abs()).sum::<f64>() / ls.len() as f64;
        let m = ls.iter().sum::<f64>() / ls.len() as f64;
        sd += (ls.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / ls.len() as f64).sqrt();
    }
    let n = bones.len() as f64;
    Ok((mae / n * 1000.0, sd / n * 1000.0))
}

pub fn evaluate<T: Real>(
    pred: &PoseSequence<T>,
    gt: &PoseSequence<T>,
    skeleton: &SkeletonDefinition<T>,
) -> Result<MetricReport> {
    let (mpjpe_mm, pa_mpjpe_mm, rr_mpjpe_mm) = compute_accuracy(pred, gt)?;
    let (mean_accel, mean_jerk) = compute_smoothness(pred)?;
    let (bone_mae_mm, bone_stddev_mm) = compute_bone_metrics(pred, skeleton)?;
    Ok(MetricReport {
        mpjpe_mm,
        pa_mpjpe_mm,
        rr_mpjpe_mm,
        mean_accel,
        mean_jerk,
        bone_mae_mm,
        bone_stddev_mm,
    })
}

/// Metrics over several sequences, weighted by frame count.
pub fn evaluate_many<T: Real>(
    preds: &[PoseSequence<T>],
    gts: &[PoseSequence<T>],
    skeleton: &SkeletonDefinition<T>,
) -> Result<MetricReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(shape_err("evaluate_many", "prediction and ground-truth counts differ"));
    }
    let reports = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| Ok((evaluate(p, g, skeleton)?, p.frames())))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::weighted_mean(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, j: usize) -> PoseSequence<f64> {
        PoseSequence::new(t, j, (0..t * j * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_seq(&mut rng, 6, 5);
        let (a, b, c) = compute_accuracy(&s, &s).unwrap();
        assert_eq!(a, 0.0);
        assert!(b < 1e-9);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_seq(&mut rng, 4, 6);
        let mut p = g.clone();
        for v in p.as_mut_slice().chunks_exact_mut(3) {
            v[1] += 0.010;
        }
        let (a, b, c) = compute_accuracy(&p, &g).unwrap();
        assert!((a - 10.0).abs() < 1e-9);
        assert!(b < 1e-6);
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn similarity_transforms_vanish_under_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_seq(&mut rng, 10, 24);
        let mut p = g.clone();
        for t in 0..10 {
            let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0];
            let q = Quaternion::from_axis_angle(axis, rng.random_range(-3.0..3.0)).unwrap();
            let s = rng.random_range(0.5..2.0);
            let shift = [rng.random_range(-1.0..1.0), 0.3, -0.2];
            for j in 0..24 {
                p.set(t, j, vec3::add(vec3::scale(q.rotate(g.get(t, j)), s), shift));
            }
        }
        let (_, pa, _) = compute_accuracy(&p, &g).unwrap();
        assert!(pa < 1e-6, "{pa}");
    }

    #[test]
    fn per_frame_translation_leaves_root_relative_error_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_seq(&mut rng, 5, 4);
        let p = random_seq(&mut rng, 5, 4);
        let mut shifted = p.clone();
        for t in 0..5 {
            let d = [rng.random_range(-2.0..2.0), 1.0, 0.0];
            for j in 0..4 {
                shifted.set(t, j, vec3::add(p.get(t, j), d));
            }
        }
        let (_, _, a) = compute_accuracy(&p, &g).unwrap();
        let (_, _, b) = compute_accuracy(&shifted, &g).unwrap();
        assert!((a - b).abs() < 1e-9);
        let mut tr = g.clone();
        for t in 0..5 {
            for j in 0..4 {
                tr.set(t, j, vec3::add(g.get(t, j), [0.5 * t as f64, 0.25, -1.0]));
            }
        }
        assert_eq!(compute_accuracy(&tr, &g).unwrap().2, 0.0);
    }

    #[test]
    fn smoothness_of_linear_motion_and_oracle() {
        let lin = PoseSequence::new(6, 1, (0..6).flat_map(|t| [0.5 * t as f64, 0.25, -(t as f64)]).collect()).unwrap();
        assert_eq!(compute_smoothness(&lin).unwrap(), (0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_seq(&mut rng, 8, 3);
        let mut acc = Vec::new();
        let mut jerk = Vec::new();
        for t in 0..8 {
            for j in 0..3 {
                if t + 2 < 8 {
                    let a = vec3::add(vec3::sub(s.get(t + 2, j), vec3::scale(s.get(t + 1, j), 2.0)), s.get(t, j));
                    acc.push(vec3::norm(a));
                }
                if t + 3 < 8 {
                    let d1 = |u: usize| vec3::sub(s.get(u + 1, j), s.get(u, j));
                    let d2 = |u: usize| vec3::sub(d1(u + 1), d1(u));
                    jerk.push(vec3::norm(vec3::sub(d2(t + 1), d2(t))));
                }
            }
        }
        let (a, j) = compute_smoothness(&s).unwrap();
        assert!((a - acc.iter().sum::<f64>() / acc.len() as f64).abs() < 1e-12);
        assert!((j - jerk.iter().sum::<f64>() / jerk.len() as f64).abs() < 1e-12);
        assert!(compute_smoothness(&PoseSequence::<f64>::zeros(3, 1)).is_err());
    }

    #[test]
    fn bone_metrics_examples() {
        let skel = SkeletonDefinition::<f64>::chain(&[0.0, 0.3, 0.2], [1.0, 0.0, 0.0]).unwrap();
        let exact = PoseSequence::new(3, 3, [0.0, 0.0, 0.0, 0.3, 0.0, 0.0, 0.5, 0.0, 0.0].repeat(3)).unwrap();
        let (mae, sd) = compute_bone_metrics(&exact, &skel).unwrap();
        assert!(mae < 1e-9 && sd < 1e-9);
        let long = PoseSequence::new(2, 3, [0.0, 0.0, 0.0, 0.305, 0.0, 0.0, 0.51, 0.0, 0.0].repeat(2)).unwrap();
        let (mae, sd) = compute_bone_metrics(&long, &skel).unwrap();
        assert!((mae - 5.0).abs() < 1e-9);
        assert!(sd < 1e-9);
    }

    #[test]
    fn bone_metrics_match_brute_force() {
        let skel = SkeletonDefinition::<f64>::smpl24();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_seq(&mut rng, 7, 24);
        let (mae, sd) = compute_bone_metrics(&s, &skel).unwrap();
        let parents = skel.parents();
        let (mut m, mut d) = (0.0, 0.0);
        for j in 1..24 {
            let p = parents[j].unwrap();
            let ls: Vec<f64> = (0..7).map(|t| vec3::distance(s.get(t, j), s.get(t, p))).collect();
            m += ls.iter().map(|l| (l - skel.canonical_lengths()[j]).abs()).sum::<f64>() / 7.0;
            let mu = ls.iter().sum::<f64>() / 7.0;
            d += (ls.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / 7.0).sqrt();
        }
        assert!((mae - m / 23.0 * 1000.0).abs() < 1e-9);
        assert!((sd - d / 23.0 * 1000.0).abs() < 1e-9);
    }

    #[test]
    fn report_serializes_with_field_names() {
        let r = MetricReport {
            mpjpe_mm: 1.0,
            bone_stddev_mm: 7.0,
            ..Default::default()
        };
        let json = serde_json::to_value(r).unwrap();
        assert_eq!(json["mpjpe_mm"], 1.0);
        assert_eq!(json["bone_stddev_mm"], 7.0);
        assert_eq!(r.csv_row(), "1,0,0,0,0,0,7");
        assert_eq!(MetricReport::CSV_HEADER.split(',').count(), 7);
    }
}

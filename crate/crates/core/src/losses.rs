//! Training objectives: position, bone-length, velocity, acceleration, and
//! Gaussian negative log-likelihood terms, plus their staged combination.
//!
//! Each term exists twice: a plain function over pose sequences (used for
//! reporting and as a reference) and a graph builder in [`graph`] used during
//! training. Batches are slices of sequences that share one shape.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::hpstm::{solve_lower, CovarianceFactors};
use crate::kinematics::PoseSequence;
use crate::scalar::Real;

/// `(D/2) log(2 pi)` with `D = 3`.
pub fn gaussian_log_norm_3d<T: Real>() -> T {
    T::lit(1.5) * (T::lit(2.0) * T::PI()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_pos: f64,
    pub w_bone: f64,
    pub w_vel: f64,
    pub w_accel: f64,
    pub lambda_nll: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_pos: 1.0,
            w_bone: 0.3,
            w_vel: 0.5,
            w_accel: 0.5,
            lambda_nll: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_pos, self.w_bone, self.w_vel, self.w_accel, self.lambda_nll];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Curriculum stage selecting which terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// position loss only, clean inputs
    Manifold = 1,
    /// position + bone + velocity + acceleration, corrupted inputs
    NoiseAware = 2,
    /// stage-2 terms plus the weighted likelihood term
    Uncertainty = 3,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Self::Manifold),
            2 => Some(Self::NoiseAware),
            3 => Some(Self::Uncertainty),
            _ => None,
        }
    }

    pub fn uses_covariance(self) -> bool {
        self == Self::Uncertainty
    }
}

/// Already-evaluated loss terms. Terms a stage does not use may be `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents<T> {
    pub pos: T,
    pub bone: Option<T>,
    pub vel: Option<T>,
    pub accel: Option<T>,
    pub nll: Option<T>,
}

/// Weighted objective for `stage`.
pub fn loss_total<T: Real>(
    stage: Stage,
    c: &LossComponents<T>,
    weights: &LossWeights,
) -> Result<T> {
    if stage == Stage::Manifold {
        return Ok(c.pos);
    }
    let need = |v: Option<T>, name: &str| {
        v.ok_or_else(|| Error::Missing(format!("stage {} needs the {name} term", stage.number())))
    };
    let w = |x: f64| T::lit(x);
    let base = w(weights.w_pos) * c.pos
        + w(weights.w_bone) * need(c.bone, "bone")?
        + w(weights.w_vel) * need(c.vel, "velocity")?
        + w(weights.w_accel) * need(c.accel, "acceleration")?;
    if stage == Stage::NoiseAware {
        return Ok(base);
    }
    let nll = c
        .nll
        .ok_or_else(|| Error::Missing("stage 3 needs covariance factors for the NLL term".into()))?;
    Ok(base + w(weights.lambda_nll) * nll)
}

fn check_pair<T: Real>(op: &'static str, pred: &[PoseSequence<T>], gt: &[PoseSequence<T>]) -> Result<()> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(shape_err(op, format!("batch sizes {} and {}", pred.len(), gt.len())));
    }
    let s = &pred[0];
    for (p, g) in pred.iter().zip(gt) {
        if !p.same_shape(s) || !g.same_shape(s) {
            return Err(shape_err(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    p.frames(),
                    p.joints(),
                    g.frames(),
                    g.joints()
                ),
            ));
        }
    }
    Ok(())
}

/// Mean squared coordinate error over batch, frames, joints, and axes (m^2).
pub fn loss_position<T: Real>(pred: &[PoseSequence<T>], gt: &[PoseSequence<T>]) -> Result<T> {
    check_pair("loss_position", pred, gt)?;
    let mut sum = T::zero();
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.as_slice().iter().zip(g.as_slice()) {
            sum = sum + (*a - *b) * (*a - *b);
        }
        n += p.as_slice().len();
    }
    Ok(sum / T::lit(n as f64))
}

/// Mean squared deviation of predicted lengths (`[batch][frame][joint]`) from
/// canonical per-joint lengths broadcast over frames.
pub fn loss_bone<T: Real>(pred_lengths: &[Vec<Vec<T>>], canonical: &[T]) -> Result<T> {
    let mut sum = T::zero();
    let mut n = 0usize;
    if pred_lengths.is_empty() {
        return Err(shape_err("loss_bone", "empty batch"));
    }
    for seq in pred_lengths {
        for frame in seq {
            if frame.len() != canonical.len() {
                return Err(shape_err(
                    "loss_bone",
                    format!("{} lengths vs {} canonical", frame.len(), canonical.len()),
                ));
            }
            for (l, c) in frame.iter().zip(canonical) {
                sum = sum + (*l - *c) * (*l - *c);
            }
            n += frame.len();
        }
    }
    if n == 0 {
        return Err(shape_err("loss_bone", "no frames"));
    }
    Ok(sum / T::lit(n as f64))
}

/// L1 mean of `order`-th temporal differences of `pred - gt`.
fn difference_l1<T: Real>(
    op: &'static str,
    pred: &[PoseSequence<T>],
    gt: &[PoseSequence<T>],
    order: usize,
) -> Result<T> {
    check_pair(op, pred, gt)?;
    let frames = pred[0].frames();
    if frames < order + 1 {
        return Err(Error::TooShort {
            what: op,
            needed: order + 1,
            got: frames,
        });
    }
    let stride = pred[0].joints() * 3;
    let mut sum = T::zero();
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        let (p, g) = (p.as_slice(), g.as_slice());
        for i in 0..(frames - order) * stride {
            let (dp, dg) = if order == 1 {
                (p[i + stride] - p[i], g[i + stride] - g[i])
            } else {
                (
                    p[i + 2 * stride] - p[i + stride] - (p[i + stride] - p[i]),
                    g[i + 2 * stride] - g[i + stride] - (g[i + stride] - g[i]),
                )
            };
            sum = sum + (dp - dg).abs();
            n += 1;
        }
    }
    Ok(sum / T::lit(n as f64))
}

/// L1 mean of first-difference (velocity) mismatch; denominator uses `T - 1` frames.
pub fn loss_velocity<T: Real>(pred: &[PoseSequence<T>], gt: &[PoseSequence<T>]) -> Result<T> {
    difference_l1("loss_velocity", pred, gt, 1)
}

/// L1 mean of second-difference (acceleration) mismatch; denominator uses `T - 2` frames.
pub fn loss_acceleration<T: Real>(pred: &[PoseSequence<T>], gt: &[PoseSequence<T>]) -> Result<T> {
    difference_l1("loss_acceleration", pred, gt, 2)
}

/// Mean Gaussian negative log-likelihood of `gt` under `N(pred, L L^T)`.
///
/// Per joint-frame: `0.5 |L^-1 (gt - pred)|^2 + sum_k log L_kk + 1.5 log(2 pi)`,
/// with the triangular system solved by substitution.
pub fn loss_nll<T: Real>(
    pred: &[PoseSequence<T>],
    gt: &[PoseSequence<T>],
    factors: &[CovarianceFactors<T>],
) -> Result<T> {
    check_pair("loss_nll", pred, gt)?;
    if factors.len() != pred.len() {
        return Err(shape_err("loss_nll", "one factor set per batch entry required"));
    }
    let half = T::lit(0.5);
    let c = gaussian_log_norm_3d::<T>();
    let mut sum = T::zero();
    let mut n = 0usize;
    for ((p, g), f) in pred.iter().zip(gt).zip(factors) {
        if f.frames() != p.frames() || f.joints() != p.joints() {
            return Err(shape_err("loss_nll", "factor shape differs from positions"));
        }
        for t in 0..p.frames() {
            for j in 0..p.joints() {
                let l = f.get(t, j);
                if (0..3).any(|k| !(l[k][k] > T::zero())) {
                    return Err(Error::Config(format!(
                        "non-positive Cholesky diagonal at frame {t}, joint {j}"
                    )));
                }
                let a = p.get(t, j);
                let b = g.get(t, j);
                let y = solve_lower(l, [b[0] - a[0], b[1] - a[1], b[2] - a[2]]);
                let maha = y[0] * y[0] + y[1] * y[1] + y[2] * y[2];
                let logdet = l[0][0].ln() + l[1][1].ln() + l[2][2].ln();
                sum = sum + half * maha + logdet + c;
                n += 1;
            }
        }
    }
    Ok(sum / T::lit(n as f64))
}

/// Graph builders for the same terms. Positions are `[B, T, J, 3]` nodes.
pub mod graph {
    use super::{gaussian_log_norm_3d, LossWeights, Stage};
    use crate::diffcore::{Graph, Tensor, Var};
    use crate::error::{shape_err, Error, Result};
    use crate::hpstm::CHOLESKY_DIAG_FLOOR;
    use crate::scalar::Real;

    pub fn position<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
        if g.shape(pred) != g.shape(gt) {
            return Err(shape_err("loss_position", "pred/gt shapes differ"));
        }
        let d = g.sub(pred, gt)?;
        let sq = g.square(d)?;
        Ok(g.mean(sq))
    }

    /// `lengths` is `[B, T, J]`; `canonical` has `J` entries.
    pub fn bone<T: Real>(g: &mut Graph<T>, lengths: Var, canonical: &[T]) -> Result<Var> {
        let c = g.constant(Tensor::from_vec(canonical.to_vec()));
        let d = g.sub(lengths, c)?;
        let sq = g.square(d)?;
        Ok(g.mean(sq))
    }

    fn temporal_difference<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
        let frames = g.shape(x)[1];
        let later = g.slice(x, 1, 1, frames - 1)?;
        let earlier = g.slice(x, 1, 0, frames - 1)?;
        g.sub(later, earlier)
    }

    fn difference_l1<T: Real>(
        g: &mut Graph<T>,
        pred: Var,
        gt: Var,
        order: usize,
        what: &'static str,
    ) -> Result<Var> {
        let frames = g.shape(pred)[1];
        if frames < order + 1 {
            return Err(Error::TooShort {
                what,
                needed: order + 1,
                got: frames,
            });
        }
        let mut diff = g.sub(pred, gt)?;
        for _ in 0..order {
            diff = temporal_difference(g, diff)?;
        }
        let a = g.abs(diff);
        Ok(g.mean(a))
    }

    pub fn velocity<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
        difference_l1(g, pred, gt, 1, "loss_velocity")
    }

    pub fn acceleration<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
        difference_l1(g, pred, gt, 2, "loss_acceleration")
    }

    /// `chol_raw` is `[B, T, J, 6]` in the `assemble_cholesky` layout.
    pub fn nll<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var, chol_raw: Var) -> Result<Var> {
        let s = g.shape(pred).to_vec();
        let rank = s.len();
        if g.shape(chol_raw)[..rank - 1] != s[..rank - 1] || g.shape(chol_raw)[rank - 1] != 6 {
            return Err(shape_err("loss_nll", "factor shape differs from positions"));
        }
        let ax = rank - 1;
        let e = g.sub(gt, pred)?;
        let comp = |g: &mut Graph<T>, x: Var, i: usize| g.slice(x, ax, i, 1);
        let e0 = comp(g, e, 0)?;
        let e1 = comp(g, e, 1)?;
        let e2 = comp(g, e, 2)?;
        let mut diag = Vec::with_capacity(3);
        for k in 0..3 {
            let r = comp(g, chol_raw, k)?;
            let ex = g.exp(r);
            diag.push(g.max_const(ex, T::lit(CHOLESKY_DIAG_FLOOR)));
        }
        let l10 = comp(g, chol_raw, 3)?;
        let l20 = comp(g, chol_raw, 4)?;
        let l21 = comp(g, chol_raw, 5)?;
        let y0 = g.div(e0, diag[0])?;
        let t = g.mul(l10, y0)?;
        let t = g.sub(e1, t)?;
        let y1 = g.div(t, diag[1])?;
        let a = g.mul(l20, y0)?;
        let b = g.mul(l21, y1)?;
        let t = g.sub(e2, a)?;
        let t = g.sub(t, b)?;
        let y2 = g.div(t, diag[2])?;
        let y = g.concat(&[y0, y1, y2], ax)?;
        let ysq = g.square(y)?;
        let maha = g.sum_axis(ysq, ax)?;
        let half = g.scale(maha, T::lit(0.5));
        let logs: Vec<Var> = diag.iter().map(|d| g.ln(*d)).collect();
        let ld = g.concat(&logs, ax)?;
        let logdet = g.sum_axis(ld, ax)?;
        let per = g.add(half, logdet)?;
        let per = g.offset(per, gaussian_log_norm_3d::<T>());
        Ok(g.mean(per))
    }

    /// Graph nodes of the individual terms, for logging.
    #[derive(Debug, Clone, Copy)]
    pub struct TermVars {
        pub pos: Var,
        pub bone: Option<Var>,
        pub vel: Option<Var>,
        pub accel: Option<Var>,
        pub nll: Option<Var>,
    }

    /// Builds the stage objective. `lengths` and `chol_raw` are required by
    /// stages 2 and 3 respectively.
    #[allow(clippy::too_many_arguments)]
    pub fn total<T: Real>(
        g: &mut Graph<T>,
        stage: Stage,
        pred: Var,
        gt: Var,
        lengths: Option<Var>,
        canonical: &[T],
        chol_raw: Option<Var>,
        weights: &LossWeights,
    ) -> Result<(Var, TermVars)> {
        let pos = position(g, pred, gt)?;
        let mut terms = TermVars {
            pos,
            bone: None,
            vel: None,
            accel: None,
            nll: None,
        };
        if stage == Stage::Manifold {
            return Ok((pos, terms));
        }
        let lengths =
            lengths.ok_or_else(|| Error::Missing("stage 2 needs predicted bone lengths".into()))?;
        let b = bone(g, lengths, canonical)?;
        let v = velocity(g, pred, gt)?;
        let a = acceleration(g, pred, gt)?;
        terms.bone = Some(b);
        terms.vel = Some(v);
        terms.accel = Some(a);
        let w = |x: f64| T::lit(x);
        let mut acc = g.scale(pos, w(weights.w_pos));
        for (var, wt) in [(b, weights.w_bone), (v, weights.w_vel), (a, weights.w_accel)] {
            let s = g.scale(var, w(wt));
            acc = g.add(acc, s)?;
        }
        if stage == Stage::Uncertainty {
            let raw = chol_raw.ok_or_else(|| {
                Error::Missing("stage 3 needs covariance factors for the NLL term".into())
            })?;
            let n = nll(g, pred, gt, raw)?;
            terms.nll = Some(n);
            let s = g.scale(n, w(weights.lambda_nll));
            acc = g.add(acc, s)?;
        }
        Ok((acc, terms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{check_gradients, Graph, Tensor};
    use crate::hpstm::assemble_cholesky;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(rng: &mut ChaCha8Rng, frames: usize, joints: usize) -> PoseSequence<f64> {
        PoseSequence::new(
            frames,
            joints,
            (0..frames * joints * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn to_tensor(s: &PoseSequence<f64>) -> Tensor<f64> {
        Tensor::new(vec![1, s.frames(), s.joints(), 3], s.as_slice().to_vec()).unwrap()
    }

    #[test]
    fn position_examples() {
        let gt = PoseSequence::<f64>::zeros(1, 2);
        assert_eq!(loss_position(&[gt.clone()], &[gt.clone()]).unwrap(), 0.0);
        let mut pred = gt.clone();
        pred.set(0, 1, [0.0, 0.1, 0.0]);
        let l = loss_position(&[pred], &[gt]).unwrap();
        assert!((l - 0.01 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn position_matches_brute_force_and_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_seq(&mut rng, 4, 3), random_seq(&mut rng, 4, 3));
        let brute: f64 = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / 36.0;
        let v = loss_position(&[a.clone()], &[b.clone()]).unwrap();
        assert!((v - brute).abs() < 1e-12);
        let mut g = Graph::new();
        let (pa, pb) = (g.constant(to_tensor(&a)), g.constant(to_tensor(&b)));
        let l = graph::position(&mut g, pa, pb).unwrap();
        assert!((g.value(l).item().unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn bone_examples() {
        let canon: Vec<f64> = vec![0.0, 0.3, 0.25, 0.1];
        let same = vec![vec![canon.clone(); 3]];
        assert_eq!(loss_bone(&same, &canon).unwrap(), 0.0);
        let mut off = canon.clone();
        off[2] += 0.02;
        let l = loss_bone(&[vec![off]], &canon).unwrap();
        assert!((l - 0.0004 / 4.0).abs() < 1e-15);
        assert!(loss_bone(&[vec![vec![0.0; 3]]], &canon).is_err());
    }

    #[test]
    fn temporal_losses_cancel_constant_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_seq(&mut rng, 6, 2);
        let mut pred = gt.clone();
        for t in 0..6 {
            for j in 0..2 {
                let p = pred.get(t, j);
                pred.set(t, j, [p[0] + 0.5, p[1] - 0.25, p[2] + 0.125]);
            }
        }
        assert_eq!(loss_velocity(&[pred.clone()], &[gt.clone()]).unwrap(), 0.0);
        assert_eq!(loss_acceleration(&[pred], &[gt]).unwrap(), 0.0);
        let constant = PoseSequence::<f64>::new(3, 1, [0.1, 0.2, 0.3].repeat(3)).unwrap();
        assert_eq!(loss_velocity(&[constant.clone()], &[constant.clone()]).unwrap(), 0.0);
        assert_eq!(loss_acceleration(&[constant.clone()], &[constant]).unwrap(), 0.0);
    }

    #[test]
    fn temporal_losses_need_enough_frames() {
        let one = PoseSequence::<f64>::zeros(1, 1);
        let two = PoseSequence::<f64>::zeros(2, 1);
        assert!(matches!(loss_velocity(&[one.clone()], &[one]), Err(Error::TooShort { .. })));
        assert!(loss_velocity(&[two.clone()], &[two.clone()]).is_ok());
        assert!(matches!(loss_acceleration(&[two.clone()], &[two]), Err(Error::TooShort { .. })));
    }

    #[test]
    fn temporal_losses_match_finite_difference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, q) = (random_seq(&mut rng, 7, 3), random_seq(&mut rng, 7, 3));
        let (mut v, mut a) = (0.0, 0.0);
        for t in 0..7 {
            for j in 0..3 {
                for d in 0..3 {
                    let pv = |s: &PoseSequence<f64>, t: usize| s.get(t, j)[d];
                    if t + 1 < 7 {
                        v += ((pv(&p, t + 1) - pv(&p, t)) - (pv(&q, t + 1) - pv(&q, t))).abs();
                    }
                    if t + 2 < 7 {
                        let ap = pv(&p, t + 2) - 2.0 * pv(&p, t + 1) + pv(&p, t);
                        let aq = pv(&q, t + 2) - 2.0 * pv(&q, t + 1) + pv(&q, t);
                        a += (ap - aq).abs();
                    }
                }
            }
        }
        v /= (6 * 3 * 3) as f64;
        a /= (5 * 3 * 3) as f64;
        assert!((loss_velocity(&[p.clone()], &[q.clone()]).unwrap() - v).abs() < 1e-12);
        assert!((loss_acceleration(&[p.clone()], &[q.clone()]).unwrap() - a).abs() < 1e-12);
        let mut g = Graph::new();
        let (pv, qv) = (g.constant(to_tensor(&p)), g.constant(to_tensor(&q)));
        let gv = graph::velocity(&mut g, pv, qv).unwrap();
        let ga = graph::acceleration(&mut g, pv, qv).unwrap();
        assert!((g.value(gv).item().unwrap() - v).abs() < 1e-12);
        assert!((g.value(ga).item().unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn nll_analytic_values() {
        let z = PoseSequence::<f64>::zeros(1, 1);
        let id = CovarianceFactors::identity(1, 1);
        let l = loss_nll(&[z.clone()], &[z.clone()], &[id.clone()]).unwrap();
        assert!((l - 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((l - 2.756815).abs() < 1e-6);
        let mut e = z.clone();
        e.set(0, 0, [0.1, 0.0, 0.0]);
        let l2 = loss_nll(&[z], &[e], &[id]).unwrap();
        assert!((l2 - (l + 0.005)).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_dense_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, q) = (random_seq(&mut rng, 3, 2), random_seq(&mut rng, 3, 2));
        let raw: Vec<f64> = (0..3 * 2 * 6).map(|_| rng.random_range(-0.8..0.8)).collect();
        let f = CovarianceFactors::from_raw(3, 2, &raw).unwrap();
        let mut want = 0.0;
        for t in 0..3 {
            for j in 0..2 {
                let s = f.covariance(t, j);
                let inv = crate::kinematics::vec3::inverse(&s).unwrap();
                let det = crate::kinematics::vec3::determinant(&s);
                let e = crate::kinematics::vec3::sub(q.get(t, j), p.get(t, j));
                let se = crate::kinematics::vec3::mat_vec(&inv, e);
                want += 0.5 * crate::kinematics::vec3::dot(e, se) + 0.5 * det.ln() + gaussian_log_norm_3d::<f64>();
            }
        }
        want /= 6.0;
        let got = loss_nll(&[p.clone()], &[q.clone()], &[f]).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");

        let mut g = Graph::new();
        let (pv, qv) = (g.constant(to_tensor(&p)), g.constant(to_tensor(&q)));
        let rv = g.constant(Tensor::new(vec![1, 3, 2, 6], raw).unwrap());
        let n = graph::nll(&mut g, pv, qv, rv).unwrap();
        assert!((g.value(n).item().unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn nll_can_be_negative_for_tight_covariance() {
        let z = PoseSequence::<f64>::zeros(1, 1);
        let raw = [(0.01f64).ln(), (0.01f64).ln(), (0.01f64).ln(), 0.0, 0.0, 0.0];
        let f = CovarianceFactors::new(1, 1, vec![assemble_cholesky(&raw)]).unwrap();
        assert!(loss_nll(&[z.clone()], &[z], &[f]).unwrap() < 0.0);
    }

    #[test]
    fn staged_totals() {
        let w = LossWeights::default();
        let c = LossComponents {
            pos: 0.5,
            ..Default::default()
        };
        assert_eq!(loss_total(Stage::Manifold, &c, &w).unwrap(), 0.5);
        let c = LossComponents {
            pos: 1.0,
            bone: Some(1.0),
            vel: Some(1.0),
            accel: Some(1.0),
            nll: Some(3.0),
        };
        let s2 = loss_total(Stage::NoiseAware, &c, &w).unwrap();
        assert_eq!(s2, 2.3);
        let s3 = loss_total(Stage::Uncertainty, &c, &w).unwrap();
        assert_eq!(s3, 2.3 + 1e-4 * 3.0);
        let missing = LossComponents { nll: None, ..c };
        assert!(loss_total(Stage::Uncertainty, &missing, &w).is_err());
        assert!(loss_total(Stage::NoiseAware, &LossComponents { pos: 1.0, ..Default::default() }, &w).is_err());
    }

    #[test]
    fn every_loss_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (p, q) = (random_seq(&mut rng, 5, 3), random_seq(&mut rng, 5, 3));
        let (p, q) = (to_tensor(&p), to_tensor(&q));
        let lengths = Tensor::new(vec![1, 5, 3], (0..15).map(|_| rng.random_range(0.1..0.5)).collect()).unwrap();
        let raw = Tensor::new(vec![1, 5, 3, 6], (0..90).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let canon = [0.0, 0.3, 0.2];
        let h = 1e-5;
        type B = fn(&mut Graph<f64>, &[crate::diffcore::Var]) -> Result<crate::diffcore::Var>;
        let cases: [(&str, B); 4] = [
            ("pos", |g, v| graph::position(g, v[0], v[1])),
            ("vel", |g, v| graph::velocity(g, v[0], v[1])),
            ("accel", |g, v| graph::acceleration(g, v[0], v[1])),
            ("nll", |g, v| graph::nll(g, v[0], v[1], v[2])),
        ];
        for (name, f) in cases {
            let e = check_gradients(f, &[p.clone(), q.clone(), raw.clone()], h, None).unwrap();
            assert!(e.max_rel_error < 1e-4, "{name}: {}", e.max_rel_error);
        }
        let e = check_gradients(|g, v| graph::bone(g, v[0], &canon), &[lengths.clone()], h, None).unwrap();
        assert!(e.max_rel_error < 1e-4);
        let w = LossWeights::default();
        let e = check_gradients(
            |g, v| Ok(graph::total(g, Stage::Uncertainty, v[0], v[1], Some(v[2]), &canon, Some(v[3]), &w)?.0),
            &[p, q, lengths, raw],
            h,
            None,
        )
        .unwrap();
        assert!(e.max_rel_error < 1e-4);
    }
}

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::PoseSequence;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavgolParams {
    pub window: usize,
    pub order: usize,
}

impl Default for SavgolParams {
    fn default() -> Self {
        Self { window: 7, order: 2 }
    }
}

/// Weights that evaluate the least-squares polynomial of degree `order`, fitted to
/// `window` samples at offsets `-h..=h`, at offset `at`. Row `i` of the result holds
/// the weights for `at = i - h`, so row `h` is the classic center filter.
pub fn savgol_coefficients(window: usize, order: usize) -> Result<Vec<Vec<f64>>> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::Config(format!("window must be odd, got {window}")));
    }
    if order >= window {
        return Err(Error::Config(format!(
            "polynomial order {order} must be below the window {window}"
        )));
    }
    let h = (window / 2) as f64;
    let vander = DMatrix::from_fn(window, order + 1, |k, m| (k as f64 - h).powi(m as i32));
    let pinv = vander
        .svd(true, true)
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Config(format!("savgol fit: {e}")))?;
    Ok((0..window)
        .map(|i| {
            let s = i as f64 - h;
            (0..window)
                .map(|k| (0..=order).map(|m| s.powi(m as i32) * pinv[(m, k)]).sum())
                .collect()
        })
        .collect())
}

fn effective_params(frames: usize, p: SavgolParams) -> SavgolParams {
    if frames >= p.window {
        return p;
    }
    let window = if frames % 2 == 1 { frames } else { frames.saturating_sub(1) }.max(1);
    let order = p.order.min(window - 1);
    log::warn!(
        "savgol: {frames} frames is shorter than window {}; using window {window}, order {order}",
        p.window
    );
    SavgolParams { window, order }
}

/// Savitzky-Golay smoothing of every joint coordinate over time.
///
/// Interior samples use the centered fit. The first and last `window / 2` samples
/// are evaluated on the polynomial fitted to the first or last full window.
/// Sequences shorter than the window fall back to the largest odd window that fits.
pub fn savgol_smooth<T: Real>(seq: &PoseSequence<T>, params: SavgolParams) -> Result<PoseSequence<T>> {
    if params.order >= params.window || params.window % 2 == 0 {
        return Err(Error::Config(format!(
            "invalid savgol window {} / order {}",
            params.window, params.order
        )));
    }
    let frames = seq.frames();
    if frames == 0 || params.window == 1 {
        return Ok(seq.clone());
    }
    let p = effective_params(frames, params);
    let coeffs = savgol_coefficients(p.window, p.order)?;
    let half = p.window / 2;
    let width = seq.joints() * 3;
    let src = seq.as_slice();
    let mut out = seq.clone();
    let dst = out.as_mut_slice();
    for t in 0..frames {
        let (start, row) = if t < half {
            (0, t)
        } else if t + half >= frames {
            (frames - p.window, t + p.window - frames)
        } else {
            (t - half, half)
        };
        let w = &coeffs[row];
        for c in 0..width {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * src[(start + k) * width + c].to_f64_lossy();
            }
            dst[t * width + c] = T::lit(acc);
        }
    }
    Ok(out)
}

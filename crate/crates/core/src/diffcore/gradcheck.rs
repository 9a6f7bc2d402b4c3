use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over probed coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
}

/// Compares reverse-mode gradients with central differences.
///
/// `build` receives a fresh graph plus one variable per entry of `inputs` and
/// must return a scalar node. Every coordinate is probed when `max_coords` is
/// `None`; otherwise an evenly strided subset of at most `max_coords` per input.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let root = build(&mut g, &vars)?;
        let v = g
            .value(root)
            .item()
            .ok_or_else(|| Error::NonScalarRoot(g.shape(root).to_vec()))?;
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during gradient probing".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.len();
        let step = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(step) {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coordinates_checked: checked,
    })
}

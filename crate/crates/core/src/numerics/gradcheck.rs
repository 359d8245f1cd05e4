//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

/// Compare tape gradients of a scalar-valued `build` against central
/// differences with step `h`. Returns the worst relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|)` over all inputs, measured
/// on the full gradient vector of each input.
pub fn check_gradients<F>(inputs: &[Tensor4], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let eval = |perturbed: &[Tensor4]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(inputs[k].shape()));
        let mut numeric = Tensor4::zeros(inputs[k].shape());
        let mut work = inputs.to_vec();
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * h);
        }
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::NonFinite("gradient check".into()));
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn norm(t: &Tensor4) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

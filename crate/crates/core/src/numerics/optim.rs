use std::collections::BTreeMap;

use super::tensor::Tensor4;
use crate::error::{shape_err, Error, Result};

/// Momentum SGD driven by a polynomial learning-rate decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub momentum: f64,
    pub iteration: u64,
    pub total_iterations: u64,
    pub poly_power: f64,
}

impl OptimizerState {
    pub fn new(base_lr: f64, momentum: f64, total_iterations: u64, poly_power: f64) -> Result<Self> {
        if !(base_lr >= 0.0) || !(0.0..1.0).contains(&momentum) || !(poly_power > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "optimizer: lr {base_lr}, momentum {momentum}, power {poly_power}"
            )));
        }
        Ok(Self {
            base_lr,
            momentum,
            iteration: 0,
            total_iterations,
            poly_power,
        })
    }

    /// `base_lr * (1 - iteration / total)^power`, clamped at zero past the end.
    pub fn effective_lr(&self) -> f64 {
        if self.total_iterations == 0 {
            return 0.0;
        }
        let frac = (self.iteration as f64 / self.total_iterations as f64).min(1.0);
        self.base_lr * (1.0 - frac).powf(self.poly_power)
    }
}

/// Momentum buffers keyed by parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub state: Option<OptimizerState>,
    pub velocity: BTreeMap<String, Tensor4>,
}

impl Sgd {
    pub fn new(state: OptimizerState) -> Self {
        Self {
            state: Some(state),
            velocity: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &OptimizerState {
        self.state.as_ref().expect("optimizer state")
    }

    /// Apply one update to `param` (`v = mu*v + g; p -= lr*v`). Does not advance the schedule.
    pub fn update(&mut self, name: &str, param: &mut Tensor4, grad: &Tensor4) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(shape_err(
                "sgd_step",
                format!("{name}: param {} grad {}", param.shape(), grad.shape()),
            ));
        }
        let st = self.state.as_ref().expect("optimizer state");
        let lr = st.effective_lr();
        let mu = st.momentum;
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor4::zeros(grad.shape()));
        for ((p, g), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(v.data_mut())
        {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }

    pub fn advance(&mut self) {
        if let Some(s) = &mut self.state {
            s.iteration += 1;
        }
    }
}

/// Update every `(name, param, grad)` triple, then advance the schedule by one iteration.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor4, &'a Tensor4)>,
    opt: &mut Sgd,
) -> Result<()> {
    for (name, p, g) in params {
        opt.update(name, p, g)?;
    }
    opt.advance();
    Ok(())
}

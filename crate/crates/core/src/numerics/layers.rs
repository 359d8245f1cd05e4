use rand::Rng;

use super::graph::{BnMode, Graph, Var};
use super::kernels::{self, ConvGeometry};
use super::tensor::{Shape4, Tensor4};
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Trainable leaves registered while recording a forward pass, keyed by
/// parameter path (e.g. `enc0.b1.branch_b.conv.weight`).
#[derive(Default)]
pub struct Bindings {
    entries: Vec<(String, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register `value` on the tape: as a trainable leaf when `trainable`, as a
    /// constant otherwise.
    pub fn bind(&mut self, g: &mut Graph, name: String, value: &Tensor4, trainable: bool) -> Var {
        if trainable {
            let v = g.param(value.clone());
            self.entries.push((name, v));
            v
        } else {
            g.constant(value.clone())
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    /// `out_ch x in_ch x kh x kw`
    pub weight: Tensor4,
    /// `1 x out_ch x 1 x 1`
    pub bias: Tensor4,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Tensor4::zeros(Shape4::new(out_ch, in_ch, kernel, kernel)),
            bias: Tensor4::zeros(Shape4::new(1, out_ch, 1, 1)),
            stride,
            padding,
        }
    }

    /// He-uniform weights, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Tensor4::uniform(Shape4::new(out_ch, in_ch, kernel, kernel), bound, rng),
            bias: Tensor4::zeros(Shape4::new(1, out_ch, 1, 1)),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// `(in, out, kh, kw, stride, padding)`, the hyper-shape two branches must share.
    pub fn hyper_shape(&self) -> (usize, usize, usize, usize, usize, usize) {
        let (kh, kw) = self.kernel();
        (self.in_channels(), self.out_channels(), kh, kw, self.stride, self.padding)
    }

    pub fn record(&self, g: &mut Graph, x: Var, binds: &mut Bindings, prefix: &str, trainable: bool) -> Result<Var> {
        let w = binds.bind(g, format!("{prefix}.weight"), &self.weight, trainable);
        let b = binds.bind(g, format!("{prefix}.bias"), &self.bias, trainable);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

pub fn conv2d_forward(x: &Tensor4, p: &Conv2dParams) -> Result<Tensor4> {
    kernels::conv2d_forward(x, &p.weight, Some(&p.bias), p.geometry())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor4,
    pub beta: Tensor4,
    pub running_mean: Tensor4,
    pub running_var: Tensor4,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(ch: usize) -> Self {
        Self {
            gamma: Tensor4::vector(vec![1.0; ch]),
            beta: Tensor4::vector(vec![0.0; ch]),
            running_mean: Tensor4::vector(vec![0.0; ch]),
            running_var: Tensor4::vector(vec![1.0; ch]),
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    /// Exact identity in eval mode: unit scale, zero shift, unit variance and `eps = 0`.
    pub fn identity(ch: usize) -> Self {
        Self {
            eps: 0.0,
            ..Self::new(ch)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// `sqrt(running_var + eps)` per channel.
    pub fn sigma(&self) -> Vec<f64> {
        self.running_var
            .data()
            .iter()
            .map(|v| (v + self.eps).sqrt())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            if t.numel() != c {
                return Err(shape_err("batch_norm", "parameter lengths differ"));
            }
        }
        if self
            .running_var
            .data()
            .iter()
            .any(|v| !(v + self.eps > 0.0))
        {
            return Err(Error::InvalidArgument(
                "running_var + eps must be positive".into(),
            ));
        }
        Ok(())
    }

    fn running_mode(&self) -> BnMode {
        BnMode::Running {
            mean: self.running_mean.data().to_vec(),
            var: self.running_var.data().to_vec(),
        }
    }

    /// Fold batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }

    /// Record on the tape. With `batch_stats` the batch moments normalize the
    /// input and the running statistics are updated.
    pub fn record(
        &mut self,
        g: &mut Graph,
        x: Var,
        binds: &mut Bindings,
        prefix: &str,
        trainable: bool,
        batch_stats: bool,
    ) -> Result<Var> {
        let s = g.shape(x);
        if s.c != self.channels() {
            return Err(shape_err(
                "batch_norm",
                format!("input has {} channels, norm has {}", s.c, self.channels()),
            ));
        }
        let gamma = binds.bind(g, format!("{prefix}.gamma"), &self.gamma, trainable);
        let beta = binds.bind(g, format!("{prefix}.beta"), &self.beta, trainable);
        let mode = if batch_stats {
            BnMode::Batch
        } else {
            self.running_mode()
        };
        let (y, moments) = g.batch_norm(x, gamma, beta, mode, self.eps)?;
        if let Some((mean, var)) = moments {
            self.update_running(&mean, &var, s.n * s.plane());
        }
        Ok(y)
    }

    /// Eval-mode recording that never touches the running statistics.
    pub fn record_eval(&self, g: &mut Graph, x: Var, binds: &mut Bindings, prefix: &str, trainable: bool) -> Result<Var> {
        let s = g.shape(x);
        if s.c != self.channels() {
            return Err(shape_err(
                "batch_norm",
                format!("input has {} channels, norm has {}", s.c, self.channels()),
            ));
        }
        let gamma = binds.bind(g, format!("{prefix}.gamma"), &self.gamma, trainable);
        let beta = binds.bind(g, format!("{prefix}.beta"), &self.beta, trainable);
        Ok(g.batch_norm(x, gamma, beta, self.running_mode(), self.eps)?.0)
    }
}

/// Plain-tensor batch normalization. In training mode batch statistics are
/// used and the running statistics updated.
pub fn batchnorm_forward(x: &Tensor4, p: &mut BatchNormParams, training: bool) -> Result<Tensor4> {
    p.validate()?;
    let s = x.shape();
    if s.c != p.channels() {
        return Err(shape_err(
            "batch_norm",
            format!("input has {} channels, norm has {}", s.c, p.channels()),
        ));
    }
    let (mean, var) = if training {
        kernels::channel_moments(x)
    } else {
        (p.running_mean.data().to_vec(), p.running_var.data().to_vec())
    };
    let scale: Vec<f64> = var
        .iter()
        .zip(p.gamma.data())
        .map(|(v, g)| g / (v + p.eps).sqrt())
        .collect();
    let shift: Vec<f64> = mean
        .iter()
        .zip(&scale)
        .zip(p.beta.data())
        .map(|((m, s), b)| b - m * s)
        .collect();
    let y = kernels::channel_affine(x, &scale, &shift);
    if training {
        p.update_running(&mean, &var, s.n * s.plane());
    }
    Ok(y)
}

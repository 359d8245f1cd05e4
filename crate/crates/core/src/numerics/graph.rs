//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order, so `backward` simply walks the node list in
//! reverse. Leaf gradients accumulate across `backward` calls until
//! [`Graph::zero_grad`] is called; intermediate gradients are recomputed on
//! every call.

use super::kernels::{self, ConvGeometry, Window};
use super::tensor::{Shape4, Tensor4};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Instrumentation counters, updated by every convolution recorded on the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub convolutions: usize,
    pub multiply_accumulates: u64,
}

#[derive(Clone, Debug)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: Vec<f64>, var: Vec<f64> },
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor4,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    ChannelScale {
        x: Var,
        scale: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    SumAll(Var),
    SumPerSample(Var),
    MeanAll(Var),
    AvgPool {
        x: Var,
        win: Window,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelPool {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    Softmax(Var),
    LogGroupSoftmax {
        x: Var,
        groups: Vec<Vec<usize>>,
        denom: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor4,
    },
    Upsample(Var),
}

struct Node {
    value: Tensor4,
    requires_grad: bool,
    grad: Option<Tensor4>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    stats: OpStats,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor4) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor4> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn stats(&self) -> OpStats {
        self.stats
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor4, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa} vs {sb}")));
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geo = ConvGeometry { stride, padding };
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            geo,
        )?;
        let ws = self.shape(w);
        self.stats.convolutions += 1;
        self.stats.multiply_accumulates += (out.numel() * ws.c * ws.h * ws.w) as u64;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, rg, Op::Conv2d { x, w, b, geo }))
    }

    /// Batch normalization with learnable `gamma`/`beta` of shape `1 x C x 1 x 1`.
    ///
    /// Returns the output and, in [`BnMode::Batch`], the batch mean and biased
    /// variance so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let s = self.shape(x);
        let cs = Shape4::new(1, s.c, 1, 1);
        self.value(gamma).expect_shape(cs, "batch_norm gamma")?;
        self.value(beta).expect_shape(cs, "batch_norm beta")?;
        let (mean, var, batch) = match mode {
            BnMode::Batch => {
                let (m, v) = kernels::channel_moments(self.value(x));
                (m, v, true)
            }
            BnMode::Running { mean, var } => {
                if mean.len() != s.c || var.len() != s.c {
                    return Err(shape_err("batch_norm", "running statistics length"));
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = mean.iter().zip(&inv_std).map(|(m, i)| -m * i).collect();
        let xhat = kernels::channel_affine(self.value(x), &inv_std, &shift);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let out = kernels::channel_affine(&xhat, &g, &b);
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: batch,
            },
        );
        Ok((v, batch.then_some((mean, var))))
    }

    /// Multiply every channel by a constant factor.
    pub fn channel_scale(&mut self, x: Var, scale: Vec<f64>) -> Result<Var> {
        let s = self.shape(x);
        if scale.len() != s.c {
            return Err(shape_err(
                "channel_scale",
                format!("{} factors for {} channels", scale.len(), s.c),
            ));
        }
        let out = kernels::channel_affine(self.value(x), &scale, &vec![0.0; s.c]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::ChannelScale { x, scale }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Scale(a, s))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Square(a))
    }

    /// Elementwise square root. The derivative at zero is taken as zero, which
    /// is the subgradient the distance terms need when two features coincide.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0).sqrt());
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x < 0.0 { 0.0 } else { x });
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor4::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::SumAll(a))
    }

    /// Sum over `(c, h, w)` for every batch element, giving `N x 1 x 1 x 1`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let per = s.c * s.plane();
        let sums = self
            .value(a)
            .data()
            .chunks(per)
            .map(|c| c.iter().sum())
            .collect();
        let out = Tensor4::from_vec(Shape4::new(s.n, 1, 1, 1), sums).expect("batch sums");
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::SumPerSample(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor4::scalar(t.sum() / t.numel() as f64);
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::MeanAll(a))
    }

    pub fn avg_pool2d(&mut self, x: Var, win: Window) -> Result<Var> {
        let out = kernels::avg_pool2d(self.value(x), win)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::AvgPool { x, win }))
    }

    pub fn max_pool2d(&mut self, x: Var, win: Window) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d(self.value(x), win)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::MaxPool { x, argmax }))
    }

    pub fn channel_avg_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let out = kernels::channel_avg_pool(self.value(x), kernel, stride)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::ChannelPool { x, kernel, stride }))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = kernels::softmax_channels(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Softmax(x))
    }

    /// For every pixel and group `g`: `log(sum_{k in g} e^{x_k}) - log(sum_{k in denom} e^{x_k})`.
    ///
    /// With `denom` covering all channels this is the log of the summed
    /// softmax probability of each group.
    pub fn log_group_softmax(
        &mut self,
        x: Var,
        groups: Vec<Vec<usize>>,
        denom: Vec<usize>,
    ) -> Result<Var> {
        let s = self.shape(x);
        if groups.is_empty() || denom.is_empty() {
            return Err(Error::InvalidArgument("empty channel grouping".into()));
        }
        for &k in groups.iter().flatten().chain(&denom) {
            if k >= s.c {
                return Err(shape_err(
                    "log_group_softmax",
                    format!("channel {k} out of range for {} channels", s.c),
                ));
            }
        }
        if groups.iter().any(|g| g.is_empty()) {
            return Err(Error::InvalidArgument("empty channel group".into()));
        }
        let os = Shape4::new(s.n, groups.len(), s.h, s.w);
        let mut out = Tensor4::zeros(os);
        let xv = self.value(x);
        let plane = s.plane();
        for n in 0..s.n {
            for i in 0..plane {
                let at = |c: usize| xv.data()[(n * s.c + c) * plane + i];
                let z = kernels::log_sum_exp(denom.iter().map(|&c| at(c)));
                for (gi, g) in groups.iter().enumerate() {
                    let lg = kernels::log_sum_exp(g.iter().map(|&c| at(c)));
                    out.data_mut()[(n * os.c + gi) * plane + i] = lg - z;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::LogGroupSoftmax { x, groups, denom }))
    }

    /// `sum(x * weights)` with constant weights, giving a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor4) -> Result<Var> {
        weights.expect_shape(self.shape(x), "weighted_sum")?;
        let v: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| if *b == 0.0 { 0.0 } else { a * b })
            .sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor4::scalar(v), rg, Op::WeightedSum { x, weights }))
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let out = kernels::upsample_bilinear(self.value(x), out_h, out_w);
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Upsample(x))
    }

    /// Propagate gradients from a scalar `loss` to every reachable leaf that
    /// requires a gradient, adding into the leaf's accumulated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor4>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(Tensor4::full(ls, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let contributions = self.local_grads(i, &dy);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&dy),
                    slot => *slot = Some(dy),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, dy: &Tensor4) -> Vec<(Var, Tensor4)> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, geo } => {
                let need = (rg(*x), rg(*w), b.is_some_and(rg));
                let g = kernels::conv2d_backward(val(*x), val(*w), dy, *geo, need);
                let mut out = Vec::new();
                if let Some(dx) = g.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = g.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = xhat.shape();
                let plane = s.plane();
                let m = (s.n * plane) as f64;
                let gam = val(*gamma).data();
                let mut sum_dy = vec![0.0; s.c];
                let mut sum_dy_xhat = vec![0.0; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let o = (n * s.c + c) * plane;
                        for j in o..o + plane {
                            sum_dy[c] += dy.data()[j];
                            sum_dy_xhat[c] += dy.data()[j] * xhat.data()[j];
                        }
                    }
                }
                let mut out = Vec::new();
                if rg(*x) {
                    let mut dx = Tensor4::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let o = (n * s.c + c) * plane;
                            let k = gam[c] * inv_std[c];
                            for j in o..o + plane {
                                dx.data_mut()[j] = if *batch_stats {
                                    k * (dy.data()[j]
                                        - sum_dy[c] / m
                                        - xhat.data()[j] * sum_dy_xhat[c] / m)
                                } else {
                                    k * dy.data()[j]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, Tensor4::vector(sum_dy_xhat)));
                }
                if rg(*beta) {
                    out.push((*beta, Tensor4::vector(sum_dy)));
                }
                out
            }
            Op::ChannelScale { x, scale } => {
                let zeros = vec![0.0; scale.len()];
                vec![(*x, kernels::channel_affine(dy, scale, &zeros))]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.map(|v| -v))],
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if rg(*a) {
                    out.push((*a, dy.zip_map(val(*b), |g, y| g * y).unwrap()));
                }
                if rg(*b) {
                    out.push((*b, dy.zip_map(val(*a), |g, x| g * x).unwrap()));
                }
                out
            }
            Op::Scale(a, s) => vec![(*a, dy.map(|g| g * s))],
            Op::Square(a) => vec![(*a, dy.zip_map(val(*a), |g, x| 2.0 * x * g).unwrap())],
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                vec![(
                    *a,
                    dy.zip_map(y, |g, r| if r > 0.0 { g / (2.0 * r) } else { 0.0 })
                        .unwrap(),
                )]
            }
            Op::Relu(a) => vec![(
                *a,
                dy.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })
                    .unwrap(),
            )],
            Op::SumAll(a) => vec![(*a, Tensor4::full(val(*a).shape(), dy.item()))],
            Op::SumPerSample(a) => {
                let s = val(*a).shape();
                let per = s.c * s.plane();
                let mut g = Tensor4::zeros(s);
                for (n, chunk) in g.data_mut().chunks_mut(per).enumerate() {
                    chunk.fill(dy.data()[n]);
                }
                vec![(*a, g)]
            }
            Op::MeanAll(a) => {
                let t = val(*a);
                vec![(*a, Tensor4::full(t.shape(), dy.item() / t.numel() as f64))]
            }
            Op::AvgPool { x, win } => {
                vec![(*x, kernels::avg_pool2d_backward(dy, val(*x).shape(), *win))]
            }
            Op::MaxPool { x, argmax } => {
                let mut g = Tensor4::zeros(val(*x).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    g.data_mut()[src] += dy.data()[o];
                }
                vec![(*x, g)]
            }
            Op::ChannelPool { x, kernel, stride } => vec![(
                *x,
                kernels::channel_avg_pool_backward(dy, val(*x).shape(), *kernel, *stride),
            )],
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let s = y.shape();
                let plane = s.plane();
                let mut g = Tensor4::zeros(s);
                for n in 0..s.n {
                    for p in 0..plane {
                        let idx = |c: usize| (n * s.c + c) * plane + p;
                        let dot: f64 = (0..s.c).map(|c| dy.data()[idx(c)] * y.data()[idx(c)]).sum();
                        for c in 0..s.c {
                            g.data_mut()[idx(c)] = y.data()[idx(c)] * (dy.data()[idx(c)] - dot);
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::LogGroupSoftmax { x, groups, denom } => {
                let xv = val(*x);
                let s = xv.shape();
                let plane = s.plane();
                let gc = groups.len();
                let mut g = Tensor4::zeros(s);
                for n in 0..s.n {
                    for p in 0..plane {
                        let at = |c: usize| xv.data()[(n * s.c + c) * plane + p];
                        let z = kernels::log_sum_exp(denom.iter().map(|&c| at(c)));
                        let mut total = 0.0;
                        for (gi, grp) in groups.iter().enumerate() {
                            let d = dy.data()[(n * gc + gi) * plane + p];
                            total += d;
                            if d == 0.0 {
                                continue;
                            }
                            let lg = kernels::log_sum_exp(grp.iter().map(|&c| at(c)));
                            for &c in grp {
                                g.data_mut()[(n * s.c + c) * plane + p] += d * (at(c) - lg).exp();
                            }
                        }
                        if total != 0.0 {
                            for &c in denom {
                                g.data_mut()[(n * s.c + c) * plane + p] -= total * (at(c) - z).exp();
                            }
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::WeightedSum { x, weights } => vec![(*x, weights.map(|w| w * dy.item()))],
            Op::Upsample(x) => vec![(*x, kernels::upsample_bilinear_backward(dy, val(*x).shape()))],
        }
    }
}

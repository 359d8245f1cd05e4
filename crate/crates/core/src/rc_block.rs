//! Representation-compensation block: two parallel conv + batch-norm branches
//! whose outputs are fused before the activation.
//!
//! Training blends the branches with a random channel-wise weight drawn from
//! `{0, 0.5, 1}`; inference uses 0.5 everywhere, which lets the pair be folded
//! into a single convolution. At every step boundary the pair is folded into
//! one frozen branch and the trainable branch carries on from where it was.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    conv2d_forward, BatchNormParams, Bindings, Conv2dParams, Graph, Tensor4, Var,
};

/// Role of a stored tensor, used for optimizer updates, hashing and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Frozen,
    /// Running normalization statistics.
    Statistic,
}

/// Visitor over named tensors.
pub type ParamVisitor<'a> = dyn FnMut(&str, &Tensor4, ParamKind) + 'a;
pub type ParamVisitorMut<'a> = dyn FnMut(&str, &mut Tensor4, ParamKind) + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormStats {
    /// Normalize trainable branches with batch statistics and update their running estimates.
    Batch,
    /// Use running statistics everywhere.
    Running,
}

/// One `conv -> norm` path.
#[derive(Clone, Debug, PartialEq)]
pub struct RcBranch {
    pub conv: Conv2dParams,
    pub norm: BatchNormParams,
    pub trainable: bool,
    /// The norm is a fixed affine map (running statistics, untrained scale and
    /// shift). Set for branches produced by merging.
    pub norm_fixed: bool,
}

impl RcBranch {
    pub fn new(conv: Conv2dParams, norm: BatchNormParams) -> Self {
        Self {
            conv,
            norm,
            trainable: true,
            norm_fixed: false,
        }
    }

    pub fn kaiming<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2dParams::kaiming(in_ch, out_ch, kernel, stride, kernel / 2, rng);
        Self::new(conv, BatchNormParams::new(out_ch))
    }

    /// A merged convolution wrapped with an exact identity norm.
    pub fn from_merged(merged: MergedConv, trainable: bool) -> Self {
        let ch = merged.conv.out_channels();
        Self {
            conv: merged.conv,
            norm: BatchNormParams::identity(ch),
            trainable,
            norm_fixed: true,
        }
    }

    /// Eval-mode output on plain tensors.
    pub fn eval(&self, x: &Tensor4) -> Result<Tensor4> {
        let y = conv2d_forward(x, &self.conv)?;
        let mut norm = self.norm.clone();
        crate::numerics::batchnorm_forward(&y, &mut norm, false)
    }

    pub fn record(
        &mut self,
        g: &mut Graph,
        x: Var,
        binds: &mut Bindings,
        prefix: &str,
        stats: NormStats,
    ) -> Result<Var> {
        let y = self
            .conv
            .record(g, x, binds, &format!("{prefix}.conv"), self.trainable)?;
        let norm_trainable = self.trainable && !self.norm_fixed;
        let norm_prefix = format!("{prefix}.norm");
        if norm_trainable && stats == NormStats::Batch {
            self.norm.record(g, y, binds, &norm_prefix, true, true)
        } else {
            self.norm
                .record_eval(g, y, binds, &norm_prefix, norm_trainable)
        }
    }

    pub fn record_eval(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut scratch = Bindings::new();
        let y = self.conv.record(g, x, &mut scratch, "", false)?;
        self.norm.record_eval(g, y, &mut scratch, "", false)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        let kind = if self.trainable {
            ParamKind::Trainable
        } else {
            ParamKind::Frozen
        };
        let norm_kind = if self.norm_fixed {
            ParamKind::Frozen
        } else {
            kind
        };
        f(&format!("{prefix}.conv.weight"), &self.conv.weight, kind);
        f(&format!("{prefix}.conv.bias"), &self.conv.bias, kind);
        f(&format!("{prefix}.norm.gamma"), &self.norm.gamma, norm_kind);
        f(&format!("{prefix}.norm.beta"), &self.norm.beta, norm_kind);
        f(
            &format!("{prefix}.norm.running_mean"),
            &self.norm.running_mean,
            ParamKind::Statistic,
        );
        f(
            &format!("{prefix}.norm.running_var"),
            &self.norm.running_var,
            ParamKind::Statistic,
        );
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        let kind = if self.trainable {
            ParamKind::Trainable
        } else {
            ParamKind::Frozen
        };
        let norm_kind = if self.norm_fixed {
            ParamKind::Frozen
        } else {
            kind
        };
        f(&format!("{prefix}.conv.weight"), &mut self.conv.weight, kind);
        f(&format!("{prefix}.conv.bias"), &mut self.conv.bias, kind);
        f(&format!("{prefix}.norm.gamma"), &mut self.norm.gamma, norm_kind);
        f(&format!("{prefix}.norm.beta"), &mut self.norm.beta, norm_kind);
        f(
            &format!("{prefix}.norm.running_mean"),
            &mut self.norm.running_mean,
            ParamKind::Statistic,
        );
        f(
            &format!("{prefix}.norm.running_var"),
            &mut self.norm.running_var,
            ParamKind::Statistic,
        );
    }
}

/// Channel-wise branch weights `eta`; the first branch gets `eta`, the second `1 - eta`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropPathMask {
    eta: Vec<f64>,
}

impl DropPathMask {
    pub const LEVELS: [f64; 3] = [0.0, 0.5, 1.0];

    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.iter().any(|e| !Self::LEVELS.contains(e)) {
            return Err(Error::InvalidArgument(
                "drop-path weights must lie in {0, 0.5, 1}".into(),
            ));
        }
        Ok(Self { eta })
    }

    pub fn constant(channels: usize, value: f64) -> Self {
        Self {
            eta: vec![value; channels],
        }
    }

    /// Inference weighting.
    pub fn half(channels: usize) -> Self {
        Self::constant(channels, 0.5)
    }

    /// Independent uniform draws from `{0, 0.5, 1}`.
    pub fn sample<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            eta: (0..channels)
                .map(|_| Self::LEVELS[rng.gen_range(0..3)])
                .collect(),
        }
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockMode {
    Training,
    Inference,
}

/// Which structural operations the step transition applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransitionOps {
    pub merge: bool,
    pub freeze: bool,
}

impl Default for TransitionOps {
    fn default() -> Self {
        Self {
            merge: true,
            freeze: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcBlock {
    pub branch_a: RcBranch,
    pub branch_b: RcBranch,
    pub fusion_weights: (f64, f64),
    pub mode: BlockMode,
}

impl RcBlock {
    pub fn new(branch_a: RcBranch, branch_b: RcBranch) -> Result<Self> {
        if branch_a.conv.hyper_shape() != branch_b.conv.hyper_shape() {
            return Err(shape_err(
                "rc_block",
                format!(
                    "branch shapes {:?} vs {:?}",
                    branch_a.conv.hyper_shape(),
                    branch_b.conv.hyper_shape()
                ),
            ));
        }
        if branch_a.norm.channels() != branch_b.norm.channels() {
            return Err(shape_err("rc_block", "norm channel counts differ"));
        }
        Ok(Self {
            branch_a,
            branch_b,
            fusion_weights: (0.5, 0.5),
            mode: BlockMode::Training,
        })
    }

    /// Fresh step-0 block: both branches trainable, independently initialized.
    pub fn kaiming<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let a = RcBranch::kaiming(in_ch, out_ch, kernel, stride, rng);
        let b = RcBranch::kaiming(in_ch, out_ch, kernel, stride, rng);
        Self::new(a, b).expect("branches share a shape")
    }

    /// Fresh step-0 block whose two branches start from the same weights.
    pub fn twin(branch: RcBranch) -> Self {
        Self::new(branch.clone(), branch).expect("branches share a shape")
    }

    pub fn out_channels(&self) -> usize {
        self.branch_a.conv.out_channels()
    }

    /// Record `eta * a(x) + (1 - eta) * b(x)` on the tape.
    pub fn record_masked(
        &mut self,
        g: &mut Graph,
        x: Var,
        mask: &DropPathMask,
        binds: &mut Bindings,
        prefix: &str,
        stats: NormStats,
    ) -> Result<Var> {
        if mask.len() != self.out_channels() {
            return Err(shape_err(
                "rc_forward_train",
                format!("mask of {} for {} channels", mask.len(), self.out_channels()),
            ));
        }
        let ya = self
            .branch_a
            .record(g, x, binds, &format!("{prefix}.branch_a"), stats)?;
        let yb = self
            .branch_b
            .record(g, x, binds, &format!("{prefix}.branch_b"), stats)?;
        let wa = mask.eta().to_vec();
        let wb: Vec<f64> = mask.eta().iter().map(|e| 1.0 - e).collect();
        let ya = g.channel_scale(ya, wa)?;
        let yb = g.channel_scale(yb, wb)?;
        g.add(ya, yb)
    }

    /// Eval-mode fusion recorded on the tape with constant parameters.
    pub fn record_eval(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let ya = self.branch_a.record_eval(g, x)?;
        let yb = self.branch_b.record_eval(g, x)?;
        let (wa, wb) = self.fusion_weights;
        let ya = g.scale(ya, wa);
        let yb = g.scale(yb, wb);
        g.add(ya, yb)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.branch_a.visit(&format!("{prefix}.branch_a"), f);
        self.branch_b.visit(&format!("{prefix}.branch_b"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        self.branch_a.visit_mut(&format!("{prefix}.branch_a"), f);
        self.branch_b.visit_mut(&format!("{prefix}.branch_b"), f);
    }
}

/// Pre-activation training output `eta * a(x) + (1 - eta) * b(x)` with batch
/// statistics in the trainable norms. Gradients reach trainable branch
/// parameters only; their names are collected in `binds`.
pub fn rc_forward_train(
    block: &mut RcBlock,
    g: &mut Graph,
    x: Var,
    mask: &DropPathMask,
    binds: &mut Bindings,
    prefix: &str,
) -> Result<Var> {
    block.record_masked(g, x, mask, binds, prefix, NormStats::Batch)
}

/// Inference output `w_a * a(x) + w_b * b(x)` with running statistics.
pub fn rc_forward_eval(block: &RcBlock, x: &Tensor4) -> Result<Tensor4> {
    let ya = block.branch_a.eval(x)?;
    let yb = block.branch_b.eval(x)?;
    let (wa, wb) = block.fusion_weights;
    ya.zip_map(&yb, |a, b| wa * a + wb * b)
}

/// Fold an eval-mode norm into the preceding convolution:
/// `W' = (gamma / sigma) W`, `b' = gamma (b - mu) / sigma + beta`, `sigma = sqrt(var + eps)`.
pub fn fuse_conv_bn(conv: &Conv2dParams, norm: &BatchNormParams) -> Conv2dParams {
    let sigma = norm.sigma();
    let mut out = conv.clone();
    let ws = conv.weight.shape();
    let per = ws.c * ws.h * ws.w;
    for oc in 0..ws.n {
        let k = norm.gamma.data()[oc] / sigma[oc];
        for v in &mut out.weight.data_mut()[oc * per..(oc + 1) * per] {
            *v *= k;
        }
        out.bias.data_mut()[oc] = (norm.gamma.data()[oc] * conv.bias.data()[oc]
            - norm.gamma.data()[oc] * norm.running_mean.data()[oc])
            / sigma[oc]
            + norm.beta.data()[oc];
    }
    out
}

/// A single convolution equivalent to the weighted pair of branches.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedConv {
    pub conv: Conv2dParams,
}

impl MergedConv {
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        conv2d_forward(x, &self.conv)
    }

    pub fn record(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut scratch = Bindings::new();
        self.conv.record(g, x, &mut scratch, "", false)
    }
}

/// `W = w_a W_a' + w_b W_b'`, `b = w_a b_a' + w_b b_b'` over the norm-fused branches.
pub fn merge_branches(block: &RcBlock, weights: (f64, f64)) -> MergedConv {
    let fa = fuse_conv_bn(&block.branch_a.conv, &block.branch_a.norm);
    let fb = fuse_conv_bn(&block.branch_b.conv, &block.branch_b.norm);
    let (wa, wb) = weights;
    let weight = fa
        .weight
        .zip_map(&fb.weight, |a, b| wa * a + wb * b)
        .expect("branches share a shape");
    let bias = fa
        .bias
        .zip_map(&fb.bias, |a, b| wa * a + wb * b)
        .expect("branches share a shape");
    MergedConv {
        conv: Conv2dParams {
            weight,
            bias,
            stride: fa.stride,
            padding: fa.padding,
        },
    }
}

/// Start-of-step transition: fold both branches (at the block's fusion
/// weights) into a frozen branch with identity norm and keep a copy of the
/// trainable branch.
pub fn step_transition(block: &RcBlock) -> RcBlock {
    step_transition_with(block, TransitionOps::default())
}

/// Transition with individual operations switched off, for ablations.
///
/// Without `merge` the previous branches are carried over unchanged; `freeze`
/// then controls whether the first branch stays trainable.
pub fn step_transition_with(block: &RcBlock, ops: TransitionOps) -> RcBlock {
    let branch_a = if ops.merge {
        RcBranch::from_merged(merge_branches(block, block.fusion_weights), !ops.freeze)
    } else {
        let mut a = block.branch_a.clone();
        a.trainable = !ops.freeze;
        a
    };
    let mut branch_b = block.branch_b.clone();
    branch_b.trainable = true;
    RcBlock {
        branch_a,
        branch_b,
        fusion_weights: block.fusion_weights,
        mode: BlockMode::Training,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_rejects_other_levels() {
        assert!(DropPathMask::new(vec![0.0, 0.5, 1.0]).is_ok());
        assert!(DropPathMask::new(vec![0.3]).is_err());
    }

    #[test]
    fn mask_sampling_covers_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = DropPathMask::sample(300, &mut rng);
        for level in DropPathMask::LEVELS {
            let count = m.eta().iter().filter(|&&e| e == level).count();
            assert!((70..130).contains(&count), "{level}: {count}");
        }
    }

    #[test]
    fn mismatched_branches_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = RcBranch::kaiming(3, 4, 3, 1, &mut rng);
        let b = RcBranch::kaiming(3, 4, 3, 2, &mut rng);
        assert!(RcBlock::new(a, b).is_err());
    }

    #[test]
    fn mask_length_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = RcBlock::kaiming(2, 3, 3, 1, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor4::zeros(Shape4::new(1, 2, 4, 4)));
        let mut binds = Bindings::new();
        let r = rc_forward_train(&mut block, &mut g, x, &DropPathMask::half(2), &mut binds, "b");
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }
}

//! Toy encoder-decoder segmentation network assembled from RC blocks (or
//! plain conv + norm blocks for the non-RC baselines).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Bindings, Conv2dParams, Graph, OpStats, Shape4, Tensor4, Var};
use crate::rc_block::{
    fuse_conv_bn, merge_branches, step_transition_with, DropPathMask, NormStats, ParamKind,
    ParamVisitor, ParamVisitorMut, RcBlock, RcBranch, TransitionOps,
};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub n_blocks: usize,
    pub channels: usize,
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub stages: Vec<StageSpec>,
    pub decoder_channels: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            stages: [16, 32, 64]
                .into_iter()
                .map(|channels| StageSpec {
                    n_blocks: 2,
                    channels,
                    downsample: true,
                })
                .collect(),
            decoder_channels: 32,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("model.stages: at least one stage".into()));
        }
        if self
            .stages
            .iter()
            .any(|s| s.n_blocks == 0 || s.channels == 0)
            || self.decoder_channels == 0
        {
            return Err(Error::Config(
                "model: block counts and channel widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of distillation taps: one per stage plus the decoder.
    pub fn n_taps(&self) -> usize {
        self.stages.len() + 1
    }
}

/// A 3x3 conv + norm unit: either a two-branch RC block or a single branch.
#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Plain(RcBranch),
    Rc(RcBlock),
}

impl Block {
    fn new(in_ch: usize, out_ch: usize, stride: usize, rc: bool, rng: &mut ChaCha8Rng) -> Self {
        if rc {
            Block::Rc(RcBlock::twin(RcBranch::kaiming(in_ch, out_ch, 3, stride, rng)))
        } else {
            Block::Plain(RcBranch::kaiming(in_ch, out_ch, 3, stride, rng))
        }
    }

    fn record_train(&mut self, g: &mut Graph, x: Var, ctx: &mut TrainCtx<'_>, prefix: &str) -> Result<Var> {
        match self {
            Block::Plain(b) => b.record(g, x, &mut ctx.binds, prefix, ctx.stats),
            Block::Rc(b) => {
                let ch = b.out_channels();
                let mask = if ctx.drop_path {
                    DropPathMask::sample(ch, ctx.rng)
                } else {
                    DropPathMask::half(ch)
                };
                b.record_masked(g, x, &mask, &mut ctx.binds, prefix, ctx.stats)
            }
        }
    }

    fn record_eval(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Block::Plain(b) => b.record_eval(g, x),
            Block::Rc(b) => b.record_eval(g, x),
        }
    }

    fn transition(&self, ops: TransitionOps) -> Self {
        match self {
            Block::Plain(b) => Block::Plain(b.clone()),
            Block::Rc(b) => Block::Rc(step_transition_with(b, ops)),
        }
    }

    /// Single equivalent convolution in eval mode.
    fn merged(&self) -> Conv2dParams {
        match self {
            Block::Plain(b) => fuse_conv_bn(&b.conv, &b.norm),
            Block::Rc(b) => merge_branches(b, b.fusion_weights).conv,
        }
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        match self {
            Block::Plain(b) => b.visit(prefix, f),
            Block::Rc(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        match self {
            Block::Plain(b) => b.visit_mut(prefix, f),
            Block::Rc(b) => b.visit_mut(prefix, f),
        }
    }

    /// Every branch with its parameter prefix.
    pub fn branches_mut(&mut self, prefix: &str) -> Vec<(String, &mut RcBranch)> {
        match self {
            Block::Plain(b) => vec![(prefix.to_string(), b)],
            Block::Rc(b) => vec![
                (format!("{prefix}.branch_a"), &mut b.branch_a),
                (format!("{prefix}.branch_b"), &mut b.branch_b),
            ],
        }
    }

    pub fn as_rc(&self) -> Option<&RcBlock> {
        match self {
            Block::Rc(b) => Some(b),
            Block::Plain(_) => None,
        }
    }

    pub fn as_rc_mut(&mut self) -> Option<&mut RcBlock> {
        match self {
            Block::Rc(b) => Some(b),
            Block::Plain(_) => None,
        }
    }
}

/// Per-forward training context.
pub struct TrainCtx<'a> {
    pub binds: Bindings,
    pub rng: &'a mut ChaCha8Rng,
    /// Sample a fresh drop-path mask per RC block; otherwise blend at 0.5.
    pub drop_path: bool,
    pub stats: NormStats,
}

impl<'a> TrainCtx<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, drop_path: bool) -> Self {
        Self {
            binds: Bindings::new(),
            rng,
            drop_path,
            stats: NormStats::Batch,
        }
    }
}

pub struct SegOutput {
    pub logits: Var,
    pub taps: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetwork {
    pub arch: ArchSpec,
    pub stages: Vec<Vec<Block>>,
    pub decoder: Block,
    /// 1x1 classifier over `1 + sum(C_n)` outputs, background first.
    pub head: Conv2dParams,
}

impl SegNetwork {
    pub fn new(arch: &ArchSpec, n_outputs: usize, rc: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        if n_outputs < 2 {
            return Err(Error::InvalidArgument(
                "segmentation head needs background plus at least one class".into(),
            ));
        }
        let mut in_ch = INPUT_CHANNELS;
        let mut stages = Vec::with_capacity(arch.stages.len());
        for spec in &arch.stages {
            let mut blocks = Vec::with_capacity(spec.n_blocks);
            for i in 0..spec.n_blocks {
                let stride = if i == 0 && spec.downsample { 2 } else { 1 };
                blocks.push(Block::new(in_ch, spec.channels, stride, rc, rng));
                in_ch = spec.channels;
            }
            stages.push(blocks);
        }
        let decoder = Block::new(in_ch, arch.decoder_channels, 1, rc, rng);
        let head = Conv2dParams::kaiming(arch.decoder_channels, n_outputs, 1, 1, 0, rng);
        Ok(Self {
            arch: arch.clone(),
            stages,
            decoder,
            head,
        })
    }

    pub fn n_outputs(&self) -> usize {
        self.head.out_channels()
    }

    pub fn uses_rc(&self) -> bool {
        matches!(self.decoder, Block::Rc(_))
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.stages.iter().flatten().chain(std::iter::once(&self.decoder))
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block> {
        self.stages
            .iter_mut()
            .flatten()
            .chain(std::iter::once(&mut self.decoder))
    }

    /// Blocks with their parameter prefixes, in forward order.
    pub fn named_blocks_mut(&mut self) -> Vec<(String, &mut Block)> {
        let mut out = Vec::new();
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                out.push((format!("enc{si}.b{bi}"), block));
            }
        }
        out.push(("dec".to_string(), &mut self.decoder));
        out
    }

    fn check_input(&self, s: Shape4) -> Result<()> {
        if s.c != INPUT_CHANNELS {
            return Err(shape_err(
                "seg_forward",
                format!("expected {INPUT_CHANNELS} input channels, got {}", s.c),
            ));
        }
        Ok(())
    }

    /// Training forward: batch statistics, drop-path masks, trainable leaves
    /// collected in `ctx.binds`.
    pub fn forward_train(&mut self, g: &mut Graph, x: Var, ctx: &mut TrainCtx<'_>) -> Result<SegOutput> {
        let s = g.shape(x);
        self.check_input(s)?;
        let mut h = x;
        let mut taps = Vec::with_capacity(self.arch.n_taps());
        for (si, stage) in self.stages.iter_mut().enumerate() {
            let last = stage.len() - 1;
            for (bi, block) in stage.iter_mut().enumerate() {
                let pre = block.record_train(g, h, ctx, &format!("enc{si}.b{bi}"))?;
                if bi == last {
                    taps.push(pre);
                }
                h = g.relu(pre);
            }
        }
        let pre = self.decoder.record_train(g, h, ctx, "dec")?;
        taps.push(pre);
        let h = g.relu(pre);
        let logits = self.head.record(g, h, &mut ctx.binds, "head", true)?;
        let logits = g.upsample_bilinear(logits, s.h, s.w);
        Ok(SegOutput { logits, taps })
    }

    /// Eval forward with constant parameters and running statistics.
    pub fn forward_eval(&self, g: &mut Graph, x: Var) -> Result<SegOutput> {
        let s = g.shape(x);
        self.check_input(s)?;
        let mut h = x;
        let mut taps = Vec::with_capacity(self.arch.n_taps());
        for stage in &self.stages {
            let last = stage.len() - 1;
            for (bi, block) in stage.iter().enumerate() {
                let pre = block.record_eval(g, h)?;
                if bi == last {
                    taps.push(pre);
                }
                h = g.relu(pre);
            }
        }
        let pre = self.decoder.record_eval(g, h)?;
        taps.push(pre);
        let h = g.relu(pre);
        let mut scratch = Bindings::new();
        let logits = self.head.record(g, h, &mut scratch, "head", false)?;
        let logits = g.upsample_bilinear(logits, s.h, s.w);
        Ok(SegOutput { logits, taps })
    }

    /// Eval forward on plain tensors: logits and taps.
    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, Vec<Tensor4>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_eval(&mut g, xv)?;
        let taps = out.taps.iter().map(|t| g.value(*t).clone()).collect();
        Ok((g.value(out.logits).clone(), taps))
    }

    /// Grow the head by `new_classes` outputs. Existing rows are kept; every
    /// new row copies the background row with its bias lowered by
    /// `ln(1 + new_classes)`, so new classes start below background.
    pub fn extend_head(&mut self, new_classes: usize) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::InvalidArgument(
                "extend_head needs at least one new class".into(),
            ));
        }
        let old = self.n_outputs();
        let in_ch = self.head.in_channels();
        let total = old + new_classes;
        let mut w = self.head.weight.data().to_vec();
        let mut b = self.head.bias.data().to_vec();
        let bg_row = self.head.weight.data()[..in_ch].to_vec();
        let shift = (1.0 + new_classes as f64).ln();
        for _ in 0..new_classes {
            w.extend_from_slice(&bg_row);
            b.push(self.head.bias.data()[0] - shift);
        }
        self.head.weight = Tensor4::from_vec(Shape4::new(total, in_ch, 1, 1), w)?;
        self.head.bias = Tensor4::vector(b);
        Ok(())
    }

    pub fn visit(&self, f: &mut ParamVisitor<'_>) {
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                block.visit(&format!("enc{si}.b{bi}"), f);
            }
        }
        self.decoder.visit("dec", f);
        f("head.weight", &self.head.weight, ParamKind::Trainable);
        f("head.bias", &self.head.bias, ParamKind::Trainable);
    }

    pub fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_>) {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&format!("enc{si}.b{bi}"), f);
            }
        }
        self.decoder.visit_mut("dec", f);
        f("head.weight", &mut self.head.weight, ParamKind::Trainable);
        f("head.bias", &mut self.head.bias, ParamKind::Trainable);
    }

    /// SHA-256 over the names and bytes of every tensor whose kind is in `kinds`.
    pub fn digest(&self, kinds: &[ParamKind]) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, t, kind| {
            if kinds.contains(&kind) {
                h.update(name.as_bytes());
                h.update(t.to_le_bytes());
            }
        });
        hex(&h.finalize())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _, kind| {
            if kind == ParamKind::Trainable {
                out.push(name.to_string());
            }
        });
        out
    }

    /// Collapse every block into one convolution for deployment.
    pub fn merged(&self) -> InferenceNetwork {
        InferenceNetwork {
            stages: self
                .stages
                .iter()
                .map(|s| s.iter().map(Block::merged).collect())
                .collect(),
            decoder: self.decoder.merged(),
            head: self.head.clone(),
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deployed form: one convolution per block.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNetwork {
    pub stages: Vec<Vec<Conv2dParams>>,
    pub decoder: Conv2dParams,
    pub head: Conv2dParams,
}

impl InferenceNetwork {
    fn convs(&self) -> impl Iterator<Item = &Conv2dParams> {
        self.stages.iter().flatten().chain(std::iter::once(&self.decoder))
    }

    /// Logits plus instrumentation counters split into feature extractor and head.
    pub fn forward_counted(&self, x: &Tensor4) -> Result<(Tensor4, OpStats, OpStats)> {
        let s = x.shape();
        if s.c != INPUT_CHANNELS {
            return Err(shape_err("seg_forward", "expected 3 input channels"));
        }
        let mut g = Graph::new();
        let mut h = g.constant(x.clone());
        let mut scratch = Bindings::new();
        for conv in self.convs() {
            let pre = conv.record(&mut g, h, &mut scratch, "", false)?;
            h = g.relu(pre);
        }
        let backbone = g.stats();
        let logits = self.head.record(&mut g, h, &mut scratch, "", false)?;
        let total = g.stats();
        let head = OpStats {
            convolutions: total.convolutions - backbone.convolutions,
            multiply_accumulates: total.multiply_accumulates - backbone.multiply_accumulates,
        };
        let logits = g.upsample_bilinear(logits, s.h, s.w);
        Ok((g.value(logits).clone(), backbone, head))
    }

    /// Parameters excluding the classifier head.
    pub fn backbone_param_count(&self) -> usize {
        self.convs().map(|c| c.weight.numel() + c.bias.numel()).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.weight.numel() + self.head.bias.numel()
    }
}

/// Teacher/student pair for one continual step.
#[derive(Clone, Debug)]
pub struct StepModel {
    pub student: SegNetwork,
    pub teacher: SegNetwork,
}

/// Frozen copy of `prev` as teacher; the student passes every RC block through
/// the step transition and grows its head by `new_classes` (zero keeps the head).
pub fn make_step_model(prev: &SegNetwork, new_classes: usize, ops: TransitionOps) -> Result<StepModel> {
    let teacher = prev.clone();
    let mut student = prev.clone();
    for block in student.blocks_mut() {
        *block = block.transition(ops);
    }
    if new_classes > 0 {
        student.extend_head(new_classes)?;
    }
    Ok(StepModel { student, teacher })
}

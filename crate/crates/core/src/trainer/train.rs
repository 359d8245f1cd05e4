use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cl_losses::{
    cross_entropy, logit_kd_loss, total_loss, unce_loss, unkd_loss, ClassPartition, LossTerms,
    LossWeights,
};
use crate::distill::{distill_loss, DistillConfig};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::numerics::{Graph, OptimizerState, Sgd, Tensor4, Var};
use crate::protocol_data::{argmax_channels, Confusion, StepDataset};
use crate::rc_block::{NormStats, ParamKind};
use crate::seg_model::{SegNetwork, TrainCtx};

use super::method::{CeKind, LogitKdKind, MethodSpec};

/// Hyper-parameters of one training step.
#[derive(Clone, Debug)]
pub struct StepSettings {
    pub method: MethodSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub hflip: bool,
    pub drop_path: bool,
    pub norm_stats: NormStats,
    pub weights: LossWeights,
    pub distill: DistillConfig,
}

/// Resumable position inside a step.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step_index: usize,
    /// Epochs completed in this step.
    pub epoch: usize,
    pub optimizer: Sgd,
    pub rng: ChaCha8Rng,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(step_index: usize, rng_seed: u64, rng: ChaCha8Rng, s: &StepSettings, n_samples: usize) -> Result<Self> {
        let iters = (s.epochs * n_samples.div_ceil(s.batch_size)) as u64;
        Ok(TrainState {
            step_index,
            epoch: 0,
            optimizer: Sgd::new(OptimizerState::new(s.lr, s.momentum, iters, s.poly_power)?),
            rng,
            rng_seed,
        })
    }
}

/// Values of one optimisation iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub step: usize,
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    /// Executed loss terms by name, unweighted.
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub step: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub holdout_miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepHistory {
    pub iterations: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl StepHistory {
    /// Distinct loss-term names that were executed.
    pub fn term_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .iterations
            .iter()
            .flat_map(|r| r.terms.iter().map(|(n, _)| n.clone()))
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

/// Decision returned by the epoch hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Inputs that stay fixed during a step.
pub struct StepContext<'a> {
    pub teacher: Option<&'a SegNetwork>,
    /// Masks in head-channel space.
    pub data: &'a StepDataset,
    pub holdout: Option<&'a StepDataset>,
    pub ce_part: &'a ClassPartition,
    pub kd_part: &'a ClassPartition,
}

fn flip_image(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for w in 0..s.w {
                    out.set(n, c, y, w, x.at(n, c, y, s.w - 1 - w));
                }
            }
        }
    }
    out
}

/// Assemble a batch, flipping each sample with probability 1/2 when enabled.
fn make_batch(data: &StepDataset, idx: &[usize], hflip: bool, rng: &mut ChaCha8Rng) -> Result<(Tensor4, LabelMap)> {
    let mut imgs = Vec::with_capacity(idx.len());
    let mut masks = Vec::with_capacity(idx.len());
    for &i in idx {
        let flip = hflip && rng.gen_bool(0.5);
        if flip {
            imgs.push(flip_image(&data.images[i]));
            masks.push(data.masks[i].hflip());
        } else {
            imgs.push(data.images[i].clone());
            masks.push(data.masks[i].clone());
        }
    }
    Ok((Tensor4::stack(&imgs)?, LabelMap::stack(&masks)?))
}

/// mIoU over all head channels on relabelled data.
pub fn holdout_miou(net: &SegNetwork, data: &StepDataset) -> Result<Option<f64>> {
    if data.is_empty() {
        return Ok(None);
    }
    let mut seen = [false; 256];
    let n_out = net.n_outputs();
    seen[..n_out].iter_mut().for_each(|s| *s = true);
    let mut conf = Confusion::default();
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(8) {
        let imgs: Vec<Tensor4> = chunk.iter().map(|&i| data.images[i].clone()).collect();
        let (logits, _) = net.forward(&Tensor4::stack(&imgs)?)?;
        let pred = argmax_channels(&logits);
        for (k, &i) in chunk.iter().enumerate() {
            conf.add(&pred.sample(k), &data.masks[i], &seen);
        }
    }
    let all: Vec<usize> = (0..n_out).collect();
    Ok(conf.report(&all, &[]).miou_all)
}

struct Terms {
    names: Vec<(String, Var)>,
    total: Var,
}

fn build_loss(
    g: &mut Graph,
    logits: Var,
    taps: &[Var],
    labels: &LabelMap,
    teacher_out: Option<&(Tensor4, Vec<Tensor4>)>,
    ctx: &StepContext<'_>,
    s: &StepSettings,
) -> Result<Terms> {
    let m = &s.method;
    let mut names = Vec::new();
    let ce = match m.ce {
        CeKind::Plain => {
            let v = cross_entropy(g, logits, labels)?;
            names.push(("ce".to_string(), v));
            v
        }
        CeKind::Unbiased => {
            let v = unce_loss(g, logits, labels, ctx.ce_part)?;
            names.push(("unce".to_string(), v));
            v
        }
    };
    let mut logit_kd = None;
    let mut feature_kd = None;
    if let Some((t_logits, t_taps)) = teacher_out {
        match m.logit_kd {
            LogitKdKind::Off => {}
            LogitKdKind::Plain => {
                let v = logit_kd_loss(g, logits, t_logits, ctx.kd_part, Some(labels))?;
                names.push(("logit_kd".to_string(), v));
                logit_kd = Some(v);
            }
            LogitKdKind::Unbiased => {
                let v = unkd_loss(g, logits, t_logits, ctx.kd_part, Some(labels))?;
                names.push(("unkd".to_string(), v));
                logit_kd = Some(v);
            }
        }
        if m.feature_kd {
            let tv: Vec<Var> = t_taps.iter().map(|t| g.constant(t.clone())).collect();
            let v = distill_loss(g, &tv, taps, &s.distill)?;
            names.push((format!("feature_{}", s.distill.variant.name()), v));
            feature_kd = Some(v);
        }
    }
    let total = total_loss(g, LossTerms { ce, logit_kd, feature_kd }, ctx.ce_part, &s.weights)?;
    Ok(Terms { names, total })
}

/// Run the remaining epochs of one step on `student`.
///
/// After every epoch `on_epoch` sees the student and the state (for
/// checkpointing) and may stop the run early.
pub fn train_step(
    student: &mut SegNetwork,
    ctx: &StepContext<'_>,
    s: &StepSettings,
    state: &mut TrainState,
    holdout_eval: bool,
    on_epoch: &mut dyn FnMut(&SegNetwork, &TrainState, &StepHistory) -> Result<Control>,
) -> Result<StepHistory> {
    let mut hist = StepHistory::default();
    let n = ctx.data.len();
    if n == 0 {
        return Err(Error::EmptyDataset(format!("step {}", state.step_index)));
    }
    if student.n_outputs() != ctx.ce_part.n_channels() {
        return Err(Error::InvalidArgument(format!(
            "student has {} outputs, partition needs {}",
            student.n_outputs(),
            ctx.ce_part.n_channels()
        )));
    }
    while state.epoch < s.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(s.batch_size) {
            let (x, labels) = make_batch(ctx.data, idx, s.hflip, &mut state.rng)?;
            let teacher_out = match ctx.teacher {
                Some(t) => Some(t.forward(&x)?),
                None => None,
            };
            let mut g = Graph::new();
            let xv = g.constant(x);
            let mut tctx = TrainCtx::new(&mut state.rng, s.drop_path);
            tctx.stats = s.norm_stats;
            let out = student.forward_train(&mut g, xv, &mut tctx)?;
            let binds = tctx.binds;
            let terms = build_loss(&mut g, out.logits, &out.taps, &labels, teacher_out.as_ref(), ctx, s)?;
            let total = g.value(terms.total).item();
            let values: Vec<(String, f64)> =
                terms.names.iter().map(|(k, v)| (k.clone(), g.value(*v).item())).collect();
            let lr = state.optimizer.state().effective_lr();
            let iteration = state.optimizer.state().iteration;
            if !total.is_finite() || values.iter().any(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss at step {} epoch {} iteration {iteration} (lr {lr}): total {total}, terms {values:?}, scenes {:?}",
                    state.step_index,
                    state.epoch,
                    idx.iter().map(|&i| ctx.data.provenance[i]).collect::<Vec<_>>()
                )));
            }
            g.backward(terms.total)?;
            let grads: BTreeMap<&str, &Tensor4> = binds
                .iter()
                .filter_map(|(name, v)| g.grad(v).map(|gr| (name, gr)))
                .collect();
            let opt = &mut state.optimizer;
            let mut err = None;
            student.visit_mut(&mut |name, p, kind| {
                if kind != ParamKind::Trainable || err.is_some() {
                    return;
                }
                if let Some(gr) = grads.get(name) {
                    if let Err(e) = opt.update(name, p, gr) {
                        err = Some(e);
                    }
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            opt.advance();
            hist.iterations.push(IterRecord {
                step: state.step_index,
                epoch: state.epoch,
                iteration,
                lr,
                terms: values,
                total,
            });
            epoch_loss += total;
            batches += 1;
        }
        let holdout_miou = match (holdout_eval, ctx.holdout) {
            (true, Some(h)) => holdout_miou(student, h)?,
            _ => None,
        };
        hist.epochs.push(EpochRecord {
            step: state.step_index,
            epoch: state.epoch,
            mean_loss: epoch_loss / batches as f64,
            holdout_miou,
        });
        state.epoch += 1;
        if on_epoch(student, state, &hist)? == Control::Stop {
            break;
        }
    }
    Ok(hist)
}

//! Continual-learning objectives over segmentation logits.
//!
//! Channels are indexed by class in learning order: channel 0 is background,
//! then the classes of earlier steps, then the classes of the current step.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::numerics::{kernels, Graph, Shape4, Tensor4, Var};

/// Which head channels belong to earlier steps and which to the current one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPartition {
    old: Vec<usize>,
    new: Vec<usize>,
}

impl ClassPartition {
    pub fn new(old: impl IntoIterator<Item = usize>, new: impl IntoIterator<Item = usize>) -> Result<Self> {
        let old: BTreeSet<usize> = old.into_iter().collect();
        let new: BTreeSet<usize> = new.into_iter().collect();
        if old.contains(&0) || new.contains(&0) {
            return Err(Error::InvalidArgument("background (0) cannot be old or new".into()));
        }
        if !old.is_disjoint(&new) {
            return Err(Error::InvalidArgument("old and new classes overlap".into()));
        }
        let n = old.len() + new.len();
        if old.iter().chain(&new).any(|&c| c > n) {
            return Err(Error::InvalidArgument(format!(
                "classes must cover channels 1..={n} without gaps"
            )));
        }
        Ok(ClassPartition {
            old: old.into_iter().collect(),
            new: new.into_iter().collect(),
        })
    }

    /// Old classes `1..=n_old`, new classes following them.
    pub fn contiguous(n_old: usize, n_new: usize) -> Self {
        ClassPartition {
            old: (1..=n_old).collect(),
            new: (n_old + 1..=n_old + n_new).collect(),
        }
    }

    pub fn old(&self) -> &[usize] {
        &self.old
    }

    pub fn new_classes(&self) -> &[usize] {
        &self.new
    }

    /// Head channels, background included.
    pub fn n_channels(&self) -> usize {
        1 + self.old.len() + self.new.len()
    }

    /// Channels of the previous model's head: background then old classes.
    pub fn teacher_channels(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.old.iter().copied()).collect()
    }

    pub fn is_old(&self, c: usize) -> bool {
        self.old.binary_search(&c).is_ok()
    }

    pub fn is_new(&self, c: usize) -> bool {
        self.new.binary_search(&c).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    /// Count background in both sides of the adaptive factor.
    pub count_background: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 100.0, gamma: 0.01, count_background: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite() && self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be positive, got lambda={} gamma={}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

/// `sqrt(|seen classes| / |current classes|)`.
pub fn adaptive_factor(part: &ClassPartition, count_background: bool) -> Result<f64> {
    let bg = usize::from(count_background);
    let cur = part.new.len();
    if cur == 0 {
        return Err(Error::InvalidArgument("no classes in the current step".into()));
    }
    let all = part.old.len() + cur + bg;
    Ok((all as f64 / (cur + bg) as f64).sqrt())
}

fn check_labels(logits: Shape4, labels: &LabelMap, op: &'static str) -> Result<()> {
    if (labels.batch(), labels.height(), labels.width()) != (logits.n, logits.h, logits.w) {
        return Err(shape_err(
            op,
            format!(
                "labels {}x{}x{} vs logits {logits}",
                labels.batch(),
                labels.height(),
                labels.width()
            ),
        ));
    }
    Ok(())
}

/// Negative mean log-probability of the target group at every valid pixel.
/// `target` maps a label to its group index.
fn grouped_nll(
    g: &mut Graph,
    logits: Var,
    labels: &LabelMap,
    groups: Vec<Vec<usize>>,
    denom: Vec<usize>,
    target: impl Fn(u8) -> Result<usize>,
) -> Result<Var> {
    let s = g.shape(logits);
    let n_groups = groups.len();
    let valid = labels.valid_count();
    let mut w = Tensor4::zeros(Shape4::new(s.n, n_groups, s.h, s.w));
    if valid > 0 {
        let inv = -1.0 / valid as f64;
        let plane = s.plane();
        for (i, &l) in labels.data().iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let (n, p) = (i / plane, i % plane);
            w.data_mut()[(n * n_groups + target(l)?) * plane + p] = inv;
        }
    }
    let lp = g.log_group_softmax(logits, groups, denom)?;
    g.weighted_sum(lp, w)
}

/// Plain per-pixel cross-entropy over every channel.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &LabelMap) -> Result<Var> {
    let s = g.shape(logits);
    check_labels(s, labels, "cross_entropy")?;
    let all: Vec<usize> = (0..s.c).collect();
    let groups = all.iter().map(|&c| vec![c]).collect();
    grouped_nll(g, logits, labels, groups, all, |l| {
        if (l as usize) < s.c {
            Ok(l as usize)
        } else {
            Err(Error::Label(format!("label {l} outside {} channels", s.c)))
        }
    })
}

/// Cross-entropy in which background absorbs the probability of old classes.
pub fn unce_loss(g: &mut Graph, logits: Var, labels: &LabelMap, part: &ClassPartition) -> Result<Var> {
    let s = g.shape(logits);
    check_labels(s, labels, "unce_loss")?;
    if s.c != part.n_channels() {
        return Err(shape_err(
            "unce_loss",
            format!("{} channels for {} classes", s.c, part.n_channels()),
        ));
    }
    let mut groups = vec![part.teacher_channels()];
    groups.extend(part.new.iter().map(|&c| vec![c]));
    let denom = (0..s.c).collect();
    grouped_nll(g, logits, labels, groups, denom, |l| {
        let c = l as usize;
        if c == 0 {
            Ok(0)
        } else if let Ok(i) = part.new.binary_search(&c) {
            Ok(i + 1)
        } else if part.is_old(c) {
            Err(Error::Label(format!("old class {c} must be relabelled to background")))
        } else {
            Err(Error::Label(format!("label {c} outside the partition")))
        }
    })
}

/// Distillation from the previous head in which background absorbs the new
/// classes. The teacher logits are treated as constants.
pub fn unkd_loss(
    g: &mut Graph,
    logits: Var,
    teacher: &Tensor4,
    part: &ClassPartition,
    labels: Option<&LabelMap>,
) -> Result<Var> {
    let s = g.shape(logits);
    let ts = teacher.shape();
    let tc = part.teacher_channels();
    if s.c != part.n_channels() || ts.c != tc.len() || (ts.n, ts.h, ts.w) != (s.n, s.h, s.w) {
        return Err(shape_err(
            "unkd_loss",
            format!("student {s}, teacher {ts}, partition {}+{}", tc.len(), part.new.len()),
        ));
    }
    if let Some(l) = labels {
        check_labels(s, l, "unkd_loss")?;
    }
    let mut groups = vec![std::iter::once(0).chain(part.new.iter().copied()).collect::<Vec<_>>()];
    groups.extend(part.old.iter().map(|&c| vec![c]));
    let lq = g.log_group_softmax(logits, groups, (0..s.c).collect())?;
    let w = soft_weights(teacher, labels);
    g.weighted_sum(lq, w)
}

/// Logit distillation restricted to the old head: the student's old channels
/// are renormalised among themselves and matched to the teacher softmax.
pub fn logit_kd_loss(
    g: &mut Graph,
    logits: Var,
    teacher: &Tensor4,
    part: &ClassPartition,
    labels: Option<&LabelMap>,
) -> Result<Var> {
    let s = g.shape(logits);
    let ts = teacher.shape();
    let tc = part.teacher_channels();
    if s.c != part.n_channels() || ts.c != tc.len() || (ts.n, ts.h, ts.w) != (s.n, s.h, s.w) {
        return Err(shape_err("logit_kd_loss", format!("student {s}, teacher {ts}")));
    }
    if let Some(l) = labels {
        check_labels(s, l, "logit_kd_loss")?;
    }
    let groups = tc.iter().map(|&c| vec![c]).collect();
    let lq = g.log_group_softmax(logits, groups, tc)?;
    let w = soft_weights(teacher, labels);
    g.weighted_sum(lq, w)
}

/// `-softmax(teacher) / |I|`, zeroed at ignored pixels.
fn soft_weights(teacher: &Tensor4, labels: Option<&LabelMap>) -> Tensor4 {
    let ts = teacher.shape();
    let mut w = kernels::softmax_channels(teacher);
    let plane = ts.plane();
    let valid = labels.map_or(ts.n * plane, |l| l.valid_count());
    if valid == 0 {
        return Tensor4::zeros(ts);
    }
    let inv = -1.0 / valid as f64;
    for n in 0..ts.n {
        for p in 0..plane {
            let keep = labels.is_none_or(|l| l.data()[n * plane + p] != IGNORE_LABEL);
            for c in 0..ts.c {
                let v = &mut w.data_mut()[(n * ts.c + c) * plane + p];
                *v = if keep { *v * inv } else { 0.0 };
            }
        }
    }
    w
}

/// Loss terms of one step. The distillation terms are absent at step 0.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub logit_kd: Option<Var>,
    /// Feature distillation, the sum of spatial and channel terms.
    pub feature_kd: Option<Var>,
}

/// `ce + lambda * factor * logit_kd + gamma * feature_kd`.
pub fn total_loss(g: &mut Graph, terms: LossTerms, part: &ClassPartition, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let factor = adaptive_factor(part, w.count_background)?;
    let mut total = terms.ce;
    if let Some(kd) = terms.logit_kd {
        let s = g.scale(kd, w.lambda * factor);
        total = g.add(total, s)?;
    }
    if let Some(f) = terms.feature_kd {
        let s = g.scale(f, w.gamma);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Per-pixel probabilities of the grouped label spaces, for inspection.
/// Returns `(p_hat, q_hat)` where `p_hat` has `1 + |new|` channels and
/// `q_hat` has `1 + |old|` channels.
pub fn absorbed_probabilities(logits: &Tensor4, part: &ClassPartition) -> Result<(Tensor4, Tensor4)> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let all: Vec<usize> = (0..logits.shape().c).collect();
    let mut pg = vec![part.teacher_channels()];
    pg.extend(part.new.iter().map(|&c| vec![c]));
    let mut qg = vec![std::iter::once(0).chain(part.new.iter().copied()).collect::<Vec<_>>()];
    qg.extend(part.old.iter().map(|&c| vec![c]));
    let p = g.log_group_softmax(x, pg, all.clone())?;
    let q = g.log_group_softmax(x, qg, all)?;
    Ok((g.value(p).map(f64::exp), g.value(q).map(f64::exp)))
}

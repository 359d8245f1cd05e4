use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::numerics::Tensor4;
use crate::seg_model::SegNetwork;

use super::schedule::TaskSchedule;
use super::synth::Scene;

/// Per-class intersection-over-union with old/new/all means.
#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    /// Only classes present in the prediction or the ground truth.
    pub per_class_iou: BTreeMap<usize, f64>,
    pub old_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub miou_old: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
}

#[derive(Serialize)]
struct IoURow {
    class_id: usize,
    iou: f64,
    group: &'static str,
}

impl IoUReport {
    pub fn group_of(&self, class: usize) -> &'static str {
        if self.new_classes.contains(&class) {
            "new"
        } else {
            "old"
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for (&class_id, &iou) in &self.per_class_iou {
            wr.serialize(IoURow { class_id, iou, group: self.group_of(class_id) })?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Confusion counts per class: (tp, fp, fn).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    counts: BTreeMap<usize, [u64; 3]>,
}

impl Confusion {
    /// Accumulate one prediction/ground-truth pair in raw class ids. Ground
    /// truth pixels outside `seen` (unseen classes, ignore) are skipped.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, seen: &[bool; 256]) {
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_LABEL || !seen[g as usize] {
                continue;
            }
            if p == g {
                self.counts.entry(g as usize).or_default()[0] += 1;
            } else {
                self.counts.entry(p as usize).or_default()[1] += 1;
                self.counts.entry(g as usize).or_default()[2] += 1;
            }
        }
    }

    pub fn merge(mut self, other: Confusion) -> Confusion {
        for (k, v) in other.counts {
            let e = self.counts.entry(k).or_default();
            for i in 0..3 {
                e[i] += v[i];
            }
        }
        self
    }

    pub fn report(&self, old: &[usize], new: &[usize]) -> IoUReport {
        let per_class_iou: BTreeMap<usize, f64> = self
            .counts
            .iter()
            .filter(|(_, c)| c.iter().sum::<u64>() > 0)
            .map(|(&k, c)| (k, c[0] as f64 / (c[0] + c[1] + c[2]) as f64))
            .collect();
        let mean = |set: &[usize]| {
            let v: Vec<f64> = set.iter().filter_map(|c| per_class_iou.get(c).copied()).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let all: Vec<usize> = old.iter().chain(new).copied().collect();
        IoUReport {
            miou_old: mean(old),
            miou_new: mean(new),
            miou_all: mean(&all),
            per_class_iou,
            old_classes: old.to_vec(),
            new_classes: new.to_vec(),
        }
    }
}

/// Per-pixel argmax over channels.
pub fn argmax_channels(logits: &Tensor4) -> LabelMap {
    let s = logits.shape();
    let mut m = LabelMap::filled(s.n, s.h, s.w, 0);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut best = 0;
                for c in 1..s.c {
                    if logits.at(n, c, y, x) > logits.at(n, best, y, x) {
                        best = c;
                    }
                }
                m.set(n, y, x, best as u8);
            }
        }
    }
    m
}

const EVAL_CHUNK: usize = 8;

/// Evaluate `net` after step `t` on scenes with full ground truth.
pub fn evaluate(net: &SegNetwork, val: &[Scene], sched: &TaskSchedule, t: usize) -> Result<IoUReport> {
    let seen_list = sched.seen_classes(t)?;
    let mut seen = [false; 256];
    for &c in &seen_list {
        seen[c] = true;
    }
    let (old, new) = sched.eval_groups(t)?;
    let parts: Vec<Result<Confusion>> = val
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let imgs: Vec<Tensor4> = chunk.iter().map(|s| s.image.clone()).collect();
            let (logits, _) = net.forward(&Tensor4::stack(&imgs)?)?;
            let pred = argmax_channels(&logits);
            let mut conf = Confusion::default();
            for (i, scene) in chunk.iter().enumerate() {
                let mut p = pred.sample(i);
                for l in p.data_mut() {
                    *l = sched.class_of_channel(*l as usize).unwrap_or(0) as u8;
                }
                conf.add(&p, &scene.mask, &seen);
            }
            Ok(conf)
        })
        .collect();
    let mut total = Confusion::default();
    for p in parts {
        total = total.merge(p?);
    }
    Ok(total.report(&old, &new))
}

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::numerics::Tensor4;

use super::schedule::{Labeling, ScheduleMode, TaskSchedule};
use super::synth::Scene;

/// Training data of one step. Masks hold raw class ids restricted to
/// `{0} ∪ C_t ∪ {ignore}`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDataset {
    pub images: Vec<Tensor4>,
    pub masks: Vec<LabelMap>,
    /// Index of each kept scene in the raw list.
    pub provenance: Vec<usize>,
}

impl StepDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keep only the given positions (into this dataset), in order.
    pub fn subset(&self, idx: &[usize]) -> StepDataset {
        StepDataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
            provenance: idx.iter().map(|&i| self.provenance[i]).collect(),
        }
    }
}

/// Select and relabel the scenes used at step `t`.
///
/// Class-incremental: a scene must contain a current-step class. Disjoint
/// additionally drops scenes with any future-step class; both modes then map
/// every non-current class to background. Domain-incremental: scenes from the
/// step's domains, masks untouched.
pub fn filter_and_relabel(raw: &[Scene], sched: &TaskSchedule, t: usize) -> Result<StepDataset> {
    let current: BTreeSet<usize> = sched.current_classes(t)?.into_iter().collect();
    let future: BTreeSet<usize> = sched.future_classes(t)?.into_iter().collect();
    let domains: BTreeSet<usize> = sched.steps[t].iter().copied().collect();
    let mut out = StepDataset { images: Vec::new(), masks: Vec::new(), provenance: Vec::new() };
    for (i, scene) in raw.iter().enumerate() {
        let keep = match sched.mode {
            ScheduleMode::DomainIncremental => domains.contains(&scene.domain_id),
            ScheduleMode::ClassIncremental => {
                let present = scene.mask.classes();
                let has_current = present.iter().any(|&c| current.contains(&(c as usize)));
                let has_future = present.iter().any(|&c| future.contains(&(c as usize)));
                has_current && !(sched.labeling == Labeling::Disjoint && has_future)
            }
        };
        if !keep {
            continue;
        }
        let mut mask = scene.mask.clone();
        if sched.mode == ScheduleMode::ClassIncremental {
            for l in mask.data_mut() {
                if *l != IGNORE_LABEL && !current.contains(&(*l as usize)) {
                    *l = 0;
                }
            }
        }
        out.images.push(scene.image.clone());
        out.masks.push(mask);
        out.provenance.push(i);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "step {t} keeps no scenes out of {}",
            raw.len()
        )));
    }
    Ok(out)
}

/// All classes in one step over the whole pool: the joint-training reference.
pub fn joint_dataset(raw: &[Scene]) -> Result<StepDataset> {
    if raw.is_empty() {
        return Err(Error::EmptyDataset("joint pool is empty".into()));
    }
    Ok(StepDataset {
        images: raw.iter().map(|s| s.image.clone()).collect(),
        masks: raw.iter().map(|s| s.mask.clone()).collect(),
        provenance: (0..raw.len()).collect(),
    })
}

/// Map raw class ids to head channels.
pub fn to_channels(mask: &LabelMap, sched: &TaskSchedule) -> LabelMap {
    let table = sched.channel_table();
    let mut m = mask.clone();
    for l in m.data_mut() {
        *l = table[*l as usize];
    }
    m
}

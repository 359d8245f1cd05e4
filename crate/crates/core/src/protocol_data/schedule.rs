use serde::{Deserialize, Serialize};

use crate::cl_losses::ClassPartition;
use crate::error::{Error, Result};
use crate::labels::IGNORE_LABEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    ClassIncremental,
    DomainIncremental,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    Disjoint,
    Overlapped,
}

/// The five standard 15-1 class orders, background first.
pub const CLASS_ORDERS: [(&str, [usize; 21]); 5] = [
    ("A", [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20]),
    ("B", [0, 12, 9, 20, 7, 15, 8, 14, 16, 5, 19, 4, 1, 13, 2, 11, 17, 3, 6, 18, 10]),
    ("C", [0, 13, 19, 15, 17, 9, 8, 5, 20, 4, 3, 10, 11, 18, 16, 7, 12, 14, 6, 1, 2]),
    ("D", [0, 15, 3, 2, 12, 14, 18, 20, 16, 11, 1, 19, 8, 10, 7, 17, 6, 5, 13, 9, 4]),
    ("E", [0, 7, 5, 3, 9, 13, 12, 14, 19, 10, 2, 1, 4, 16, 8, 17, 15, 18, 6, 11, 20]),
];

/// The five orders A–E as owned vectors.
pub fn class_orders() -> Vec<(String, Vec<usize>)> {
    CLASS_ORDERS
        .iter()
        .map(|(n, o)| (n.to_string(), o.to_vec()))
        .collect()
}

/// Sequence of continual steps.
///
/// In class-incremental mode `steps` holds object class ids (background is
/// implicit); in domain-incremental mode it holds domain ids and every step
/// trains on all classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub mode: ScheduleMode,
    pub steps: Vec<Vec<usize>>,
    pub labeling: Labeling,
    /// Object classes in learning order.
    pub class_order: Vec<usize>,
    pub n_classes: usize,
}

/// Parse "X-Y" into `[X, Y, Y, ...]` summing to `total`.
pub fn parse_notation(notation: &str, total: usize) -> Result<Vec<usize>> {
    let (a, b) = notation
        .split_once('-')
        .ok_or_else(|| Error::Schedule(format!("expected X-Y, got {notation:?}")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Schedule(format!("bad step size {s:?} in {notation:?}")))
    };
    let (x, y) = (parse(a)?, parse(b)?);
    if x > total || (total - x) % y != 0 || x == total {
        return Err(Error::Schedule(format!(
            "{notation} does not split {total} into {x} + k*{y} with k >= 1"
        )));
    }
    let k = (total - x) / y;
    let mut sizes = vec![x];
    sizes.extend(std::iter::repeat(y).take(k));
    Ok(sizes)
}

fn chunk(order: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut at = 0;
    sizes
        .iter()
        .map(|&s| {
            let step = order[at..at + s].to_vec();
            at += s;
            step
        })
        .collect()
}

fn checked_order(n_classes: usize, order: Option<&[usize]>) -> Result<Vec<usize>> {
    let order: Vec<usize> = match order {
        None => (1..=n_classes).collect(),
        Some(o) => o.iter().copied().skip_while(|&c| c == 0).collect(),
    };
    let mut sorted = order.clone();
    sorted.sort_unstable();
    if sorted != (1..=n_classes).collect::<Vec<_>>() {
        return Err(Error::Schedule(format!(
            "class order is not a permutation of 1..={n_classes}"
        )));
    }
    if n_classes == 0 || n_classes >= IGNORE_LABEL as usize {
        return Err(Error::Schedule(format!("unsupported class count {n_classes}")));
    }
    Ok(order)
}

/// Class-incremental schedule. `order` lists the object classes `1..=n_classes`
/// (a leading background 0 is accepted and dropped); `None` means ascending.
pub fn build_schedule(
    notation: &str,
    n_classes: usize,
    labeling: Labeling,
    order: Option<&[usize]>,
) -> Result<TaskSchedule> {
    let sizes = parse_notation(notation, n_classes)?;
    let order = checked_order(n_classes, order)?;
    Ok(TaskSchedule {
        mode: ScheduleMode::ClassIncremental,
        steps: chunk(&order, &sizes),
        labeling,
        class_order: order,
        n_classes,
    })
}

/// A single step over every class.
pub fn joint_schedule(n_classes: usize, labeling: Labeling, order: &[usize]) -> Result<TaskSchedule> {
    let order = checked_order(n_classes, Some(order))?;
    Ok(TaskSchedule {
        mode: ScheduleMode::ClassIncremental,
        steps: vec![order.clone()],
        labeling,
        class_order: order,
        n_classes,
    })
}

/// Domain-incremental schedule over domain ids `0..n_domains`.
pub fn build_domain_schedule(notation: &str, n_domains: usize, n_classes: usize) -> Result<TaskSchedule> {
    let sizes = parse_notation(notation, n_domains)?;
    let domains: Vec<usize> = (0..n_domains).collect();
    Ok(TaskSchedule {
        mode: ScheduleMode::DomainIncremental,
        steps: chunk(&domains, &sizes),
        labeling: Labeling::Overlapped,
        class_order: (1..=n_classes).collect(),
        n_classes,
    })
}

impl TaskSchedule {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps.len() {
            return Err(Error::Schedule(format!(
                "step {t} out of range for {} steps",
                self.steps.len()
            )));
        }
        Ok(())
    }

    /// Object classes trained at step `t`.
    pub fn current_classes(&self, t: usize) -> Result<Vec<usize>> {
        self.check_step(t)?;
        Ok(match self.mode {
            ScheduleMode::ClassIncremental => self.steps[t].clone(),
            ScheduleMode::DomainIncremental => self.class_order.clone(),
        })
    }

    /// Object classes from earlier steps.
    pub fn old_classes(&self, t: usize) -> Result<Vec<usize>> {
        self.check_step(t)?;
        Ok(match self.mode {
            ScheduleMode::ClassIncremental => self.steps[..t].concat(),
            ScheduleMode::DomainIncremental => Vec::new(),
        })
    }

    pub fn future_classes(&self, t: usize) -> Result<Vec<usize>> {
        self.check_step(t)?;
        Ok(match self.mode {
            ScheduleMode::ClassIncremental => self.steps[t + 1..].concat(),
            ScheduleMode::DomainIncremental => Vec::new(),
        })
    }

    /// Background plus every object class seen up to and including `t`.
    pub fn seen_classes(&self, t: usize) -> Result<Vec<usize>> {
        let mut v = vec![0];
        v.extend(self.old_classes(t)?);
        v.extend(self.current_classes(t)?);
        Ok(v)
    }

    /// Head size after step `t`.
    pub fn n_outputs(&self, t: usize) -> Result<usize> {
        Ok(self.seen_classes(t)?.len())
    }

    /// Head channel of a class: background 0, then learning order.
    pub fn channel_of(&self, class: usize) -> Option<usize> {
        if class == 0 {
            return Some(0);
        }
        self.class_order.iter().position(|&c| c == class).map(|p| p + 1)
    }

    /// Inverse of [`Self::channel_of`].
    pub fn class_of_channel(&self, channel: usize) -> Option<usize> {
        match channel {
            0 => Some(0),
            c => self.class_order.get(c - 1).copied(),
        }
    }

    /// Lookup table from raw labels to head channels. Labels that are not a
    /// class at all map to the ignore label.
    pub fn channel_table(&self) -> [u8; 256] {
        let mut t = [IGNORE_LABEL; 256];
        t[0] = 0;
        for (i, &c) in self.class_order.iter().enumerate() {
            t[c] = (i + 1) as u8;
        }
        t
    }

    /// Partition for the cross-entropy term, in head-channel space.
    pub fn ce_partition(&self, t: usize) -> Result<ClassPartition> {
        let n_old = self.old_classes(t)?.len();
        let n_new = self.current_classes(t)?.len();
        Ok(ClassPartition::contiguous(n_old, n_new))
    }

    /// Partition for logit distillation: domain steps distil every class.
    pub fn kd_partition(&self, t: usize) -> Result<ClassPartition> {
        match self.mode {
            ScheduleMode::ClassIncremental => self.ce_partition(t),
            ScheduleMode::DomainIncremental => {
                self.check_step(t)?;
                Ok(ClassPartition::contiguous(self.n_classes, 0))
            }
        }
    }

    /// Metric groups after step `t`: first-step classes (background included)
    /// and classes added later.
    pub fn eval_groups(&self, t: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        self.check_step(t)?;
        Ok(match self.mode {
            ScheduleMode::ClassIncremental => {
                let mut old = vec![0];
                old.extend(&self.steps[0]);
                (old, self.steps[1..=t].concat())
            }
            ScheduleMode::DomainIncremental => (self.seen_classes(t)?, Vec::new()),
        })
    }
}

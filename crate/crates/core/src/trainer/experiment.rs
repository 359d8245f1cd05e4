use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::numerics::OpStats;
use crate::protocol_data::{
    cache, evaluate, filter_and_relabel, to_channels, IoUReport, Scene, ScheduleMode, StepDataset,
    TaskSchedule, split_holdout,
};
use crate::rc_block::{NormStats, ParamKind, TransitionOps};
use crate::seg_model::{make_step_model, SegNetwork};

use super::checkpoint::Checkpoint;
use super::method::MethodSpec;
use super::train::{train_step, Control, StepContext, StepHistory, StepSettings, TrainState};

/// Schema version written into every results row.
pub const RESULTS_FORMAT_VERSION: u32 = 1;

/// Offset of validation scene indices, keeping them apart from training scenes.
const VAL_OFFSET: usize = 1_000_000;

pub const RESULTS_CSV: &str = "results.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const HISTORY_CSV: &str = "history.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Accept a checkpoint written by a different config.
    pub force: bool,
    /// Stop once `(step, epochs completed)` is reached, after checkpointing.
    pub stop_after: Option<(usize, usize)>,
    pub progress: bool,
}

/// Result of one executed step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub step: usize,
    pub report: IoUReport,
    pub history: StepHistory,
    pub backbone_ops: OpStats,
    pub head_ops: OpStats,
    pub teacher_digest: Option<(String, String)>,
    pub frozen_digest: (String, String),
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    /// Steps executed by this invocation.
    pub steps: Vec<StepOutcome>,
    pub network: SegNetwork,
    pub completed: bool,
}

impl RunSummary {
    pub fn final_report(&self) -> Option<&IoUReport> {
        self.steps.last().map(|s| &s.report)
    }
}

/// Independent 64-bit seed for a named purpose.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}:{tag}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

#[derive(Serialize)]
struct ResultRow<'a> {
    format_version: u32,
    run_id: &'a str,
    method: &'a str,
    seed: u64,
    step: usize,
    group: &'a str,
    miou: Option<f64>,
    n_classes: usize,
}

#[derive(Serialize)]
struct CurveRow {
    format_version: u32,
    step: usize,
    miou_old: Option<f64>,
    miou_new: Option<f64>,
    miou_all: Option<f64>,
    n_outputs: usize,
    backbone_macs: u64,
    head_macs: u64,
}

#[derive(Serialize)]
struct HistoryRow<'a> {
    step: usize,
    epoch: usize,
    iteration: u64,
    lr: f64,
    term: &'a str,
    value: f64,
}

#[derive(Serialize)]
struct EpochRow {
    step: usize,
    epoch: usize,
    mean_loss: f64,
    holdout_miou: Option<f64>,
}

/// In-memory CSV file that is rewritten as a whole.
struct CsvLog {
    name: String,
    text: String,
}

impl CsvLog {
    fn new(name: &str) -> Self {
        CsvLog { name: name.to_string(), text: String::new() }
    }

    fn push<T: Serialize>(&mut self, row: &T) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(self.text.is_empty())
            .from_writer(Vec::new());
        w.serialize(row)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.text.push_str(std::str::from_utf8(&bytes).expect("csv is utf-8"));
        Ok(())
    }
}

struct Logs {
    files: Vec<CsvLog>,
}

impl Logs {
    const NAMES: [&'static str; 4] = [RESULTS_CSV, CURVES_CSV, HISTORY_CSV, EPOCHS_CSV];

    fn new() -> Self {
        Logs { files: Self::NAMES.iter().map(|n| CsvLog::new(n)).collect() }
    }

    fn from_saved(saved: &[(String, String)]) -> Self {
        let mut l = Self::new();
        for f in &mut l.files {
            if let Some((_, t)) = saved.iter().find(|(k, _)| *k == f.name) {
                f.text = t.clone();
            }
        }
        l
    }

    fn get(&mut self, name: &str) -> &mut CsvLog {
        self.files.iter_mut().find(|f| f.name == name).expect("known log")
    }

    fn snapshot(&self) -> Vec<(String, String)> {
        self.files.iter().map(|f| (f.name.clone(), f.text.clone())).collect()
    }

    fn flush(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            std::fs::write(dir.join(&f.name), &f.text)?;
        }
        Ok(())
    }

    fn push_history(&mut self, hist: &StepHistory, from_iter: usize, from_epoch: usize) -> Result<()> {
        for r in &hist.iterations[from_iter..] {
            for (term, value) in r.terms.iter().map(|(k, v)| (k.as_str(), *v)).chain([("total", r.total)]) {
                self.get(HISTORY_CSV).push(&HistoryRow {
                    step: r.step,
                    epoch: r.epoch,
                    iteration: r.iteration,
                    lr: r.lr,
                    term,
                    value,
                })?;
            }
        }
        for e in &hist.epochs[from_epoch..] {
            self.get(EPOCHS_CSV).push(&EpochRow {
                step: e.step,
                epoch: e.epoch,
                mean_loss: e.mean_loss,
                holdout_miou: e.holdout_miou,
            })?;
        }
        Ok(())
    }
}

/// Training data, holdout and validation scenes of a run.
pub struct RunData {
    pub train: Vec<Scene>,
    pub holdout: Vec<Scene>,
    pub val: Vec<Scene>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<RunData> {
    let spec = cfg.scene_spec();
    let n_domains = match cfg.protocol.mode {
        ScheduleMode::ClassIncremental => 1,
        ScheduleMode::DomainIncremental => cfg.protocol.n_domains,
    };
    let dir = (!cfg.data.cache_dir.is_empty()).then(|| PathBuf::from(&cfg.data.cache_dir));
    let pool = cache::cached_pool(dir.as_deref(), &spec, 0, cfg.data.train_scenes, n_domains)?;
    let val = cache::cached_pool(dir.as_deref(), &spec, VAL_OFFSET, cfg.data.val_scenes, n_domains)?;
    let (ti, hi) = split_holdout(pool.len(), cfg.data.holdout_fraction, derive_seed(cfg.seed, "holdout"));
    Ok(RunData {
        train: ti.iter().map(|&i| pool[i].clone()).collect(),
        holdout: hi.iter().map(|&i| pool[i].clone()).collect(),
        val,
    })
}

fn step_data(raw: &[Scene], sched: &TaskSchedule, t: usize) -> Result<StepDataset> {
    let mut ds = filter_and_relabel(raw, sched, t)?;
    for m in &mut ds.masks {
        *m = to_channels(m, sched);
    }
    Ok(ds)
}

pub fn step_settings(cfg: &ExperimentConfig, t: usize) -> StepSettings {
    let method = MethodSpec::get(cfg.method.name);
    StepSettings {
        method,
        batch_size: cfg.optim.batch_size,
        epochs: cfg.optim.epochs,
        lr: if t == 0 { cfg.optim.lr_first } else { cfg.optim.lr_next },
        momentum: cfg.optim.momentum,
        poly_power: cfg.optim.poly_power,
        hflip: cfg.optim.hflip,
        drop_path: cfg.method.drop_path && method.rc,
        norm_stats: if t > 0 && cfg.optim.freeze_norm_stats { NormStats::Running } else { NormStats::Batch },
        weights: cfg.loss,
        distill: cfg.distill.clone(),
    }
}

fn step_rng(cfg: &ExperimentConfig, t: usize) -> (u64, ChaCha8Rng) {
    let seed = derive_seed(cfg.seed, &format!("train-step-{t}"));
    (seed, ChaCha8Rng::seed_from_u64(seed))
}

/// Network and teacher at the start of step `t`.
fn begin_step(cfg: &ExperimentConfig, sched: &TaskSchedule, t: usize, prev: Option<&SegNetwork>) -> Result<(SegNetwork, Option<SegNetwork>)> {
    let method = MethodSpec::get(cfg.method.name);
    match prev {
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
            let net = SegNetwork::new(&cfg.model, sched.n_outputs(t)?, method.rc, &mut rng)?;
            Ok((net, None))
        }
        Some(p) => {
            let ops = TransitionOps { merge: cfg.method.merge, freeze: cfg.method.freeze };
            let grow = sched.n_outputs(t)? - p.n_outputs();
            let sm = make_step_model(p, grow, ops)?;
            Ok((sm.student, Some(sm.teacher)))
        }
    }
}

fn push_step_rows(logs: &mut Logs, cfg: &ExperimentConfig, run_id: &str, out: &StepOutcome, n_outputs: usize) -> Result<()> {
    let r = &out.report;
    let groups = [
        ("old", r.miou_old, r.old_classes.len()),
        ("new", r.miou_new, r.new_classes.len()),
        ("all", r.miou_all, r.old_classes.len() + r.new_classes.len()),
    ];
    for (group, miou, n) in groups {
        logs.get(RESULTS_CSV).push(&ResultRow {
            format_version: RESULTS_FORMAT_VERSION,
            run_id,
            method: cfg.method.name.as_str(),
            seed: cfg.seed,
            step: out.step,
            group,
            miou,
            n_classes: n,
        })?;
    }
    logs.get(CURVES_CSV).push(&CurveRow {
        format_version: RESULTS_FORMAT_VERSION,
        step: out.step,
        miou_old: r.miou_old,
        miou_new: r.miou_new,
        miou_all: r.miou_all,
        n_outputs,
        backbone_macs: out.backbone_ops.multiply_accumulates,
        head_macs: out.head_ops.multiply_accumulates,
    })
}

/// Train every step of the configured protocol, evaluating after each one.
///
/// Files land in `<outdir>/<run-id>/`. Logs are flushed after every step and
/// before an error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, outdir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let run_id = cfg.run_id();
    let run_dir = outdir.join(&run_id);
    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    std::fs::write(run_dir.join("config.resolved"), cfg.to_toml_string())?;
    let sched = cfg.schedule()?;
    let data = load_data(cfg)?;
    let hash = cfg.hash();

    let mut logs = Logs::new();
    let mut start_step = 0;
    let mut resumed: Option<(SegNetwork, Option<SegNetwork>, TrainState)> = None;
    let mut prev: Option<SegNetwork> = None;
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path, &hash, opts.force)?;
        logs = Logs::from_saved(&ck.logs);
        if ck.step_complete {
            start_step = ck.step + 1;
            prev = Some(ck.student);
        } else {
            start_step = ck.step;
            let optimizer = ck
                .optimizer
                .ok_or_else(|| Error::Checkpoint("mid-step checkpoint without optimizer".into()))?;
            let state = TrainState {
                step_index: ck.step,
                epoch: ck.epoch,
                optimizer,
                rng: ck.rng,
                rng_seed: step_rng(cfg, ck.step).0,
            };
            resumed = Some((ck.student, ck.teacher, state));
        }
    }

    let result = run_steps(cfg, &sched, &data, &run_id, &run_dir, &hash, opts, &mut logs, start_step, prev, resumed);
    logs.flush(&run_dir)?;
    if let Err(Error::NonFinite(msg)) = &result {
        std::fs::write(run_dir.join("nan_dump.txt"), msg)?;
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn run_steps(
    cfg: &ExperimentConfig,
    sched: &TaskSchedule,
    data: &RunData,
    run_id: &str,
    run_dir: &Path,
    hash: &str,
    opts: &RunOptions,
    logs: &mut Logs,
    start_step: usize,
    mut prev: Option<SegNetwork>,
    mut resumed: Option<(SegNetwork, Option<SegNetwork>, TrainState)>,
) -> Result<RunSummary> {
    let mut steps = Vec::new();
    let ck_dir = run_dir.join("checkpoints");
    for t in start_step..sched.n_steps() {
        let settings = step_settings(cfg, t);
        let train = step_data(&data.train, sched, t)?;
        let holdout = match step_data(&data.holdout, sched, t) {
            Ok(h) => Some(h),
            Err(Error::EmptyDataset(_)) => None,
            Err(e) => return Err(e),
        };
        let (mut student, teacher, mut state) = match resumed.take() {
            Some(r) => r,
            None => {
                let (s, tch) = begin_step(cfg, sched, t, prev.as_ref())?;
                let (seed, rng) = step_rng(cfg, t);
                let st = TrainState::new(t, seed, rng, &settings, train.len())?;
                (s, tch, st)
            }
        };
        let ce_part = sched.ce_partition(t)?;
        let kd_part = sched.kd_partition(t)?;
        let ctx = StepContext {
            teacher: teacher.as_ref(),
            data: &train,
            holdout: holdout.as_ref(),
            ce_part: &ce_part,
            kd_part: &kd_part,
        };
        let teacher_before = teacher.as_ref().map(|n| n.digest(&[ParamKind::Trainable, ParamKind::Frozen, ParamKind::Statistic]));
        let frozen_before = student.digest(&[ParamKind::Frozen]);

        let mut flushed = (0usize, 0usize);
        let mut stopped = false;
        let mut hook = |net: &SegNetwork, st: &TrainState, hist: &StepHistory| -> Result<Control> {
            logs.push_history(hist, flushed.0, flushed.1)?;
            flushed = (hist.iterations.len(), hist.epochs.len());
            if opts.progress {
                if let Some(e) = hist.epochs.last() {
                    eprintln!("step {t} epoch {} loss {:.4}", e.epoch, e.mean_loss);
                }
            }
            let stop = opts.stop_after == Some((t, st.epoch));
            if cfg.output.checkpoints || stop {
                Checkpoint {
                    config_hash: hash.to_string(),
                    step: t,
                    epoch: st.epoch,
                    step_complete: false,
                    rng: st.rng.clone(),
                    optimizer: Some(st.optimizer.clone()),
                    student: net.clone(),
                    teacher: teacher.clone(),
                    logs: logs.snapshot(),
                }
                .save(&ck_dir.join("latest.ckpt"))?;
            }
            if stop {
                stopped = true;
                return Ok(Control::Stop);
            }
            Ok(Control::Continue)
        };
        let history = train_step(&mut student, &ctx, &settings, &mut state, cfg.output.holdout_eval, &mut hook)?;
        if stopped {
            return Ok(RunSummary {
                run_id: run_id.to_string(),
                run_dir: run_dir.to_path_buf(),
                steps,
                network: student,
                completed: false,
            });
        }

        let teacher_after = teacher.as_ref().map(|n| n.digest(&[ParamKind::Trainable, ParamKind::Frozen, ParamKind::Statistic]));
        let frozen_after = student.digest(&[ParamKind::Frozen]);
        let report = evaluate(&student, &data.val, sched, t)?;
        let probe = data.val[0].image.clone();
        let (_, backbone_ops, head_ops) = student.merged().forward_counted(&probe)?;
        let outcome = StepOutcome {
            step: t,
            report,
            history,
            backbone_ops,
            head_ops,
            teacher_digest: teacher_before.zip(teacher_after),
            frozen_digest: (frozen_before, frozen_after),
        };
        push_step_rows(logs, cfg, run_id, &outcome, student.n_outputs())?;
        let mut per_class = Vec::new();
        outcome.report.write_csv(&mut per_class)?;
        std::fs::write(run_dir.join(format!("iou_step{t}.csv")), per_class)?;
        logs.flush(run_dir)?;
        if cfg.output.checkpoints {
            let ck = Checkpoint {
                config_hash: hash.to_string(),
                step: t,
                epoch: state.epoch,
                step_complete: true,
                rng: state.rng.clone(),
                optimizer: Some(state.optimizer.clone()),
                student: student.clone(),
                teacher: None,
                logs: logs.snapshot(),
            };
            ck.save(&ck_dir.join(format!("step{t}.ckpt")))?;
            ck.save(&ck_dir.join("latest.ckpt"))?;
        }
        if opts.progress {
            let r = &outcome.report;
            eprintln!(
                "step {t}: mIoU old {:?} new {:?} all {:?}",
                r.miou_old, r.miou_new, r.miou_all
            );
        }
        steps.push(outcome);
        prev = Some(student);
    }
    Ok(RunSummary {
        run_id: run_id.to_string(),
        run_dir: run_dir.to_path_buf(),
        steps,
        network: prev.ok_or_else(|| Error::Schedule("no steps were run".into()))?,
        completed: true,
    })
}

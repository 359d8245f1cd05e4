//! Experiment configuration: TOML on disk, dotted `key=value` overrides.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cl_losses::LossWeights;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::protocol_data::{
    build_domain_schedule, build_schedule, joint_schedule, Labeling, ScheduleMode, SynthSceneSpec, TaskSchedule,
    CLASS_ORDERS,
};
use crate::seg_model::ArchSpec;
use crate::trainer::MethodName;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub outdir: String,
    pub protocol: ProtocolConfig,
    pub data: DataConfig,
    pub model: ArchSpec,
    pub method: MethodConfig,
    pub loss: LossWeights,
    pub distill: DistillConfig,
    pub optim: OptimConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            outdir: "runs".into(),
            protocol: ProtocolConfig::default(),
            data: DataConfig::default(),
            model: ArchSpec::default(),
            method: MethodConfig::default(),
            loss: LossWeights::default(),
            distill: DistillConfig::default(),
            optim: OptimConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Class order: a name (`ascending`, `A`..`E`, `random:<seed>`) or an explicit list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderSpec {
    Name(String),
    List(Vec<usize>),
}

impl Default for OrderSpec {
    fn default() -> Self {
        OrderSpec::Name("ascending".into())
    }
}

impl OrderSpec {
    /// Object classes in learning order.
    ///
    /// The named orders `A`..`E` are the standard ones when there are 20
    /// classes. For other class counts `A` is ascending and `B`..`E` are fixed
    /// seeded permutations.
    pub fn resolve(&self, n_classes: usize) -> Result<Vec<usize>> {
        let ascending: Vec<usize> = (1..=n_classes).collect();
        let permuted = |seed: u64| {
            let mut v = ascending.clone();
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            v
        };
        match self {
            OrderSpec::List(v) => {
                let order: Vec<usize> = v.iter().copied().skip_while(|&c| c == 0).collect();
                let mut sorted = order.clone();
                sorted.sort_unstable();
                if sorted != ascending {
                    return Err(Error::Config(format!(
                        "protocol.class_order: {v:?} is not a permutation of 1..={n_classes}"
                    )));
                }
                Ok(order)
            }
            OrderSpec::Name(n) => {
                if n == "ascending" {
                    return Ok(ascending);
                }
                if let Some(s) = n.strip_prefix("random:") {
                    let seed = s
                        .parse()
                        .map_err(|_| Error::Config(format!("protocol.class_order: bad seed in {n:?}")))?;
                    return Ok(permuted(seed));
                }
                let Some(idx) = CLASS_ORDERS.iter().position(|(name, _)| name == n) else {
                    return Err(Error::Config(format!(
                        "protocol.class_order: unknown order {n:?} (ascending, A-E, random:<seed> or a list)"
                    )));
                };
                if n_classes == 20 {
                    Ok(CLASS_ORDERS[idx].1[1..].to_vec())
                } else if idx == 0 {
                    Ok(ascending)
                } else {
                    Ok(permuted(idx as u64))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub mode: ScheduleMode,
    /// "X-Y" over classes, or over domains in domain-incremental mode.
    pub schedule: String,
    pub labeling: Labeling,
    pub class_order: OrderSpec,
    pub n_domains: usize,
    /// Train a single step on every class (upper-bound reference).
    pub joint: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            mode: ScheduleMode::ClassIncremental,
            schedule: "6-1".into(),
            labeling: Labeling::Overlapped,
            class_order: OrderSpec::default(),
            n_domains: 1,
            joint: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_classes: usize,
    pub image_size: (usize, usize),
    pub shapes_per_image: (usize, usize),
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub holdout_fraction: f64,
    /// Directory for the scene cache; empty disables caching.
    pub cache_dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_classes: 10,
            image_size: (64, 64),
            shapes_per_image: (1, 3),
            train_scenes: 200,
            val_scenes: 50,
            holdout_fraction: 0.2,
            cache_dir: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub name: MethodName,
    /// Sample drop-path masks in RC blocks; otherwise branches are averaged.
    pub drop_path: bool,
    /// Merge both branches into the frozen one at each step transition.
    pub merge: bool,
    /// Freeze the merged branch after a transition.
    pub freeze: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig { name: MethodName::RcPcd, drop_path: true, merge: true, freeze: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_first: f64,
    pub lr_next: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub hflip: bool,
    /// After the first step, normalize with running statistics and leave them untouched.
    /// Off by default: at lambda 100 the unnormalized unkd term diverges without batch statistics.
    pub freeze_norm_stats: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            batch_size: 8,
            epochs: 10,
            lr_first: 0.02,
            lr_next: 0.001,
            momentum: 0.9,
            poly_power: 0.9,
            hflip: true,
            freeze_norm_stats: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoints: bool,
    /// Evaluate the held-out split after every epoch.
    pub holdout_eval: bool,
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { checkpoints: true, holdout_eval: true, plots: true }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &location(&e, text)))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg: ExperimentConfig = v.try_into().map_err(|e: toml::de::Error| {
            // Re-parse the file alone so problems in it carry a line number.
            match toml::from_str::<ExperimentConfig>(text) {
                Err(fe) => Error::Config(fe.message().to_string() + &location(&fe, text)),
                Ok(_) => Error::Config(format!("{} (in override `{}`)", e.message(), first_bad_override(text, overrides))),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.distill.validate(self.model.n_taps())?;
        self.scene_spec().validate()?;
        let o = &self.optim;
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config("optim.batch_size and optim.epochs must be positive".into()));
        }
        if !(o.lr_first >= 0.0 && o.lr_next >= 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.poly_power > 0.0) {
            return Err(Error::Config("optim: learning rates >= 0, momentum in [0, 1), poly_power > 0".into()));
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(Error::Config("data.holdout_fraction must lie in [0, 1)".into()));
        }
        if self.data.train_scenes == 0 || self.data.val_scenes == 0 {
            return Err(Error::Config("data: scene counts must be positive".into()));
        }
        if self.protocol.n_domains == 0 {
            return Err(Error::Config("protocol.n_domains must be positive".into()));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<TaskSchedule> {
        let p = &self.protocol;
        let n = self.data.n_classes;
        if p.joint {
            return joint_schedule(n, p.labeling, &p.class_order.resolve(n)?);
        }
        match p.mode {
            ScheduleMode::ClassIncremental => {
                build_schedule(&p.schedule, n, p.labeling, Some(&p.class_order.resolve(n)?))
            }
            ScheduleMode::DomainIncremental => build_domain_schedule(&p.schedule, p.n_domains, n),
        }
    }

    pub fn scene_spec(&self) -> SynthSceneSpec {
        SynthSceneSpec {
            seed: self.seed,
            image_size: self.data.image_size,
            n_classes: self.data.n_classes,
            shapes_per_image: self.data.shapes_per_image,
            domain_id: 0,
        }
    }

    /// Hash of everything that affects numeric results (the output
    /// directory excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.outdir.clear();
        sha_hex(c.to_toml_string().as_bytes())
    }

    /// `<hash of the config without seed and outdir>-s<seed>`.
    pub fn run_id(&self) -> String {
        let mut c = self.clone();
        c.outdir.clear();
        c.seed = 0;
        format!("{}-s{}", &sha_hex(c.to_toml_string().as_bytes())[..12], self.seed)
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    crate::seg_model::hex(&Sha256::digest(bytes))
}

fn location(e: &toml::de::Error, text: &str) -> String {
    match e.span() {
        Some(s) => {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

/// Set `a.b.c = value` inside a TOML document. The value is parsed as TOML
/// (numbers, booleans, arrays) and falls back to a plain string.
pub fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key}: parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// The first override after which the configuration stops deserialising.
fn first_bad_override<'a>(text: &str, overrides: &'a [String]) -> &'a str {
    let Ok(mut v) = toml::from_str::<toml::Value>(text) else { return "" };
    for o in overrides {
        if apply_override(&mut v, o).is_err() || v.clone().try_into::<ExperimentConfig>().is_err() {
            return o;
        }
    }
    overrides.last().map_or("", |s| s.as_str())
}

//! Versioned binary checkpoints.
//!
//! Layout: magic, format version, then length-prefixed fields in a fixed
//! order. All integers and floats are little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{OptimizerState, Sgd, Shape4, Tensor4};
use crate::rc_block::ParamKind;
use crate::seg_model::{ArchSpec, SegNetwork};

const MAGIC: &[u8; 8] = b"RCILCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: usize,
    /// Epochs completed within `step`.
    pub epoch: usize,
    pub step_complete: bool,
    pub rng: ChaCha8Rng,
    pub optimizer: Option<Sgd>,
    pub student: SegNetwork,
    pub teacher: Option<SegNetwork>,
    /// Output files written so far, by name.
    pub logs: Vec<(String, String)>,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor4) {
        for d in t.shape().dims() {
            self.usize(d);
        }
        self.0.extend(t.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
    fn tensor(&mut self) -> Result<Tensor4> {
        let d = [self.usize()?, self.usize()?, self.usize()?, self.usize()?];
        let shape = Shape4::new(d[0], d[1], d[2], d[3]);
        let raw = self.take(shape.numel() * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor4::from_vec(shape, data)
    }
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Trainable => 0,
        ParamKind::Frozen => 1,
        ParamKind::Statistic => 2,
    }
}

fn write_network(w: &mut Writer, net: &SegNetwork) {
    w.u8(u8::from(net.uses_rc()));
    w.str(&toml::to_string(&net.arch).expect("arch serializes"));
    w.usize(net.n_outputs());
    let mut net = net.clone();
    let blocks = net.named_blocks_mut();
    w.usize(blocks.len());
    for (name, block) in blocks {
        w.str(&name);
        let fw = block.as_rc().map_or((1.0, 0.0), |b| b.fusion_weights);
        w.f64(fw.0);
        w.f64(fw.1);
        let branches = block.branches_mut(&name);
        w.usize(branches.len());
        for (bn, br) in branches {
            w.str(&bn);
            w.u8(u8::from(br.trainable));
            w.u8(u8::from(br.norm_fixed));
            w.f64(br.norm.eps);
            w.f64(br.norm.momentum);
        }
    }
    let mut tensors = Vec::new();
    net.visit(&mut |name, t, kind| tensors.push((name.to_string(), t.clone(), kind)));
    w.usize(tensors.len());
    for (name, t, kind) in tensors {
        w.str(&name);
        w.u8(kind_code(kind));
        w.tensor(&t);
    }
}

fn read_network(r: &mut Reader<'_>) -> Result<SegNetwork> {
    let rc = r.u8()? == 1;
    let arch: ArchSpec = toml::from_str(&r.str()?).map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
    let n_outputs = r.usize()?;
    let mut net = SegNetwork::new(&arch, n_outputs, rc, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n_blocks = r.usize()?;
    let mut blocks = net.named_blocks_mut();
    if n_blocks != blocks.len() {
        return Err(Error::Checkpoint(format!("{n_blocks} blocks stored, architecture has {}", blocks.len())));
    }
    for (name, block) in blocks.iter_mut() {
        let stored = r.str()?;
        if &stored != name {
            return Err(Error::Checkpoint(format!("block {stored} where {name} expected")));
        }
        let fw = (r.f64()?, r.f64()?);
        if let Some(b) = block.as_rc_mut() {
            b.fusion_weights = fw;
        }
        let n_br = r.usize()?;
        let mut branches = block.branches_mut(name);
        if n_br != branches.len() {
            return Err(Error::Checkpoint(format!("branch count mismatch in {name}")));
        }
        for (bn, br) in branches.iter_mut() {
            if &r.str()? != bn {
                return Err(Error::Checkpoint(format!("branch order mismatch at {bn}")));
            }
            br.trainable = r.u8()? == 1;
            br.norm_fixed = r.u8()? == 1;
            br.norm.eps = r.f64()?;
            br.norm.momentum = r.f64()?;
        }
    }
    drop(blocks);
    let n_tensors = r.usize()?;
    let mut stored = std::collections::BTreeMap::new();
    for _ in 0..n_tensors {
        let name = r.str()?;
        let kind = r.u8()?;
        stored.insert(name, (kind, r.tensor()?));
    }
    let mut err = None;
    let mut used = 0;
    net.visit_mut(&mut |name, t, kind| match stored.get(name) {
        Some((k, v)) if *k == kind_code(kind) && v.shape() == t.shape() => {
            *t = v.clone();
            used += 1;
        }
        _ => {
            err.get_or_insert_with(|| Error::Checkpoint(format!("tensor {name} missing or mismatched")));
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != stored.len() {
        return Err(Error::Checkpoint("checkpoint holds unknown tensors".into()));
    }
    Ok(net)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.0.extend(CHECKPOINT_VERSION.to_le_bytes());
        w.str(&self.config_hash);
        w.usize(self.step);
        w.usize(self.epoch);
        w.u8(u8::from(self.step_complete));
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend(self.rng.get_word_pos().to_le_bytes());
        match self.optimizer.as_ref().and_then(|o| o.state.as_ref().map(|s| (o, s))) {
            None => w.u8(0),
            Some((o, s)) => {
                w.u8(1);
                w.f64(s.base_lr);
                w.f64(s.momentum);
                w.u64(s.iteration);
                w.u64(s.total_iterations);
                w.f64(s.poly_power);
                w.usize(o.velocity.len());
                for (k, v) in &o.velocity {
                    w.str(k);
                    w.tensor(v);
                }
            }
        }
        write_network(&mut w, &self.student);
        match &self.teacher {
            None => w.u8(0),
            Some(t) => {
                w.u8(1);
                write_network(&mut w, t);
            }
        }
        w.usize(self.logs.len());
        for (k, v) in &self.logs {
            w.str(k);
            w.str(v);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config_hash = r.str()?;
        let step = r.usize()?;
        let epoch = r.usize()?;
        let step_complete = r.u8()? == 1;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(u128::from_le_bytes(r.take(16)?.try_into().unwrap()));
        let optimizer = match r.u8()? {
            0 => None,
            _ => {
                let state = OptimizerState {
                    base_lr: r.f64()?,
                    momentum: r.f64()?,
                    iteration: r.u64()?,
                    total_iterations: r.u64()?,
                    poly_power: r.f64()?,
                };
                let mut sgd = Sgd::new(state);
                for _ in 0..r.usize()? {
                    let k = r.str()?;
                    sgd.velocity.insert(k, r.tensor()?);
                }
                Some(sgd)
            }
        };
        let student = read_network(&mut r)?;
        let teacher = match r.u8()? {
            0 => None,
            _ => Some(read_network(&mut r)?),
        };
        let mut logs = Vec::new();
        for _ in 0..r.usize()? {
            let k = r.str()?;
            logs.push((k, r.str()?));
        }
        if r.at != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { config_hash, step, epoch, step_complete, rng, optimizer, student, teacher, logs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Load, refusing a checkpoint written under a different config unless `force`.
    pub fn load(path: &Path, expected_hash: &str, force: bool) -> Result<Self> {
        let c = Self::from_bytes(&std::fs::read(path)?)?;
        if c.config_hash != expected_hash && !force {
            return Err(Error::Checkpoint(format!(
                "{} was written by config {}, current config is {}",
                path.display(),
                &c.config_hash[..12.min(c.config_hash.len())],
                &expected_hash[..12.min(expected_hash.len())]
            )));
        }
        Ok(c)
    }
}

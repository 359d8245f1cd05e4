//! Feature distillation between teacher and student taps.
//!
//! Each term squares both feature maps, pools them, and takes the Euclidean
//! distance between the pooled maps per sample (averaged over the batch).
//! The default `avg_cube` variant combines multi-scale spatial average
//! pooling with average pooling across channels; the other variants swap in
//! strip, max or global pooling for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Shape4, Tensor4, Var, Window};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolVariant {
    AvgCube,
    Strip,
    Max,
    Gap,
    None,
}

impl PoolVariant {
    pub const ALL: [PoolVariant; 5] = [
        PoolVariant::None,
        PoolVariant::Gap,
        PoolVariant::Max,
        PoolVariant::Strip,
        PoolVariant::AvgCube,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PoolVariant::AvgCube => "avg_cube",
            PoolVariant::Strip => "strip",
            PoolVariant::Max => "max",
            PoolVariant::Gap => "gap",
            PoolVariant::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub spatial_kernels: Vec<usize>,
    pub spatial_stride: usize,
    pub channel_kernels: Vec<usize>,
    pub channel_stride: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            spatial_kernels: vec![4, 8, 12, 16, 20, 24],
            spatial_stride: 1,
            channel_kernels: vec![3],
            channel_stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "DistillToml", into = "DistillToml")]
pub struct DistillConfig {
    pub variant: PoolVariant,
    pub pool: PoolSpec,
    /// Which taps participate; empty means all.
    pub layer_mask: Vec<bool>,
    /// Feed each spatial kernel the previous kernel's output instead of the squared input.
    pub cascade: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            variant: PoolVariant::AvgCube,
            pool: PoolSpec::default(),
            layer_mask: Vec::new(),
            cascade: false,
        }
    }
}

/// Flat on-disk form: pooling keys sit next to the variant.
#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DistillToml {
    variant: PoolVariant,
    spatial_kernels: Vec<usize>,
    spatial_stride: usize,
    channel_kernels: Vec<usize>,
    channel_stride: usize,
    layer_mask: Vec<bool>,
    cascade: bool,
}

impl Default for DistillToml {
    fn default() -> Self {
        DistillConfig::default().into()
    }
}

impl From<DistillConfig> for DistillToml {
    fn from(c: DistillConfig) -> Self {
        DistillToml {
            variant: c.variant,
            spatial_kernels: c.pool.spatial_kernels,
            spatial_stride: c.pool.spatial_stride,
            channel_kernels: c.pool.channel_kernels,
            channel_stride: c.pool.channel_stride,
            layer_mask: c.layer_mask,
            cascade: c.cascade,
        }
    }
}

impl From<DistillToml> for DistillConfig {
    fn from(t: DistillToml) -> Self {
        DistillConfig {
            variant: t.variant,
            pool: PoolSpec {
                spatial_kernels: t.spatial_kernels,
                spatial_stride: t.spatial_stride,
                channel_kernels: t.channel_kernels,
                channel_stride: t.channel_stride,
            },
            layer_mask: t.layer_mask,
            cascade: t.cascade,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, n_taps: usize) -> Result<()> {
        if !self.layer_mask.is_empty() && self.layer_mask.len() != n_taps {
            return Err(Error::Config(format!(
                "distill.layer_mask has {} entries, network has {n_taps} taps",
                self.layer_mask.len()
            )));
        }
        let p = &self.pool;
        if p.spatial_stride == 0 || p.channel_stride == 0 {
            return Err(Error::Config("distill strides must be positive".into()));
        }
        if p.spatial_kernels.iter().chain(&p.channel_kernels).any(|&k| k == 0) {
            return Err(Error::Config("distill kernels must be positive".into()));
        }
        Ok(())
    }

    fn enabled(&self, n: usize) -> Vec<usize> {
        (0..n)
            .filter(|&i| self.layer_mask.get(i).copied().unwrap_or(true))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    Spatial,
    Channel,
}

fn fits(s: Shape4, kernel: usize, axis: PoolAxis) -> bool {
    match axis {
        PoolAxis::Spatial => kernel <= s.h && kernel <= s.w,
        PoolAxis::Channel => kernel <= s.c,
    }
}

fn pool(g: &mut Graph, x: Var, kernel: usize, stride: usize, axis: PoolAxis) -> Result<Var> {
    match axis {
        PoolAxis::Spatial => g.avg_pool2d(x, Window::square(kernel, stride)),
        PoolAxis::Channel => g.channel_avg_pool(x, kernel, stride),
    }
}

/// Square every element, then average-pool along `axis`. `None` when the
/// kernel does not fit the pooled extent.
pub fn pooled_square(g: &mut Graph, x: Var, kernel: usize, stride: usize, axis: PoolAxis) -> Result<Option<Var>> {
    if !fits(g.shape(x), kernel, axis) {
        return Ok(None);
    }
    let sq = g.square(x);
    pool(g, sq, kernel, stride, axis).map(Some)
}

/// Plain-tensor [`pooled_square`].
pub fn pooled_square_tensor(x: &Tensor4, kernel: usize, stride: usize, axis: PoolAxis) -> Result<Option<Tensor4>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    Ok(pooled_square(&mut g, v, kernel, stride, axis)?.map(|p| g.value(p).clone()))
}

/// Batch mean of the per-sample Euclidean distance between two maps.
fn distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d2 = g.square(d);
    let per = g.sum_per_sample(d2);
    let norm = g.sqrt(per);
    Ok(g.mean(norm))
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor4::scalar(0.0))
}

fn sum_scalars(g: &mut Graph, terms: &[Var]) -> Result<Option<Var>> {
    let mut it = terms.iter();
    let Some(&first) = it.next() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in it {
        acc = g.add(acc, t)?;
    }
    Ok(Some(acc))
}

fn mean_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    match sum_scalars(g, terms)? {
        Some(s) => Ok(g.scale(s, 1.0 / terms.len() as f64)),
        None => Ok(zero(g)),
    }
}

/// Check pairing and detach teacher taps so no gradient can reach them.
fn paired(g: &mut Graph, taps_t: &[Var], taps_s: &[Var], op: &'static str) -> Result<Vec<(Var, Var)>> {
    if taps_t.len() != taps_s.len() {
        return Err(shape_err(
            op,
            format!("{} teacher taps vs {} student taps", taps_t.len(), taps_s.len()),
        ));
    }
    taps_t
        .iter()
        .zip(taps_s)
        .map(|(&t, &s)| {
            let (st, ss) = (g.shape(t), g.shape(s));
            if st != ss {
                return Err(shape_err(op, format!("teacher {st} vs student {ss}")));
            }
            let t = g.constant(g.value(t).clone());
            Ok((t, s))
        })
        .collect()
}

/// Average over layers of the average over kernels of pooled-square distances.
fn pooled_loss(
    g: &mut Graph,
    taps_t: &[Var],
    taps_s: &[Var],
    cfg: &DistillConfig,
    axis: PoolAxis,
    op: &'static str,
) -> Result<Var> {
    let pairs = paired(g, taps_t, taps_s, op)?;
    let (kernels, stride) = match axis {
        PoolAxis::Spatial => (&cfg.pool.spatial_kernels, cfg.pool.spatial_stride),
        PoolAxis::Channel => (&cfg.pool.channel_kernels, cfg.pool.channel_stride),
    };
    let cascade = cfg.cascade && axis == PoolAxis::Spatial;
    let mut layer_terms = Vec::new();
    for l in cfg.enabled(pairs.len()) {
        let (t, s) = pairs[l];
        let (sq_t, sq_s) = (g.square(t), g.square(s));
        let (mut cur_t, mut cur_s) = (sq_t, sq_s);
        let mut terms = Vec::new();
        for &k in kernels {
            let (src_t, src_s) = if cascade { (cur_t, cur_s) } else { (sq_t, sq_s) };
            if !fits(g.shape(src_t), k, axis) {
                continue;
            }
            let pt = pool(g, src_t, k, stride, axis)?;
            let ps = pool(g, src_s, k, stride, axis)?;
            terms.push(distance(g, pt, ps)?);
            (cur_t, cur_s) = (pt, ps);
        }
        layer_terms.push(mean_scalars(g, &terms)?);
    }
    mean_scalars(g, &layer_terms)
}

/// Multi-scale spatial term.
pub fn skd_loss(g: &mut Graph, taps_t: &[Var], taps_s: &[Var], cfg: &DistillConfig) -> Result<Var> {
    pooled_loss(g, taps_t, taps_s, cfg, PoolAxis::Spatial, "skd_loss")
}

/// Channel-window term.
pub fn ckd_loss(g: &mut Graph, taps_t: &[Var], taps_s: &[Var], cfg: &DistillConfig) -> Result<Var> {
    pooled_loss(g, taps_t, taps_s, cfg, PoolAxis::Channel, "ckd_loss")
}

/// `skd_loss + ckd_loss`.
pub fn pcd_loss(g: &mut Graph, taps_t: &[Var], taps_s: &[Var], cfg: &DistillConfig) -> Result<Var> {
    let s = skd_loss(g, taps_t, taps_s, cfg)?;
    let c = ckd_loss(g, taps_t, taps_s, cfg)?;
    g.add(s, c)
}

fn single_window_loss(
    g: &mut Graph,
    taps_t: &[Var],
    taps_s: &[Var],
    cfg: &DistillConfig,
    op: &'static str,
    windows: impl Fn(Shape4) -> Vec<Window>,
    max: bool,
) -> Result<Var> {
    let pairs = paired(g, taps_t, taps_s, op)?;
    let mut layer_terms = Vec::new();
    for l in cfg.enabled(pairs.len()) {
        let (t, s) = pairs[l];
        let (sq_t, sq_s) = (g.square(t), g.square(s));
        let mut terms = Vec::new();
        for win in windows(g.shape(t)) {
            if win.kh > g.shape(t).h || win.kw > g.shape(t).w {
                continue;
            }
            let (pt, ps) = if max {
                (g.max_pool2d(sq_t, win)?, g.max_pool2d(sq_s, win)?)
            } else {
                (g.avg_pool2d(sq_t, win)?, g.avg_pool2d(sq_s, win)?)
            };
            terms.push(distance(g, pt, ps)?);
        }
        layer_terms.push(terms);
    }
    let per_layer = layer_terms
        .into_iter()
        .map(|terms| -> Result<Var> {
            if max {
                mean_scalars(g, &terms)
            } else {
                Ok(sum_scalars(g, &terms)?.unwrap_or_else(|| zero(g)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    mean_scalars(g, &per_layer)
}

/// Strip pooling: each squared map is averaged over full rows and over full
/// columns; the row and column distances are summed per layer.
pub fn strip_pool_loss(g: &mut Graph, taps_t: &[Var], taps_s: &[Var], cfg: &DistillConfig) -> Result<Var> {
    single_window_loss(
        g,
        taps_t,
        taps_s,
        cfg,
        "strip_pool_loss",
        |s| {
            vec![
                Window { kh: s.h, kw: 1, sh: 1, sw: 1 },
                Window { kh: 1, kw: s.w, sh: 1, sw: 1 },
            ]
        },
        false,
    )
}

/// Multi-scale max pooling over squared features.
pub fn max_pool_loss(g: &mut Graph, taps_t: &[Var], taps_s: &[Var], cfg: &DistillConfig) -> Result<Var> {
    let kernels = cfg.pool.spatial_kernels.clone();
    let stride = cfg.pool.spatial_stride;
    single_window_loss(
        g,
        taps_t,
        taps_s,
        cfg,
        "max_pool_loss",
        move |_| kernels.iter().map(|&k| Window::square(k, stride)).collect(),
        true,
    )
}

/// Global average pooling over squared features.
pub fn gap_loss(g: &mut Graph, taps_t: &[Var], taps_s: &[Var], cfg: &DistillConfig) -> Result<Var> {
    single_window_loss(
        g,
        taps_t,
        taps_s,
        cfg,
        "gap_loss",
        |s| vec![Window { kh: s.h, kw: s.w, sh: 1, sw: 1 }],
        false,
    )
}

/// Distance between the squared maps without pooling.
pub fn unpooled_loss(g: &mut Graph, taps_t: &[Var], taps_s: &[Var], cfg: &DistillConfig) -> Result<Var> {
    single_window_loss(
        g,
        taps_t,
        taps_s,
        cfg,
        "unpooled_loss",
        |_| vec![Window::square(1, 1)],
        false,
    )
}

/// The distillation term selected by `cfg.variant`. Only `avg_cube` includes
/// the channel term.
pub fn distill_loss(g: &mut Graph, taps_t: &[Var], taps_s: &[Var], cfg: &DistillConfig) -> Result<Var> {
    match cfg.variant {
        PoolVariant::AvgCube => pcd_loss(g, taps_t, taps_s, cfg),
        PoolVariant::Strip => strip_pool_loss(g, taps_t, taps_s, cfg),
        PoolVariant::Max => max_pool_loss(g, taps_t, taps_s, cfg),
        PoolVariant::Gap => gap_loss(g, taps_t, taps_s, cfg),
        PoolVariant::None => unpooled_loss(g, taps_t, taps_s, cfg),
    }
}

/// Convenience evaluation on plain tensors.
pub fn distill_value(
    f: fn(&mut Graph, &[Var], &[Var], &DistillConfig) -> Result<Var>,
    taps_t: &[Tensor4],
    taps_s: &[Tensor4],
    cfg: &DistillConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let t: Vec<Var> = taps_t.iter().map(|x| g.constant(x.clone())).collect();
    let s: Vec<Var> = taps_s.iter().map(|x| g.constant(x.clone())).collect();
    let v = f(&mut g, &t, &s, cfg)?;
    Ok(g.value(v).item())
}

//! Self-contained invariant suite with brute-force reference implementations.
//!
//! Every check compares the library against an independent loop-level
//! reference or against finite differences. [`Faults`] deliberately breaks
//! one code path so the suite can demonstrate that it notices.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cl_losses::{unce_loss, unkd_loss, ClassPartition};
use crate::distill::{ckd_loss, distill_value, pcd_loss, skd_loss, DistillConfig, PoolSpec};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::numerics::gradcheck::check_gradients;
use crate::numerics::{
    BatchNormParams, Bindings, BnMode, Conv2dParams, Graph, Shape4, Tensor4, Var, Window,
};
use crate::protocol_data::{build_schedule, filter_and_relabel, Labeling, Scene, TaskSchedule, CLASS_ORDERS};
use crate::rc_block::{
    fuse_conv_bn, merge_branches, rc_forward_eval, step_transition_with, DropPathMask, NormStats,
    RcBlock, RcBranch, TransitionOps,
};
use crate::Result;

/// Deliberate defects for demonstrating that the checks can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Faults {
    /// Added to the first merged weight before comparing.
    pub merged_weight_delta: f64,
    /// Merge branches at (1, 1) instead of the block's fusion weights.
    pub unit_merge_factor: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error, or a count of mismatches for exact checks.
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub detail: String,
}

impl CheckResult {
    fn within(name: &str, worst: f64, tolerance: f64, cases: usize, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: worst < tolerance,
            worst,
            tolerance,
            cases,
            detail,
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, s: Shape4) -> Tensor4 {
    Tensor4::uniform(s, 1.0, r)
}

fn rand_norm(r: &mut ChaCha8Rng, ch: usize) -> BatchNormParams {
    let mut p = BatchNormParams::new(ch);
    p.gamma = Tensor4::vector((0..ch).map(|_| r.gen_range(-2.0..2.0)).collect());
    p.beta = Tensor4::vector((0..ch).map(|_| r.gen_range(-1.0..1.0)).collect());
    p.running_mean = Tensor4::vector((0..ch).map(|_| r.gen_range(-1.0..1.0)).collect());
    p.running_var = Tensor4::vector((0..ch).map(|_| r.gen_range(0.05..3.0)).collect());
    p
}

fn rand_conv(r: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, stride: usize) -> Conv2dParams {
    let mut c = Conv2dParams::zeros(in_ch, out_ch, 3, stride, 1);
    c.weight = rand_tensor(r, c.weight.shape());
    c.bias = rand_tensor(r, c.bias.shape());
    c
}

fn rand_block(r: &mut ChaCha8Rng) -> RcBlock {
    let in_ch = r.gen_range(1..5);
    let out_ch = r.gen_range(1..5);
    let stride = r.gen_range(1..3);
    let a = RcBranch::new(rand_conv(r, in_ch, out_ch, stride), rand_norm(r, out_ch));
    let b = RcBranch::new(rand_conv(r, in_ch, out_ch, stride), rand_norm(r, out_ch));
    RcBlock::new(a, b).expect("branches share a shape")
}

/// Nested-loop convolution with zero padding.
fn naive_conv(x: &Tensor4, c: &Conv2dParams) -> Tensor4 {
    let xs = x.shape();
    let ws = c.weight.shape();
    let (s, p) = (c.stride, c.padding);
    let oh = (xs.h + 2 * p - ws.h) / s + 1;
    let ow = (xs.w + 2 * p - ws.w) / s + 1;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias.data()[o];
                    for i in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                    acc += c.weight.at(o, i, ky, kx) * x.at(n, i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Conv followed by the elementwise eval-mode normalization formula.
fn naive_conv_bn(x: &Tensor4, c: &Conv2dParams, bn: &BatchNormParams) -> Tensor4 {
    let y = naive_conv(x, c);
    let s = y.shape();
    let mut out = y.clone();
    for n in 0..s.n {
        for ch in 0..s.c {
            let scale = bn.gamma.data()[ch] / (bn.running_var.data()[ch] + bn.eps).sqrt();
            for h in 0..s.h {
                for w in 0..s.w {
                    let v = scale * (y.at(n, ch, h, w) - bn.running_mean.data()[ch]) + bn.beta.data()[ch];
                    out.set(n, ch, h, w, v);
                }
            }
        }
    }
    out
}

fn merged_with_faults(block: &RcBlock, faults: Faults) -> Conv2dParams {
    let mut m = merge_branches(block, block.fusion_weights).conv;
    m.weight.data_mut()[0] += faults.merged_weight_delta;
    m
}

/// Merged convolution against the two-branch eval path on random blocks and inputs.
pub fn merge_equivalence(cases: usize, tolerance: f64, faults: Faults) -> Result<CheckResult> {
    let mut r = rng(0x6d65);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let block = rand_block(&mut r);
        let h = r.gen_range(3..9);
        let x = rand_tensor(&mut r, Shape4::new(2, block.branch_a.conv.in_channels(), h, h));
        let merged = naive_conv(&x, &merged_with_faults(&block, faults));
        worst = worst.max(merged.max_abs_diff(&rc_forward_eval(&block, &x)?));
    }
    Ok(CheckResult::within("merge equivalence", worst, tolerance, cases, "max |merged - two-branch eval|".into()))
}

/// Fused conv against conv followed by normalization.
pub fn fusion_oracle(cases: usize, tolerance: f64) -> Result<CheckResult> {
    let mut r = rng(0x6675);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let in_ch = r.gen_range(1..5);
        let out_ch = r.gen_range(1..5);
        let stride = r.gen_range(1..3);
        let conv = rand_conv(&mut r, in_ch, out_ch, stride);
        let bn = rand_norm(&mut r, out_ch);
        let x = rand_tensor(&mut r, Shape4::new(2, in_ch, 6, 6));
        let fused = fuse_conv_bn(&conv, &bn);
        worst = worst.max(naive_conv(&x, &fused).max_abs_diff(&naive_conv_bn(&x, &conv, &bn)));
    }
    Ok(CheckResult::within("conv-norm fusion", worst, tolerance, cases, "max |fused - conv then norm|".into()))
}

/// After a transition, the frozen branch alone reproduces half the previous eval output.
pub fn transition_equivalence(cases: usize, tolerance: f64, faults: Faults) -> Result<CheckResult> {
    let mut r = rng(0x7472);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let block = rand_block(&mut r);
        let x = rand_tensor(&mut r, Shape4::new(2, block.branch_a.conv.in_channels(), 6, 6));
        let before = rc_forward_eval(&block, &x)?;
        let mut source = block.clone();
        if faults.unit_merge_factor {
            source.fusion_weights = (1.0, 1.0);
        }
        let next = step_transition_with(&source, TransitionOps::default());
        let frozen = fuse_conv_bn(&next.branch_a.conv, &next.branch_a.norm);
        let got = naive_conv(&x, &frozen).map(|v| 0.5 * v);
        worst = worst.max(got.max_abs_diff(&before.map(|v| 0.5 * v)));
    }
    Ok(CheckResult::within(
        "step transition",
        worst,
        tolerance,
        cases,
        "max |0.5 frozen(x) - 0.5 previous(x)|".into(),
    ))
}

/// Mean of the three constant drop-path settings against the eval output.
pub fn drop_path_expectation(cases: usize, tolerance: f64) -> Result<CheckResult> {
    let mut r = rng(0x6470);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let block = rand_block(&mut r);
        let ch = block.out_channels();
        let x = rand_tensor(&mut r, Shape4::new(2, block.branch_a.conv.in_channels(), 5, 5));
        let mut sum = Tensor4::zeros(rc_forward_eval(&block, &x)?.shape());
        for e in DropPathMask::LEVELS {
            let mut b = block.clone();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let mut binds = Bindings::new();
            let y = b.record_masked(&mut g, xv, &DropPathMask::constant(ch, e), &mut binds, "blk", NormStats::Running)?;
            sum = sum.zip_map(g.value(y), |a, v| a + v)?;
        }
        let mean = sum.map(|v| v / 3.0);
        worst = worst.max(mean.max_abs_diff(&rc_forward_eval(&block, &x)?));
    }
    Ok(CheckResult::within("drop-path expectation", worst, tolerance, cases, "max |mean over eta - eval|".into()))
}

fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(&mut rng(seed), g.shape(v));
    g.weighted_sum(v, w)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn gradient_cases() -> Vec<(&'static str, Vec<Shape4>, Build)> {
    let s = Shape4::new(2, 3, 3, 2);
    let pool = Shape4::new(2, 4, 6, 5);
    let logits = Shape4::new(2, 5, 3, 3);
    let v = Shape4::new(1, 2, 1, 1);
    let mut cases: Vec<(&'static str, Vec<Shape4>, Build)> = Vec::new();
    for (stride, pad) in [(1usize, 1usize), (2, 1)] {
        cases.push((
            "conv2d",
            vec![Shape4::new(2, 2, 5, 5), Shape4::new(3, 2, 3, 3), Shape4::new(1, 3, 1, 1)],
            Box::new(move |g, x| {
                let y = g.conv2d(x[0], x[1], Some(x[2]), stride, pad)?;
                project(g, y, 1)
            }),
        ));
    }
    cases.push(("batch_norm", vec![Shape4::new(3, 2, 3, 3), v, v], Box::new(|g, x| {
        let (y, _) = g.batch_norm(x[0], x[1], x[2], BnMode::Batch, 1e-5)?;
        project(g, y, 2)
    })));
    cases.push(("add", vec![s, s], Box::new(|g, x| { let y = g.add(x[0], x[1])?; project(g, y, 3) })));
    cases.push(("sub", vec![s, s], Box::new(|g, x| { let y = g.sub(x[0], x[1])?; project(g, y, 4) })));
    cases.push(("mul", vec![s, s], Box::new(|g, x| { let y = g.mul(x[0], x[1])?; project(g, y, 5) })));
    cases.push(("scale", vec![s], Box::new(|g, x| { let y = g.scale(x[0], -1.7); project(g, y, 6) })));
    cases.push(("square", vec![s], Box::new(|g, x| { let y = g.square(x[0]); project(g, y, 7) })));
    cases.push(("relu", vec![s], Box::new(|g, x| { let y = g.relu(x[0]); project(g, y, 8) })));
    cases.push(("sqrt", vec![s], Box::new(|g, x| {
        let sq = g.square(x[0]);
        let half = g.constant(Tensor4::full(g.shape(sq), 0.5));
        let pos = g.add(sq, half)?;
        let y = g.sqrt(pos);
        project(g, y, 9)
    })));
    cases.push(("channel_scale", vec![s], Box::new(|g, x| {
        let y = g.channel_scale(x[0], vec![0.0, 0.5, 1.0])?;
        project(g, y, 10)
    })));
    cases.push(("sum", vec![s], Box::new(|g, x| { let y = g.square(x[0]); Ok(g.sum(y)) })));
    cases.push(("mean", vec![s], Box::new(|g, x| { let y = g.square(x[0]); Ok(g.mean(y)) })));
    cases.push(("sum_per_sample", vec![s], Box::new(|g, x| { let y = g.sum_per_sample(x[0]); project(g, y, 11) })));
    cases.push(("avg_pool2d", vec![pool], Box::new(|g, x| {
        let y = g.avg_pool2d(x[0], Window { kh: 2, kw: 3, sh: 2, sw: 1 })?;
        project(g, y, 12)
    })));
    cases.push(("max_pool2d", vec![pool], Box::new(|g, x| {
        let y = g.max_pool2d(x[0], Window::square(2, 1))?;
        project(g, y, 13)
    })));
    cases.push(("channel_avg_pool", vec![pool], Box::new(|g, x| {
        let y = g.channel_avg_pool(x[0], 3, 1)?;
        project(g, y, 14)
    })));
    cases.push(("upsample_bilinear", vec![Shape4::new(2, 2, 3, 4)], Box::new(|g, x| {
        let y = g.upsample_bilinear(x[0], 7, 9);
        project(g, y, 15)
    })));
    cases.push(("softmax_channels", vec![logits], Box::new(|g, x| { let y = g.softmax_channels(x[0]); project(g, y, 16) })));
    cases.push(("log_group_softmax", vec![logits], Box::new(|g, x| {
        let y = g.log_group_softmax(x[0], vec![vec![0, 1], vec![2], vec![3, 4]], (0..5).collect())?;
        project(g, y, 17)
    })));
    cases
}

fn rand_labels(r: &mut ChaCha8Rng, s: Shape4, allowed: &[u8]) -> LabelMap {
    let data = (0..s.n * s.h * s.w).map(|_| allowed[r.gen_range(0..allowed.len())]).collect();
    LabelMap::from_vec(s.n, s.h, s.w, data).expect("sizes agree")
}

/// Central finite differences for every differentiable op and the three training losses.
pub fn gradient_suite(instances: u64, tolerance: f64) -> Result<CheckResult> {
    const STEP: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    let mut total = 0;
    let mut note = |name: &'static str, e: f64, worst: &mut f64| {
        if e > *worst {
            *worst = e;
            worst_name = name;
        }
    };
    for (name, shapes, build) in gradient_cases() {
        for seed in 0..instances {
            let mut r = rng(1000 + seed);
            let inputs: Vec<Tensor4> = shapes.iter().map(|s| rand_tensor(&mut r, *s)).collect();
            note(name, check_gradients(&inputs, STEP, &build)?, &mut worst);
            total += 1;
        }
    }
    let part = ClassPartition::contiguous(2, 2);
    let cfg = DistillConfig {
        pool: PoolSpec {
            spatial_kernels: vec![2, 3],
            channel_kernels: vec![3],
            ..PoolSpec::default()
        },
        ..DistillConfig::default()
    };
    for seed in 0..instances {
        let mut r = rng(800 + seed);
        let x = rand_tensor(&mut r, Shape4::new(2, 5, 3, 3));
        let t = rand_tensor(&mut r, Shape4::new(2, 3, 3, 3));
        let l = rand_labels(&mut r, Shape4::new(2, 1, 3, 3), &[0, 3, 4, IGNORE_LABEL]);
        let e = check_gradients(std::slice::from_ref(&x), STEP, |g, v| unce_loss(g, v[0], &l, &part))?;
        note("unce", e, &mut worst);
        let e = check_gradients(std::slice::from_ref(&x), STEP, |g, v| unkd_loss(g, v[0], &t, &part, Some(&l)))?;
        note("unkd", e, &mut worst);
        let shapes = [Shape4::new(2, 4, 5, 5), Shape4::new(2, 3, 3, 3)];
        let taps_t: Vec<Tensor4> = shapes.iter().map(|s| rand_tensor(&mut r, *s)).collect();
        let taps_s: Vec<Tensor4> = shapes.iter().map(|s| rand_tensor(&mut r, *s)).collect();
        let e = check_gradients(&taps_s, STEP, |g, v| {
            let tv: Vec<Var> = taps_t.iter().map(|x| g.constant(x.clone())).collect();
            pcd_loss(g, &tv, v, &cfg)
        })?;
        note("pcd", e, &mut worst);
        total += 3;
    }
    Ok(CheckResult::within(
        "gradient checks",
        worst,
        tolerance,
        total,
        format!("worst relative error in {worst_name}"),
    ))
}

fn naive_avg_pool(x: &Tensor4, k: usize) -> Tensor4 {
    let s = x.shape();
    let (oh, ow) = (s.h - k + 1, s.w - k + 1);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += x.at(n, c, y + dy, xx + dx);
                        }
                    }
                    out.set(n, c, y, xx, acc / (k * k) as f64);
                }
            }
        }
    }
    out
}

/// Squares, spatial windows, per-sample distance, then means over batch, kernels and layers.
fn oracle_spatial(t: &[Tensor4], s: &[Tensor4], kernels: &[usize]) -> f64 {
    let mut layers = 0.0;
    for (a, b) in t.iter().zip(s) {
        let sh = a.shape();
        let (mut acc, mut used) = (0.0, 0);
        for &k in kernels.iter().filter(|&&k| k <= sh.h && k <= sh.w) {
            used += 1;
            let pa = naive_avg_pool(&a.map(|v| v * v), k);
            let pb = naive_avg_pool(&b.map(|v| v * v), k);
            let per = pa.numel() / sh.n;
            let mut batch = 0.0;
            for n in 0..sh.n {
                let ss: f64 = (0..per).map(|i| (pa.data()[n * per + i] - pb.data()[n * per + i]).powi(2)).sum();
                batch += ss.sqrt();
            }
            acc += batch / sh.n as f64;
        }
        if used > 0 {
            layers += acc / used as f64;
        }
    }
    layers / t.len() as f64
}

fn oracle_channel(t: &[Tensor4], s: &[Tensor4], k: usize) -> f64 {
    let mut layers = 0.0;
    for (a, b) in t.iter().zip(s) {
        let sh = a.shape();
        if k > sh.c {
            continue;
        }
        let mut batch = 0.0;
        for n in 0..sh.n {
            let mut ss = 0.0;
            for c0 in 0..=sh.c - k {
                for y in 0..sh.h {
                    for x in 0..sh.w {
                        let wa: f64 = (c0..c0 + k).map(|c| a.at(n, c, y, x).powi(2)).sum::<f64>() / k as f64;
                        let wb: f64 = (c0..c0 + k).map(|c| b.at(n, c, y, x).powi(2)).sum::<f64>() / k as f64;
                        ss += (wa - wb).powi(2);
                    }
                }
            }
            batch += ss.sqrt();
        }
        layers += batch / sh.n as f64;
    }
    layers / t.len() as f64
}

fn random_taps(seed: u64) -> (Vec<Tensor4>, Vec<Tensor4>) {
    let mut r = rng(seed);
    let shapes = [
        Shape4::new(2, 4, 16, 16),
        Shape4::new(2, 6, 8, 8),
        Shape4::new(2, 8, 4, 4),
        Shape4::new(2, 2, 4, 4),
    ];
    let t = shapes.iter().map(|s| rand_tensor(&mut r, *s)).collect();
    let s = shapes.iter().map(|s| rand_tensor(&mut r, *s)).collect();
    (t, s)
}

/// Spatial and channel distillation against explicit windows, plus zero and noise-order checks.
pub fn distill_oracles(cases: u64, tolerance: f64) -> Result<CheckResult> {
    let cfg = DistillConfig::default();
    let mut worst: f64 = 0.0;
    let mut issues = Vec::new();
    for seed in 0..cases {
        let (t, s) = random_taps(100 + seed);
        let skd = distill_value(skd_loss, &t, &s, &cfg)?;
        worst = worst.max((skd - oracle_spatial(&t, &s, &cfg.pool.spatial_kernels)).abs());
        for &k in &cfg.pool.channel_kernels {
            let single = DistillConfig {
                pool: PoolSpec { channel_kernels: vec![k], ..cfg.pool.clone() },
                ..cfg.clone()
            };
            let ckd = distill_value(ckd_loss, &t, &s, &single)?;
            worst = worst.max((ckd - oracle_channel(&t, &s, k)).abs());
        }
        for f in [skd_loss, ckd_loss] {
            let z = distill_value(f, &t, &t, &cfg)?;
            if z != 0.0 {
                issues.push(format!("identical taps gave {z}"));
            }
        }
        let mut prev = (0.0, 0.0);
        for alpha in [0.1, 0.2, 0.4] {
            let noisy: Vec<Tensor4> = t
                .iter()
                .zip(&s)
                .map(|(a, n)| a.zip_map(n, |x, e| x + alpha * e))
                .collect::<Result<_>>()?;
            let cur = (distill_value(skd_loss, &t, &noisy, &cfg)?, distill_value(ckd_loss, &t, &noisy, &cfg)?);
            if cur.0 <= prev.0 || cur.1 <= prev.1 {
                issues.push(format!("not increasing at noise {alpha}"));
            }
            prev = cur;
        }
    }
    let mut r = CheckResult::within("distillation oracles", worst, tolerance, cases as usize, "max |loss - explicit windows|".into());
    if !issues.is_empty() {
        r.passed = false;
        r.detail = issues.join("; ");
    }
    Ok(r)
}

fn scene_with(classes: &[u8]) -> Scene {
    // one column per class, a background column, one ignore pixel
    let w = classes.len() + 1;
    let mut data = Vec::new();
    for _ in 0..2 {
        data.extend_from_slice(classes);
        data.push(0);
    }
    data[w - 1] = IGNORE_LABEL;
    Scene {
        image: Tensor4::zeros(Shape4::new(1, 3, 2, w)),
        mask: LabelMap::from_vec(1, 2, w, data).expect("sizes agree"),
        domain_id: 0,
    }
}

/// Twelve scenes over a 20-class label space exercising every filtering case.
pub fn twelve_scene_corpus() -> Vec<Scene> {
    let sets: [&[u8]; 12] = [
        &[3, 17],
        &[3],
        &[16],
        &[1, 16],
        &[16, 20],
        &[17, 18],
        &[5, 19, 20],
        &[20],
        &[],
        &[2, 4, 15],
        &[15, 16, 17, 18, 19, 20],
        &[19],
    ];
    sets.iter().map(|c| scene_with(c)).collect()
}

/// Kept scene indices and relabelled masks written straight from the set definitions.
fn set_oracle(raw: &[Scene], sched: &TaskSchedule, t: usize) -> (Vec<usize>, Vec<Vec<u8>>) {
    let cur: BTreeSet<u8> = sched.steps[t].iter().map(|&c| c as u8).collect();
    let fut: BTreeSet<u8> = sched.steps[t + 1..].iter().flatten().map(|&c| c as u8).collect();
    let mut kept = Vec::new();
    let mut masks = Vec::new();
    for (i, s) in raw.iter().enumerate() {
        let present: BTreeSet<u8> = s.mask.data().iter().copied().filter(|&l| l != 0 && l != IGNORE_LABEL).collect();
        let ok = present.intersection(&cur).count() > 0
            && (sched.labeling == Labeling::Overlapped || present.intersection(&fut).count() == 0);
        if ok {
            kept.push(i);
            masks.push(
                s.mask
                    .data()
                    .iter()
                    .map(|&l| if l == IGNORE_LABEL || cur.contains(&l) { l } else { 0 })
                    .collect(),
            );
        }
    }
    (kept, masks)
}

/// Disjoint and overlapped filtering on the hand-built corpus against the set oracle.
pub fn protocol_set_logic() -> Result<CheckResult> {
    let raw = twelve_scene_corpus();
    let order: Vec<usize> = CLASS_ORDERS[0].1.to_vec();
    let mut mismatches = Vec::new();
    let mut cases = 0;
    for labeling in [Labeling::Disjoint, Labeling::Overlapped] {
        let sched = build_schedule("15-1", 20, labeling, Some(&order))?;
        for t in 0..sched.n_steps() {
            cases += 1;
            let (kept, masks) = set_oracle(&raw, &sched, t);
            let got = match filter_and_relabel(&raw, &sched, t) {
                Ok(ds) => (ds.provenance, ds.masks.iter().map(|m| m.data().to_vec()).collect()),
                Err(crate::Error::EmptyDataset(_)) => (Vec::new(), Vec::new()),
                Err(e) => return Err(e),
            };
            if got != (kept, masks) {
                mismatches.push(format!("{labeling:?} step {t}"));
            }
        }
    }
    Ok(CheckResult {
        name: "protocol set logic".into(),
        passed: mismatches.is_empty(),
        worst: mismatches.len() as f64,
        tolerance: 0.0,
        cases,
        detail: if mismatches.is_empty() {
            "inclusion sets and masks byte-equal".into()
        } else {
            format!("mismatch at {}", mismatches.join(", "))
        },
    })
}

/// The full suite at its standard sizes and tolerances.
pub fn run_suite(faults: Faults) -> Result<Vec<CheckResult>> {
    Ok(vec![
        merge_equivalence(100, 1e-6, faults)?,
        fusion_oracle(50, 1e-8)?,
        transition_equivalence(50, 1e-9, faults)?,
        drop_path_expectation(20, 1e-9)?,
        gradient_suite(20, 1e-3)?,
        distill_oracles(5, 1e-8)?,
        protocol_set_logic()?,
    ])
}

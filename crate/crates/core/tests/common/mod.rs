#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcil_core::numerics::{Shape4, Tensor4};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4 {
    Tensor4::uniform(shape, 1.0, rng)
}

/// Six nested loops, zero padding, no shortcuts.
pub fn naive_conv(x: &Tensor4, w: &Tensor4, b: &[f64], stride: usize, pad: usize) -> Tensor4 {
    let xs = x.shape();
    let ws = w.shape();
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for i in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(o, i, ky, kx) * x.at(n, i, iy as usize, ix as usize);
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

/// Mean of every `kh x kw` window at stride `(sh, sw)`, computed window by window.
pub fn naive_avg_pool(x: &Tensor4, kh: usize, kw: usize, sh: usize, sw: usize) -> Tensor4 {
    let s = x.shape();
    let oh = (s.h - kh) / sh + 1;
    let ow = (s.w - kw) / sw + 1;
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for y in 0..kh {
                        for xx in 0..kw {
                            acc += x.at(n, c, oy * sh + y, ox * sw + xx);
                        }
                    }
                    out.set(n, c, oy, ox, acc / (kh * kw) as f64);
                }
            }
        }
    }
    out
}

use rand::Rng;
use rcil_core::numerics::{BatchNormParams, Conv2dParams};
use rcil_core::rc_block::{RcBlock, RcBranch};

pub fn rand_norm(rng: &mut ChaCha8Rng, ch: usize) -> BatchNormParams {
    let mut p = BatchNormParams::new(ch);
    p.gamma = Tensor4::vector((0..ch).map(|_| rng.gen_range(-2.0..2.0)).collect());
    p.beta = Tensor4::vector((0..ch).map(|_| rng.gen_range(-1.0..1.0)).collect());
    p.running_mean = Tensor4::vector((0..ch).map(|_| rng.gen_range(-1.0..1.0)).collect());
    p.running_var = Tensor4::vector((0..ch).map(|_| rng.gen_range(0.05..3.0)).collect());
    p
}

pub fn rand_conv(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Conv2dParams {
    let mut c = Conv2dParams::zeros(in_ch, out_ch, k, stride, k / 2);
    c.weight = rand_tensor(rng, c.weight.shape());
    c.bias = rand_tensor(rng, c.bias.shape());
    c
}

pub fn rand_block(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, stride: usize) -> RcBlock {
    let a = RcBranch::new(rand_conv(rng, in_ch, out_ch, 3, stride), rand_norm(rng, out_ch));
    let b = RcBranch::new(rand_conv(rng, in_ch, out_ch, 3, stride), rand_norm(rng, out_ch));
    RcBlock::new(a, b).unwrap()
}

/// Brute-force conv followed by the elementwise eval-mode normalization formula.
pub fn naive_conv_bn(x: &Tensor4, conv: &Conv2dParams, norm: &BatchNormParams) -> Tensor4 {
    let y = naive_conv(x, &conv.weight, conv.bias.data(), conv.stride, conv.padding);
    let s = y.shape();
    let mut out = y.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    let v = norm.gamma.data()[c] * (y.at(n, c, h, w) - norm.running_mean.data()[c])
                        / (norm.running_var.data()[c] + norm.eps).sqrt()
                        + norm.beta.data()[c];
                    out.set(n, c, h, w, v);
                }
            }
        }
    }
    out
}

//! Forward and backward kernels on plain tensors.
//!
//! Convolutions unfold their input and call a single-threaded GEMM. Other
//! kernels are direct loops, split across rayon threads only along axes whose
//! outputs are disjoint, so results are bit-reproducible.

use rayon::prelude::*;

use super::tensor::{Shape4, Tensor4};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

pub fn conv_output_shape(x: Shape4, w: Shape4, geo: ConvGeometry) -> Result<Shape4> {
    if x.c != w.c {
        return Err(shape_err(
            "conv2d",
            format!("input has {} channels, weight expects {}", x.c, w.c),
        ));
    }
    if geo.stride == 0 {
        return Err(shape_err("conv2d", "stride must be positive"));
    }
    let ph = x.h + 2 * geo.padding;
    let pw = x.w + 2 * geo.padding;
    if w.h > ph || w.w > pw {
        return Err(shape_err(
            "conv2d",
            format!("kernel {}x{} exceeds padded input {ph}x{pw}", w.h, w.w),
        ));
    }
    Ok(Shape4::new(
        x.n,
        w.n,
        (ph - w.h) / geo.stride + 1,
        (pw - w.w) / geo.stride + 1,
    ))
}

/// Output index range `[lo, hi)` along one axis for which `o*stride + k - pad` lands in `[0, len)`.
#[inline]
fn valid_range(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= len - 1
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one sample `(c, h, w)` into a `(c*kh*kw, oh*ow)` row-major matrix.
fn im2col(x: &[f64], xs: Shape4, ws: Shape4, os: Shape4, geo: ConvGeometry, cols: &mut [f64]) {
    let p = os.plane();
    cols.fill(0.0);
    for ic in 0..xs.c {
        let xplane = &x[ic * xs.plane()..][..xs.plane()];
        for ky in 0..ws.h {
            let (oy0, oy1) = valid_range(xs.h, os.h, ky, geo.stride, geo.padding);
            for kx in 0..ws.w {
                let (ox0, ox1) = valid_range(xs.w, os.w, kx, geo.stride, geo.padding);
                let row = &mut cols[((ic * ws.h + ky) * ws.w + kx) * p..][..p];
                if ox0 == ox1 {
                    continue;
                }
                let ix0 = ox0 * geo.stride + kx - geo.padding;
                for oy in oy0..oy1 {
                    let iy = oy * geo.stride + ky - geo.padding;
                    let src = &xplane[iy * xs.w..(iy + 1) * xs.w];
                    let dst = &mut row[oy * os.w..(oy + 1) * os.w];
                    if geo.stride == 1 {
                        dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + ox1 - ox0]);
                    } else {
                        for (k, d) in dst[ox0..ox1].iter_mut().enumerate() {
                            *d = src[ix0 + k * geo.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the columns back into one sample.
fn col2im(cols: &[f64], xs: Shape4, ws: Shape4, os: Shape4, geo: ConvGeometry, x: &mut [f64]) {
    let p = os.plane();
    for ic in 0..xs.c {
        let xplane = &mut x[ic * xs.plane()..][..xs.plane()];
        for ky in 0..ws.h {
            let (oy0, oy1) = valid_range(xs.h, os.h, ky, geo.stride, geo.padding);
            for kx in 0..ws.w {
                let (ox0, ox1) = valid_range(xs.w, os.w, kx, geo.stride, geo.padding);
                if ox0 == ox1 {
                    continue;
                }
                let row = &cols[((ic * ws.h + ky) * ws.w + kx) * p..][..p];
                let ix0 = ox0 * geo.stride + kx - geo.padding;
                for oy in oy0..oy1 {
                    let iy = oy * geo.stride + ky - geo.padding;
                    let dst = &mut xplane[iy * xs.w..(iy + 1) * xs.w];
                    let src = &row[oy * os.w..(oy + 1) * os.w];
                    for (k, g) in src[ox0..ox1].iter().enumerate() {
                        dst[ix0 + k * geo.stride] += g;
                    }
                }
            }
        }
    }
}

fn is_pointwise(ws: Shape4, geo: ConvGeometry) -> bool {
    ws.h == 1 && ws.w == 1 && geo.stride == 1 && geo.padding == 0
}

/// Row-major `c = alpha * a * b + beta * c` where `a` is `m x k` and `b` is `k x n`,
/// each given with explicit row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every slice covers the index range implied by its dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    x: &Tensor4,
    w: &Tensor4,
    b: Option<&Tensor4>,
    geo: ConvGeometry,
) -> Result<Tensor4> {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv_output_shape(xs, ws, geo)?;
    if let Some(b) = b {
        b.expect_shape(Shape4::new(1, ws.n, 1, 1), "conv2d bias")?;
    }
    let mut out = Tensor4::zeros(os);
    let p = os.plane();
    let k = ws.c * ws.h * ws.w;
    let pointwise = is_pointwise(ws, geo);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    let per_in = xs.c * xs.plane();
    let per_out = os.c * p;
    for n in 0..xs.n {
        let xn = &x.data()[n * per_in..][..per_in];
        let on = &mut out.data_mut()[n * per_out..][..per_out];
        if let Some(b) = b {
            for (oc, o) in on.chunks_mut(p).enumerate() {
                o.fill(b.data()[oc]);
            }
        }
        let src: &[f64] = if pointwise {
            xn
        } else {
            im2col(xn, xs, ws, os, geo, &mut cols);
            &cols
        };
        gemm(os.c, k, p, (w.data(), k as isize, 1), (src, p as isize, 1), 1.0, on);
    }
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor4>,
    pub dw: Option<Tensor4>,
    pub db: Option<Tensor4>,
}

pub fn conv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    dy: &Tensor4,
    geo: ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads {
    let xs = x.shape();
    let ws = w.shape();
    let os = dy.shape();
    let p = os.plane();
    let k = ws.c * ws.h * ws.w;
    let pointwise = is_pointwise(ws, geo);
    let per_in = xs.c * xs.plane();
    let per_out = os.c * p;
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };

    let mut dx = need.0.then(|| Tensor4::zeros(xs));
    let mut dw = need.1.then(|| Tensor4::zeros(ws));
    for n in 0..xs.n {
        let g = &dy.data()[n * per_out..][..per_out];
        if let Some(dw) = dw.as_mut() {
            let xn = &x.data()[n * per_in..][..per_in];
            let src: &[f64] = if pointwise {
                xn
            } else {
                im2col(xn, xs, ws, os, geo, &mut cols);
                &cols
            };
            // dw += g * cols^T
            gemm(os.c, p, k, (g, p as isize, 1), (src, 1, p as isize), 1.0, dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx.data_mut()[n * per_in..][..per_in];
            // dcols = w^T * g
            if pointwise {
                gemm(k, os.c, p, (w.data(), 1, k as isize), (g, p as isize, 1), 0.0, dxn);
            } else {
                gemm(k, os.c, p, (w.data(), 1, k as isize), (g, p as isize, 1), 0.0, &mut cols);
                col2im(&cols, xs, ws, os, geo, dxn);
            }
        }
    }

    let db = need.2.then(|| {
        let mut db = vec![0.0; os.c];
        for n in 0..os.n {
            for (oc, acc) in db.iter_mut().enumerate() {
                *acc += dy.data()[(n * os.c + oc) * p..][..p].iter().sum::<f64>();
            }
        }
        Tensor4::vector(db)
    });

    ConvGrads { dx, dw, db }
}

/// Per-channel mean and biased variance over `(n, h, w)`.
pub fn channel_moments(x: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let m = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut acc = 0.0;
        for n in 0..s.n {
            acc += x.data()[(n * s.c + c) * s.plane()..][..s.plane()]
                .iter()
                .sum::<f64>();
        }
        mean[c] = acc / m;
        let mut sq = 0.0;
        for n in 0..s.n {
            for v in &x.data()[(n * s.c + c) * s.plane()..][..s.plane()] {
                let d = v - mean[c];
                sq += d * d;
            }
        }
        var[c] = sq / m;
    }
    (mean, var)
}

/// `y[n,c,..] = x[n,c,..] * scale[c] + shift[c]`.
pub fn channel_affine(x: &Tensor4, scale: &[f64], shift: &[f64]) -> Tensor4 {
    let s = x.shape();
    let mut out = x.clone();
    for (idx, plane) in out.data_mut().chunks_mut(s.plane()).enumerate() {
        let c = idx % s.c;
        for v in plane {
            *v = *v * scale[c] + shift[c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl Window {
    pub fn square(k: usize, stride: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
        }
    }

    pub fn output(&self, s: Shape4, op: &'static str) -> Result<Shape4> {
        if self.kh == 0 || self.kw == 0 || self.sh == 0 || self.sw == 0 {
            return Err(shape_err(op, "kernel and stride must be positive"));
        }
        if self.kh > s.h || self.kw > s.w {
            return Err(shape_err(
                op,
                format!("kernel {}x{} larger than input {}x{}", self.kh, self.kw, s.h, s.w),
            ));
        }
        Ok(Shape4::new(
            s.n,
            s.c,
            (s.h - self.kh) / self.sh + 1,
            (s.w - self.kw) / self.sw + 1,
        ))
    }
}

pub fn avg_pool2d(x: &Tensor4, win: Window) -> Result<Tensor4> {
    let s = x.shape();
    let os = win.output(s, "avg_pool2d")?;
    let mut out = Tensor4::zeros(os);
    let inv = 1.0 / (win.kh * win.kw) as f64;
    let xd = x.data();
    out.data_mut()
        .par_chunks_mut(os.plane())
        .enumerate()
        .for_each(|(p, o)| {
            let src = &xd[p * s.plane()..][..s.plane()];
            // Separable box filter: column sums along height, then row windows.
            let mut col = vec![0.0; s.w];
            for oy in 0..os.h {
                col.fill(0.0);
                let y0 = oy * win.sh;
                for y in y0..y0 + win.kh {
                    for (c, v) in col.iter_mut().zip(&src[y * s.w..(y + 1) * s.w]) {
                        *c += v;
                    }
                }
                for ox in 0..os.w {
                    let x0 = ox * win.sw;
                    o[oy * os.w + ox] = col[x0..x0 + win.kw].iter().sum::<f64>() * inv;
                }
            }
        });
    Ok(out)
}

pub fn avg_pool2d_backward(dy: &Tensor4, input: Shape4, win: Window) -> Tensor4 {
    let os = dy.shape();
    let mut dx = Tensor4::zeros(input);
    let inv = 1.0 / (win.kh * win.kw) as f64;
    let g = dy.data();
    dx.data_mut()
        .par_chunks_mut(input.plane())
        .enumerate()
        .for_each(|(p, d)| {
            let gp = &g[p * os.plane()..][..os.plane()];
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let v = gp[oy * os.w + ox] * inv;
                    for y in oy * win.sh..oy * win.sh + win.kh {
                        for x in ox * win.sw..ox * win.sw + win.kw {
                            d[y * input.w + x] += v;
                        }
                    }
                }
            }
        });
    dx
}

/// Max pooling; also returns the flat input index of each window's maximum
/// (first occurrence on ties).
pub fn max_pool2d(x: &Tensor4, win: Window) -> Result<(Tensor4, Vec<usize>)> {
    let s = x.shape();
    let os = win.output(s, "max_pool2d")?;
    let mut out = Tensor4::zeros(os);
    let mut arg = vec![0usize; os.numel()];
    let xd = x.data();
    for p in 0..s.n * s.c {
        let base = p * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for y in oy * win.sh..oy * win.sh + win.kh {
                    for x in ox * win.sw..ox * win.sw + win.kw {
                        let i = base + y * s.w + x;
                        if xd[i] > best {
                            best = xd[i];
                            bi = i;
                        }
                    }
                }
                let oi = p * os.plane() + oy * os.w + ox;
                out.data_mut()[oi] = best;
                arg[oi] = bi;
            }
        }
    }
    Ok((out, arg))
}

/// Sliding mean along the channel axis at every spatial position.
pub fn channel_avg_pool(x: &Tensor4, k: usize, stride: usize) -> Result<Tensor4> {
    let s = x.shape();
    if k == 0 || stride == 0 {
        return Err(shape_err("channel_avg_pool", "kernel and stride must be positive"));
    }
    if k > s.c {
        return Err(shape_err(
            "channel_avg_pool",
            format!("kernel {k} larger than {} channels", s.c),
        ));
    }
    let oc = (s.c - k) / stride + 1;
    let os = Shape4::new(s.n, oc, s.h, s.w);
    let mut out = Tensor4::zeros(os);
    let inv = 1.0 / k as f64;
    let plane = s.plane();
    for n in 0..s.n {
        for o in 0..oc {
            let dst = (n * oc + o) * plane;
            for j in 0..k {
                let src = (n * s.c + o * stride + j) * plane;
                for i in 0..plane {
                    out.data_mut()[dst + i] += x.data()[src + i];
                }
            }
            for v in &mut out.data_mut()[dst..dst + plane] {
                *v *= inv;
            }
        }
    }
    Ok(out)
}

pub fn channel_avg_pool_backward(dy: &Tensor4, input: Shape4, k: usize, stride: usize) -> Tensor4 {
    let os = dy.shape();
    let mut dx = Tensor4::zeros(input);
    let inv = 1.0 / k as f64;
    let plane = input.plane();
    for n in 0..input.n {
        for o in 0..os.c {
            let src = (n * os.c + o) * plane;
            for j in 0..k {
                let dst = (n * input.c + o * stride + j) * plane;
                for i in 0..plane {
                    dx.data_mut()[dst + i] += dy.data()[src + i] * inv;
                }
            }
        }
    }
    dx
}

/// Source taps `(i0, i1, frac)` of half-pixel-centred bilinear resampling along one axis.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor4, out_h: usize, out_w: usize) -> Tensor4 {
    let s = x.shape();
    let os = Shape4::new(s.n, s.c, out_h, out_w);
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let mut out = Tensor4::zeros(os);
    let xd = x.data();
    out.data_mut()
        .par_chunks_mut(os.plane())
        .enumerate()
        .for_each(|(p, o)| {
            let src = &xd[p * s.plane()..][..s.plane()];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * s.w + x0] * (1.0 - fx) + src[y0 * s.w + x1] * fx;
                    let bot = src[y1 * s.w + x0] * (1.0 - fx) + src[y1 * s.w + x1] * fx;
                    o[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        });
    out
}

pub fn upsample_bilinear_backward(dy: &Tensor4, input: Shape4) -> Tensor4 {
    let os = dy.shape();
    let ty = bilinear_taps(input.h, os.h);
    let tx = bilinear_taps(input.w, os.w);
    let mut dx = Tensor4::zeros(input);
    let g = dy.data();
    dx.data_mut()
        .par_chunks_mut(input.plane())
        .enumerate()
        .for_each(|(p, d)| {
            let gp = &g[p * os.plane()..][..os.plane()];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = gp[oy * os.w + ox];
                    d[y0 * input.w + x0] += v * (1.0 - fy) * (1.0 - fx);
                    d[y0 * input.w + x1] += v * (1.0 - fy) * fx;
                    d[y1 * input.w + x0] += v * fy * (1.0 - fx);
                    d[y1 * input.w + x1] += v * fy * fx;
                }
            }
        });
    dx
}

/// Numerically stable `log(sum(exp(v)))` over the selected entries.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_channels(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let mut out = Tensor4::zeros(s);
    let plane = s.plane();
    for n in 0..s.n {
        for i in 0..plane {
            let at = |c: usize| x.data()[(n * s.c + c) * plane + i];
            let m = (0..s.c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..s.c).map(|c| (at(c) - m).exp()).sum();
            for c in 0..s.c {
                out.data_mut()[(n * s.c + c) * plane + i] = (at(c) - m).exp() / z;
            }
        }
    }
    out
}

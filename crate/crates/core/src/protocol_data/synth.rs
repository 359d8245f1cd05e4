use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::numerics::{Shape4, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSceneSpec {
    pub seed: u64,
    pub image_size: (usize, usize),
    pub n_classes: usize,
    /// Inclusive range of shapes drawn per image.
    pub shapes_per_image: (usize, usize),
    pub domain_id: usize,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        SynthSceneSpec {
            seed: 0,
            image_size: (64, 64),
            n_classes: 10,
            shapes_per_image: (1, 3),
            domain_id: 0,
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (lo, hi) = self.shapes_per_image;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("image size {h}x{w} below 8x8")));
        }
        if self.n_classes == 0 || self.n_classes >= 255 {
            return Err(Error::Config(format!("n_classes {} out of range", self.n_classes)));
        }
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad shapes_per_image {lo}..={hi}")));
        }
        Ok(())
    }
}

/// One raw scene with full ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// 1x3xHxW
    pub image: Tensor4,
    pub mask: LabelMap,
    pub domain_id: usize,
}

const STREAM_SHAPES: u64 = 0;
const STREAM_BACKGROUND: u64 = 1;

fn stream(seed: u64, index: usize, tag: u64, domain: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ (domain as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    r.set_stream((index as u64) << 2 | tag);
    r
}

/// Fixed color of a class in [-1, 1]^3, spread around the hue circle.
pub fn class_color(class: usize, n_classes: usize) -> [f64; 3] {
    let hue = 6.0 * (class - 1) as f64 / n_classes as f64;
    let value = if class % 2 == 0 { 0.95 } else { 0.7 };
    let f = hue.fract();
    let (p, q, t) = (0.1 * value, value * (1.0 - 0.9 * f), value * (0.1 + 0.9 * f));
    let rgb = match hue as usize % 6 {
        0 => [value, t, p],
        1 => [q, value, p],
        2 => [p, value, t],
        3 => [p, q, value],
        4 => [t, p, value],
        _ => [value, p, q],
    };
    rgb.map(|c| 2.0 * c - 1.0)
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Disk,
    Rect,
    Triangle,
}

fn inside(kind: ShapeKind, cy: f64, cx: f64, r: f64, y: f64, x: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    match kind {
        ShapeKind::Disk => dy * dy + dx * dx <= r * r,
        ShapeKind::Rect => dy.abs() <= 0.8 * r && dx.abs() <= r,
        // apex up, base at cy + r
        ShapeKind::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Deterministic image and mask for `(spec, index)`.
///
/// Shapes, their classes and foreground pixels depend on `(seed, index)` only;
/// `domain_id` changes the background color, texture and noise.
pub fn generate_scene(spec: &SynthSceneSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut rs = stream(spec.seed, index, STREAM_SHAPES, 0);
    let mut rb = stream(spec.seed, index, STREAM_BACKGROUND, spec.domain_id);

    let mut mask = LabelMap::filled(1, h, w, 0);
    let mut img = Tensor4::zeros(Shape4::new(1, 3, h, w));
    let side = h.min(w) as f64;
    let (lo, hi) = spec.shapes_per_image;
    let count = rs.gen_range(lo..=hi);
    for _ in 0..count {
        let class = rs.gen_range(1..=spec.n_classes);
        let kind = match class % 3 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Rect,
            _ => ShapeKind::Triangle,
        };
        let r = side * rs.gen_range(0.14..0.26);
        let cy = rs.gen_range(r * 0.5..h as f64 - r * 0.5);
        let cx = rs.gen_range(r * 0.5..w as f64 - r * 0.5);
        for y in 0..h {
            for x in 0..w {
                if inside(kind, cy, cx, r, y as f64 + 0.5, x as f64 + 0.5) {
                    mask.set(0, y, x, class as u8);
                }
            }
        }
    }

    let d = spec.domain_id;
    let base = -0.55 + 0.12 * (d % 7) as f64;
    let tint = [0.08 * ((d % 3) as f64 - 1.0), 0.0, 0.08 * ((d % 5) as f64 / 2.0 - 1.0)];
    let freq = 0.2 + 0.15 * (d % 4) as f64;
    let amp = 0.08 + 0.04 * (d % 3) as f64;
    let phase = rb.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let l = mask.at(0, y, x) as usize;
            let texture = 0.1 * ((x as f64 * freq + phase).sin() * (y as f64 * freq).cos());
            // Both streams advance at every pixel so neither depends on the other.
            let bn: [f64; 3] = std::array::from_fn(|_| rb.gen_range(-amp..amp));
            let fgn: [f64; 3] = std::array::from_fn(|_| rs.gen_range(-0.06..0.06));
            for c in 0..3 {
                let v = if l == 0 {
                    base + tint[c] + texture + bn[c]
                } else {
                    class_color(l, spec.n_classes)[c] + fgn[c]
                };
                img.set(0, c, y, x, v);
            }
        }
    }
    Ok(Scene { image: img, mask, domain_id: d })
}

/// Scenes `offset..offset + count`; scene `i` is drawn from domain `i % n_domains`.
pub fn generate_pool(spec: &SynthSceneSpec, offset: usize, count: usize, n_domains: usize) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    let n_domains = n_domains.max(1);
    (offset..offset + count)
        .into_par_iter()
        .map(|i| {
            let s = SynthSceneSpec { domain_id: spec.domain_id + i % n_domains, ..spec.clone() };
            generate_scene(&s, i)
        })
        .collect()
}

/// Deterministic split of `0..n` into (train, holdout) with `round(frac * n)`
/// holdout indices, both ascending.
pub fn split_holdout(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let k = ((n as f64) * frac.clamp(0.0, 1.0)).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut hold = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

//! Integer label maps for segmentation targets.

use crate::error::{shape_err, Result};

/// Pixels carrying this label are excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(n: usize, h: usize, w: usize, label: u8) -> Self {
        LabelMap { n, h, w, data: vec![label; n * h * w] }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(shape_err(
                "LabelMap::from_vec",
                format!("{} labels for {n}x{h}x{w}", data.len()),
            ));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    /// Number of pixels not marked [`IGNORE_LABEL`].
    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    /// Distinct labels present, ignore label excluded, ascending.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (0..255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn sample(&self, i: usize) -> LabelMap {
        let p = self.h * self.w;
        LabelMap {
            n: 1,
            h: self.h,
            w: self.w,
            data: self.data[i * p..(i + 1) * p].to_vec(),
        }
    }

    pub fn stack(maps: &[LabelMap]) -> Result<LabelMap> {
        let Some(first) = maps.first() else {
            return Err(shape_err("LabelMap::stack", "no maps"));
        };
        let mut data = Vec::new();
        let mut n = 0;
        for m in maps {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(shape_err(
                    "LabelMap::stack",
                    format!("{}x{} vs {}x{}", m.h, m.w, first.h, first.w),
                ));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        Ok(LabelMap { n, h: first.h, w: first.w, data })
    }

    /// Mirror every sample left to right.
    pub fn hflip(&self) -> LabelMap {
        let mut out = self.clone();
        for n in 0..self.n {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(n, y, x, self.at(n, y, self.w - 1 - x));
                }
            }
        }
        out
    }
}

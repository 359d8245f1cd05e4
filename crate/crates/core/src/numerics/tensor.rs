use std::fmt;

use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// Extent of a rank-4 `(batch, channel, height, width)` array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const SCALAR: Shape4 = Shape4::new(1, 1, 1, 1);

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_valid(&self) -> bool {
        self.n > 0 && self.c > 0 && self.h > 0 && self.w > 0
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major rank-4 array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        assert!(shape.is_valid(), "tensor shape {shape} has a zero extent");
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if !shape.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape} has a zero extent"
            )));
        }
        if data.len() != shape.numel() {
            return Err(shape_err(
                "from_vec",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Shape4::SCALAR,
            data: vec![value],
        }
    }

    /// Per-channel vector laid out as `1 x len x 1 x 1`.
    pub fn vector(values: Vec<f64>) -> Self {
        let shape = Shape4::new(1, values.len(), 1, 1);
        Self::from_vec(shape, values).expect("vector length must be positive")
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape4, bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.gen_range(-bound..bound);
        }
        t
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = value;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshape(mut self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(shape_err("reshape", format!("{} -> {shape}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `[start, start + len)` of the batch axis.
    pub fn batch_slice(&self, start: usize, len: usize) -> Self {
        let per = self.shape.c * self.shape.plane();
        let shape = Shape4::new(len, self.shape.c, self.shape.h, self.shape.w);
        Self {
            shape,
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[Tensor4]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.shape.c, first.shape.h, first.shape.w) {
                return Err(shape_err("stack", format!("{} vs {}", s, first.shape)));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        let shape = Shape4::new(n, first.shape.c, first.shape.h, first.shape.w);
        Ok(Self { shape, data })
    }

    pub(crate) fn expect_shape(&self, shape: Shape4, op: &'static str) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err(op, format!("expected {shape}, got {}", self.shape)));
        }
        Ok(())
    }

    /// Little-endian bytes of every value, used for hashing and bit-exact comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

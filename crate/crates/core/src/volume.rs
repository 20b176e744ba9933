//! Dense rank-5 volumes in `(batch, channel, depth, height, width)` order.
//!
//! The axis order is fixed as `(n, c, z, y, x)` with `x` fastest-varying.
//! Every image, feature map, displacement field, kernel bank and gradient
//! buffer in this crate is a [`Volume5`]; scalars are `(1,1,1,1,1)` volumes.
//! Storage is always `f64`.

use crate::error::{Error, Result};

/// Dense rank-5 array of `f64` in row-major `(n, c, z, y, x)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume5 {
    shape: [usize; 5],
    data: Vec<f64>,
}

impl Volume5 {
    /// Creates a volume filled with `fill`. All dimensions must be >= 1.
    pub fn new(shape: [usize; 5], fill: f64) -> Result<Self> {
        let numel = checked_numel(shape)?;
        if !fill.is_finite() {
            return Err(Error::numeric(format!("fill value {fill} is not finite")));
        }
        Ok(Self {
            shape,
            data: vec![fill; numel],
        })
    }

    /// All-zero volume of the given shape.
    pub fn zeros(shape: [usize; 5]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    /// Zero volume with the same shape as `other`.
    pub fn zeros_like(other: &Volume5) -> Self {
        Self {
            shape: other.shape,
            data: vec![0.0; other.data.len()],
        }
    }

    /// Wraps existing data. The length must equal the shape product and all
    /// values must be finite.
    pub fn from_vec(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        let numel = checked_numel(shape)?;
        if data.len() != numel {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        let vol = Self { shape, data };
        vol.check_finite()?;
        Ok(vol)
    }

    /// Single-element scalar volume.
    pub fn scalar(value: f64) -> Result<Self> {
        Self::from_vec([1, 1, 1, 1, 1], vec![value])
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial extents `(z, y, x)`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of voxels in one `(n, c)` plane.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        debug_assert!(
            n < self.shape[0]
                && c < self.shape[1]
                && z < self.shape[2]
                && y < self.shape[3]
                && x < self.shape[4]
        );
        (((n * self.shape[1] + c) * self.shape[2] + z) * self.shape[3] + y) * self.shape[4] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, z, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, z: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.index(n, c, z, y, x);
        &mut self.data[i]
    }

    /// Flat view of one `(n, c)` plane, `z` slowest / `x` fastest.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a scalar volume.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "expected scalar volume, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Volume5) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Elementwise map into a new volume.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume5 {
        Volume5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Volume5, scale: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, scale: f64) {
        for v in &mut self.data {
            *v *= scale;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn dot(&self, other: &Volume5) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn check_same_shape(&self, other: &Volume5) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Errors if any stored value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value {} at flat index {pos}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    /// Concatenates along the channel axis. All other dims must agree.
    pub fn concat_channels(parts: &[&Volume5]) -> Result<Volume5> {
        let first = parts
            .first()
            .ok_or_else(|| Error::argument("concat_channels needs at least one input"))?;
        let [n, _, d, h, w] = first.shape;
        let mut c_total = 0;
        for p in parts {
            let s = p.shape;
            if s[0] != n || s[2] != d || s[3] != h || s[4] != w {
                return Err(Error::shape(format!(
                    "concat_channels mismatch: {:?} vs {:?}",
                    first.shape, s
                )));
            }
            c_total += s[1];
        }
        let mut out = Volume5::zeros([n, c_total, d, h, w])?;
        for ni in 0..n {
            let mut c_off = 0;
            for p in parts {
                for ci in 0..p.shape[1] {
                    out.plane_mut(ni, c_off + ci).copy_from_slice(p.plane(ni, ci));
                }
                c_off += p.shape[1];
            }
        }
        Ok(out)
    }

    /// Stacks single-sample volumes along the batch axis.
    pub fn concat_batch(parts: &[&Volume5]) -> Result<Volume5> {
        let first = parts
            .first()
            .ok_or_else(|| Error::argument("concat_batch needs at least one input"))?;
        let [_, c, d, h, w] = first.shape;
        let mut n_total = 0;
        for p in parts {
            let s = p.shape;
            if s[1] != c || s[2] != d || s[3] != h || s[4] != w {
                return Err(Error::shape(format!(
                    "concat_batch mismatch: {:?} vs {:?}",
                    first.shape, s
                )));
            }
            n_total += s[0];
        }
        let mut data = Vec::with_capacity(n_total * c * d * h * w);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Volume5::from_vec([n_total, c, d, h, w], data)
    }
}

fn checked_numel(shape: [usize; 5]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!(
            "all dimensions must be >= 1, got {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows usize")))
}

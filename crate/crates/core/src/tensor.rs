//! Dense `C×H×W` single-precision tensors.
//!
//! All element-wise helpers evaluate each output element independently with
//! plain IEEE-754 `f32` arithmetic, and every reduction walks the buffer left
//! to right with an `f64` accumulator, so results never depend on thread
//! scheduling.

use crate::error::{Error, Result};

/// A channel-major, row-major `C×H×W` array of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let len = shape.iter().product::<usize>();
        if data.len() != len {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 3], value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a tensor by evaluating `f(channel, row, col)` for every element.
    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let [c, h, w] = shape;
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        let i = self.offset(c, y, x);
        self.data[i] = value;
    }

    /// Contiguous slice of one channel plane.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2];
        &self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_shape(&self, expected: [usize; 3]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.shape,
            });
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        other.ensure_shape(self.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.ensure_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self + w·(other − self)`.
    pub fn lerp(&self, other: &Tensor, w: f32) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + w * (b - a))
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Euclidean norm of the whole buffer.
    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Copy of a single channel as a `1×H×W` tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        if c >= self.channels() {
            return Err(Error::invalid(format!(
                "channel {c} out of range for {} channels",
                self.channels()
            )));
        }
        Ok(Tensor {
            shape: [1, self.shape[1], self.shape[2]],
            data: self.plane(c).to_vec(),
        })
    }

    /// Repeats a single-channel tensor `n` times along the channel axis.
    pub fn repeat_channels(&self, n: usize) -> Result<Tensor> {
        if self.channels() != 1 {
            return Err(Error::invalid(
                "repeat_channels needs a single-channel tensor",
            ));
        }
        let mut data = Vec::with_capacity(self.len() * n);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Ok(Tensor {
            shape: [n, self.shape[1], self.shape[2]],
            data,
        })
    }

    /// Broadcasts a mask (one channel or as many channels as `shape`) to `shape`,
    /// resampling spatially with nearest neighbour if the grids differ.
    pub fn broadcast_mask(&self, shape: [usize; 3]) -> Result<Tensor> {
        let spatial = if self.height() == shape[1] && self.width() == shape[2] {
            self.clone()
        } else {
            self.resize_nearest(shape[1], shape[2])
        };
        match spatial.channels() {
            c if c == shape[0] => Ok(spatial),
            1 => spatial.repeat_channels(shape[0]),
            c => Err(Error::invalid(format!(
                "mask with {c} channels cannot broadcast to {shape:?}"
            ))),
        }
    }

    /// `(1 − M) ⊙ background + M ⊙ foreground`, with `mask` broadcast to the
    /// image shape.
    pub fn composite(background: &Tensor, foreground: &Tensor, mask: &Tensor) -> Result<Tensor> {
        background.ensure_same_shape(foreground)?;
        let m = mask.broadcast_mask(background.shape)?;
        let data = background
            .data
            .iter()
            .zip(&foreground.data)
            .zip(&m.data)
            .map(|((&b, &f), &m)| (1.0 - m) * b + m * f)
            .collect();
        Ok(Tensor {
            shape: background.shape,
            data,
        })
    }

    /// Rectangular window `[y0, y0+h) × [x0, x0+w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        if y0 + h > self.height() || x0 + w > self.width() {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Tensor::from_fn([self.channels(), h, w], |c, y, x| {
            self.at(c, y0 + y, x0 + x)
        }))
    }

    /// Nearest-neighbour resample sampling at output pixel centres.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Tensor {
        let (sh, sw) = (self.height(), self.width());
        let ys: Vec<usize> = (0..h)
            .map(|y| ((y * 2 + 1) * sh / (2 * h)).min(sh - 1))
            .collect();
        let xs: Vec<usize> = (0..w)
            .map(|x| ((x * 2 + 1) * sw / (2 * w)).min(sw - 1))
            .collect();
        Tensor::from_fn([self.channels(), h, w], |c, y, x| self.at(c, ys[y], xs[x]))
    }
}

/// Percentile of `values` (`q` in `[0, 100]`) using linear interpolation between
/// order statistics at rank `q/100·(n−1)`.
pub fn percentile(values: &[f32], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid(format!("percentile {q} outside [0, 100]")));
    }
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64))
}

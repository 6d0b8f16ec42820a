//! Dense 2D intensity grids and convolution kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grid of finite intensities. Pixel centers sit on integer
/// coordinates: pixel `(x, y)` covers `[x - 0.5, x + 0.5) x [y - 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be >= 1");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Contract(format!(
                "image dimensions must be >= 1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Contract(format!(
                "{} pixels supplied for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite pixel at index {i}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut img = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                img.data[y * width + x] = f(x, y);
            }
        }
        img
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] += value;
    }

    /// Value at signed coordinates, `None` outside the grid.
    pub fn get_checked(&self, x: isize, y: isize) -> Option<f64> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            None
        } else {
            Some(self.get(x as usize, y as usize))
        }
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

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Index `(x, y)` of the brightest pixel; first occurrence on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn scaled(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &Image) -> Result<Self> {
        self.check_same_dims(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn check_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    /// Copy of the rectangle `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::OutOfBounds(format!(
                "crop {w}x{h}+{x0}+{y0} of {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }
}

/// How kernel weights are normalized after sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelNorm {
    /// Weights sum to one; smoothing preserves constant backgrounds.
    UnitSum,
    /// Mean removed; uniform regions respond with zero.
    ZeroMean,
    Raw,
}

/// Odd-sized weight grid, anchored at its center element.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    width: usize,
    height: usize,
    weights: Vec<f64>,
    norm: KernelNorm,
}

impl Kernel {
    /// Validates the grid and applies `norm` to `weights`.
    pub fn new(width: usize, height: usize, mut weights: Vec<f64>, norm: KernelNorm) -> Result<Self> {
        if width % 2 == 0 || height % 2 == 0 {
            return Err(Error::Contract(format!(
                "kernel dimensions must be odd, got {width}x{height}"
            )));
        }
        if weights.len() != width * height {
            return Err(Error::Contract(format!(
                "{} weights supplied for a {width}x{height} kernel",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Contract("non-finite kernel weight".into()));
        }
        match norm {
            KernelNorm::UnitSum => {
                let s: f64 = weights.iter().sum();
                if s == 0.0 {
                    return Err(Error::Contract("unit-sum kernel with zero total weight".into()));
                }
                weights.iter_mut().for_each(|w| *w /= s);
            }
            KernelNorm::ZeroMean => {
                let m = weights.iter().sum::<f64>() / weights.len() as f64;
                weights.iter_mut().for_each(|w| *w -= m);
            }
            KernelNorm::Raw => {}
        }
        Ok(Self {
            width,
            height,
            weights,
            norm,
        })
    }

    /// Single unit weight: convolution with it is the identity.
    pub fn identity() -> Self {
        Self {
            width: 1,
            height: 1,
            weights: vec![1.0],
            norm: KernelNorm::Raw,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn half_width(&self) -> usize {
        self.width / 2
    }

    pub fn half_height(&self) -> usize {
        self.height / 2
    }

    pub fn norm(&self) -> KernelNorm {
        self.norm
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at offset `(dx, dy)` from the kernel center.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let x = dx + self.half_width() as isize;
        let y = dy + self.half_height() as isize;
        self.weights[y as usize * self.width + x as usize]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Kernel rotated by +90 degrees in image coordinates (y down): the
    /// weight at offset `(dx, dy)` moves to `(-dy, dx)`.
    pub fn rotated_90(&self) -> Self {
        let (w, h) = (self.height, self.width);
        let (hw, hh) = ((w / 2) as isize, (h / 2) as isize);
        let mut weights = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = (x as isize - hw, y as isize - hh);
                // (nx, ny) = (-dy, dx) => dx = ny, dy = -nx
                weights[y * w + x] = self.at(ny, -nx);
            }
        }
        Self {
            width: w,
            height: h,
            weights,
            norm: self.norm,
        }
    }
}

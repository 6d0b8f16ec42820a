//! Convolution, Gaussian smoothing, bandpass spot finding, max projection and
//! 2D Gaussian fitting.
//!
//! Smoothing kernels are normalized to unit sum, so smoothing preserves a
//! constant background and the bandpass difference cancels it. Image borders
//! are handled by reflection about the edge pixel (`d c b | a b c d | c b a`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Kernel, KernelNorm};
use crate::lm::{self, LeastSquares, LmConfig};
use crate::robust;

/// Default kernel radius for a Gaussian of standard deviation `sigma`.
pub fn default_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Reflects a signed index into `[0, n)` without repeating the edge sample.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Nearest integer with ties resolved toward the lower index.
#[inline]
pub fn round_half_down(v: f64) -> isize {
    (v - 0.5).ceil() as isize
}

/// Samples `exp(-(x^2 + y^2) / 2 sigma^2)` on the integer grid
/// `[-radius, radius]^2` and applies `norm`.
pub fn gaussian_kernel(sigma: f64, radius: Option<usize>, norm: KernelNorm) -> Result<Kernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Range {
            name: "sigma",
            value: sigma,
        });
    }
    let r = radius.unwrap_or_else(|| default_radius(sigma)) as isize;
    let size = (2 * r + 1) as usize;
    let mut weights = Vec::with_capacity(size * size);
    for y in -r..=r {
        for x in -r..=r {
            weights.push((-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    Kernel::new(size, size, weights, norm)
}

/// Unit-sum 1D Gaussian taps on `[-radius, radius]`.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

fn pad_reflect(image: &Image, px: usize, py: usize) -> (Vec<f64>, usize) {
    let (w, h) = image.dims();
    let pw = w + 2 * px;
    let ph = h + 2 * py;
    let mut out = vec![0.0; pw * ph];
    for y in 0..ph {
        let sy = reflect_index(y as isize - py as isize, h);
        let src = image.row(sy);
        let dst = &mut out[y * pw..(y + 1) * pw];
        for (x, d) in dst.iter_mut().enumerate() {
            *d = src[reflect_index(x as isize - px as isize, w)];
        }
    }
    (out, pw)
}

/// Discrete 2D convolution, same-size output, reflective boundary.
///
/// `out(x, y) = sum_{u,v} K(u, v) * I(x - u, y - v)` with `(u, v)` the offset
/// from the kernel center.
pub fn convolve2d(image: &Image, kernel: &Kernel) -> Image {
    let (w, h) = image.dims();
    let (hw, hh) = (kernel.half_width(), kernel.half_height());
    let (padded, pw) = pad_reflect(image, hw, hh);
    let kw = kernel.width();
    let weights = kernel.weights();
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (ky, krow) in weights.chunks(kw).enumerate() {
            // I(x - u, y - v) lives at padded (x + 2hw - kx, y + 2hh - ky).
            let py = y + 2 * hh - ky;
            let prow = &padded[py * pw..(py + 1) * pw];
            for (kx, &k) in krow.iter().enumerate() {
                if k == 0.0 {
                    continue;
                }
                let off = 2 * hw - kx;
                for (o, &p) in row.iter_mut().zip(&prow[off..off + w]) {
                    *o += k * p;
                }
            }
        }
    });
    Image::from_vec(w, h, out).expect("convolution preserves shape")
}

/// Separable convolution: rows with `taps_x`, then columns with `taps_y`.
/// Both tap vectors must have odd length.
pub fn convolve_separable(image: &Image, taps_x: &[f64], taps_y: &[f64]) -> Image {
    assert!(taps_x.len() % 2 == 1 && taps_y.len() % 2 == 1, "taps must be odd-length");
    let (w, h) = image.dims();
    let rx = taps_x.len() / 2;
    let ry = taps_y.len() / 2;

    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let src = image.row(y);
        let mut line = Vec::with_capacity(w + 2 * rx);
        for x in 0..w + 2 * rx {
            line.push(src[reflect_index(x as isize - rx as isize, w)]);
        }
        for (k, &t) in taps_x.iter().enumerate() {
            // I(x - u) with u = k - rx sits at line[x + 2rx - k].
            let off = 2 * rx - k;
            for (o, &p) in row.iter_mut().zip(&line[off..off + w]) {
                *o += t * p;
            }
        }
    });

    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (k, &t) in taps_y.iter().enumerate() {
            let sy = reflect_index(y as isize + ry as isize - k as isize, h);
            let src = &tmp[sy * w..(sy + 1) * w];
            for (o, &p) in row.iter_mut().zip(src) {
                *o += t * p;
            }
        }
    });
    Image::from_vec(w, h, out).expect("convolution preserves shape")
}

/// Unit-sum Gaussian smoothing, radius `ceil(3 sigma)`. Equivalent to
/// [`convolve2d`] with a unit-sum [`gaussian_kernel`] up to rounding.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Range {
            name: "sigma",
            value: sigma,
        });
    }
    let taps = gaussian_taps(sigma, default_radius(sigma));
    Ok(convolve_separable(image, &taps, &taps))
}

/// Gaussian bandpass: `R = I * g(sigma_lp)`, `F = R - R * g(sigma_hp)`.
pub fn bandpass(image: &Image, sigma_lp: f64, sigma_hp: f64) -> Result<Image> {
    if !(sigma_lp > 0.0 && sigma_lp < sigma_hp) {
        return Err(Error::Range {
            name: "sigma_lp (must satisfy 0 < sigma_lp < sigma_hp)",
            value: sigma_lp,
        });
    }
    let r = gaussian_blur(image, sigma_lp)?;
    let hp = gaussian_blur(&r, sigma_hp)?;
    r.sub(&hp)
}

/// Pixel-wise maximum over `frames`.
pub fn max_project(frames: &[Image]) -> Result<Image> {
    let first = frames.first().ok_or(Error::EmptyInput("max_project needs at least one frame"))?;
    let mut out = first.clone();
    for f in &frames[1..] {
        accumulate_max(&mut out, f)?;
    }
    Ok(out)
}

/// `acc = max(acc, frame)` element-wise.
pub fn accumulate_max(acc: &mut Image, frame: &Image) -> Result<()> {
    acc.check_same_dims(frame)?;
    for (a, &b) in acc.data_mut().iter_mut().zip(frame.data()) {
        if b > *a {
            *a = b;
        }
    }
    Ok(())
}

/// Elliptical axis-aligned Gaussian fitted to an image window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2DFit {
    pub center: [f64; 2],
    pub sigma: [f64; 2],
    pub amplitude: f64,
    pub offset: f64,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl Gaussian2DFit {
    /// Builds a fit record from `[amplitude, x0, y0, sigma_x, sigma_y, offset]`.
    pub fn from_params(p: &[f64], residual_norm: f64, converged: bool, iterations: usize) -> Self {
        Self {
            amplitude: p[0],
            center: [p[1], p[2]],
            sigma: [p[3], p[4]],
            offset: p[5],
            residual_norm,
            converged,
            iterations,
        }
    }

    /// Evaluates the fitted model at `(x, y)`.
    pub fn model(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        self.amplitude
            * (-(dx * dx) / (2.0 * self.sigma[0].powi(2)) - (dy * dy) / (2.0 * self.sigma[1].powi(2))).exp()
            + self.offset
    }
}

struct GaussianWindow<'a> {
    xs: Vec<f64>,
    ys: Vec<f64>,
    values: Vec<f64>,
    bounds: [f64; 4],
    max_sigma: f64,
    _image: &'a Image,
}

impl LeastSquares for GaussianWindow<'_> {
    fn n_params(&self) -> usize {
        6
    }

    fn n_residuals(&self) -> usize {
        self.values.len()
    }

    fn evaluate(&self, p: &[f64], r: &mut [f64], jac: Option<&mut [f64]>) {
        let (a, x0, y0, sx, sy, c) = (p[0], p[1], p[2], p[3], p[4], p[5]);
        let (isx2, isy2) = (1.0 / (sx * sx), 1.0 / (sy * sy));
        match jac {
            Some(j) => {
                for i in 0..self.values.len() {
                    let dx = self.xs[i] - x0;
                    let dy = self.ys[i] - y0;
                    let e = (-0.5 * (dx * dx * isx2 + dy * dy * isy2)).exp();
                    r[i] = a * e + c - self.values[i];
                    let row = &mut j[6 * i..6 * i + 6];
                    row[0] = e;
                    row[1] = a * e * dx * isx2;
                    row[2] = a * e * dy * isy2;
                    row[3] = a * e * dx * dx * isx2 / sx;
                    row[4] = a * e * dy * dy * isy2 / sy;
                    row[5] = 1.0;
                }
            }
            None => {
                for i in 0..self.values.len() {
                    let dx = self.xs[i] - x0;
                    let dy = self.ys[i] - y0;
                    let e = (-0.5 * (dx * dx * isx2 + dy * dy * isy2)).exp();
                    r[i] = a * e + c - self.values[i];
                }
            }
        }
    }

    fn project(&self, p: &mut [f64]) {
        p[0] = p[0].max(0.0);
        p[1] = p[1].clamp(self.bounds[0], self.bounds[1]);
        p[2] = p[2].clamp(self.bounds[2], self.bounds[3]);
        p[3] = p[3].clamp(0.2, self.max_sigma);
        p[4] = p[4].clamp(0.2, self.max_sigma);
    }
}

/// Least-squares fit of `A exp(-(x-x0)^2/2sx^2 - (y-y0)^2/2sy^2) + c` over a
/// `window x window` region centered on the pixel nearest `seed`. The window
/// is clipped at the image border.
///
/// A window without contrast, or a fit that does not converge within the
/// iteration budget, yields [`Error::FitFailed`] carrying the best iterate as
/// `[A, x0, y0, sx, sy, c]`.
pub fn fit_gaussian2d(image: &Image, seed: [f64; 2], window: usize) -> Result<Gaussian2DFit> {
    let (w, h) = image.dims();
    if !(seed[0] >= -0.5 && seed[1] >= -0.5 && seed[0] < w as f64 - 0.5 && seed[1] < h as f64 - 0.5) {
        return Err(Error::OutOfBounds(format!("fit seed {seed:?} outside {w}x{h} image")));
    }
    let half = (window / 2) as isize;
    let cx = round_half_down(seed[0]);
    let cy = round_half_down(seed[1]);
    let x0 = (cx - half).max(0) as usize;
    let x1 = ((cx + half) as usize).min(w - 1);
    let y0 = (cy - half).max(0) as usize;
    let y1 = ((cy + half) as usize).min(h - 1);
    if x1 - x0 < 4 || y1 - y0 < 4 {
        return Err(Error::OutOfBounds("fit window smaller than 5x5 after clipping".into()));
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut values = Vec::new();
    let mut border = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let v = image.get(x, y);
            xs.push(x as f64);
            ys.push(y as f64);
            values.push(v);
            if x == x0 || x == x1 || y == y0 || y == y1 {
                border.push(v);
            }
        }
    }
    let offset = robust::median(&border);
    let peak = image.get(cx as usize, cy as usize).max(offset);
    let amplitude = peak - offset;
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);

    // Second moments of the positive excess give the width guess.
    let (mut m0, mut mx, mut my) = (0.0, 0.0, 0.0);
    for i in 0..values.len() {
        let e = (values[i] - offset).max(0.0);
        m0 += e;
        mx += e * xs[i];
        my += e * ys[i];
    }
    let (mut mxx, mut myy) = (0.0, 0.0);
    if m0 > 0.0 {
        mx /= m0;
        my /= m0;
        for i in 0..values.len() {
            let e = (values[i] - offset).max(0.0);
            mxx += e * (xs[i] - mx).powi(2);
            myy += e * (ys[i] - my).powi(2);
        }
        mxx /= m0;
        myy /= m0;
    }
    let max_sigma = window as f64;
    let guess_sx = mxx.sqrt().clamp(0.7, max_sigma / 3.0);
    let guess_sy = myy.sqrt().clamp(0.7, max_sigma / 3.0);
    let initial = [amplitude, cx as f64, cy as f64, guess_sx, guess_sy, offset];

    if amplitude <= 1e-12 * scale {
        return Err(Error::FitFailed {
            iterations: 0,
            best: initial.to_vec(),
        });
    }

    let problem = GaussianWindow {
        xs,
        ys,
        values,
        bounds: [x0 as f64 - 0.5, x1 as f64 + 0.5, y0 as f64 - 0.5, y1 as f64 + 0.5],
        max_sigma,
        _image: image,
    };
    let out = lm::minimize(&problem, &initial, &LmConfig::default());
    if !out.converged {
        return Err(Error::FitFailed {
            iterations: out.iterations,
            best: out.params,
        });
    }
    Ok(Gaussian2DFit::from_params(
        &out.params,
        out.residual_norm(),
        out.converged,
        out.iterations,
    ))
}

/// A candidate diffraction-limited emitter location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmitterSite {
    pub id: usize,
    pub center_px: [f64; 2],
    /// Frequency band `(lo, hi)` in THz whose aggregate image produced the site.
    pub source_band: Option<(f64, f64)>,
    pub fit: Gaussian2DFit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SpotParams {
    pub sigma_lp: f64,
    pub sigma_hp: f64,
    /// Threshold in units of scaled MAD above the median of the bandpassed image.
    pub threshold_k: f64,
    pub fit_window: usize,
    /// Sites closer than this (pixels) are merged, keeping the brighter one.
    pub min_separation: f64,
}

impl Default for SpotParams {
    fn default() -> Self {
        Self {
            sigma_lp: 2.0,
            sigma_hp: 6.0,
            threshold_k: 5.0,
            fit_window: 15,
            min_separation: 4.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpotReport {
    pub sites: Vec<EmitterSite>,
    /// Threshold applied to the bandpassed image.
    pub threshold: f64,
    pub filtered: Image,
}

/// Bandpass, threshold at `median + k MAD`, take local maxima within
/// `min_separation / 2` and refine each with [`fit_gaussian2d`] on the
/// bandpassed image.
pub fn detect_spots(image: &Image, params: &SpotParams) -> Result<Vec<EmitterSite>> {
    Ok(detect_spots_report(image, params)?.sites)
}

pub fn detect_spots_report(image: &Image, params: &SpotParams) -> Result<SpotReport> {
    let filtered = bandpass(image, params.sigma_lp, params.sigma_hp)?;
    let (med, mad) = robust::median_sigma(filtered.data());
    let peak_abs = filtered.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // Noise-free images have MAD ~ 0; keep the threshold above rounding noise.
    let mad = mad.max(1e-9 * peak_abs);
    let threshold = med + params.threshold_k * mad;

    let radius = (0.5 * params.min_separation).ceil().max(1.0) as usize;
    let peaks = component_peaks(&filtered, threshold, radius);
    let mut candidates: Vec<EmitterSite> = peaks
        .par_iter()
        .filter_map(|&(x, y)| {
            let seed = [x as f64, y as f64];
            let fit = match fit_gaussian2d(&filtered, seed, params.fit_window) {
                Ok(f) => f,
                Err(Error::FitFailed { best, iterations }) if best.len() == 6 => {
                    Gaussian2DFit::from_params(&best, f64::NAN, false, iterations)
                }
                Err(_) => return None,
            };
            // Reject fits that wandered away from their seed pixel.
            let drift = (fit.center[0] - seed[0]).hypot(fit.center[1] - seed[1]);
            if !(drift <= params.fit_window as f64 / 4.0) || fit.amplitude <= 0.0 {
                return None;
            }
            Some(EmitterSite {
                id: 0,
                center_px: fit.center,
                source_band: None,
                fit,
            })
        })
        .collect();

    candidates.sort_by(|a, b| {
        b.fit
            .amplitude
            .total_cmp(&a.fit.amplitude)
            .then(a.center_px[1].total_cmp(&b.center_px[1]))
            .then(a.center_px[0].total_cmp(&b.center_px[0]))
    });
    let mut sites: Vec<EmitterSite> = Vec::new();
    for c in candidates {
        let crowded = sites.iter().any(|s| {
            (s.center_px[0] - c.center_px[0]).hypot(s.center_px[1] - c.center_px[1]) < params.min_separation
        });
        if !crowded {
            sites.push(c);
        }
    }
    for (i, s) in sites.iter_mut().enumerate() {
        s.id = i;
    }
    Ok(SpotReport {
        sites,
        threshold,
        filtered,
    })
}

/// Peaks of the above-threshold regions: every pixel over `threshold` that
/// is the maximum of its `(2 radius + 1)^2` neighbourhood (ties go to the
/// first in raster order). Each connected component contributes at least
/// its brightest pixel; touching spots each keep their own peak.
fn component_peaks(image: &Image, threshold: f64, radius: usize) -> Vec<(usize, usize)> {
    let (w, h) = image.dims();
    let data = image.data();
    let r = radius as isize;
    let mut peaks = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let v = data[i];
            if !(v > threshold) {
                continue;
            }
            let mut is_peak = true;
            'scan: for ny in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for nx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    let j = ny as usize * w + nx as usize;
                    if data[j] > v || (data[j] == v && j < i) {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                peaks.push((x as usize, y as usize));
            }
        }
    }
    peaks
}

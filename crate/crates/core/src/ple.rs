//! Widefield photoluminescence-excitation analysis: a frequency-tagged frame
//! stack in, per-site spectra and pseudo-Voigt peak catalogs out.
//!
//! Frames are smoothed with a unit-sum Gaussian, grouped into frequency
//! bands, max-projected per band to find sites, and each site's 7x7 window
//! sum is traced over frequency. The trace is divided by the mean smoothed
//! frame (laser intensity) and fit with pseudo-Voigt lines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
pub use crate::imageproc::EmitterSite;
use crate::imageproc::{accumulate_max, detect_spots_report, gaussian_blur, round_half_down, SpotParams};
use crate::lm::{self, LeastSquares, LmConfig};
use crate::physics::{nv_labels, NVLabels};
use crate::robust;

pub const MHZ_PER_THZ: f64 = 1e6;
pub const GHZ_PER_THZ: f64 = 1e3;

/// Lifetime-limited linewidth `1 / (2 pi 1.7 ns)` in MHz.
pub fn lifetime_limit_mhz() -> f64 {
    1.0 / (2.0 * std::f64::consts::PI * 1.7e-9) / 1e6
}

pub const DEFAULT_MAX_FWHM_MHZ: f64 = 2000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frequency_thz: f64,
    pub exposure_s: f64,
    pub image: Image,
}

/// Frames ordered by strictly monotone excitation frequency (either direction).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    frames: Vec<Frame>,
    pixel_size_um: f64,
}

impl FrameStack {
    pub fn new(frames: Vec<Frame>, pixel_size_um: f64) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptyInput("frame stack"))?;
        let dims = first.image.dims();
        if !(pixel_size_um > 0.0) {
            return Err(Error::Range {
                name: "pixel_size_um",
                value: pixel_size_um,
            });
        }
        for f in &frames {
            if f.image.dims() != dims {
                return Err(Error::Shape {
                    expected: dims,
                    found: f.image.dims(),
                });
            }
            if !(f.exposure_s > 0.0) || !f.exposure_s.is_finite() {
                return Err(Error::Range {
                    name: "exposure_s",
                    value: f.exposure_s,
                });
            }
            if !f.frequency_thz.is_finite() {
                return Err(Error::Range {
                    name: "frequency_thz",
                    value: f.frequency_thz,
                });
            }
        }
        if frames.len() > 1 {
            let up = frames[1].frequency_thz > frames[0].frequency_thz;
            let monotone = frames.windows(2).all(|w| {
                if up {
                    w[1].frequency_thz > w[0].frequency_thz
                } else {
                    w[1].frequency_thz < w[0].frequency_thz
                }
            });
            if !monotone {
                return Err(Error::Contract("frame frequencies must be strictly monotone".into()));
            }
        }
        Ok(Self { frames, pixel_size_um })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].image.dims()
    }

    pub fn pixel_size_um(&self) -> f64 {
        self.pixel_size_um
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.frequency_thz).collect()
    }

    fn f_min(&self) -> f64 {
        self.frames.iter().map(|f| f.frequency_thz).fold(f64::INFINITY, f64::min)
    }

    fn f_max(&self) -> f64 {
        self.frames.iter().map(|f| f.frequency_thz).fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when frame exposures differ and counts must be rescaled to rates.
    pub fn mixed_exposures(&self) -> bool {
        let e0 = self.frames[0].exposure_s;
        self.frames.iter().any(|f| f.exposure_s != e0)
    }

    /// Indices of frames with frequency in `[lo, hi]`.
    fn indices_within(&self, lo: f64, hi: f64) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| {
                let f = self.frames[i].frequency_thz;
                f >= lo && f <= hi
            })
            .collect()
    }

    /// Smoothed frame `i`, divided by its exposure when exposures differ.
    pub fn smoothed(&self, i: usize, sigma_px: f64) -> Result<Image> {
        let f = &self.frames[i];
        let blurred = gaussian_blur(&f.image, sigma_px)?;
        Ok(if self.mixed_exposures() {
            blurred.scaled(1.0 / f.exposure_s)
        } else {
            blurred
        })
    }
}

/// Frequency interval `[lo_thz, hi_thz)`; the final band also includes `hi_thz`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub index: usize,
    pub lo_thz: f64,
    pub hi_thz: f64,
    pub last: bool,
}

impl Band {
    pub fn contains(&self, f_thz: f64) -> bool {
        f_thz >= self.lo_thz && (f_thz < self.hi_thz || (self.last && f_thz <= self.hi_thz))
    }

    pub fn width_ghz(&self) -> f64 {
        (self.hi_thz - self.lo_thz) * GHZ_PER_THZ
    }
}

/// Contiguous bands of `band_width_ghz` from the lowest scanned frequency up;
/// the last band ends at the highest frequency and may be short.
pub fn section_bands(stack: &FrameStack, band_width_ghz: f64) -> Result<Vec<Band>> {
    if !(band_width_ghz > 0.0) {
        return Err(Error::Range {
            name: "band_width_ghz",
            value: band_width_ghz,
        });
    }
    let (lo, hi) = (stack.f_min(), stack.f_max());
    let span_ghz = (hi - lo) * GHZ_PER_THZ;
    let n = ((span_ghz / band_width_ghz - 1e-9).ceil() as usize).max(1);
    let w = band_width_ghz / GHZ_PER_THZ;
    Ok((0..n)
        .map(|k| Band {
            index: k,
            lo_thz: lo + k as f64 * w,
            hi_thz: if k + 1 == n { hi } else { lo + (k + 1) as f64 * w },
            last: k + 1 == n,
        })
        .collect())
}

fn band_frames(stack: &FrameStack, band: &Band) -> Vec<usize> {
    (0..stack.len())
        .filter(|&i| band.contains(stack.frames[i].frequency_thz))
        .collect()
}

/// Max projection of the smoothed frames in `band`.
pub fn band_aggregate(stack: &FrameStack, band: &Band, sigma_px: f64) -> Result<Image> {
    let idx = band_frames(stack, band);
    let mut it = idx.into_iter();
    let first = it.next().ok_or(Error::EmptyInput("band contains no frames"))?;
    let mut acc = stack.smoothed(first, sigma_px)?;
    for i in it {
        accumulate_max(&mut acc, &stack.smoothed(i, sigma_px)?)?;
    }
    Ok(acc)
}

/// Integer window center and half-width check for a site.
fn window_origin(site: &EmitterSite, dims: (usize, usize), window: usize) -> Result<(usize, usize)> {
    let half = (window / 2) as isize;
    let cx = round_half_down(site.center_px[0]);
    let cy = round_half_down(site.center_px[1]);
    if cx - half < 0 || cy - half < 0 || cx + half >= dims.0 as isize || cy + half >= dims.1 as isize {
        return Err(Error::OutOfBounds(format!(
            "site {} at ({:.2}, {:.2}) is within {half} px of the frame edge",
            site.id, site.center_px[0], site.center_px[1]
        )));
    }
    Ok(((cx - half) as usize, (cy - half) as usize))
}

fn window_sum(image: &Image, x0: usize, y0: usize, window: usize) -> f64 {
    (y0..y0 + window).map(|y| image.row(y)[x0..x0 + window].iter().sum::<f64>()).sum()
}

/// Raw trace `I(nu)`: the `window x window` sum of each smoothed frame around
/// the site's rounded center.
pub fn extract_intensity(stack: &FrameStack, site: &EmitterSite, window: usize, sigma_px: f64) -> Result<Vec<f64>> {
    let (x0, y0) = window_origin(site, stack.dims(), window)?;
    (0..stack.len())
        .map(|i| Ok(window_sum(&stack.smoothed(i, sigma_px)?, x0, y0, window)))
        .collect()
}

/// Laser intensity proxy `L(nu)`: mean of each smoothed frame.
pub fn laser_background(stack: &FrameStack, sigma_px: f64) -> Result<Vec<f64>> {
    (0..stack.len()).map(|i| Ok(stack.smoothed(i, sigma_px)?.mean())).collect()
}

/// `raw / background`, element-wise. The background must be strictly positive.
pub fn normalize(raw: &[f64], background: &[f64]) -> Result<Vec<f64>> {
    if raw.len() != background.len() {
        return Err(Error::Contract(format!(
            "trace length {} vs background length {}",
            raw.len(),
            background.len()
        )));
    }
    if let Some((index, &value)) = background.iter().enumerate().find(|(_, b)| !(**b > 0.0)) {
        return Err(Error::DegenerateBackground { index, value });
    }
    Ok(raw.iter().zip(background).map(|(r, b)| r / b).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PLESpectrum {
    pub site_id: usize,
    pub frequencies_thz: Vec<f64>,
    pub raw: Vec<f64>,
    pub background: Vec<f64>,
    /// `raw / background`, or a copy of `raw` when normalization is off.
    pub corrected: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakFit {
    pub center_thz: f64,
    pub fwhm_mhz: f64,
    /// Lorentzian fraction.
    pub eta: f64,
    /// Peak height above baseline.
    pub amplitude: f64,
    pub baseline: f64,
    /// RMS residual of the fit window.
    pub residual_norm: f64,
}

/// Height-normalized pseudo-Voigt profile (1 at `dx = 0`) with a shared FWHM.
pub fn pseudo_voigt_shape(dx: f64, fwhm: f64, eta: f64) -> f64 {
    let q = 4.0 * (dx / fwhm).powi(2);
    eta / (1.0 + q) + (1.0 - eta) * (-std::f64::consts::LN_2 * q).exp()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PeakParams {
    /// Minimum prominence in scaled-MAD units of the detrended trace.
    pub prominence_k: f64,
    /// Half-width of each fit window in FWHM units.
    pub window_fwhm: f64,
    pub min_samples: usize,
}

impl Default for PeakParams {
    fn default() -> Self {
        Self {
            prominence_k: 5.0,
            window_fwhm: 5.0,
            min_samples: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PeakFitOutcome {
    pub peaks: Vec<PeakFit>,
    /// Candidates whose fit did not converge or left its window.
    pub dropped: usize,
}

struct Candidate {
    index: usize,
    prominence: f64,
    width: f64,
}

/// Local maxima (plateaus resolved to their middle) with prominences.
fn find_candidates(x: &[f64], y: &[f64], threshold: f64) -> Vec<Candidate> {
    let n = y.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if y[i] > y[i - 1] {
            let mut j = i;
            while j + 1 < n && y[j + 1] == y[i] {
                j += 1;
            }
            if j + 1 < n && y[j + 1] < y[i] {
                let peak = (i + j) / 2;
                let h = y[peak];
                let mut left_min = h;
                let mut k = i;
                while k > 0 {
                    k -= 1;
                    if y[k] > h {
                        break;
                    }
                    left_min = left_min.min(y[k]);
                }
                let mut right_min = h;
                let mut k = j;
                while k + 1 < n {
                    k += 1;
                    if y[k] > h {
                        break;
                    }
                    right_min = right_min.min(y[k]);
                }
                let prominence = h - left_min.max(right_min);
                if prominence > threshold {
                    let half = h - 0.5 * prominence;
                    let cross = |from: usize, step: isize| -> f64 {
                        let mut k = from as isize;
                        loop {
                            let nk = k + step;
                            if nk < 0 || nk >= n as isize {
                                return x[k as usize];
                            }
                            let (a, b) = (y[k as usize], y[nk as usize]);
                            if b <= half {
                                let t = (a - half) / (a - b);
                                return x[k as usize] + t * (x[nk as usize] - x[k as usize]);
                            }
                            k = nk;
                        }
                    };
                    let step = (x[1] - x[0]).abs();
                    let width = (cross(peak, 1) - cross(peak, -1)).abs().max(2.0 * step);
                    out.push(Candidate {
                        index: peak,
                        prominence,
                        width,
                    });
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Joint pseudo-Voigt model over one window. Parameters:
/// `[baseline, (amplitude, center, fwhm, eta) per peak]`.
struct VoigtGroup<'a> {
    x: &'a [f64],
    y: &'a [f64],
    n_peaks: usize,
    x_lo: f64,
    x_hi: f64,
    fwhm_min: f64,
    fwhm_max: f64,
}

impl LeastSquares for VoigtGroup<'_> {
    fn n_params(&self) -> usize {
        1 + 4 * self.n_peaks
    }

    fn n_residuals(&self) -> usize {
        self.x.len()
    }

    fn evaluate(&self, p: &[f64], r: &mut [f64], mut jac: Option<&mut [f64]>) {
        let np = self.n_params();
        let ln2 = std::f64::consts::LN_2;
        for (i, (&x, &y)) in self.x.iter().zip(self.y).enumerate() {
            let mut f = p[0];
            if let Some(j) = jac.as_deref_mut() {
                j[i * np] = 1.0;
            }
            for k in 0..self.n_peaks {
                let (a, x0, g, eta) = (p[1 + 4 * k], p[2 + 4 * k], p[3 + 4 * k], p[4 + 4 * k]);
                let u = (x - x0) / g;
                let q = 4.0 * u * u;
                let lor = 1.0 / (1.0 + q);
                let gau = (-ln2 * q).exp();
                f += a * (eta * lor + (1.0 - eta) * gau);
                if let Some(j) = jac.as_deref_mut() {
                    let dfdq = a * (-eta * lor * lor - (1.0 - eta) * ln2 * gau);
                    let row = &mut j[i * np..(i + 1) * np];
                    row[1 + 4 * k] = eta * lor + (1.0 - eta) * gau;
                    row[2 + 4 * k] = dfdq * (-8.0 * u / g);
                    row[3 + 4 * k] = dfdq * (-8.0 * u * u / g);
                    row[4 + 4 * k] = a * (lor - gau);
                }
            }
            r[i] = f - y;
        }
    }

    fn project(&self, p: &mut [f64]) {
        for k in 0..self.n_peaks {
            p[1 + 4 * k] = p[1 + 4 * k].max(0.0);
            p[2 + 4 * k] = p[2 + 4 * k].clamp(self.x_lo, self.x_hi);
            p[3 + 4 * k] = p[3 + 4 * k].clamp(self.fwhm_min, self.fwhm_max);
            p[4 + 4 * k] = p[4 + 4 * k].clamp(0.0, 1.0);
        }
    }
}

/// Finds prominent local maxima and fits each with a pseudo-Voigt line;
/// peaks whose fit windows overlap are fit jointly with a shared baseline.
pub fn fit_peaks(frequencies_thz: &[f64], trace: &[f64], params: &PeakParams) -> Result<PeakFitOutcome> {
    if frequencies_thz.len() != trace.len() {
        return Err(Error::Contract(format!(
            "{} frequencies for {} trace samples",
            frequencies_thz.len(),
            trace.len()
        )));
    }
    if trace.len() < params.min_samples.max(3) {
        return Err(Error::EmptyInput("trace shorter than the minimum sample count"));
    }
    // Ascending MHz offsets from the first sample.
    let mut order: Vec<usize> = (0..trace.len()).collect();
    order.sort_by(|&a, &b| frequencies_thz[a].total_cmp(&frequencies_thz[b]));
    let f_ref = frequencies_thz[order[0]];
    let x: Vec<f64> = order.iter().map(|&i| (frequencies_thz[i] - f_ref) * MHZ_PER_THZ).collect();
    let y: Vec<f64> = order.iter().map(|&i| trace[i]).collect();
    let n = x.len();

    // Linear detrend, then a robust noise scale.
    let xm = robust::mean(&x);
    let ym = robust::mean(&y);
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    let slope = if sxx > 0.0 {
        x.iter().zip(&y).map(|(a, b)| (a - xm) * (b - ym)).sum::<f64>() / sxx
    } else {
        0.0
    };
    let detrended: Vec<f64> = x.iter().zip(&y).map(|(a, b)| b - ym - slope * (a - xm)).collect();
    let (_, sigma) = robust::median_sigma(&detrended);
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sigma = sigma.max(1e-9 * scale);
    let candidates = find_candidates(&x, &y, params.prominence_k * sigma);
    if candidates.is_empty() {
        return Ok(PeakFitOutcome::default());
    }

    // Merge overlapping windows into groups.
    let win = |c: &Candidate| {
        let half = params.window_fwhm * c.width;
        (x[c.index] - half, x[c.index] + half)
    };
    let mut groups: Vec<(f64, f64, Vec<&Candidate>)> = Vec::new();
    for c in &candidates {
        let (lo, hi) = win(c);
        match groups.last_mut() {
            Some(g) if lo <= g.1 => {
                g.1 = g.1.max(hi);
                g.2.push(c);
            }
            _ => groups.push((lo, hi, vec![c])),
        }
    }

    let step = (x[n - 1] - x[0]) / (n - 1) as f64;
    let fits: Vec<(Vec<PeakFit>, usize)> = groups
        .par_iter()
        .map(|(lo, hi, members)| {
            let i0 = x.partition_point(|v| *v < *lo);
            let i1 = x.partition_point(|v| *v <= *hi);
            let (xs, ys) = (&x[i0..i1], &y[i0..i1]);
            let k = members.len();
            if xs.len() < 4 * k + 2 {
                return (Vec::new(), k);
            }
            let base = ys.iter().copied().fold(f64::INFINITY, f64::min);
            let mut p0 = vec![base];
            for c in members {
                p0.extend([c.prominence, x[c.index], c.width, 0.5]);
            }
            let problem = VoigtGroup {
                x: xs,
                y: ys,
                n_peaks: k,
                x_lo: xs[0],
                x_hi: xs[xs.len() - 1],
                fwhm_min: 0.5 * step,
                fwhm_max: (xs[xs.len() - 1] - xs[0]).max(step),
            };
            let out = lm::minimize(&problem, &p0, &LmConfig::default());
            if !out.converged || !out.cost.is_finite() {
                return (Vec::new(), k);
            }
            let rms = (out.cost / xs.len() as f64).sqrt();
            let mut kept = Vec::new();
            let mut dropped = 0;
            for j in 0..k {
                let (a, x0, g, eta) = (
                    out.params[1 + 4 * j],
                    out.params[2 + 4 * j],
                    out.params[3 + 4 * j],
                    out.params[4 + 4 * j],
                );
                // Centers pinned to the window edge did not find a line.
                let inside = x0 > problem.x_lo && x0 < problem.x_hi;
                if !(a > 0.0) || !inside || !(g > 0.0) {
                    dropped += 1;
                    continue;
                }
                kept.push(PeakFit {
                    center_thz: f_ref + x0 / MHZ_PER_THZ,
                    fwhm_mhz: g,
                    eta,
                    amplitude: a,
                    baseline: out.params[0],
                    residual_norm: rms,
                });
            }
            (kept, dropped)
        })
        .collect();

    let mut outcome = PeakFitOutcome::default();
    for (peaks, dropped) in fits {
        outcome.peaks.extend(peaks);
        outcome.dropped += dropped;
    }
    outcome.peaks.sort_by(|a, b| a.center_thz.total_cmp(&b.center_thz));
    Ok(outcome)
}

/// Keeps peaks with `min_fwhm_mhz < fwhm < max_fwhm_mhz`.
pub fn filter_peaks(peaks: &[PeakFit], min_fwhm_mhz: f64, max_fwhm_mhz: f64) -> Result<Vec<PeakFit>> {
    if !(min_fwhm_mhz < max_fwhm_mhz) {
        return Err(Error::Contract(format!(
            "filter bounds must satisfy min < max, got {min_fwhm_mhz} and {max_fwhm_mhz}"
        )));
    }
    Ok(peaks
        .iter()
        .filter(|p| p.fwhm_mhz > min_fwhm_mhz && p.fwhm_mhz < max_fwhm_mhz)
        .copied()
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfocalModel {
    NvTwoPeak,
    Generic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfocalFit {
    pub labels: Option<NVLabels>,
    pub peaks: Vec<PeakFit>,
}

/// Fits a confocal PLE scan. The NV model labels the two strongest peaks
/// with their mean frequency and splitting.
pub fn fit_confocal_ple(frequencies_thz: &[f64], trace: &[f64], model: ConfocalModel) -> Result<ConfocalFit> {
    let outcome = fit_peaks(frequencies_thz, trace, &PeakParams::default())?;
    match model {
        ConfocalModel::Generic => Ok(ConfocalFit {
            labels: None,
            peaks: outcome.peaks,
        }),
        ConfocalModel::NvTwoPeak => {
            if outcome.peaks.len() < 2 {
                return Err(Error::ModelMismatch {
                    needed: 2,
                    found: outcome.peaks.len(),
                });
            }
            let mut by_height = outcome.peaks.clone();
            by_height.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
            let labels = nv_labels(by_height[0].center_thz, by_height[1].center_thz);
            Ok(ConfocalFit {
                labels: Some(labels),
                peaks: outcome.peaks,
            })
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub band_width_ghz: f64,
    /// Extra trace context on each side of a band so lines at band edges fit.
    pub guard_ghz: f64,
    pub smoothing_sigma_px: f64,
    pub window_px: usize,
    pub normalize: bool,
    pub spots: SpotParams,
    pub peaks: PeakParams,
    pub min_fwhm_mhz: f64,
    pub max_fwhm_mhz: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            band_width_ghz: 10.0,
            guard_ghz: 1.0,
            smoothing_sigma_px: 2.0,
            window_px: 7,
            normalize: true,
            spots: SpotParams::default(),
            peaks: PeakParams::default(),
            min_fwhm_mhz: lifetime_limit_mhz(),
            max_fwhm_mhz: DEFAULT_MAX_FWHM_MHZ,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogRow {
    pub site_id: usize,
    pub x_px: f64,
    pub y_px: f64,
    pub band_lo_thz: f64,
    pub band_hi_thz: f64,
    pub peak: PeakFit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub frames: usize,
    pub bands: usize,
    pub sites: usize,
    pub skipped_sites: usize,
    pub peaks_fit: usize,
    pub peaks_dropped: usize,
    pub peaks_filtered_out: usize,
    pub rows: usize,
}

#[derive(Clone, Debug)]
pub struct PeakCatalog {
    pub rows: Vec<CatalogRow>,
    pub sites: Vec<EmitterSite>,
    pub spectra: Vec<PLESpectrum>,
    pub bands: Vec<Band>,
    pub summary: PipelineSummary,
}

pub const CATALOG_CSV_HEADER: &str =
    "site_id,x_px,y_px,band_lo_thz,band_hi_thz,center_thz,fwhm_mhz,eta,amplitude,baseline,residual";

impl PeakCatalog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CATALOG_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let p = &r.peak;
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.9},{:.9},{:.9},{:.4},{:.6},{:.6e},{:.6e},{:.6e}\n",
                r.site_id,
                r.x_px,
                r.y_px,
                r.band_lo_thz,
                r.band_hi_thz,
                p.center_thz,
                p.fwhm_mhz,
                p.eta,
                p.amplitude,
                p.baseline,
                p.residual_norm
            ));
        }
        s
    }
}

/// Bands, aggregates, spot detection, traces, normalization, peak fits and
/// linewidth filtering. Per-site failures are counted, never fatal.
pub fn run_widefield_pipeline(stack: &FrameStack, config: &PipelineConfig) -> Result<PeakCatalog> {
    if config.window_px % 2 == 0 || config.window_px == 0 {
        return Err(Error::Contract(format!("site window must be odd, got {}", config.window_px)));
    }
    let sigma = config.smoothing_sigma_px;
    let bands = section_bands(stack, config.band_width_ghz)?;
    let dims = stack.dims();
    let freqs = stack.frequencies();

    // Pass 1: laser background over every frame and per-band aggregates.
    let mut background = vec![0.0; stack.len()];
    let mut aggregates: Vec<Option<Image>> = vec![None; bands.len()];
    for (i, &f) in freqs.iter().enumerate() {
        let sm = stack.smoothed(i, sigma)?;
        background[i] = sm.mean();
        if let Some(b) = bands.iter().position(|b| b.contains(f)) {
            match &mut aggregates[b] {
                Some(acc) => accumulate_max(acc, &sm)?,
                slot => *slot = Some(sm),
            }
        }
    }

    let mut summary = PipelineSummary {
        frames: stack.len(),
        bands: bands.len(),
        ..Default::default()
    };
    let mut rows = Vec::new();
    let mut all_sites = Vec::new();
    let mut spectra = Vec::new();
    let guard = config.guard_ghz / GHZ_PER_THZ;
    for (band, agg) in bands.iter().zip(&aggregates) {
        let Some(agg) = agg else { continue };
        let report = detect_spots_report(agg, &config.spots)?;
        let mut sites = Vec::new();
        let mut origins = Vec::new();
        for mut s in report.sites {
            s.id = all_sites.len() + sites.len();
            s.source_band = Some((band.lo_thz, band.hi_thz));
            match window_origin(&s, dims, config.window_px) {
                Ok(o) => {
                    origins.push(o);
                    sites.push(s);
                }
                Err(e) => {
                    log::warn!("skipping site: {e}");
                    summary.skipped_sites += 1;
                }
            }
        }
        if sites.is_empty() {
            continue;
        }

        // Pass 2: traces over the band plus guard.
        let idx = stack.indices_within(band.lo_thz - guard, band.hi_thz + guard);
        let mut traces = vec![Vec::with_capacity(idx.len()); sites.len()];
        for &i in &idx {
            let sm = stack.smoothed(i, sigma)?;
            for (t, &(x0, y0)) in traces.iter_mut().zip(&origins) {
                t.push(window_sum(&sm, x0, y0, config.window_px));
            }
        }
        let f_win: Vec<f64> = idx.iter().map(|&i| freqs[i]).collect();
        let b_win: Vec<f64> = idx.iter().map(|&i| background[i]).collect();

        let per_site: Vec<Result<(PLESpectrum, PeakFitOutcome)>> = sites
            .par_iter()
            .zip(traces.into_par_iter())
            .map(|(site, raw)| {
                let corrected = if config.normalize {
                    normalize(&raw, &b_win)?
                } else {
                    raw.clone()
                };
                let outcome = if corrected.len() >= config.peaks.min_samples {
                    fit_peaks(&f_win, &corrected, &config.peaks)?
                } else {
                    PeakFitOutcome::default()
                };
                Ok((
                    PLESpectrum {
                        site_id: site.id,
                        frequencies_thz: f_win.clone(),
                        raw,
                        background: b_win.clone(),
                        corrected,
                    },
                    outcome,
                ))
            })
            .collect();

        for (site, res) in sites.iter().zip(per_site) {
            let (spectrum, outcome) = match res {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("site {} failed: {e}", site.id);
                    summary.skipped_sites += 1;
                    continue;
                }
            };
            summary.peaks_dropped += outcome.dropped;
            let in_band: Vec<PeakFit> = outcome.peaks.into_iter().filter(|p| band.contains(p.center_thz)).collect();
            summary.peaks_fit += in_band.len();
            let kept = filter_peaks(&in_band, config.min_fwhm_mhz, config.max_fwhm_mhz)?;
            summary.peaks_filtered_out += in_band.len() - kept.len();
            for peak in kept {
                rows.push(CatalogRow {
                    site_id: site.id,
                    x_px: site.center_px[0],
                    y_px: site.center_px[1],
                    band_lo_thz: band.lo_thz,
                    band_hi_thz: band.hi_thz,
                    peak,
                });
            }
            spectra.push(spectrum);
        }
        all_sites.extend(sites);
    }
    summary.sites = all_sites.len();
    summary.rows = rows.len();
    Ok(PeakCatalog {
        rows,
        sites: all_sites,
        spectra,
        bands,
        summary,
    })
}

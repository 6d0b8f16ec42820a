//! Kernel density estimates, Gaussian population fits on the density curve,
//! binned linewidth statistics, the confocal/widefield timing model and
//! Hartigan's dip test of unimodality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, LeastSquares, LmConfig};
use crate::ple::PeakFit;
use crate::robust;

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Gaussian kernel density evaluated on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub n_samples: usize,
}

impl Kde {
    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// `(1 / n h sqrt(2 pi)) sum_i exp(-(x - x_i)^2 / 2 h^2)` at each grid point.
pub fn kde(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Result<Kde> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("kde needs at least one sample"));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::Range {
            name: "bandwidth",
            value: bandwidth,
        });
    }
    let norm = 1.0 / (samples.len() as f64 * bandwidth * SQRT_2PI);
    let inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let density = grid
        .par_iter()
        .map(|&x| {
            let mut acc = 0.0;
            for &s in samples {
                let d = x - s;
                acc += (-d * d * inv2h2).exp();
            }
            acc * norm
        })
        .collect();
    Ok(Kde {
        grid: grid.to_vec(),
        density,
        bandwidth,
        n_samples: samples.len(),
    })
}

/// Grid from `min - 6h` to `max + 6h` with `points_per_bandwidth` steps per `h`.
pub fn kde_grid(samples: &[f64], bandwidth: f64, points_per_bandwidth: usize) -> Vec<f64> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 6.0 * bandwidth;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 6.0 * bandwidth;
    if !lo.is_finite() || !hi.is_finite() {
        return Vec::new();
    }
    let step = bandwidth / points_per_bandwidth.max(1) as f64;
    let n = ((hi - lo) / step).ceil() as usize + 1;
    (0..n).map(|i| lo + i as f64 * step).collect()
}

/// One mixture component. `sigma` is the population width with the kernel
/// bandwidth removed in quadrature; `curve_sigma` is the fitted width on the
/// density curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub center: f64,
    pub sigma: f64,
    pub curve_sigma: f64,
    pub weight: f64,
}

/// `sum_k w_k N(u; mu_k, s_k)` on standardized abscissae.
/// Parameters: `(w, mu, s)` per component.
struct Mixture<'a> {
    u: &'a [f64],
    d: &'a [f64],
    k: usize,
    s_min: f64,
}

impl LeastSquares for Mixture<'_> {
    fn n_params(&self) -> usize {
        3 * self.k
    }

    fn n_residuals(&self) -> usize {
        self.u.len()
    }

    fn evaluate(&self, p: &[f64], r: &mut [f64], mut jac: Option<&mut [f64]>) {
        let np = self.n_params();
        for (i, (&u, &d)) in self.u.iter().zip(self.d).enumerate() {
            let mut f = 0.0;
            for c in 0..self.k {
                let (w, mu, s) = (p[3 * c], p[3 * c + 1], p[3 * c + 2]);
                let z = (u - mu) / s;
                let g = (-0.5 * z * z).exp() / (s * SQRT_2PI);
                f += w * g;
                if let Some(j) = jac.as_deref_mut() {
                    let row = &mut j[i * np..(i + 1) * np];
                    row[3 * c] = g;
                    row[3 * c + 1] = w * g * z / s;
                    row[3 * c + 2] = w * g * (z * z - 1.0) / s;
                }
            }
            r[i] = f - d;
        }
    }

    fn project(&self, p: &mut [f64]) {
        for c in 0..self.k {
            p[3 * c] = p[3 * c].max(0.0);
            p[3 * c + 2] = p[3 * c + 2].max(self.s_min);
        }
    }
}

/// Least-squares fit of a `k`-component Gaussian mixture (k = 1 or 2) to a
/// density curve. Components are sorted by center.
pub fn fit_gaussians(density: &Kde, k: usize) -> Result<Vec<GaussianComponent>> {
    if !(k == 1 || k == 2) {
        return Err(Error::Contract(format!("mixture size must be 1 or 2, got {k}")));
    }
    if density.n_samples < 10 * k {
        return Err(Error::EmptyInput("mixture fit needs at least 10 samples per component"));
    }
    let (x, y) = (&density.grid, &density.density);
    let mass = trapezoid(x, y);
    if !(mass > 0.0) {
        return Err(Error::EmptyInput("density curve has no mass"));
    }
    let mean = x.iter().zip(y.iter()).map(|(a, b)| a * b).collect::<Vec<_>>();
    let m1 = trapezoid(x, &mean) / mass;
    let var = trapezoid(x, &x.iter().zip(y.iter()).map(|(a, b)| (a - m1).powi(2) * b).collect::<Vec<_>>()) / mass;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::FitFailed {
            iterations: 0,
            best: vec![m1],
        });
    }
    // Standardized coordinates keep the normal equations well scaled.
    let u: Vec<f64> = x.iter().map(|v| (v - m1) / sd).collect();
    let d: Vec<f64> = y.iter().map(|v| v * sd).collect();
    let h_u = density.bandwidth / sd;
    let problem = Mixture {
        u: &u,
        d: &d,
        k,
        s_min: 0.5 * h_u,
    };

    let mut starts: Vec<Vec<f64>> = Vec::new();
    if k == 1 {
        starts.push(vec![mass, 0.0, 1.0]);
    } else {
        // Split at the mean, and at the two strongest local maxima.
        let split = |lo: bool| -> (f64, f64, f64) {
            let sel: Vec<(f64, f64)> = u
                .iter()
                .zip(&d)
                .filter(|(a, _)| if lo { **a < 0.0 } else { **a >= 0.0 })
                .map(|(a, b)| (*a, *b))
                .collect();
            let (ux, dy): (Vec<f64>, Vec<f64>) = sel.into_iter().unzip();
            let w = trapezoid(&ux, &dy).max(1e-6);
            let mu = trapezoid(&ux, &ux.iter().zip(&dy).map(|(a, b)| a * b).collect::<Vec<_>>()) / w;
            let v = trapezoid(&ux, &ux.iter().zip(&dy).map(|(a, b)| (a - mu).powi(2) * b).collect::<Vec<_>>()) / w;
            (w, mu, v.sqrt().max(h_u))
        };
        let (wl, ml, sl) = split(true);
        let (wr, mr, sr) = split(false);
        starts.push(vec![wl, ml, sl, wr, mr, sr]);
        let mut maxima: Vec<(f64, f64)> = (1..d.len().saturating_sub(1))
            .filter(|&i| d[i] > d[i - 1] && d[i] >= d[i + 1])
            .map(|i| (d[i], u[i]))
            .collect();
        maxima.sort_by(|a, b| b.0.total_cmp(&a.0));
        if maxima.len() >= 2 {
            let (a, b) = (maxima[0].1, maxima[1].1);
            let s = (0.5 * (a - b).abs()).max(h_u);
            starts.push(vec![0.5, a, s, 0.5, b, s]);
        }
        starts.push(vec![0.5, -0.5, 0.7, 0.5, 0.5, 0.7]);
    }

    let cfg = LmConfig {
        max_iterations: 500,
        ..LmConfig::default()
    };
    let best = starts
        .iter()
        .map(|p0| lm::minimize(&problem, p0, &cfg))
        .filter(|o| o.converged && o.cost.is_finite())
        .min_by(|a, b| a.cost.total_cmp(&b.cost));
    let Some(best) = best else {
        return Err(Error::FitFailed {
            iterations: cfg.max_iterations,
            best: starts[0].clone(),
        });
    };
    let h = density.bandwidth;
    let mut comps: Vec<GaussianComponent> = (0..k)
        .map(|c| {
            let (w, mu, s) = (best.params[3 * c], best.params[3 * c + 1], best.params[3 * c + 2]);
            let curve_sigma = s * sd;
            GaussianComponent {
                center: m1 + mu * sd,
                sigma: (curve_sigma * curve_sigma - h * h).max(0.0).sqrt(),
                curve_sigma,
                weight: w,
            }
        })
        .collect();
    comps.sort_by(|a, b| a.center.total_cmp(&b.center));
    Ok(comps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinewidthBin {
    pub lo_thz: f64,
    pub hi_thz: f64,
    pub count: usize,
    pub mean_fwhm_mhz: f64,
    /// Standard deviation of the mean.
    pub sem_mhz: f64,
    pub kept: bool,
}

/// Peaks binned by center frequency on a grid of `bin_width_ghz` multiples.
/// Each bin's linewidth is the center of a Gaussian fit to the linewidth KDE
/// (Silverman bandwidth); bins with fewer than `min_count` peaks are marked
/// not kept.
pub fn binned_linewidths(peaks: &[PeakFit], bin_width_ghz: f64, min_count: usize) -> Result<Vec<LinewidthBin>> {
    if !(bin_width_ghz > 0.0) {
        return Err(Error::Range {
            name: "bin_width_ghz",
            value: bin_width_ghz,
        });
    }
    let w = bin_width_ghz / 1e3;
    let mut bins: std::collections::BTreeMap<i64, Vec<f64>> = Default::default();
    for p in peaks {
        bins.entry((p.center_thz / w).floor() as i64).or_default().push(p.fwhm_mhz);
    }
    let mut out = Vec::with_capacity(bins.len());
    for (key, widths) in bins {
        let n = widths.len();
        let sd = robust::std_dev(&widths);
        let plain_mean = robust::mean(&widths);
        let kept = n >= min_count;
        let mean = if kept && sd > 0.0 {
            let h = 1.06 * sd * (n as f64).powf(-0.2);
            let grid = kde_grid(&widths, h, 10);
            kde(&widths, h, &grid)
                .and_then(|d| fit_gaussians(&d, 1))
                .map(|c| c[0].center)
                .unwrap_or(plain_mean)
        } else {
            plain_mean
        };
        out.push(LinewidthBin {
            lo_thz: key as f64 * w,
            hi_thz: (key + 1) as f64 * w,
            count: n,
            mean_fwhm_mhz: mean,
            sem_mhz: sd / (n as f64).sqrt(),
            kept,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub t_move: f64,
    pub t_tune_coarse: f64,
    pub t_repump: f64,
    pub t_tune_fine: f64,
    pub t_collect_c: f64,
    pub t_collect_w: f64,
    /// Sites in the field of view.
    pub m: u64,
    /// Frequency bins.
    pub n: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub t_confocal: f64,
    pub t_widefield: f64,
    pub ratio: f64,
}

pub fn timing(model: &TimingModel) -> Result<Timing> {
    let times = [
        ("t_move", model.t_move),
        ("t_tune_coarse", model.t_tune_coarse),
        ("t_repump", model.t_repump),
        ("t_tune_fine", model.t_tune_fine),
        ("t_collect_c", model.t_collect_c),
        ("t_collect_w", model.t_collect_w),
    ];
    for (name, value) in times {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Range { name, value });
        }
    }
    if model.m == 0 || model.n == 0 {
        return Err(Error::Contract("timing model needs m >= 1 and n >= 1".into()));
    }
    let (m, n) = (model.m as f64, model.n as f64);
    let t_confocal =
        m * (model.t_move + model.t_tune_coarse + model.t_repump + n * (model.t_tune_fine + model.t_collect_c));
    let t_widefield = model.t_tune_coarse + model.t_repump + n * (model.t_tune_fine + model.t_collect_w);
    Ok(Timing {
        t_confocal,
        t_widefield,
        ratio: t_confocal / t_widefield,
    })
}

/// `SF = N (gamma / Gamma) (t_c / t_w)`; `gamma` and `big_gamma` share units.
pub fn speedup_factor(n: f64, gamma: f64, big_gamma: f64, t_c: f64, t_w: f64) -> Result<f64> {
    for (name, value) in [
        ("N", n),
        ("gamma", gamma),
        ("Gamma", big_gamma),
        ("t_c", t_c),
        ("t_w", t_w),
    ] {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::Range { name, value });
        }
    }
    Ok(n * (gamma / big_gamma) * (t_c / t_w))
}

/// Hartigan's dip statistic of a sample (the maximum distance between the
/// empirical CDF and the closest unimodal CDF), following the classic
/// GCM/LCM algorithm. Returns 0 for fewer than two distinct values.
pub fn dip_statistic(samples: &[f64]) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    dip_sorted(&x)
}

fn dip_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 || xs[n - 1] == xs[0] {
        return 0.0;
    }
    // 1-based indexing as in the reference algorithm.
    let x = |i: usize| xs[i - 1];
    let mut mn = vec![0usize; n + 1];
    let mut mj = vec![0usize; n + 1];
    mn[1] = 1;
    for j in 2..=n {
        mn[j] = j - 1;
        loop {
            let mnj = mn[j];
            let mnmnj = mn[mnj];
            if mnj == 1 || (x(j) - x(mnj)) * ((mnj - mnmnj) as f64) < (x(mnj) - x(mnmnj)) * ((j - mnj) as f64) {
                break;
            }
            mn[j] = mnmnj;
        }
    }
    mj[n] = n;
    for k in (1..n).rev() {
        mj[k] = k + 1;
        loop {
            let mjk = mj[k];
            let mjmjk = mj[mjk];
            if mjk == n || (x(k) - x(mjk)) * (mjk as f64 - mjmjk as f64) < (x(mjk) - x(mjmjk)) * (k as f64 - mjk as f64) {
                break;
            }
            mj[k] = mjmjk;
        }
    }

    let mut gcm = vec![0usize; n + 2];
    let mut lcm = vec![0usize; n + 2];
    let (mut low, mut high) = (1usize, n);
    let mut dip = 0.0f64;
    loop {
        gcm[1] = high;
        let mut i = 1;
        while gcm[i] > low {
            gcm[i + 1] = mn[gcm[i]];
            i += 1;
        }
        let l_gcm = i;
        let mut ig = l_gcm;
        let mut ix = ig - 1;

        lcm[1] = low;
        let mut i = 1;
        while lcm[i] < high {
            lcm[i + 1] = mj[lcm[i]];
            i += 1;
        }
        let l_lcm = i;
        let mut ih = l_lcm;
        let mut iv = 2;

        let mut d = 0.0f64;
        if l_gcm != 2 || l_lcm != 2 {
            loop {
                let gcmix = gcm[ix];
                let lcmiv = lcm[iv];
                if gcmix > lcmiv {
                    let gcmi1 = gcm[ix + 1];
                    let dx = (lcmiv as f64 - gcmi1 as f64 + 1.0)
                        - (x(lcmiv) - x(gcmi1)) * (gcmix as f64 - gcmi1 as f64) / (x(gcmix) - x(gcmi1));
                    iv += 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv - 1;
                    }
                } else {
                    let lcmiv1 = lcm[iv - 1];
                    let dx = (x(gcmix) - x(lcmiv1)) * (lcmiv as f64 - lcmiv1 as f64) / (x(lcmiv) - x(lcmiv1))
                        - (gcmix as f64 - lcmiv1 as f64 - 1.0);
                    ix -= 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv;
                    }
                }
                if ix < 1 {
                    ix = 1;
                }
                if iv > l_lcm {
                    iv = l_lcm;
                }
                if gcm[ix] == lcm[iv] {
                    break;
                }
            }
        }
        if d < dip {
            break;
        }

        let mut dip_l = 0.0f64;
        for j in ig..l_gcm {
            let mut max_t = 1.0f64;
            let (jb, je) = (gcm[j + 1], gcm[j]);
            if je - jb > 1 && x(je) != x(jb) {
                let c = (je - jb) as f64 / (x(je) - x(jb));
                for jj in jb..=je {
                    let t = (jj - jb + 1) as f64 - (x(jj) - x(jb)) * c;
                    max_t = max_t.max(t);
                }
            }
            dip_l = dip_l.max(max_t);
        }
        let mut dip_u = 0.0f64;
        for j in ih..l_lcm {
            let mut max_t = 1.0f64;
            let (jb, je) = (lcm[j], lcm[j + 1]);
            if je - jb > 1 && x(je) != x(jb) {
                let c = (je - jb) as f64 / (x(je) - x(jb));
                for jj in jb..=je {
                    let t = (x(jj) - x(jb)) * c - (jj as f64 - jb as f64 - 1.0);
                    max_t = max_t.max(t);
                }
            }
            dip_u = dip_u.max(max_t);
        }
        dip = dip.max(dip_u.max(dip_l));

        if low == gcm[ig] && high == lcm[ih] {
            break;
        }
        low = gcm[ig];
        high = lcm[ih];
    }
    dip / (2 * n) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipTest {
    pub dip: f64,
    /// Fraction of uniform reference samples of the same size with a dip at
    /// least as large.
    pub p_value: f64,
    pub n_boot: usize,
}

/// Dip statistic with a Monte-Carlo p-value against the uniform distribution.
pub fn dip_test(samples: &[f64], n_boot: usize, seed: u64) -> Result<DipTest> {
    if samples.len() < 4 {
        return Err(Error::EmptyInput("dip test needs at least 4 samples"));
    }
    if n_boot == 0 {
        return Err(Error::Contract("dip test needs at least one reference sample".into()));
    }
    let dip = dip_statistic(samples);
    let n = samples.len();
    let exceed: usize = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            u.sort_by(f64::total_cmp);
            (dip_sorted(&u) >= dip) as usize
        })
        .sum();
    Ok(DipTest {
        dip,
        p_value: exceed as f64 / n_boot as f64,
        n_boot,
    })
}

/// Stats report for a peak catalog: population fit of center frequencies,
/// linewidth bins and the speed-up estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatsReport {
    pub n_peaks: usize,
    /// Population centers are MHz offsets from this frequency.
    pub reference_thz: f64,
    pub kde_bandwidth_mhz: f64,
    pub populations: Vec<GaussianComponent>,
    pub linewidth_bins: Vec<LinewidthBin>,
    pub speedup_factor: Option<f64>,
}

/// Builds a [`StatsReport`]. Populations are left empty when there are too
/// few peaks for a `k`-component fit.
pub fn stats_report(
    peaks: &[PeakFit],
    bandwidth_mhz: f64,
    k: usize,
    bin_width_ghz: f64,
    min_count: usize,
    speedup_factor: Option<f64>,
) -> Result<StatsReport> {
    if peaks.is_empty() {
        return Err(Error::EmptyInput("stats report needs at least one peak"));
    }
    let reference_thz = (peaks.iter().map(|p| p.center_thz).sum::<f64>() / peaks.len() as f64 * 1e3).floor() / 1e3;
    let offsets: Vec<f64> = peaks.iter().map(|p| (p.center_thz - reference_thz) * 1e6).collect();
    let density = kde(&offsets, bandwidth_mhz, &kde_grid(&offsets, bandwidth_mhz, 10))?;
    let populations = match fit_gaussians(&density, k) {
        Ok(c) => c,
        Err(Error::EmptyInput(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    Ok(StatsReport {
        n_peaks: peaks.len(),
        reference_thz,
        kde_bandwidth_mhz: bandwidth_mhz,
        populations,
        linewidth_bins: binned_linewidths(peaks, bin_width_ghz, min_count)?,
        speedup_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn brute_kde(samples: &[f64], h: f64, x: f64) -> f64 {
        let mut acc = 0.0;
        for &s in samples {
            acc += (-(x - s) * (x - s) / (2.0 * h * h)).exp();
        }
        acc / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn single_sample_kernel() {
        let k = kde(&[3.0], 0.5, &[3.0, 3.5]).unwrap();
        assert!((k.density[0] - 1.0 / (0.5 * (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-15);
        assert!(kde(&[], 1.0, &[0.0]).is_err());
        assert!(kde(&[1.0], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn symmetric_pair() {
        let grid: Vec<f64> = (-50..=50).map(|i| 2.0 + i as f64 * 0.1).collect();
        let k = kde(&[1.0, 3.0], 0.7, &grid).unwrap();
        for i in 0..grid.len() {
            assert!((k.density[i] - k.density[grid.len() - 1 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_and_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let s: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
            let h = rng.random_range(0.1..1.0);
            let grid = kde_grid(&s, h, 8);
            let k = kde(&s, h, &grid).unwrap();
            for (x, d) in grid.iter().zip(&k.density) {
                assert!((brute_kde(&s, h, *x) - d).abs() < 1e-12);
            }
            assert!((k.integral() - 1.0).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn translation_equivariant(s in prop::collection::vec(-10.0f64..10.0, 1..20), c in -5.0f64..5.0) {
            let grid: Vec<f64> = (0..40).map(|i| -12.0 + i as f64 * 0.6).collect();
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let grid2: Vec<f64> = grid.iter().map(|v| v + c).collect();
            let a = kde(&s, 0.8, &grid).unwrap();
            let b = kde(&shifted, 0.8, &grid2).unwrap();
            for (p, q) in a.density.iter().zip(&b.density) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn speedup_is_linear(n in 1.0f64..1e5, g in 1.0f64..1e3, big in 1.0f64..1e6, k in 0.1f64..10.0) {
            let base = speedup_factor(n, g, big, 1.0, 1.0).unwrap();
            prop_assert!((speedup_factor(k * n, g, big, 1.0, 1.0).unwrap() - k * base).abs() <= 1e-9 * k * base);
            prop_assert!((speedup_factor(n, k * g, big, 1.0, 1.0).unwrap() - k * base).abs() <= 1e-9 * k * base);
            prop_assert!((speedup_factor(n, g, k * big, 1.0, 1.0).unwrap() - base / k).abs() <= 1e-9 * base / k);
        }
    }

    fn draw(rng: &mut ChaCha8Rng, mu: f64, sigma: f64, n: usize) -> Vec<f64> {
        let d = Normal::new(mu, sigma).unwrap();
        (0..n).map(|_| d.sample(rng)).collect()
    }

    #[test]
    fn one_gaussian_population() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = draw(&mut rng, 1000.0, 50.0, 2000);
        let grid = kde_grid(&s, 10.0, 4);
        let fit = fit_gaussians(&kde(&s, 10.0, &grid).unwrap(), 1).unwrap();
        assert!((fit[0].center - 1000.0).abs() < 5.0, "{fit:?}");
        assert!((fit[0].sigma / 50.0 - 1.0).abs() < 0.1);
        assert!((fit[0].weight - 1.0).abs() < 0.05);
    }

    #[test]
    fn two_populations_in_thz() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut s = draw(&mut rng, 406.8141, 59e-6, 600);
        s.extend(draw(&mut rng, 406.8136, 48e-6, 600));
        let h = 10e-6;
        let fit = fit_gaussians(&kde(&s, h, &kde_grid(&s, h, 4)).unwrap(), 2).unwrap();
        assert!(((fit[0].center - 406.8136) * 1e6).abs() < 10.0, "{fit:?}");
        assert!(((fit[1].center - 406.8141) * 1e6).abs() < 10.0);
        assert!((fit[0].sigma / 48e-6 - 1.0).abs() < 0.15);
        assert!((fit[1].sigma / 59e-6 - 1.0).abs() < 0.15);
    }

    #[test]
    fn two_component_fit_on_unimodal_data_degenerates() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = draw(&mut rng, 0.0, 1.0, 3000);
        let fit = fit_gaussians(&kde(&s, 0.2, &kde_grid(&s, 0.2, 4)).unwrap(), 2).unwrap();
        let duplicate = (fit[0].center - fit[1].center).abs() < 0.5;
        let vanishing = fit.iter().any(|c| c.weight < 0.1);
        assert!(duplicate || vanishing, "{fit:?}");
        assert!(fit_gaussians(&kde(&s[..15], 0.2, &[0.0, 0.1, 0.2]).unwrap(), 2).is_err());
        assert!(fit_gaussians(&kde(&s, 0.2, &[0.0]).unwrap(), 3).is_err());
    }

    #[test]
    fn fit_error_shrinks_with_sample_size() {
        let mut errs = Vec::new();
        for &n in &[500usize, 2000, 8000] {
            let mut acc = 0.0;
            for rep in 0..8 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + rep);
                let s = draw(&mut rng, 0.0, 1.0, n);
                let fit = fit_gaussians(&kde(&s, 0.1, &kde_grid(&s, 0.1, 4)).unwrap(), 1).unwrap();
                acc += fit[0].center.powi(2);
            }
            errs.push((acc / 8.0).sqrt());
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
        // 1/sqrt(n) predicts a factor 4 between n = 500 and n = 8000.
        assert!(errs[2] < 0.5 * errs[0], "{errs:?}");
    }

    fn peak(center_thz: f64, fwhm: f64) -> PeakFit {
        PeakFit {
            center_thz,
            fwhm_mhz: fwhm,
            eta: 1.0,
            amplitude: 1.0,
            baseline: 0.0,
            residual_norm: 0.0,
        }
    }

    #[test]
    fn linewidth_bins() {
        let same: Vec<PeakFit> = (0..12).map(|i| peak(406.001 + i as f64 * 1e-4, 200.0)).collect();
        let b = binned_linewidths(&same, 20.0, 10).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!((b[0].mean_fwhm_mhz, b[0].sem_mhz, b[0].count, b[0].kept), (200.0, 0.0, 12, true));
        let nine: Vec<PeakFit> = same[..9].to_vec();
        assert!(!binned_linewidths(&nine, 20.0, 10).unwrap()[0].kept);

        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let widths = Normal::new(250.0, 30.0).unwrap();
        let cat: Vec<PeakFit> = (0..2000)
            .map(|_| peak(405.0 + rng.random_range(0.0..0.2), widths.sample(&mut rng)))
            .collect();
        let bins = binned_linewidths(&cat, 20.0, 10).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 2000);
        let kept: Vec<&LinewidthBin> = bins.iter().filter(|b| b.kept).collect();
        let grand = robust::mean(&kept.iter().map(|b| b.mean_fwhm_mhz).collect::<Vec<_>>());
        for b in kept {
            assert!((b.mean_fwhm_mhz - grand).abs() < 3.0 * b.sem_mhz * 2f64.sqrt(), "{b:?}");
        }
        assert!(binned_linewidths(&cat, 0.0, 10).is_err());
    }

    #[test]
    fn timing_examples() {
        let base = TimingModel {
            t_move: 0.0,
            t_tune_coarse: 2.0,
            t_repump: 0.5,
            t_tune_fine: 0.1,
            t_collect_c: 1.0,
            t_collect_w: 1.0,
            m: 50,
            n: 1_000_000,
        };
        let t = timing(&base).unwrap();
        assert!((t.ratio / 50.0 - 1.0).abs() < 1e-3);
        let one = timing(&TimingModel { m: 1, n: 10, ..base.clone() }).unwrap();
        assert!((one.ratio - 1.0).abs() < 1e-15);
        let moving = timing(&TimingModel {
            m: 1,
            n: 10,
            t_move: 3.0,
            ..base.clone()
        })
        .unwrap();
        assert!(moving.ratio > 1.0);

        let spreadsheet = TimingModel {
            t_move: 1.5,
            t_tune_coarse: 4.0,
            t_repump: 0.25,
            t_tune_fine: 0.05,
            t_collect_c: 0.8,
            t_collect_w: 1.2,
            m: 7,
            n: 30,
        };
        let t = timing(&spreadsheet).unwrap();
        // 7 * (1.5 + 4 + 0.25 + 30 * 0.85) = 7 * 31.25; 4 + 0.25 + 30 * 1.25 = 41.75
        assert!((t.t_confocal - 218.75).abs() < 1e-12);
        assert!((t.t_widefield - 41.75).abs() < 1e-12);
        assert!(timing(&TimingModel { m: 0, ..base }).is_err());
    }

    #[test]
    fn speedup_examples() {
        assert_eq!(speedup_factor(1.0, 5.0, 5.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(speedup_factor(784.0, 1.0, 1.0, 1.0, 1.0).unwrap(), 784.0);
        let gamma = 1.0 / (2.0 * std::f64::consts::PI * 1.7e-9) / 1e6;
        let sf = speedup_factor(40_186.0, gamma, 1.12e6, 1.0, 1.0).unwrap();
        assert!((sf - 3.36).abs() < 0.01, "{sf}");
        assert!(speedup_factor(0.0, 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn dip_matches_reference_values() {
        // Reference values from the R-derived diptest implementation.
        let even: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        assert!((dip_statistic(&even) - 0.05).abs() < 1e-12);
        let mut twin: Vec<f64> = (0..20).map(|i| i as f64 * 0.01 / 19.0).collect();
        twin.extend((0..20).map(|i| 1.0 + i as f64 * 0.01 / 19.0));
        assert!((dip_statistic(&twin) - 0.2475).abs() < 1e-12);
        let mixed = [
            0.353, 1.02, -0.55, 2.31, 0.1, 0.12, -1.7, 0.9, 0.44, 3.0, 2.9, 2.8, 3.1, -0.2,
        ];
        assert!((dip_statistic(&mixed) - 0.117_101_648_351_648_34).abs() < 1e-12);
        let normal = [
            -0.8019, -1.3244, -0.2484, 0.4204, 1.136, 0.1097, -0.5526, -0.7848, 0.7487, 1.6348, 0.2728, -1.2333,
            -0.9583, 1.6, 0.2029, -1.7321, -0.0837, -1.1632, -0.6293, -0.488, -0.7133, 0.5534, -0.0631, -0.5894,
            0.4096, 0.8299, -1.643, -0.2567, -0.9807, -0.1732, -1.2894, 0.0207, -0.0379, -0.3043, -1.0479, -0.3962,
            -1.0913, -1.3552, 0.2248, -1.1093, 1.1703, 0.7166, -1.9978, 0.2721, -1.1017, 0.0331, 0.0436, -1.9884,
            -0.2334, -0.2558, 0.962, -1.1814, 0.738, -1.099, -0.3313, -0.8405, 1.4487, 0.5682, 2.4317, 0.6419,
        ];
        assert!((dip_statistic(&normal) - 0.037_266_822_931_926_964).abs() < 1e-12);
        assert_eq!(dip_statistic(&[1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn dip_test_separates_bimodal_from_unimodal() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let uni = draw(&mut rng, 0.0, 1.0, 200);
        let mut bi = draw(&mut rng, -3.0, 1.0, 100);
        bi.extend(draw(&mut rng, 3.0, 1.0, 100));
        let pu = dip_test(&uni, 500, 1).unwrap();
        let pb = dip_test(&bi, 500, 1).unwrap();
        assert!(pb.p_value < 0.01, "{pb:?}");
        assert!(pu.p_value > 0.05, "{pu:?}");
        assert_eq!(dip_test(&bi, 500, 1).unwrap(), pb);
    }

    #[test]
    fn report_from_two_populations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Normal::new(406.8136, 48e-6).unwrap();
        let b = Normal::new(406.8141, 59e-6).unwrap();
        let peaks: Vec<PeakFit> = (0..2000)
            .map(|i| peak(if i % 2 == 0 { a.sample(&mut rng) } else { b.sample(&mut rng) }, 150.0))
            .collect();
        let r = stats_report(&peaks, 10.0, 2, 20.0, 10, Some(3.36)).unwrap();
        assert_eq!(r.n_peaks, 2000);
        assert_eq!(r.reference_thz, 406.813);
        assert_eq!(r.populations.len(), 2);
        assert!((r.populations[0].center - 600.0).abs() < 10.0, "{:?}", r.populations);
        assert!((r.populations[1].center - 1100.0).abs() < 10.0, "{:?}", r.populations);
        assert_eq!(r.linewidth_bins.iter().map(|b| b.count).sum::<usize>(), 2000);
        let few = stats_report(&peaks[..5], 10.0, 2, 20.0, 10, None).unwrap();
        assert!(few.populations.is_empty());
        assert!(stats_report(&[], 10.0, 2, 20.0, 10, None).is_err());
    }
}

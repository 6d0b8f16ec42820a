//! Order statistics shared by the thresholding stages.

/// Median of `values`; the slice is reordered. Even lengths average the two
/// middle elements. Returns `NaN` for an empty slice.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

pub fn median(values: &[f64]) -> f64 {
    median_in_place(&mut values.to_vec())
}

/// `(median, MAD)` where MAD is the unscaled median absolute deviation.
pub fn median_mad(values: &[f64]) -> (f64, f64) {
    let mut buf = values.to_vec();
    let med = median_in_place(&mut buf);
    for v in buf.iter_mut() {
        *v = (*v - med).abs();
    }
    (med, median_in_place(&mut buf))
}

/// Scale factor making the MAD a consistent estimator of a Gaussian sigma.
pub const MAD_TO_SIGMA: f64 = 1.482_602_218_505_602;

/// `(median, 1.4826 * MAD)`: location and sigma-consistent robust scale.
/// Detection thresholds written as "k MAD" use this scaled MAD.
pub fn median_sigma(values: &[f64]) -> (f64, f64) {
    let (m, mad) = median_mad(values);
    (m, mad * MAD_TO_SIGMA)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn mad_of_symmetric_set() {
        let (m, mad) = median_mad(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert_eq!(mad, 1.0);
    }
}

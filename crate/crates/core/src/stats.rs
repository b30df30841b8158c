//! Estimators and tests used by the sampler diagnostics and experiments.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r2,
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Integrated autocorrelation time with Sokal's self-consistent window (`c = 5`).
///
/// Returns `None` for a constant series.
pub fn iact(x: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 4 {
        return None;
    }
    let m = mean(x);
    let c0 = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return None;
    }
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let mut c = 0.0;
        for i in 0..n - lag {
            c += (x[i] - m) * (x[i + lag] - m);
        }
        tau += 2.0 * c / (n as f64 * c0);
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    Some(tau.max(1.0))
}

/// Standard error of the mean from non-overlapping batch means (`~sqrt(n)` batches).
pub fn batch_means_se(x: &[f64]) -> f64 {
    let n = x.len();
    let batches = ((n as f64).sqrt().floor() as usize).clamp(1, n);
    let size = n / batches;
    if batches < 2 || size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| mean(&x[b * size..(b + 1) * size]))
        .collect();
    (variance(&means) / batches as f64).sqrt()
}

/// Summary of a scalar time series from a chain.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SeriesEstimate {
    pub mean: f64,
    /// Standard error; the larger of batch means and the IACT-corrected value.
    pub se: f64,
    pub ess: f64,
    pub iact: f64,
    /// Set when the series is constant and no autocorrelation can be estimated.
    pub degenerate: bool,
}

pub fn series_estimate(x: &[f64]) -> SeriesEstimate {
    let m = mean(x);
    match iact(x) {
        None => SeriesEstimate {
            mean: m,
            se: 0.0,
            ess: 0.0,
            iact: f64::NAN,
            degenerate: true,
        },
        Some(tau) => {
            let ess = x.len() as f64 / tau;
            let naive = (variance(x) / ess).sqrt();
            let bm = batch_means_se(x);
            let se = if bm.is_finite() { naive.max(bm) } else { naive };
            SeriesEstimate {
                mean: m,
                se,
                ess,
                iact: tau,
                degenerate: false,
            }
        }
    }
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a: Vec<f64> = a.to_vec();
    let mut b: Vec<f64> = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n && j < m {
        let v = a[i].min(b[j]);
        while i < n && a[i] <= v {
            i += 1;
        }
        while j < m && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    (d, kolmogorov_q(lambda))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Pearson chi-square flatness test of counts against equal expected frequencies.
pub fn chi_square_flat(counts: &[f64]) -> f64 {
    let k = counts.len();
    if k < 2 {
        return 1.0;
    }
    let total: f64 = counts.iter().sum();
    let e = total / k as f64;
    if e <= 0.0 {
        return 1.0;
    }
    let stat: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
    let dist = ChiSquared::new((k - 1) as f64).expect("dof");
    1.0 - dist.cdf(stat)
}

/// Standard normal cdf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    #[test]
    fn fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let f = linear_fit(&x, &y);
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iact_of_white_noise_is_near_one() {
        let mut r = RandomSource::new(1, 0);
        let x: Vec<f64> = (0..20_000).map(|_| r.normal()).collect();
        let t = iact(&x).unwrap();
        assert!(t < 1.2, "tau = {t}");
    }

    #[test]
    fn iact_of_ar1_matches_theory() {
        // AR(1) with coefficient a has tau = (1+a)/(1-a).
        let a = 0.8;
        let mut r = RandomSource::new(2, 0);
        let mut v = 0.0;
        let x: Vec<f64> = (0..200_000)
            .map(|_| {
                v = a * v + r.normal();
                v
            })
            .collect();
        let t = iact(&x).unwrap();
        assert!((t - 9.0).abs() < 1.0, "tau = {t}");
    }

    #[test]
    fn constant_series_is_degenerate() {
        let e = series_estimate(&[1.0; 50]);
        assert!(e.degenerate);
        assert_eq!(e.se, 0.0);
        assert_eq!(e.mean, 1.0);
    }

    #[test]
    fn ks_same_law_is_not_rejected_and_shift_is() {
        let mut r = RandomSource::new(3, 0);
        let a: Vec<f64> = (0..2000).map(|_| r.normal()).collect();
        let b: Vec<f64> = (0..2000).map(|_| r.normal()).collect();
        let c: Vec<f64> = (0..2000).map(|_| r.normal() + 0.3).collect();
        assert!(ks_two_sample(&a, &b).1 > 0.001);
        assert!(ks_two_sample(&a, &c).1 < 1e-6);
    }

    #[test]
    fn kolmogorov_tail_reference_values() {
        // Q(1.36) ≈ 0.049, Q(1.63) ≈ 0.0098.
        assert!((kolmogorov_q(1.36) - 0.0495).abs() < 1e-3);
        assert!((kolmogorov_q(1.63) - 0.0098).abs() < 5e-4);
    }

    #[test]
    fn flat_counts_pass_chi_square() {
        assert!(chi_square_flat(&[100.0, 100.0, 100.0]) > 0.99);
        assert!(chi_square_flat(&[10.0, 100.0, 190.0]) < 1e-6);
    }
}

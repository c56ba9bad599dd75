//! Small statistical toolkit shared by the estimators and verifiers.

use statrs::function::erf::erfc_inv;

use crate::rng::{Stream, Tag};

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn phi_inv(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Unbiased sample variance with its jackknife standard error.
///
/// Leave-one-out variances come from running sums in `O(n)`.
pub fn variance_jackknife(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n >= 3, "jackknife needs at least three observations");
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let centered: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let ss: f64 = centered.iter().map(|c| c * c).sum();
    let full = ss / (nf - 1.0);
    // removing x_i: SS_{-i} = SS - n/(n-1) c_i^2
    let loo: Vec<f64> = centered
        .iter()
        .map(|c| (ss - nf / (nf - 1.0) * c * c) / (nf - 2.0))
        .collect();
    let loo_mean = loo.iter().sum::<f64>() / nf;
    let jk = ((nf - 1.0) / nf * loo.iter().map(|v| (v - loo_mean).powi(2)).sum::<f64>()).sqrt();
    (full, jk)
}

/// Median of a slice (average of the two middle values for even length).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One-sample Kolmogorov distance `sup_x |F_m(x) - F(x)|`.
pub fn ks_distance<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < v.len() {
        // ties: jump over the whole run so the step height is counted once
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        let f = cdf(v[i]);
        worst = worst.max((f - i as f64 / m).abs()).max(((j + 1) as f64 / m - f).abs());
        i = j + 1;
    }
    worst
}

/// Dvoretzky–Kiefer–Wolfowitz half-width at level `alpha`: `sqrt(ln(2/alpha) / (2m))`.
pub fn dkw_bound(m: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * m as f64)).sqrt()
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Log–log slope of `y` against `x` (all entries must be positive).
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    ols(&lx, &ly).0
}

/// Percentile bootstrap interval of a statistic of resampled row indices.
///
/// `stat` receives the resampled index vector; the returned pair is the
/// `(level/2, 1 - level/2)` quantiles over `resamples` draws, keyed by `seed`.
pub fn bootstrap_interval<F>(n: usize, resamples: usize, level: f64, seed: u64, stat: F) -> (f64, f64)
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    use rayon::prelude::*;
    let mut values: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let stream = Stream::new(seed, Tag::Bootstrap, b as u64);
            let idx: Vec<usize> = (0..n).map(|i| stream.below(i as u64, n as u64) as usize).collect();
            stat(&idx)
        })
        .collect();
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (quantile(&values, tail), quantile(&values, 1.0 - tail))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_and_quantile() {
        assert!((phi(0.0) - 0.5).abs() < 1e-15);
        assert!((phi(1.0) - 0.841_344_746_068_543).abs() < 1e-12, "{}", phi(1.0));
        assert!((phi(-1.959_963_984_540_054) - 0.025).abs() < 1e-12);
        for &p in &[1e-6, 0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((phi(phi_inv(p)) - p).abs() < 1e-12 * p.max(1e-3) / 1e-3);
        }
    }

    #[test]
    fn jackknife_matches_brute_force() {
        let xs: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let (v, se) = variance_jackknife(&xs);
        assert!((v - sample_variance(&xs)).abs() < 1e-12);
        let n = xs.len() as f64;
        let loo: Vec<f64> = (0..xs.len())
            .map(|i| {
                let rest: Vec<f64> = xs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| *x).collect();
                sample_variance(&rest)
            })
            .collect();
        let m = loo.iter().sum::<f64>() / n;
        let brute = ((n - 1.0) / n * loo.iter().map(|x| (x - m).powi(2)).sum::<f64>()).sqrt();
        assert!((se - brute).abs() < 1e-12);
    }

    #[test]
    fn ks_of_two_point_law() {
        // Rademacher against Phi: sup gap is Phi(1) - 1/2
        let sample: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let d = ks_distance(&sample, phi);
        assert!((d - (phi(1.0) - 0.5)).abs() < 1e-12);
        assert!((d - 0.3413).abs() < 1e-4);
    }

    #[test]
    fn ks_single_point() {
        assert!((ks_distance(&[0.0], phi) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dkw_value() {
        assert!((dkw_bound(10_000, 0.01) - (200f64.ln() / 20_000.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ols_recovers_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        let (s, c) = ols(&x, &y);
        assert!((s - 2.5).abs() < 1e-12 && (c + 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_and_quantile() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let stat = |idx: &[usize]| idx.iter().map(|&i| xs[i]).sum::<f64>() / idx.len() as f64;
        let a = bootstrap_interval(xs.len(), 200, 0.9, 5, stat);
        let b = bootstrap_interval(xs.len(), 200, 0.9, 5, stat);
        assert_eq!(a, b);
        assert!(a.0 < 24.5 && a.1 > 24.5);
    }
}

//! Small statistical helpers for Monte Carlo summaries and tests.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Compensated (Neumaier) sum.
pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn mean(xs: &[f64]) -> f64 {
    neumaier_sum(xs.iter().copied()) / xs.len() as f64
}

/// Sample variance with divisor `n - 1`.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    neumaier_sum(xs.iter().map(|x| (x - m) * (x - m))) / (xs.len() as f64 - 1.0)
}

pub fn sd(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Standard error of the mean.
pub fn se_mean(xs: &[f64]) -> f64 {
    sd(xs) / (xs.len() as f64).sqrt()
}

fn t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { 1.0 } else { 0.0 };
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Sign of the estimated effect (first minus second).
    pub direction: f64,
}

/// Two-sided paired t-test of `E[a - b] = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> TestResult {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let t = m / se_mean(&d);
    TestResult { statistic: t, p_value: t_two_sided(t, d.len() as f64 - 1.0), direction: m.signum() }
}

/// Pitman–Morgan test of equal variances for paired samples: the
/// correlation of `a + b` and `a - b` is zero exactly when the variances
/// agree.
pub fn pitman_morgan_test(a: &[f64], b: &[f64]) -> TestResult {
    let s: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let r = correlation(&s, &d);
    let n = a.len() as f64;
    let t = r * ((n - 2.0) / (1.0 - r * r)).sqrt();
    TestResult { statistic: t, p_value: t_two_sided(t, n - 2.0), direction: r.signum() }
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let sab = neumaier_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)));
    let saa = neumaier_sum(a.iter().map(|x| (x - ma).powi(2)));
    let sbb = neumaier_sum(b.iter().map(|y| (y - mb).powi(2)));
    sab / (saa * sbb).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub se: f64,
    /// Two-sided p-value for zero slope.
    pub p_value: f64,
    /// One-sided p-value against a positive slope.
    pub p_growth: f64,
}

/// Least-squares line through `(x, y)` with a t-test on the slope.
pub fn ols_slope(x: &[f64], y: &[f64]) -> SlopeFit {
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let sxx = neumaier_sum(x.iter().map(|v| (v - mx).powi(2)));
    let sxy = neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = neumaier_sum(x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)));
    let se = (rss / (n - 2.0) / sxx).sqrt();
    let t = slope / se;
    let dist = StudentsT::new(0.0, 1.0, n - 2.0).expect("at least three points");
    SlopeFit { slope, intercept, se, p_value: t_two_sided(t, n - 2.0), p_growth: 1.0 - dist.cdf(t) }
}

/// Kolmogorov–Smirnov distance between the empirical law of `xs` and `cdf`.
pub fn ks_distance(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Equal-width histogram over `[lo, hi]`; returns `(left edge, right edge, count)`.
pub fn histogram(xs: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in xs {
        if x.is_finite() && w > 0.0 {
            let b = (((x - lo) / w).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        } else if w == 0.0 {
            counts[0] += 1;
        }
    }
    (0..bins).map(|b| (lo + b as f64 * w, lo + (b + 1) as f64 * w, counts[b])).collect()
}

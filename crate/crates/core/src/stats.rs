//! Small statistical toolkit shared by the validators and experiments.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use libm::erfc;
use statrs::function::erf::erfc_inv;

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.575_829_303_548_901;

/// Standard normal quantile, accurate in both tails.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p <= 0.5 {
        lower_tail_quantile(p)
    } else {
        -lower_tail_quantile(1.0 - p)
    }
}

/// Quantile for `p ≤ 1/2`, polished by one Halley step against `erfc`.
fn lower_tail_quantile(p: f64) -> f64 {
    let x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if density == 0.0 {
        return x;
    }
    let r = (normal_cdf(x) - p) / density;
    x - r / (1.0 + 0.5 * x * r)
}

/// Standard normal quantile given the upper-tail probability `q = 1 - p`.
pub fn normal_upper_quantile(q: f64) -> f64 {
    -normal_quantile(q)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (n - 1) as f64
}

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

/// Kolmogorov–Smirnov distance between a sample and `N(0, sd²)`.
pub fn ks_distance_normal(xs: &[f64], sd: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let f = normal_cdf(x / sd);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic Kolmogorov p-value for a one-sample KS distance.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut sum = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Result of a chi-square test.
#[derive(Debug, Clone, Copy)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Two-sample chi-square homogeneity test on integer-valued samples.
///
/// Categories are pooled from the tails until every pooled bin holds at least
/// `min_expected` expected observations in both samples.
pub fn chi_square_two_sample(a: &[u64], b: &[u64], min_expected: f64) -> ChiSquare {
    let max = a.iter().chain(b).copied().max().unwrap_or(0) as usize;
    let mut ca = vec![0f64; max + 1];
    let mut cb = vec![0f64; max + 1];
    for &x in a {
        ca[x as usize] += 1.0;
    }
    for &x in b {
        cb[x as usize] += 1.0;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let total = na + nb;

    // Greedy left-to-right pooling.
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut acc_a, mut acc_b) = (0.0, 0.0);
    for i in 0..=max {
        acc_a += ca[i];
        acc_b += cb[i];
        let pooled = acc_a + acc_b;
        if pooled * na.min(nb) / total >= min_expected {
            bins.push((acc_a, acc_b));
            acc_a = 0.0;
            acc_b = 0.0;
        }
    }
    if acc_a + acc_b > 0.0 {
        if let Some(last) = bins.last_mut() {
            last.0 += acc_a;
            last.1 += acc_b;
        } else {
            bins.push((acc_a, acc_b));
        }
    }
    let mut stat = 0.0;
    for &(oa, ob) in &bins {
        let pooled = oa + ob;
        let ea = pooled * na / total;
        let eb = pooled * nb / total;
        stat += (oa - ea).powi(2) / ea + (ob - eb).powi(2) / eb;
    }
    let dof = bins.len().saturating_sub(1).max(1);
    let p_value = ChiSquared::new(dof as f64)
        .map(|c| c.sf(stat))
        .unwrap_or(f64::NAN);
    ChiSquare {
        statistic: stat,
        dof,
        p_value,
    }
}

/// Upper limit of the Wilson score interval for `k` successes out of `n`.
pub fn wilson_upper(k: usize, n: usize, z: f64) -> f64 {
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let centre = p + z2 / (2.0 * n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre + half) / (1.0 + z2 / n)).min(1.0)
}

/// Exact (Garwood) two-sided confidence interval for a Poisson mean given `k` counts.
pub fn poisson_mean_interval(k: u64, level: f64) -> (f64, f64) {
    let alpha = 1.0 - level;
    let lo = if k == 0 {
        0.0
    } else {
        0.5 * ChiSquared::new(2.0 * k as f64)
            .unwrap()
            .inverse_cdf(alpha / 2.0)
    };
    let hi = 0.5
        * ChiSquared::new(2.0 * (k as f64 + 1.0))
            .unwrap()
            .inverse_cdf(1.0 - alpha / 2.0);
    (lo, hi)
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    LinearFit {
        intercept,
        slope,
        r_squared,
    }
}

//! Small numerical and statistical helpers shared by the modules.

use std::collections::HashMap;
use std::hash::Hash;

use statrs::function::erf;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal CDF, accurate in the lower tail.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal survival function `1 − Φ(x)`, accurate in the upper tail.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// `x` with `norm_sf(x) = p`, for `p` in `(0, 1)`: a series inverse polished by Newton steps
/// on the log of the survival function.
pub fn norm_isf(p: f64) -> f64 {
    let mut x = SQRT_2 * erf::erfc_inv(2.0 * p);
    let lp = p.ln();
    for _ in 0..3 {
        let s = norm_sf(x);
        if s <= 0.0 || !x.is_finite() {
            break;
        }
        let dens = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        // d/dx log sf = −φ(x)/sf(x)
        let step = (s.ln() - lp) / (dens / s);
        x += step;
        if step.abs() < 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// `log Σ exp(x_i)` arranged so that a dominant term of exactly zero keeps full relative
/// precision in the remainder.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut arg = usize::MAX;
    for (i, &x) in xs.iter().enumerate() {
        if x > max {
            max = x;
            arg = i;
        }
    }
    if arg == usize::MAX || max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let rest: f64 = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &x)| (x - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// Linear-interpolation sample quantile (the "type 7" rule) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantiles(data: &[f64], qs: &[f64]) -> Vec<f64> {
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    qs.iter().map(|&q| quantile_sorted(&sorted, q)).collect()
}

pub fn mean_var(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Empirical law from counts.
pub fn normalize_counts<K: Eq + Hash + Clone>(counts: &HashMap<K, u64>) -> HashMap<K, f64> {
    let total: u64 = counts.values().sum();
    counts
        .iter()
        .map(|(k, &c)| (k.clone(), c as f64 / total as f64))
        .collect()
}

/// Total variation distance between two laws on a discrete set.
pub fn total_variation<K: Eq + Hash>(p: &HashMap<K, f64>, q: &HashMap<K, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, &pk) in p {
        sum += (pk - q.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, &qk) in q {
        if !p.contains_key(k) {
            sum += qk;
        }
    }
    0.5 * sum
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Upper-tail probability of a chi-square variable with `dof` degrees of freedom.
pub fn chi_square_sf(stat: f64, dof: f64) -> f64 {
    statrs::function::gamma::gamma_ur(dof / 2.0, stat / 2.0)
}

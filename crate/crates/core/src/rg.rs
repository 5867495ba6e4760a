//! Renormalization-group flow of the periodic effective potentials.
//!
//! A level-`k` potential is stored through the Fourier coefficients of `e^{−v_k}`,
//! normalized by the zero mode and kept in log form: `log â_k(n) = log a_k(n) − log a_k(0)`.
//! The zero mode itself grows like a tower of powers, so only its logarithm and the
//! per-step normalizer are carried.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{ModelParams, Regime};
use crate::stats::{linear_fit, log_sum_exp};

/// Target bound on the first discarded normalized coefficient.
pub const TAU_TRUNC: f64 = 1e-30;
pub const N_MIN: usize = 8;
pub const N_MAX: usize = 512;
/// Hard cap on the number of levels in one flow.
pub const MAX_LEVELS: usize = 10_000;

const GRID: usize = 64;
const GRID_FINE: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub level: usize,
    /// `log â(n)` for `n = 0..=N`; entry 0 is exactly zero.
    pub log_half: Vec<f64>,
    pub log_a0: f64,
    /// `log` of the zero mode of the convolution that produced this level (0 at level 0).
    pub log_norm: f64,
    pub params: ModelParams,
}

impl CoefficientVector {
    pub fn truncation(&self) -> usize {
        self.log_half.len() - 1
    }

    pub fn ahat(&self, n: usize) -> f64 {
        self.log_half.get(n).map_or(0.0, |l| l.exp())
    }

    pub fn half(&self) -> Vec<f64> {
        self.log_half.iter().map(|l| l.exp()).collect()
    }

    /// `c = max_n â(n+1)/â(n)` over the stored coefficients.
    pub fn ratio_sup(&self) -> f64 {
        self.log_half
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
            .exp()
    }

    /// `v(z) = −log a(0) − log(1 + 2 Σ_{n≥1} â(n) cos 2πnz)`.
    pub fn potential(&self, z: f64) -> f64 {
        -self.log_a0 - FourierEval::new(self).ln_p(z)
    }
}

/// Discrete Gaussian initial data: `a_0(n) = √(2π/β) θ^{n²}`.
pub fn init_dg(params: &ModelParams, n_trunc: usize) -> Result<CoefficientVector> {
    if n_trunc < 4 {
        return Err(invalid("N", format!("truncation must be >= 4, got {n_trunc}")));
    }
    let l = params.neg_log_theta();
    Ok(CoefficientVector {
        level: 0,
        log_half: (0..=n_trunc).map(|n| -((n * n) as f64) * l).collect(),
        log_a0: 0.5 * (2.0 * PI / params.beta).ln(),
        log_norm: 0.0,
        params: *params,
    })
}

/// Initial data of `e^{κ cos 2πz}`, whose coefficients are the modified Bessel values `I_n(κ)`.
pub fn init_sine_gordon(params: &ModelParams, kappa: f64, n_trunc: usize) -> Result<CoefficientVector> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(invalid("kappa", format!("must be positive, got {kappa}")));
    }
    if n_trunc < 4 {
        return Err(invalid("N", format!("truncation must be >= 4, got {n_trunc}")));
    }
    let log_coef: Vec<f64> = (0..=n_trunc).map(|n| log_bessel_series(kappa, n)).collect();
    let log_a0 = log_coef[0];
    Ok(CoefficientVector {
        level: 0,
        log_half: log_coef.iter().map(|l| l - log_a0).collect(),
        log_a0,
        log_norm: 0.0,
        params: *params,
    })
}

/// `log Σ_ℓ (κ/2)^{2ℓ+n} / ((ℓ+n)! ℓ!)`, summed until terms drop below 1e−18 of the total.
fn log_bessel_series(kappa: f64, n: usize) -> f64 {
    let lh = (kappa / 2.0).ln();
    let log_fact_n: f64 = (1..=n).map(|i| (i as f64).ln()).sum();
    let mut t = n as f64 * lh - log_fact_n;
    let mut terms = vec![t];
    let mut best = t;
    let cut = 1e-18f64.ln();
    for l in 0.. {
        t += 2.0 * lh - ((l + n + 1) as f64).ln() - ((l + 1) as f64).ln();
        terms.push(t);
        best = best.max(t);
        let decreasing = (kappa / 2.0).powi(2) < ((l + n + 2) * (l + 2)) as f64;
        if decreasing && t < best + cut {
            break;
        }
    }
    log_sum_exp(&terms)
}

/// `log` of the discrete convolution of two symmetric log-vectors, returned for offsets
/// `0..=out_half` and mirrored. Inputs are centred: index `h` holds offset 0.
fn log_convolve_sym(x: &[f64], y: &[f64], out_half: usize) -> Vec<f64> {
    let hx = x.len() / 2;
    let hy = y.len() / 2;
    let mut half = Vec::with_capacity(out_half + 1);
    let mut buf = Vec::with_capacity(x.len());
    for m in 0..=out_half as isize {
        buf.clear();
        // offsets i in x, m − i in y
        let lo = (-(hx as isize)).max(m - hy as isize);
        let hi = (hx as isize).min(m + hy as isize);
        for i in lo..=hi {
            buf.push(x[(i + hx as isize) as usize] + y[(m - i + hy as isize) as usize]);
        }
        half.push(log_sum_exp(&buf));
    }
    let mut out = Vec::with_capacity(2 * out_half + 1);
    out.extend(half.iter().rev());
    out.extend(&half[1..]);
    out
}

/// Smallest `n` with `(b c)^n θ^{n²} < TAU_TRUNC`, clamped to `[N_MIN, N_MAX]` and to `cap`.
pub fn choose_truncation(b: usize, c: f64, neg_log_theta: f64, cap: usize) -> usize {
    let log_bc = (b as f64 * c).ln();
    let target = TAU_TRUNC.ln();
    let mut n = 1usize;
    while n < N_MAX && n as f64 * log_bc - (n * n) as f64 * neg_log_theta >= target {
        n += 1;
    }
    n.clamp(N_MIN, N_MAX).min(cap)
}

/// One renormalization step: `a'(n) = [a^{*b}](n) θ^{n²}`, renormalized at `n = 0`.
pub fn iterate(v: &CoefficientVector) -> Result<CoefficientVector> {
    let b = v.params.b;
    let n_in = v.truncation();
    let l = v.params.neg_log_theta();
    let n_out = choose_truncation(b, v.ratio_sup(), l, b * n_in);
    let sym: Vec<f64> = (0..=2 * n_in).map(|i| v.log_half[i.abs_diff(n_in)]).collect();
    let mut cur = sym.clone();
    for r in 1..b {
        // offsets beyond this cannot reach the retained output range
        let need = n_out + (b - 1 - r) * n_in;
        let reach = cur.len() / 2 + n_in;
        cur = log_convolve_sym(&cur, &sym, need.min(reach));
    }
    let center = cur.len() / 2;
    let log_norm = cur[center];
    let log_half: Vec<f64> = (0..=n_out)
        .map(|m| cur[center + m] - log_norm - (m * m) as f64 * l)
        .collect();
    if !log_norm.is_finite() || log_half.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite coefficient at level {}",
            v.level + 1
        )));
    }
    Ok(CoefficientVector {
        level: v.level + 1,
        log_half,
        log_a0: b as f64 * v.log_a0 + log_norm,
        log_norm,
        params: v.params,
    })
}

pub fn ratio_sup(v: &CoefficientVector) -> f64 {
    v.ratio_sup()
}

/// Fast evaluator of `log P(z)`, `P(z) = 1 + 2 Σ_{n≥1} â(n) cos 2πnz`.
#[derive(Debug, Clone)]
pub struct FourierEval {
    coef: Vec<f64>,
}

impl FourierEval {
    pub fn new(v: &CoefficientVector) -> Self {
        let mut coef: Vec<f64> = v.log_half[1..].iter().map(|l| 2.0 * l.exp()).collect();
        // terms below 1e−20 of the leading one do not move any evaluated quantity
        let floor = coef.first().map_or(0.0, |c| c * 1e-20);
        while coef.last().is_some_and(|&c| c <= floor) {
            coef.pop();
        }
        Self { coef }
    }

    /// `P(z) − 1`.
    pub fn excess(&self, z: f64) -> f64 {
        if self.coef.is_empty() {
            return 0.0;
        }
        let c1 = (2.0 * PI * z).cos();
        let mut prev = 1.0;
        let mut cur = c1;
        let mut sum = self.coef[0] * c1;
        for &a in &self.coef[1..] {
            let next = 2.0 * c1 * cur - prev;
            prev = cur;
            cur = next;
            sum += a * cur;
        }
        sum
    }

    pub fn ln_p(&self, z: f64) -> f64 {
        self.excess(z).ln_1p()
    }
}

/// The flow from a level-0 vector through level `K`, with per-step diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialTable {
    pub params: ModelParams,
    pub levels: Vec<CoefficientVector>,
    /// `c_k` for every level.
    pub c_ratios: Vec<f64>,
    /// `gaps[k] = sup |v_{k+1}(z) − b v_k(z')|` for `k = 0..K−1`.
    pub gaps: Vec<f64>,
    /// `r[k] = 2 gaps[k−1]` for `k ≥ 1`; `r[0]` is unused and set to 0.
    pub r: Vec<f64>,
    #[serde(skip)]
    evals: Vec<FourierEval>,
}

impl PotentialTable {
    pub fn build(v0: CoefficientVector, k_max: usize) -> Result<Self> {
        if k_max > MAX_LEVELS {
            return Err(invalid("levels", format!("at most {MAX_LEVELS} levels, got {k_max}")));
        }
        if v0.level != 0 {
            return Err(invalid("v0", "flow must start at level 0"));
        }
        let params = v0.params;
        let mut levels = Vec::with_capacity(k_max + 1);
        levels.push(v0);
        for k in 0..k_max {
            let next = iterate(&levels[k])?;
            levels.push(next);
        }
        let mut table = Self {
            params,
            c_ratios: levels.iter().map(|v| v.ratio_sup()).collect(),
            evals: levels.iter().map(FourierEval::new).collect(),
            levels,
            gaps: Vec::new(),
            r: Vec::new(),
        };
        let c0 = table.c_ratios[0];
        let gamma = gamma_from_c0(c0, params.b);
        table.gaps = (0..k_max)
            .map(|k| {
                let bound = gap_bound(&params, c0, gamma, k).map(|(b, _)| b);
                table.gap_sup_with(k, bound)
            })
            .collect();
        table.r = std::iter::once(0.0)
            .chain(table.gaps.iter().map(|g| 2.0 * g))
            .collect();
        Ok(table)
    }

    /// DG flow with the default initial truncation.
    pub fn dg(params: &ModelParams, k_max: usize) -> Result<Self> {
        let n0 = choose_truncation(params.b, params.theta, params.neg_log_theta(), N_MAX).max(N_MIN);
        Self::build(init_dg(params, n0)?, k_max)
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn eval(&self, k: usize) -> &FourierEval {
        &self.evals[k]
    }

    /// Rebuilds the evaluators after deserialization.
    pub fn rehydrate(&mut self) {
        self.evals = self.levels.iter().map(FourierEval::new).collect();
    }

    pub fn log_norm(&self, k: usize) -> f64 {
        self.levels[k].log_norm
    }

    /// `v_{k+1}(z) − b v_k(z')`.
    pub fn eval_gap(&self, k: usize, z: f64, zp: f64) -> Result<f64> {
        if k + 1 >= self.levels.len() {
            return Err(Error::MissingLevel {
                need: k + 1,
                have: self.depth(),
            });
        }
        let b = self.params.b as f64;
        let ep = self.evals[k].excess(zp);
        let e = self.evals[k + 1].excess(z);
        if ep <= -1.0 || e <= -1.0 {
            return Err(Error::Numerical(format!(
                "non-positive Fourier sum at level {k}; truncation too aggressive"
            )));
        }
        Ok(b * ep.ln_1p() - self.levels[k + 1].log_norm - e.ln_1p())
    }

    /// `log f(ζ) = v_j(φ) − b v_{j−1}(φ + ζ)`: the log-density of the scale-`j` kernel
    /// against `N(0, 1/β)`, `j ≥ 1`.
    pub fn step_log_density(&self, j: usize, phi: f64, zeta: f64) -> f64 {
        self.params.b as f64 * self.evals[j - 1].ln_p(phi + zeta)
            - self.levels[j].log_norm
            - self.evals[j].ln_p(phi)
    }

    pub fn gap_sup(&self, k: usize) -> f64 {
        self.gaps[k]
    }

    pub fn compute_r(&self) -> &[f64] {
        &self.r
    }

    fn gap_sup_with(&self, k: usize, bound: Option<f64>) -> f64 {
        let b = self.params.b as f64;
        let log_norm = self.levels[k + 1].log_norm;
        let fa = |z: f64| b * self.evals[k].ln_p(z);
        let fb = |z: f64| log_norm + self.evals[k + 1].ln_p(z);
        let sup_at = |m: usize| {
            let (amin, amax) = polished_range(&fa, m);
            let (bmin, bmax) = polished_range(&fb, m);
            (amax - bmin).max(bmax - amin)
        };
        let coarse = sup_at(GRID);
        match bound {
            Some(bd) if coarse >= 0.9 * bd => coarse.max(sup_at(GRID_FINE)),
            _ => coarse,
        }
    }
}

/// Min and max of a 1-periodic even function on the grid `{j/m}`, each polished by a
/// golden-section search in the neighbouring cells.
fn polished_range(f: &dyn Fn(f64) -> f64, m: usize) -> (f64, f64) {
    let h = 1.0 / m as f64;
    let pts: Vec<f64> = (0..=m / 2).map(|j| j as f64 * h).collect();
    let vals: Vec<f64> = pts.iter().map(|&z| f(z)).collect();
    let (mut imin, mut imax) = (0, 0);
    for (i, &v) in vals.iter().enumerate() {
        if v < vals[imin] {
            imin = i;
        }
        if v > vals[imax] {
            imax = i;
        }
    }
    let lo = golden(f, pts[imin] - h, pts[imin] + h, false).min(vals[imin]);
    let hi = golden(f, pts[imax] - h, pts[imax] + h, true).max(vals[imax]);
    (lo, hi)
}

fn golden(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, maximize: bool) -> f64 {
    let g = |z: f64| if maximize { -f(z) } else { f(z) };
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (g(c), g(d));
    for _ in 0..60 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = g(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = g(d);
        }
    }
    let best = fc.min(fd);
    if maximize {
        -best
    } else {
        best
    }
}

fn binom2(b: usize) -> f64 {
    (b * (b - 1)) as f64 / 2.0
}

/// Root in `(0, 1)` of `α (1 + C(b,2) c² α²) = 1`.
pub fn solve_alpha(c: f64, b: usize) -> f64 {
    let k = binom2(b) * c * c;
    let f = |a: f64| a * (1.0 + k * a * a) - 1.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn gamma_from_c0(c0: f64, b: usize) -> f64 {
    let cb = binom2(b);
    let a0 = solve_alpha(c0, b);
    c0 * c0 * 2.0 * cb / b as f64 * a0 * a0 / (1.0 + cb * c0 * c0).powi(2)
}

/// The critical-regime decay constant computed from the level-0 ratio.
pub fn gamma_critical(v0: &CoefficientVector) -> f64 {
    gamma_from_c0(v0.ratio_sup(), v0.params.b)
}

/// Proven bound on `gaps[k]` and whether `k` satisfies its admissibility condition.
/// `None` in the supercritical regime.
pub fn gap_bound(params: &ModelParams, c0: f64, gamma: f64, k: usize) -> Option<(f64, bool)> {
    let bc0 = params.b as f64 * c0;
    let eta = match params.regime {
        Regime::Subcritical => params.b_theta().powi(k as i32) * bc0,
        Regime::Critical => (1.0 + gamma * k as f64).powf(-0.5) * bc0,
        Regime::Supercritical => return None,
    };
    Some((8.0 * eta, eta <= 0.125))
}

/// Worst violation ratios of the ratio (`c_k ≤ (bθ)^k c_0`) and envelope
/// (`â_k(n) ≤ [(bθ)^{k−1} b c_0]^n θ^{n²}`) inequalities, as `log(measured / bound)`
/// maxima over all levels and stored coefficients. Non-positive means both hold.
pub fn ratio_envelope_excess(table: &PotentialTable) -> (f64, f64) {
    let p = &table.params;
    let log_bt = p.b_theta().ln();
    let l = p.neg_log_theta();
    let log_c0 = table.c_ratios[0].ln();
    let log_b = (p.b as f64).ln();
    let mut ratio_worst = f64::NEG_INFINITY;
    let mut env_worst = f64::NEG_INFINITY;
    for (k, v) in table.levels.iter().enumerate() {
        ratio_worst = ratio_worst.max(table.c_ratios[k].ln() - (k as f64 * log_bt + log_c0));
        if k == 0 {
            continue;
        }
        let base = (k - 1) as f64 * log_bt + log_b + log_c0;
        for (n, &lh) in v.log_half.iter().enumerate() {
            env_worst = env_worst.max(lh - (n as f64 * base - (n * n) as f64 * l));
        }
    }
    (ratio_worst, env_worst)
}

/// Worst `measured − bound` of `â_{k+1}(1) ≤ θ r/(1 + C(b,2) r²) + (b−1) θ c_k`, `r = â_k(1)`.
pub fn critical_ratio_chain_excess(table: &PotentialTable) -> f64 {
    let p = &table.params;
    let cb = binom2(p.b);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..table.depth() {
        let r = table.levels[k].ahat(1);
        let lhs = table.levels[k + 1].ahat(1);
        let rhs = p.theta * r / (1.0 + cb * r * r) + (p.b - 1) as f64 * p.theta * table.c_ratios[k];
        worst = worst.max(lhs - rhs);
    }
    worst
}

/// Decay rate `−d log R_k / dk` fitted by least squares over `k ∈ [k_lo, k_hi]`.
pub fn fit_decay_rate(r: &[f64], k_lo: usize, k_hi: usize) -> f64 {
    let ks: Vec<f64> = (k_lo..=k_hi).map(|k| k as f64).collect();
    let ys: Vec<f64> = (k_lo..=k_hi).map(|k| r[k].ln()).collect();
    -linear_fit(&ks, &ys).0
}

/// Largest relative discrepancy between the periodized Gaussian and its Fourier series,
/// `Σ_{|n|≤50} e^{−β(z−n)²/2} = √(2π/β) Σ_{|n|≤50} θ^{n²} cos 2πnz`, over the given points.
pub fn poisson_residual(beta: f64, zs: &[f64]) -> f64 {
    let theta_log = -2.0 * PI * PI / beta;
    let pref = (2.0 * PI / beta).sqrt();
    zs.iter()
        .map(|&z| {
            let lhs: f64 = (-50..=50)
                .map(|n| (-beta * (z - n as f64).powi(2) / 2.0).exp())
                .sum();
            let rhs: f64 = pref
                * (-50..=50i64)
                    .map(|n| ((n * n) as f64 * theta_log).exp() * (2.0 * PI * n as f64 * z).cos())
                    .sum::<f64>();
            ((lhs - rhs) / lhs).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_params;

    fn params_ratio(b: usize, ratio: f64) -> ModelParams {
        ModelParams::from_ratio(b, ratio).unwrap()
    }

    #[test]
    fn dg_initial_vector() {
        let p = make_params(2, 14.0).unwrap();
        let v = init_dg(&p, 8).unwrap();
        assert_eq!(v.ahat(0), 1.0);
        assert!((v.ahat(1) - p.theta).abs() < 1e-15);
        assert!((v.ahat(2) / p.theta.powi(4) - 1.0).abs() < 1e-13);
        assert!((v.ratio_sup() / p.theta - 1.0).abs() < 1e-13);
        assert!((v.log_a0 - 0.5 * (2.0 * PI / 14.0).ln()).abs() < 1e-15);
        let flat = init_dg(&make_params(2, 1e9).unwrap(), 5).unwrap();
        assert!(flat.half().iter().all(|&a| a > 0.9999));
        assert!(init_dg(&p, 3).is_err());
    }

    #[test]
    fn sine_gordon_matches_quadrature() {
        let p = make_params(2, 10.0).unwrap();
        for kappa in [0.3, 1.0, 4.0] {
            let v = init_sine_gordon(&p, kappa, 8).unwrap();
            let m = 20_000;
            let quad = |n: usize| {
                (0..m)
                    .map(|i| {
                        let z = i as f64 / m as f64;
                        (kappa * (2.0 * PI * z).cos()).exp() * (2.0 * PI * n as f64 * z).cos()
                    })
                    .sum::<f64>()
                    / m as f64
            };
            let a0 = quad(0);
            assert!((v.log_a0 - a0.ln()).abs() < 1e-12, "kappa={kappa}");
            for n in 1..5 {
                assert!((v.ahat(n) - quad(n) / a0).abs() < 1e-12, "kappa={kappa} n={n}");
            }
        }
        let small = init_sine_gordon(&p, 1e-6, 6).unwrap();
        assert!(small.ahat(1) < 1e-6);
        assert!(init_sine_gordon(&p, 0.0, 6).is_err());
    }

    #[test]
    fn hand_convolution_toy() {
        let p = make_params(2, 7.0).unwrap();
        let t: f64 = 0.3;
        let mut v = init_dg(&p, 4).unwrap();
        v.log_half = vec![0.0, t.ln(), -1e6, -1e6, -1e6];
        let w = iterate(&v).unwrap();
        let expect = 2.0 * t * p.theta / (1.0 + 2.0 * t * t);
        assert!((w.ahat(1) / expect - 1.0).abs() < 1e-12);
        assert_eq!(w.log_half[0], 0.0);
        assert!((w.log_norm - (1.0 + 2.0 * t * t).ln()).abs() < 1e-14);
    }

    #[test]
    fn peierls_step_bound() {
        for b in [2, 3] {
            let p = params_ratio(b, 0.5);
            let mut v = init_dg(&p, 12).unwrap();
            for _ in 0..6 {
                let c = v.ratio_sup();
                let w = iterate(&v).unwrap();
                for n in 0..w.truncation() {
                    let ratio = (w.log_half[n + 1] - w.log_half[n]).exp();
                    let bound = b as f64 * p.theta.powi(2 * n as i32 + 1) * c;
                    assert!(ratio <= bound * (1.0 + 1e-9), "b={b} n={n}");
                }
                assert!(w.ratio_sup() <= p.b_theta() * c * (1.0 + 1e-9));
                v = w;
            }
        }
    }

    #[test]
    fn gap_matches_potentials_and_is_scale_free() {
        let p = params_ratio(2, 0.5);
        let mut table = PotentialTable::dg(&p, 4).unwrap();
        let b = 2.0;
        for k in 0..3 {
            for &(z, zp) in &[(0.0, 0.0), (0.1, 0.37), (0.5, 0.25)] {
                let direct = table.levels[k + 1].potential(z) - b * table.levels[k].potential(zp);
                let g = table.eval_gap(k, z, zp).unwrap();
                assert!((direct - g).abs() < 1e-12, "k={k}");
            }
        }
        let before = table.eval_gap(1, 0.2, 0.4).unwrap();
        for v in table.levels.iter_mut() {
            v.log_a0 += 17.0;
        }
        assert_eq!(before, table.eval_gap(1, 0.2, 0.4).unwrap());
        // separability: the z'-dependence does not depend on z
        let d1 = table.eval_gap(1, 0.1, 0.3).unwrap() - table.eval_gap(1, 0.1, 0.45).unwrap();
        let d2 = table.eval_gap(1, 0.4, 0.3).unwrap() - table.eval_gap(1, 0.4, 0.45).unwrap();
        assert!((d1 - d2).abs() < 1e-14);
        assert!(matches!(table.eval_gap(4, 0.0, 0.0), Err(Error::MissingLevel { .. })));
    }

    #[test]
    fn gap_via_reweighted_series() {
        // log[(1 + e2(z'))/(1 + e1(z))], e1 from â_{k+1}(n), e2 from â_{k+1}(n) θ^{−n²}
        let p = params_ratio(2, 0.5);
        let table = PotentialTable::dg(&p, 6).unwrap();
        let l = p.neg_log_theta();
        for k in 0..6 {
            let next = &table.levels[k + 1];
            for &(z, zp) in &[(0.0, 0.0), (0.13, 0.41), (0.5, 0.5), (0.3, 0.0)] {
                let mut e1 = 0.0;
                let mut e2 = 0.0;
                for n in 1..=next.truncation() {
                    let lh = next.log_half[n];
                    e1 += 2.0 * lh.exp() * (2.0 * PI * n as f64 * z).cos();
                    e2 += 2.0 * (lh + (n * n) as f64 * l).exp() * (2.0 * PI * n as f64 * zp).cos();
                }
                let other = e2.ln_1p() - e1.ln_1p();
                let g = table.eval_gap(k, z, zp).unwrap();
                assert!((other - g).abs() < 1e-12, "k={k} z={z} z'={zp}: {other} vs {g}");
            }
        }
    }

    #[test]
    fn grid_sup_dominates_grid_values() {
        let p = params_ratio(2, 0.5);
        let table = PotentialTable::dg(&p, 8).unwrap();
        for k in 0..8 {
            let mut grid_max: f64 = 0.0;
            for i in 0..64 {
                for j in 0..64 {
                    let g = table.eval_gap(k, i as f64 / 64.0, j as f64 / 64.0).unwrap();
                    grid_max = grid_max.max(g.abs());
                }
            }
            assert!(table.gaps[k] >= grid_max * (1.0 - 1e-12));
            assert!(table.gaps[k] <= grid_max * 1.01 + 1e-300);
            assert!(table.r[k + 1] >= 0.0);
        }
    }

    #[test]
    fn alpha_root() {
        let a = solve_alpha(1.0, 2);
        assert!((a - 0.682_327_803_828_019_3).abs() < 1e-13);
        assert!((a * (1.0 + a * a) - 1.0).abs() < 1e-12);
        assert!((solve_alpha(1e-9, 3) - 1.0).abs() < 1e-12);
        let mut prev = 1.0;
        for i in 1..50 {
            let a = solve_alpha(i as f64 * 0.1, 3);
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn gamma_small_c0() {
        let p = make_params(3, 1.0).unwrap();
        let v = init_dg(&p, 6).unwrap();
        let c0 = v.ratio_sup();
        let g = gamma_critical(&v);
        let lead = 2.0 * 3.0 / 3.0 * c0 * c0;
        assert!((g / lead - 1.0).abs() < 1e-6);
        let pc = ModelParams::from_ratio(2, 1.0).unwrap();
        let vc = init_dg(&pc, 8).unwrap();
        let a0 = solve_alpha(0.5, 2);
        let expect = 0.25 * 2.0 / 2.0 * a0 * a0 / (1.25f64).powi(2);
        assert!((gamma_critical(&vc) - expect).abs() < 1e-12);
    }

    #[test]
    fn poisson_summation() {
        let zs: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        for beta in [5.0, 14.0, 28.0] {
            assert!(poisson_residual(beta, &zs) < 1e-10, "beta={beta}");
        }
    }

    #[test]
    fn truncation_policy() {
        let p = params_ratio(2, 0.5);
        let table = PotentialTable::dg(&p, 10).unwrap();
        for v in &table.levels[1..] {
            let n = v.truncation();
            assert!((N_MIN..=N_MAX).contains(&n));
            assert!(v.ahat(n) <= TAU_TRUNC);
        }
    }

    #[test]
    fn subcritical_r_decays() {
        let p = params_ratio(2, 0.5);
        let table = PotentialTable::dg(&p, 40).unwrap();
        for k in 2..40 {
            assert!(table.r[k + 1] < table.r[k]);
        }
        let rate = fit_decay_rate(&table.r, 10, 40);
        let expect = -(p.b_theta().ln());
        assert!((rate / expect - 1.0).abs() < 0.05, "{rate} vs {expect}");
    }

    #[test]
    fn table_serde_roundtrip() {
        let p = params_ratio(3, 0.4);
        let table = PotentialTable::dg(&p, 3).unwrap();
        let s = serde_json::to_string(&table).unwrap();
        let mut back: PotentialTable = serde_json::from_str(&s).unwrap();
        back.rehydrate();
        assert_eq!(back.levels, table.levels);
        assert_eq!(back.eval_gap(1, 0.1, 0.2).unwrap(), table.eval_gap(1, 0.1, 0.2).unwrap());
    }
}

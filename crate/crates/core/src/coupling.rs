//! Coupling of the Discrete Gaussian field to the Gaussian free field increment by increment.
//!
//! Continuous scales: draw `X ~ N(0, 1/β)` and an independent flag `B` with
//! `P(B = 1) = e^{−R_j}`; the DG increment is `X` itself when `B = 1` and `h̃(X)` otherwise,
//! where `h̃` is the quantile map onto the residual density
//! `f̃ = (f − e^{−R_j}) / (1 − e^{−R_j})`. The lattice scale uses the monotone (threshold)
//! coupling of `X` with the discrete increment.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Regime};
use crate::rg::PotentialTable;
use crate::sampler::DiscreteKernel;
use crate::stats::{norm_cdf, norm_isf, norm_sf, quantiles};

pub const MAP_PANELS: usize = 4096;
/// Number of conditioning-value bins per period.
pub const PHI_BINS: usize = 256;
const C0_GRID: usize = 1024;

/// 5-point Gauss–Legendre nodes and weights on `[−1, 1]`.
const GL_X: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_W: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Monotone map `h = G^{−1} ∘ F` tabulated on a uniform grid, extended by `t + const`
/// outside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileMap {
    pub t0: f64,
    pub dt: f64,
    pub h: Vec<f64>,
    pub sigma: f64,
    /// `3σ √(2 log max{‖f₁‖‖1/f₂‖, ‖f₂‖‖1/f₁‖})`.
    pub bound: f64,
    /// `max |h(t) − t|` over the table.
    pub observed: f64,
}

impl QuantileMap {
    pub fn apply(&self, t: f64) -> f64 {
        let last = self.h.len() - 1;
        let x = (t - self.t0) / self.dt;
        if x <= 0.0 {
            return self.h[0] + (t - self.t0);
        }
        if x >= last as f64 {
            return self.h[last] + (t - self.t0 - last as f64 * self.dt);
        }
        let i = x as usize;
        let w = x - i as f64;
        self.h[i] + w * (self.h[i + 1] - self.h[i])
    }

    pub fn grid(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.h
            .iter()
            .enumerate()
            .map(|(i, &h)| (self.t0 + i as f64 * self.dt, h))
    }
}

fn gauss_density(t: f64, sigma: f64) -> f64 {
    (-0.5 * (t / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Cumulative masses of `e^{lf(t)} N(0, σ²)(dt)` at the panel edges, from both ends and
/// with analytic Gaussian tails outside the range.
struct Cdf<'a> {
    lf: &'a dyn Fn(f64) -> f64,
    sigma: f64,
    edges: Vec<f64>,
    mass: Vec<f64>,
    /// mass below each edge
    cum: Vec<f64>,
    /// mass above each edge
    sur: Vec<f64>,
    total: f64,
    /// tails modelled as exponential tilts `e^{c + s t}` of the Gaussian: (c, s)
    left_tail: (f64, f64),
    right_tail: (f64, f64),
}

fn tilt_at(lf: &dyn Fn(f64) -> f64, t: f64, sigma: f64) -> (f64, f64) {
    let h = 1e-5 * sigma;
    let s = (lf(t + h) - lf(t - h)) / (2.0 * h);
    let s = if s.is_finite() { s } else { 0.0 };
    (lf(t) - s * t, s)
}

impl<'a> Cdf<'a> {
    fn new(lf: &'a dyn Fn(f64) -> f64, sigma: f64, lo: f64, hi: f64, panels: usize) -> Self {
        let w = (hi - lo) / panels as f64;
        let edges: Vec<f64> = (0..=panels).map(|i| lo + i as f64 * w).collect();
        let left_tail = tilt_at(lf, lo, sigma);
        let right_tail = tilt_at(lf, hi, sigma);
        // ∫ e^{c + s t} N(0, σ²)(dt) over a half-line = e^{c + s²σ²/2} × Gaussian tail at t − sσ²
        let tail_scale = |(c, s): (f64, f64)| (c + 0.5 * s * s * sigma * sigma).exp();
        let mass: Vec<f64> = (0..panels).map(|p| panel_mass(lf, sigma, edges[p], edges[p + 1])).collect();
        let mut cum = Vec::with_capacity(panels + 1);
        let mut acc = tail_scale(left_tail) * norm_cdf((lo - left_tail.1 * sigma * sigma) / sigma);
        cum.push(acc);
        for m in &mass {
            acc += m;
            cum.push(acc);
        }
        let mut sur = vec![0.0; panels + 1];
        let mut acc = tail_scale(right_tail) * norm_sf((hi - right_tail.1 * sigma * sigma) / sigma);
        sur[panels] = acc;
        for p in (0..panels).rev() {
            acc += mass[p];
            sur[p] = acc;
        }
        let total = 0.5 * (cum[panels] + sur[panels] + cum[0] + sur[0]);
        Self {
            lf,
            sigma,
            edges,
            mass,
            cum,
            sur,
            total,
            left_tail,
            right_tail,
        }
    }

    fn density(&self, t: f64) -> f64 {
        (self.lf)(t).exp() * gauss_density(t, self.sigma)
    }

    /// Normalized mass below edge `i`, taken from whichever end is more accurate.
    fn level(&self, i: usize) -> (bool, f64) {
        let lower = self.cum[i] / self.total;
        if lower <= 0.5 {
            (true, lower)
        } else {
            (false, self.sur[i] / self.total)
        }
    }

    /// Point with normalized mass `u` below it (`lower`) or above it (`!lower`).
    fn inverse(&self, lower: bool, u: f64, hint: &mut usize) -> f64 {
        let target = u * self.total;
        let last = self.edges.len() - 1;
        let s2 = self.sigma * self.sigma;
        if lower && target <= self.cum[0] {
            let (c, sl) = self.left_tail;
            let p = target / (c + 0.5 * sl * sl * s2).exp();
            return sl * s2 - self.sigma * norm_isf(p.max(f64::MIN_POSITIVE));
        }
        if !lower && target <= self.sur[last] {
            let (c, sl) = self.right_tail;
            let p = target / (c + 0.5 * sl * sl * s2).exp();
            return sl * s2 + self.sigma * norm_isf(p.max(f64::MIN_POSITIVE));
        }
        let (p, r) = if lower {
            let mut p = (*hint).min(last - 1);
            while p > 0 && self.cum[p] > target {
                p -= 1;
            }
            while p + 1 < last && self.cum[p + 1] < target {
                p += 1;
            }
            (p, (target - self.cum[p]).clamp(0.0, self.mass[p]))
        } else {
            let mut p = (*hint).min(last - 1);
            while p + 1 < last && self.sur[p + 1] > target {
                p += 1;
            }
            while p > 0 && self.sur[p] < target {
                p -= 1;
            }
            (p, (self.mass[p] - (target - self.sur[p + 1])).clamp(0.0, self.mass[p]))
        };
        *hint = p;
        self.solve_in_panel(p, r)
    }

    /// `a + s` with mass `r` on `[a, a + s]` inside panel `p`.
    fn solve_in_panel(&self, p: usize, r: f64) -> f64 {
        let (a, b) = (self.edges[p], self.edges[p + 1]);
        let w = b - a;
        let mass = self.mass[p];
        if mass <= 0.0 {
            return a;
        }
        // linear density model for a starting point, then Newton on the exact panel integral
        let ga = self.density(a);
        let gb = self.density(b);
        let scale = mass / (0.5 * (ga + gb) * w);
        let qa = 0.5 * scale * (gb - ga) / w;
        let qb = scale * ga;
        let mut s = if qa.abs() < 1e-300 {
            r / qb
        } else {
            2.0 * r / (qb + (qb * qb + 4.0 * qa * r).max(0.0).sqrt())
        };
        if !s.is_finite() {
            s = w * r / mass;
        }
        s = s.clamp(0.0, w);
        for _ in 0..2 {
            let f = panel_mass(self.lf, self.sigma, a, a + s) - r;
            let d = self.density(a + s);
            if d <= 0.0 {
                break;
            }
            s = (s - f / d).clamp(0.0, w);
        }
        a + s
    }
}

fn panel_mass(lf: &dyn Fn(f64) -> f64, sigma: f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    GL_X.iter()
        .zip(GL_W)
        .map(|(&x, w)| {
            let t = m + r * x;
            w * lf(t).exp() * gauss_density(t, sigma)
        })
        .sum::<f64>()
        * r
}

/// Quantile map carrying `X ~ f₁ N(0, σ²)` to `Y ~ f₂ N(0, σ²)`; `f1`, `f2` are log-densities
/// with respect to `N(0, σ²)`, and `(lo, hi)` is the tabulation range.
pub fn build_quantile_map(
    f1: &dyn Fn(f64) -> f64,
    f2: &dyn Fn(f64) -> f64,
    sigma: f64,
    t_range: (f64, f64),
) -> Result<QuantileMap> {
    let (lo, hi) = t_range;
    if !(hi > lo) || !(sigma > 0.0) {
        return Err(Error::Quantile(format!("bad range ({lo}, {hi}) or sigma {sigma}")));
    }
    let cf = Cdf::new(f1, sigma, lo, hi, MAP_PANELS);
    let cg = Cdf::new(f2, sigma, lo, hi, MAP_PANELS);
    if !(cf.total.is_finite() && cg.total.is_finite() && cf.total > 0.0 && cg.total > 0.0) {
        return Err(Error::Quantile("quadrature did not produce a finite positive mass".into()));
    }
    let mut hint = 0;
    let mut h: Vec<f64> = Vec::with_capacity(MAP_PANELS + 1);
    let mut observed: f64 = 0.0;
    for (i, &t) in cf.edges.iter().enumerate() {
        let (lower, u) = cf.level(i);
        let y = cg.inverse(lower, u, &mut hint);
        if let Some(&prev) = h.last() {
            if y < prev - 1e-12 * (1.0 + prev.abs()) {
                return Err(Error::Quantile(format!("non-monotone map at t={t}")));
            }
        }
        observed = observed.max((y - t).abs());
        h.push(y);
    }
    // sup-norms of the normalized densities on the nodes of the range
    let mut norms = [(f64::NEG_INFINITY, f64::INFINITY); 2];
    for (k, (lf, total)) in [(f1, cf.total), (f2, cg.total)].into_iter().enumerate() {
        for &t in &cf.edges {
            let v = lf(t) - total.ln();
            norms[k].0 = norms[k].0.max(v);
            norms[k].1 = norms[k].1.min(v);
        }
    }
    let (s1, i1) = norms[0];
    let (s2, i2) = norms[1];
    let log_ratio = (s1 - i2).max(s2 - i1).max(0.0);
    let bound = 3.0 * sigma * (2.0 * log_ratio).sqrt();
    if observed > bound + 1e-9 {
        return Err(Error::Quantile(format!(
            "map deviation {observed} exceeds the proven bound {bound}"
        )));
    }
    Ok(QuantileMap {
        t0: lo,
        dt: (hi - lo) / MAP_PANELS as f64,
        h,
        sigma,
        bound,
        observed,
    })
}

/// `3β^{−1/2} √(2 log max{(e^{2η}‖f‖ − 1)/(e^{2η} − 1), e^η + 1})`, `η = R/2`.
pub fn continuous_step_bound(beta: f64, r: f64, sup_f: f64) -> f64 {
    let eta = 0.5 * r;
    let e2 = (2.0 * eta).exp();
    let a = if r > 0.0 { (e2 * sup_f - 1.0) / (e2 - 1.0) } else { 1.0 };
    3.0 * beta.powf(-0.5) * (2.0 * a.max(eta.exp() + 1.0).ln()).sqrt()
}

/// Result of one continuous coupling step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousStep {
    pub xi_gff: f64,
    pub xi_dg: f64,
    pub flag: bool,
}

/// Result of one lattice coupling step: the DG increment puts `φ + ξ_dg` on `lattice`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteStep {
    pub xi_gff: f64,
    pub xi_dg: f64,
    pub lattice: i64,
}

/// Shared state for coupling runs: the potential table, the lazily built per-(scale, bin)
/// quantile maps, and the uniform increment bound.
pub struct CouplingContext<'a> {
    pub table: &'a PotentialTable,
    pub params: ModelParams,
    pub sigma: f64,
    pub discrete: DiscreteKernel,
    pub c0: f64,
    pub c1: f64,
    maps: Vec<Vec<OnceLock<Arc<QuantileMap>>>>,
    cache_dir: Option<PathBuf>,
}

impl<'a> CouplingContext<'a> {
    pub fn new(table: &'a PotentialTable) -> Result<Self> {
        let params = table.params;
        if params.regime != Regime::Subcritical {
            return Err(Error::Regime(format!(
                "coupling needs beta < beta_c (beta = {}, beta_c = {}): R_k is not summable otherwise",
                params.beta, params.beta_c
            )));
        }
        let sup_r = table.r.iter().skip(1).cloned().fold(0.0, f64::max);
        let c1 = 3.0 * params.sigma() * (2.0 * (sup_r.exp() + 1.0).ln()).sqrt();
        let discrete = DiscreteKernel::new(params.beta);
        let c0 = discrete_threshold_bound(&discrete, C0_GRID);
        let maps = (0..=table.depth())
            .map(|_| (0..PHI_BINS).map(|_| OnceLock::new()).collect())
            .collect();
        Ok(Self {
            table,
            params,
            sigma: params.sigma(),
            discrete,
            c0,
            c1,
            maps,
            cache_dir: None,
        })
    }

    /// Persist and reuse quantile maps under `dir`.
    pub fn with_cache_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.cache_dir = dir;
        self
    }

    /// `C = max{C₀, C₁}`.
    pub fn bound(&self) -> f64 {
        self.c0.max(self.c1)
    }

    pub fn success_probability(&self, j: usize) -> f64 {
        (-self.table.r[j]).exp()
    }

    /// Log-density of `f̃` against `N(0, 1/β)` at conditioning value `phi`.
    pub fn residual_log_density(&self, j: usize, phi: f64, t: f64) -> f64 {
        let r = self.table.r[j];
        let lf = self.table.step_log_density(j, phi, t);
        ((lf.exp_m1() - (-r).exp_m1()) / -(-r).exp_m1()).ln()
    }

    /// Builds the residual quantile map at conditioning value `phi` directly.
    pub fn build_residual_map(&self, j: usize, phi: f64) -> Result<QuantileMap> {
        let r = self.table.r[j];
        if !(r > 0.0) {
            return Err(Error::Quantile(format!("R_{j} = {r}: the residual law is undefined")));
        }
        // sup and inf of f̃ over one period of its argument
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..512 {
            let v = self.residual_log_density(j, phi, i as f64 / 512.0);
            if !v.is_finite() {
                return Err(Error::Quantile(format!(
                    "residual density not positive at scale {j}; R_{j} inconsistent with the kernel"
                )));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let spread = 3.0 * self.sigma * (2.0 * (hi - lo)).sqrt();
        let t = 8.0 * self.sigma + spread;
        let f2 = |x: f64| self.residual_log_density(j, phi, x);
        build_quantile_map(&|_| 0.0, &f2, self.sigma, (-t, t))
    }

    fn map(&self, j: usize, bin: usize) -> Result<Arc<QuantileMap>> {
        let slot = &self.maps[j][bin];
        if let Some(m) = slot.get() {
            return Ok(m.clone());
        }
        let phi = bin as f64 / PHI_BINS as f64;
        let built = match self.cache_path(j, bin) {
            Some(path) => match read_map(&path) {
                Some(m) => m,
                None => {
                    let m = self.build_residual_map(j, phi)?;
                    write_map(&path, &m)?;
                    m
                }
            },
            None => self.build_residual_map(j, phi)?,
        };
        Ok(slot.get_or_init(|| Arc::new(built)).clone())
    }

    fn cache_path(&self, j: usize, bin: usize) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| {
            d.join(format!(
                "qmap-v1-b{}-beta{:016x}-j{}-bin{}.bin",
                self.params.b,
                self.params.beta.to_bits(),
                j,
                bin
            ))
        })
    }

    /// `h̃(x)` at conditioning value `phi`, interpolated between the two neighbouring bins.
    pub fn residual_map_apply(&self, j: usize, phi: f64, x: f64) -> Result<f64> {
        let pos = phi.rem_euclid(1.0) * PHI_BINS as f64;
        let i = (pos as usize).min(PHI_BINS - 1);
        let w = pos - i as f64;
        let y0 = self.map(j, i)?.apply(x);
        if w == 0.0 {
            return Ok(y0);
        }
        let y1 = self.map(j, (i + 1) % PHI_BINS)?.apply(x);
        Ok((1.0 - w) * y0 + w * y1)
    }

    /// Largest difference between the bin-interpolated map and a map built at `phi` exactly.
    pub fn bin_sensitivity(&self, j: usize, phi: f64, xs: &[f64]) -> Result<f64> {
        let exact = self.build_residual_map(j, phi)?;
        let mut worst: f64 = 0.0;
        for &x in xs {
            worst = worst.max((self.residual_map_apply(j, phi, x)? - exact.apply(x)).abs());
        }
        Ok(worst)
    }
}

/// One continuous coupling step at scale `j ≥ 1` given the DG parent value `phi`.
pub fn couple_continuous_step<R: Rng + ?Sized>(
    ctx: &CouplingContext,
    j: usize,
    phi: f64,
    rng: &mut R,
) -> Result<ContinuousStep> {
    if j == 0 || j > ctx.table.depth() {
        return Err(Error::MissingLevel {
            need: j,
            have: ctx.table.depth(),
        });
    }
    let g: f64 = rng.sample(StandardNormal);
    let x = ctx.sigma * g;
    let flag = rng.random::<f64>() < ctx.success_probability(j);
    let xi_dg = if flag { x } else { ctx.residual_map_apply(j, phi, x)? };
    Ok(ContinuousStep {
        xi_gff: x,
        xi_dg,
        flag,
    })
}

/// Lattice point matched to `x` by the monotone coupling of `N(0, σ²)` with the
/// lattice kernel at `phi`.
fn threshold_match(kernel: &DiscreteKernel, sigma: f64, phi: f64, x: f64) -> i64 {
    let (lo, w) = kernel.weights(phi);
    let total: f64 = w.iter().sum();
    if x <= 0.0 {
        // smallest m with P(lattice ≤ m) > Φ(x/σ)
        let l = norm_cdf(x / sigma) * total;
        let mut acc = 0.0;
        for (i, &wi) in w.iter().enumerate() {
            acc += wi;
            if acc > l {
                return lo + i as i64;
            }
        }
        lo + w.len() as i64 - 1
    } else {
        // largest m with P(lattice ≥ m) ≥ 1 − Φ(x/σ)
        let s = norm_sf(x / sigma) * total;
        let mut acc = 0.0;
        for (i, &wi) in w.iter().enumerate().rev() {
            acc += wi;
            if acc >= s {
                return lo + i as i64;
            }
        }
        lo
    }
}

/// The lattice-scale coupling step.
pub fn couple_discrete_step<R: Rng + ?Sized>(ctx: &CouplingContext, phi: f64, rng: &mut R) -> DiscreteStep {
    let g: f64 = rng.sample(StandardNormal);
    let x = ctx.sigma * g;
    let m = threshold_match(&ctx.discrete, ctx.sigma, phi, x);
    DiscreteStep {
        xi_gff: x,
        xi_dg: m as f64 - phi,
        lattice: m,
    }
}

/// Thresholds `z + a_k` of the lattice coupling for parent value `phi = −z`: the DG
/// increment equals `z + k` exactly when `X ∈ [z + a_k, z + a_{k+1})`. Returns the lowest
/// `k` and the interior thresholds `a_{k_lo+1}, …, a_{k_hi}`.
pub fn discrete_thresholds(kernel: &DiscreteKernel, sigma: f64, z: f64) -> (i64, Vec<f64>) {
    let phi = -z;
    let (lo, w) = kernel.weights(phi);
    let total: f64 = w.iter().sum();
    let len = w.len();
    // lower[i] = P(lattice ≤ lo + i), upper[i] = P(lattice ≥ lo + i)
    let mut lower = vec![0.0; len];
    let mut upper = vec![0.0; len];
    let mut acc = 0.0;
    for i in 0..len {
        acc += w[i];
        lower[i] = acc / total;
    }
    acc = 0.0;
    for i in (0..len).rev() {
        acc += w[i];
        upper[i] = acc / total;
    }
    let a = (1..len)
        .map(|i| {
            let x = if upper[i] <= 0.5 {
                sigma * norm_isf(upper[i])
            } else {
                -sigma * norm_isf(lower[i - 1])
            };
            // lattice point lo + i corresponds to k = lo + i (since floor(−φ) = floor(z) = 0)
            x - z
        })
        .collect();
    (lo, a)
}

/// `C₀`: the largest `|X − Y|` inside any interior cell of the lattice coupling, over a
/// grid of `grid` offsets `z ∈ [0, 1)`, and at least 1 (the limit of the outer cells).
pub fn discrete_threshold_bound(kernel: &DiscreteKernel, grid: usize) -> f64 {
    let sigma = kernel.beta.powf(-0.5);
    let mut worst: f64 = 1.0;
    for g in 0..grid {
        let z = g as f64 / grid as f64;
        let (lo, a) = discrete_thresholds(kernel, sigma, z);
        // a[i] is a_k for k = lo + 1 + i; cell k spans [a_k, a_{k+1})
        for i in 0..a.len().saturating_sub(1) {
            let k = (lo + 1 + i as i64) as f64;
            worst = worst.max((a[i] - k).abs()).max((a[i + 1] - k).abs());
        }
    }
    worst
}

/// Paired DG / GFF fields built by coupling every increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledSample {
    pub b: usize,
    pub n: usize,
    /// Increments per tree level `ℓ = 0..=n` (scale `n − ℓ`).
    pub xi_dg: Vec<Vec<f64>>,
    pub xi_gff: Vec<Vec<f64>>,
    /// Success flags per tree level `ℓ = 0..n` (scales `n..1`).
    pub flags: Vec<Vec<bool>>,
    /// `R_1, …, R_n` (index `j − 1`).
    pub r: Vec<f64>,
    pub c: f64,
    /// Largest scale `j` with `B_j(m^j(x)) = 0`, or 0 when every flag on the path succeeded.
    pub tau: Vec<u32>,
    pub dg: Vec<f64>,
    pub gff: Vec<f64>,
}

impl CoupledSample {
    /// Number of failed flags on the path from the root to leaf `x`.
    pub fn failures(&self, x: usize) -> usize {
        (0..self.n)
            .filter(|&l| !self.flags[l][x / self.b.pow((self.n - l) as u32)])
            .count()
    }
}

/// Top-down coupled construction of both fields on `Λ_n`.
pub fn couple_fields<R: Rng + ?Sized>(ctx: &CouplingContext, n: usize, rng: &mut R) -> Result<CoupledSample> {
    if ctx.table.depth() < n {
        return Err(Error::MissingLevel {
            need: n,
            have: ctx.table.depth(),
        });
    }
    let b = ctx.params.b;
    let mut prev_dg = vec![0.0];
    let mut prev_gff = vec![0.0];
    let mut xi_dg = Vec::with_capacity(n + 1);
    let mut xi_gff = Vec::with_capacity(n + 1);
    let mut flags = Vec::with_capacity(n);
    for l in 0..=n {
        let j = n - l;
        let size = b.pow(l as u32);
        let mut cur_dg = Vec::with_capacity(size);
        let mut cur_gff = Vec::with_capacity(size);
        let mut lvl_dg = Vec::with_capacity(size);
        let mut lvl_gff = Vec::with_capacity(size);
        let mut lvl_flag = Vec::with_capacity(size);
        for i in 0..size {
            let p = if l == 0 { 0 } else { i / b };
            let (pd, pg) = (prev_dg[p], prev_gff[p]);
            if j >= 1 {
                let s = couple_continuous_step(ctx, j, pd, rng)?;
                cur_dg.push(pd + s.xi_dg);
                cur_gff.push(pg + s.xi_gff);
                lvl_dg.push(s.xi_dg);
                lvl_gff.push(s.xi_gff);
                lvl_flag.push(s.flag);
            } else {
                let s = couple_discrete_step(ctx, pd, rng);
                cur_dg.push(s.lattice as f64);
                cur_gff.push(pg + s.xi_gff);
                lvl_dg.push(s.xi_dg);
                lvl_gff.push(s.xi_gff);
            }
        }
        xi_dg.push(lvl_dg);
        xi_gff.push(lvl_gff);
        if j >= 1 {
            flags.push(lvl_flag);
        }
        prev_dg = cur_dg;
        prev_gff = cur_gff;
    }
    let leaves = b.pow(n as u32);
    let tau = (0..leaves)
        .map(|x| {
            (0..n)
                .find(|&l| !flags[l][x / b.pow((n - l) as u32)])
                .map_or(0, |l| (n - l) as u32)
        })
        .collect();
    Ok(CoupledSample {
        b,
        n,
        xi_dg,
        xi_gff,
        flags,
        r: (1..=n).map(|j| ctx.table.r[j]).collect(),
        c: ctx.bound(),
        tau,
        dg: prev_dg,
        gff: prev_gff,
    })
}

/// Bernoulli tally at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernoulliTally {
    pub scale: usize,
    pub trials: u64,
    pub successes: u64,
    pub expected: f64,
    pub rate: f64,
    pub band: (f64, f64),
    pub within_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub samples: usize,
    pub c0: f64,
    pub c1: f64,
    pub c: f64,
    pub max_increment_deviation: f64,
    pub bound_violations: u64,
    /// Increments that differ although their flag succeeded.
    pub equality_failures: u64,
    /// Leaves with `|φ^DG − φ^GFF| > C (1 + #failed flags on the path)`.
    pub path_bound_violations: u64,
    pub bernoulli: Vec<BernoulliTally>,
    /// Largest `|corr(B_j(x), ξ_j^GFF(x))|` and `|corr(B_j(x), |ξ_j^GFF(x)|)|` over scales.
    pub max_flag_gff_correlation: f64,
    pub leaf_diff_quantiles: Vec<(f64, f64)>,
    pub max_diff_quantiles: Vec<(f64, f64)>,
    /// `tau_histogram[j]`: number of leaves whose deepest failure is at scale `j`.
    pub tau_histogram: Vec<u64>,
    /// Pooled law of DG leaf values, as (value, count).
    pub dg_leaf_histogram: Vec<(i64, u64)>,
}

pub const REPORT_QUANTILES: [f64; 5] = [0.01, 0.25, 0.5, 0.75, 0.99];

/// Streaming accumulator behind [`coupling_report`].
#[derive(Debug, Clone, Default)]
pub struct CouplingAccumulator {
    samples: usize,
    c0: f64,
    c1: f64,
    c: f64,
    max_dev: f64,
    violations: u64,
    eq_fail: u64,
    path_violations: u64,
    r: Vec<f64>,
    trials: Vec<u64>,
    succ: Vec<u64>,
    // per scale: Σx, Σx², Σ|x|, Σ|x|², ΣB·x, ΣB·|x|
    moments: Vec<[f64; 6]>,
    leaf_diff: Vec<f64>,
    max_diff: Vec<f64>,
    tau_hist: Vec<u64>,
    dg_hist: std::collections::BTreeMap<i64, u64>,
}

impl CouplingAccumulator {
    pub fn new(ctx: &CouplingContext) -> Self {
        Self {
            c0: ctx.c0,
            c1: ctx.c1,
            c: ctx.bound(),
            ..Default::default()
        }
    }

    pub fn add(&mut self, s: &CoupledSample) {
        let n = s.n;
        self.samples += 1;
        if self.r.len() < n {
            self.r = s.r.clone();
            self.trials.resize(n + 1, 0);
            self.succ.resize(n + 1, 0);
            self.moments.resize(n + 1, [0.0; 6]);
            self.tau_hist.resize(n + 1, 0);
        }
        for l in 0..=n {
            let j = n - l;
            for (i, (&d, &g)) in s.xi_dg[l].iter().zip(&s.xi_gff[l]).enumerate() {
                let dev = (d - g).abs();
                self.max_dev = self.max_dev.max(dev);
                if dev > s.c {
                    self.violations += 1;
                }
                if j >= 1 {
                    let f = s.flags[l][i];
                    if f && d.to_bits() != g.to_bits() {
                        self.eq_fail += 1;
                    }
                    self.trials[j] += 1;
                    let bf = f as u8 as f64;
                    self.succ[j] += f as u64;
                    let m = &mut self.moments[j];
                    m[0] += g;
                    m[1] += g * g;
                    m[2] += g.abs();
                    m[3] += g * g;
                    m[4] += bf * g;
                    m[5] += bf * g.abs();
                }
            }
        }
        let mut worst: f64 = 0.0;
        for (x, (&d, &g)) in s.dg.iter().zip(&s.gff).enumerate() {
            let diff = (d - g).abs();
            worst = worst.max(diff);
            if diff > s.c * (1.0 + s.failures(x) as f64) + 1e-9 {
                self.path_violations += 1;
            }
            *self.dg_hist.entry(d as i64).or_default() += 1;
        }
        for &t in &s.tau {
            self.tau_hist[t as usize] += 1;
        }
        self.leaf_diff.push(worst);
        let mx = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        self.max_diff.push((mx(&s.dg) - mx(&s.gff)).abs());
    }

    pub fn finish(self) -> Result<CouplingReport> {
        if self.samples == 0 {
            return Err(Error::InsufficientData("no coupled samples".into()));
        }
        let mut bernoulli = Vec::new();
        let mut max_corr: f64 = 0.0;
        for j in 1..self.trials.len() {
            let t = self.trials[j];
            if t == 0 {
                continue;
            }
            let p = (-self.r[j - 1]).exp();
            let rate = self.succ[j] as f64 / t as f64;
            let sd = (p * (1.0 - p) / t as f64).sqrt();
            let band = (p - 3.0 * sd, p + 3.0 * sd);
            bernoulli.push(BernoulliTally {
                scale: j,
                trials: t,
                successes: self.succ[j],
                expected: p,
                rate,
                band,
                within_band: rate >= band.0 - 1e-15 && rate <= band.1 + 1e-15,
            });
            let nt = t as f64;
            let m = &self.moments[j];
            let vb = rate * (1.0 - rate);
            if vb > 0.0 {
                for (sx, sxx, sbx) in [(m[0], m[1], m[4]), (m[2], m[3], m[5])] {
                    let mx = sx / nt;
                    let vx = sxx / nt - mx * mx;
                    let cov = sbx / nt - rate * mx;
                    max_corr = max_corr.max((cov / (vb * vx).sqrt()).abs());
                }
            }
        }
        let pairs = |v: &[f64]| {
            REPORT_QUANTILES
                .iter()
                .copied()
                .zip(quantiles(v, &REPORT_QUANTILES))
                .collect::<Vec<_>>()
        };
        Ok(CouplingReport {
            samples: self.samples,
            c0: self.c0,
            c1: self.c1,
            c: self.c,
            max_increment_deviation: self.max_dev,
            bound_violations: self.violations,
            equality_failures: self.eq_fail,
            path_bound_violations: self.path_violations,
            bernoulli,
            max_flag_gff_correlation: max_corr,
            leaf_diff_quantiles: pairs(&self.leaf_diff),
            max_diff_quantiles: pairs(&self.max_diff),
            tau_histogram: self.tau_hist,
            dg_leaf_histogram: self.dg_hist.into_iter().collect(),
        })
    }
}

/// Aggregated diagnostics over coupled samples (at least 100).
pub fn coupling_report(ctx: &CouplingContext, samples: &[CoupledSample]) -> Result<CouplingReport> {
    if samples.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "coupling report needs >= 100 samples, got {}",
            samples.len()
        )));
    }
    let mut acc = CouplingAccumulator::new(ctx);
    for s in samples {
        acc.add(s);
    }
    acc.finish()
}

const MAP_MAGIC: &[u8; 8] = b"HDGQMAP1";

fn read_map(path: &Path) -> Option<QuantileMap> {
    let bytes = fs::read(path).ok()?;
    if bytes.len() < 8 + 8 * 5 || &bytes[..8] != MAP_MAGIC {
        return None;
    }
    let f = |i: usize| f64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
    let len = f(0) as usize;
    if bytes.len() != 8 + 8 * (5 + len) {
        return None;
    }
    Some(QuantileMap {
        t0: f(1),
        dt: f(2),
        sigma: f(3),
        bound: f(4),
        h: (0..len).map(|i| f(5 + i)).collect(),
        observed: 0.0,
    })
    .map(|mut m| {
        m.observed = m.grid().map(|(t, h)| (h - t).abs()).fold(0.0, f64::max);
        m
    })
}

fn write_map(path: &Path, m: &QuantileMap) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::with_capacity(8 + 8 * (5 + m.h.len()));
    buf.extend_from_slice(MAP_MAGIC);
    for v in [m.h.len() as f64, m.t0, m.dt, m.sigma, m.bound].into_iter().chain(m.h.iter().copied()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_map() {
        let m = build_quantile_map(&|t| (0.3 * t).sin(), &|t| (0.3 * t).sin(), 1.0, (-9.0, 9.0)).unwrap();
        for (t, h) in m.grid() {
            assert!((h - t).abs() < 1e-10, "t={t} h={h}");
        }
        let flat = build_quantile_map(&|_| 0.0, &|_| 0.0, 1.0, (-9.0, 9.0)).unwrap();
        assert!(flat.bound < 1e-12 && flat.observed < 1e-10);
    }

    #[test]
    fn gaussian_shift_map() {
        let (mu, sigma) = (0.7, 0.5);
        let f2 = |t: f64| mu * t / (sigma * sigma) - mu * mu / (2.0 * sigma * sigma);
        let m = build_quantile_map(&|_| 0.0, &f2, sigma, (-5.0, 5.0)).unwrap();
        for (t, h) in m.grid() {
            assert!((h - t - mu).abs() < 1e-9, "t={t} h={h}");
        }
        assert!((m.apply(0.123) - 0.123 - mu).abs() < 1e-7);
        assert!(m.observed <= m.bound);
    }

    #[test]
    fn threshold_symmetry_at_integer_parent() {
        let k = DiscreteKernel::new(5.0);
        let sigma = 5f64.powf(-0.5);
        let (lo, a) = discrete_thresholds(&k, sigma, 0.0);
        // a[i] = a_k with k = lo + 1 + i, and a_k = −a_{1−k}
        for (i, &ak) in a.iter().enumerate() {
            let kk = lo + 1 + i as i64;
            let mirror = 1 - kk;
            let mi = mirror - lo - 1;
            if mi >= 0 && (mi as usize) < a.len() {
                assert!((ak + a[mi as usize]).abs() < 1e-9, "k={kk}");
            }
        }
        for w in a.windows(2) {
            assert!(w[1] > w[0]);
        }
        let c0 = discrete_threshold_bound(&k, 32);
        assert!(c0 >= 1.0 && c0 < 2.0);
        assert!(discrete_threshold_bound(&k, 1024) >= c0 - 1e-12);
    }

    #[test]
    fn discrete_step_respects_thresholds() {
        let p = ModelParams::from_ratio(2, 0.5).unwrap();
        let table = PotentialTable::dg(&p, 2).unwrap();
        let ctx = CouplingContext::new(&table).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..20_000 {
            let phi = (i as f64 * 0.618).sin() * 3.0;
            let s = couple_discrete_step(&ctx, phi, &mut rng);
            assert!((s.xi_dg - s.xi_gff).abs() <= ctx.c0 + 1e-12);
            assert_eq!((phi + s.xi_dg).round(), s.lattice as f64);
        }
    }

    #[test]
    fn refuses_critical() {
        let p = ModelParams::from_ratio(2, 1.0).unwrap();
        let table = PotentialTable::dg(&p, 2).unwrap();
        assert!(matches!(CouplingContext::new(&table), Err(Error::Regime(_))));
    }

    #[test]
    fn continuous_step_contract() {
        let p = make_params(2, 14.0).unwrap();
        let table = PotentialTable::dg(&p, 3).unwrap();
        let ctx = CouplingContext::new(&table).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for j in 1..=3 {
            let sup_f = (table.r[j] / 2.0).exp();
            let bound = continuous_step_bound(p.beta, table.r[j], sup_f);
            assert!(bound <= ctx.c1 + 1e-12);
            for i in 0..5_000 {
                let phi = i as f64 * 0.37;
                let s = couple_continuous_step(&ctx, j, phi, &mut rng).unwrap();
                if s.flag {
                    assert_eq!(s.xi_dg.to_bits(), s.xi_gff.to_bits());
                }
                assert!((s.xi_dg - s.xi_gff).abs() <= bound, "j={j}");
            }
        }
        let sens = ctx.bin_sensitivity(1, 0.123, &[-0.5, 0.0, 0.4]).unwrap();
        assert!(sens < 1e-3, "{sens}");
    }

    #[test]
    fn map_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = make_params(2, 14.0).unwrap();
        let table = PotentialTable::dg(&p, 2).unwrap();
        let ctx = CouplingContext::new(&table).unwrap().with_cache_dir(Some(dir.path().to_path_buf()));
        let a = ctx.residual_map_apply(1, 0.5, 0.3).unwrap();
        assert!(fs::read_dir(dir.path()).unwrap().count() >= 1);
        let ctx2 = CouplingContext::new(&table).unwrap().with_cache_dir(Some(dir.path().to_path_buf()));
        assert_eq!(a, ctx2.residual_map_apply(1, 0.5, 0.3).unwrap());
    }

    #[test]
    fn coupled_fields_structure() {
        let p = make_params(2, 14.0).unwrap();
        let table = PotentialTable::dg(&p, 5).unwrap();
        let ctx = CouplingContext::new(&table).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<_> = (0..200).map(|_| couple_fields(&ctx, 5, &mut rng).unwrap()).collect();
        let rep = coupling_report(&ctx, &samples).unwrap();
        assert_eq!(rep.bound_violations, 0);
        assert_eq!(rep.equality_failures, 0);
        assert_eq!(rep.path_bound_violations, 0);
        assert_eq!(rep.tau_histogram.iter().sum::<u64>(), 200 * 32);
        for s in &samples {
            assert!(s.dg.iter().all(|v| v.fract() == 0.0));
        }
        assert!(coupling_report(&ctx, &samples[..10]).is_err());
    }
}

//! Exact top-down sampling of the Gaussian free field and the Discrete Gaussian model
//! on the leaves of the `b`-ary tree.
//!
//! Tree level `ℓ = 0..=n` holds `b^ℓ` increments. Level `ℓ` of a depth-`n` field uses the
//! kernel of scale `j = n − ℓ`: continuous kernels for `j ≥ 1` and the lattice kernel at
//! `j = 0`. The root increment is drawn given a zero parent value.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{laplacian_matrix, ModelParams};
use crate::rg::PotentialTable;
use crate::stats::norm_sf;

/// Proposal budget of one continuous-kernel draw.
pub const REJECTION_LIMIT: u64 = 1_000_000;
/// Largest state space enumerated by [`dg_exact_small`].
pub const EXACT_LIMIT: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Gff,
    Dg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub kind: FieldKind,
    pub b: usize,
    pub n: usize,
    /// Leaf values in lexicographic order. Discrete Gaussian leaves are exact integers.
    pub values: Vec<f64>,
    /// `increments[ℓ][i]`: the increment at vertex `i` of tree level `ℓ`, when retained.
    pub increments: Option<Vec<Vec<f64>>>,
}

impl FieldSample {
    /// Leaf values rebuilt from the increments by top-down partial sums.
    pub fn reconstruct(&self) -> Option<Vec<f64>> {
        let inc = self.increments.as_ref()?;
        let mut prev = vec![0.0];
        for (l, level) in inc.iter().enumerate() {
            prev = level
                .iter()
                .enumerate()
                .map(|(i, z)| if l == 0 { prev[0] + z } else { prev[i / self.b] + z })
                .collect();
        }
        Some(prev)
    }

    /// Maximum and the first leaf index attaining it.
    pub fn argmax(&self) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, &v) in self.values.iter().enumerate() {
            if v > best.0 {
                best = (v, i);
            }
        }
        best
    }

    pub fn integer_values(&self) -> Option<Vec<i64>> {
        match self.kind {
            FieldKind::Dg => Some(self.values.iter().map(|&v| v as i64).collect()),
            FieldKind::Gff => None,
        }
    }
}

/// Per-scale proposal and acceptance counts of the continuous kernels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub draws: Vec<u64>,
    pub accepts: Vec<u64>,
}

impl KernelStats {
    fn bump(&mut self, j: usize, draws: u64) {
        if self.draws.len() <= j {
            self.draws.resize(j + 1, 0);
            self.accepts.resize(j + 1, 0);
        }
        self.draws[j] += draws;
        self.accepts[j] += 1;
    }

    pub fn merge(&mut self, other: &KernelStats) {
        for (j, (&d, &a)) in other.draws.iter().zip(&other.accepts).enumerate() {
            if self.draws.len() <= j {
                self.draws.resize(j + 1, 0);
                self.accepts.resize(j + 1, 0);
            }
            self.draws[j] += d;
            self.accepts[j] += a;
        }
    }

    pub fn acceptance(&self, j: usize) -> Option<f64> {
        let d = *self.draws.get(j)?;
        (d > 0).then(|| self.accepts[j] as f64 / d as f64)
    }
}

/// The lattice kernel `P(φ + ζ = m) ∝ e^{−β(m−φ)²/2}` restricted to a window around `round(φ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteKernel {
    pub beta: f64,
    /// Half-width of the window.
    pub w: i64,
    e_neg_beta: f64,
}

impl DiscreteKernel {
    pub fn new(beta: f64) -> Self {
        let sb = beta.sqrt();
        let mut w = 1i64;
        while 2.0 * norm_sf(sb * (w - 1) as f64) >= 1e-15 {
            w += 1;
        }
        Self {
            beta,
            w,
            e_neg_beta: (-beta).exp(),
        }
    }

    /// Lowest lattice point of the window and the unnormalized weights (peak weight 1).
    pub fn weights(&self, phi: f64) -> (i64, Vec<f64>) {
        let r = phi.round();
        let lo = r as i64 - self.w;
        let len = (2 * self.w + 1) as usize;
        let mut w = vec![0.0; len];
        let mid = self.w as usize;
        w[mid] = 1.0;
        let d = r - phi;
        if self.beta <= 50.0 {
            // w_{m+1}/w_m = e^{−β(m − φ + 1/2)}, a geometric sequence in m
            let mut rho = (-self.beta * (d + 0.5)).exp();
            for i in mid + 1..len {
                w[i] = w[i - 1] * rho;
                rho *= self.e_neg_beta;
            }
            let mut rho = (-self.beta * (d - 0.5)).exp();
            for i in (0..mid).rev() {
                w[i] = w[i + 1] / rho;
                rho /= self.e_neg_beta;
            }
        } else {
            for (i, slot) in w.iter_mut().enumerate() {
                let x = (lo + i as i64) as f64 - phi;
                *slot = (-0.5 * self.beta * (x * x - d * d)).exp();
            }
        }
        (lo, w)
    }

    /// Lattice point `m = φ + ζ` by inverse CDF over the window.
    pub fn sample<R: Rng + ?Sized>(&self, phi: f64, rng: &mut R) -> i64 {
        let (lo, w) = self.weights(phi);
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, &wi) in w.iter().enumerate() {
            u -= wi;
            if u < 0.0 {
                return lo + i as i64;
            }
        }
        lo + w.iter().rposition(|&x| x > 0.0).unwrap_or(0) as i64
    }
}

/// Sampling context over a potential table: continuous kernels by rejection from
/// `N(0, 1/β)` with envelope `e^{R_j/2}`, and the windowed lattice kernel.
#[derive(Debug, Clone)]
pub struct KernelContext<'a> {
    pub table: &'a PotentialTable,
    pub discrete: DiscreteKernel,
    pub sigma: f64,
    pub stats: KernelStats,
}

impl<'a> KernelContext<'a> {
    pub fn new(table: &'a PotentialTable) -> Self {
        Self {
            table,
            discrete: DiscreteKernel::new(table.params.beta),
            sigma: table.params.sigma(),
            stats: KernelStats::default(),
        }
    }

    /// `−log a_j(0)/a_{j−1}(0)^b − log P_j(φ)`: the part of `log f` fixed by the parent value.
    pub fn parent_offset(&self, j: usize, phi: f64) -> f64 {
        -self.table.log_norm(j) - self.table.eval(j).ln_p(phi)
    }

    /// `log f(ζ) = v_j(φ) − b v_{j−1}(φ + ζ)`, the log-density of `q_j(·|φ)` against `N(0, 1/β)`.
    pub fn log_density(&self, j: usize, phi: f64, zeta: f64) -> f64 {
        self.table.step_log_density(j, phi, zeta)
    }

    fn draw_continuous<R: Rng + ?Sized>(&mut self, j: usize, phi: f64, offset: f64, rng: &mut R) -> Result<f64> {
        let half = self.table.gaps[j - 1];
        let b = self.table.params.b as f64;
        let eval = self.table.eval(j - 1);
        for t in 1..=REJECTION_LIMIT {
            let g: f64 = rng.sample(StandardNormal);
            let zeta = self.sigma * g;
            let lu = rng.random::<f64>().ln();
            // log f ≥ −R_j/2, so this acceptance needs no density evaluation
            if lu <= -2.0 * half || lu <= b * eval.ln_p(phi + zeta) + offset - half {
                self.stats.bump(j, t);
                return Ok(zeta);
            }
        }
        Err(Error::RejectionLimit(REJECTION_LIMIT))
    }
}

fn check_scale(ctx: &KernelContext, j: usize) -> Result<()> {
    if j == 0 {
        return Err(invalid("k", "continuous kernels start at scale 1"));
    }
    if j > ctx.table.depth() {
        return Err(Error::MissingLevel {
            need: j,
            have: ctx.table.depth(),
        });
    }
    Ok(())
}

/// One draw from `q_j(dζ|φ) = e^{v_j(φ) − b v_{j−1}(φ+ζ)} g_{1/β}(dζ)`, `j ≥ 1`.
pub fn sample_kernel_continuous<R: Rng + ?Sized>(
    ctx: &mut KernelContext,
    j: usize,
    phi: f64,
    rng: &mut R,
) -> Result<f64> {
    check_scale(ctx, j)?;
    let offset = ctx.parent_offset(j, phi);
    ctx.draw_continuous(j, phi, offset, rng)
}

/// One draw of `ζ` with `φ + ζ ∈ ℤ` from the lattice kernel.
pub fn sample_kernel_discrete<R: Rng + ?Sized>(ctx: &KernelContext, phi: f64, rng: &mut R) -> f64 {
    ctx.discrete.sample(phi, rng) as f64 - phi
}

/// Branching random walk with `N(0, 1/β)` increments at every tree level `0..=n`.
pub fn sample_gff<R: Rng + ?Sized>(params: &ModelParams, n: usize, rng: &mut R, keep_increments: bool) -> FieldSample {
    let b = params.b;
    let sigma = params.sigma();
    let mut prev = vec![0.0];
    let mut kept = keep_increments.then(Vec::new);
    for l in 0..=n {
        let size = b.pow(l as u32);
        let mut inc = Vec::with_capacity(size);
        let mut cur = Vec::with_capacity(size);
        for i in 0..size {
            let g: f64 = rng.sample(StandardNormal);
            let z = sigma * g;
            let parent = if l == 0 { 0.0 } else { prev[i / b] };
            cur.push(parent + z);
            if kept.is_some() {
                inc.push(z);
            }
        }
        if let Some(k) = kept.as_mut() {
            k.push(inc);
        }
        prev = cur;
    }
    FieldSample {
        kind: FieldKind::Gff,
        b,
        n,
        values: prev,
        increments: kept,
    }
}

/// Exact sample of the Discrete Gaussian model on `Λ_n`; the table must reach level `n`.
pub fn sample_dg<R: Rng + ?Sized>(
    ctx: &mut KernelContext,
    n: usize,
    rng: &mut R,
    keep_increments: bool,
) -> Result<FieldSample> {
    if ctx.table.depth() < n {
        return Err(Error::MissingLevel {
            need: n,
            have: ctx.table.depth(),
        });
    }
    let b = ctx.table.params.b;
    let mut prev = vec![0.0];
    let mut kept = keep_increments.then(Vec::new);
    for l in 0..=n {
        let j = n - l;
        let (parents, fan) = if l == 0 { (1, 1) } else { (prev.len(), b) };
        let mut cur = Vec::with_capacity(parents * fan);
        let mut inc = Vec::new();
        for &phi in prev.iter().take(parents) {
            if j >= 1 {
                let offset = ctx.parent_offset(j, phi);
                for _ in 0..fan {
                    let z = ctx.draw_continuous(j, phi, offset, rng)?;
                    cur.push(phi + z);
                    if kept.is_some() {
                        inc.push(z);
                    }
                }
            } else {
                for _ in 0..fan {
                    let m = ctx.discrete.sample(phi, rng) as f64;
                    cur.push(m);
                    if kept.is_some() {
                        inc.push(m - phi);
                    }
                }
            }
        }
        if let Some(k) = kept.as_mut() {
            k.push(inc);
        }
        prev = cur;
    }
    Ok(FieldSample {
        kind: FieldKind::Dg,
        b,
        n,
        values: prev,
        increments: kept,
    })
}

/// Brute-force Gibbs law `∝ e^{(β/2)(φ, Δ_n φ)}` on `{−L..L}^{Λ_n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactLaw {
    pub states: Vec<Vec<i32>>,
    pub probs: Vec<f64>,
    /// Gaussian-domination estimate of the mass outside the box.
    pub tail_bound: f64,
}

impl ExactLaw {
    pub fn as_map(&self) -> HashMap<Vec<i32>, f64> {
        self.states.iter().cloned().zip(self.probs.iter().copied()).collect()
    }

    /// Law of the value at one site.
    pub fn marginal(&self, site: usize) -> HashMap<i32, f64> {
        let mut m = HashMap::new();
        for (s, &p) in self.states.iter().zip(&self.probs) {
            *m.entry(s[site]).or_insert(0.0) += p;
        }
        m
    }
}

pub fn dg_exact_small(params: &ModelParams, n: usize, l: i32) -> Result<ExactLaw> {
    if l < 0 {
        return Err(invalid("L", "box half-width must be non-negative"));
    }
    let sites = params.b.pow(n as u32);
    let side = (2 * l + 1) as u64;
    let count = (0..sites).try_fold(1u64, |acc, _| acc.checked_mul(side).filter(|&c| c <= EXACT_LIMIT));
    let count = count.ok_or(Error::SizeGuard {
        size: usize::MAX,
        limit: EXACT_LIMIT as usize,
    })?;
    let lap = laplacian_matrix(params, n)?;
    let half_beta = 0.5 * params.beta;
    let mut states = Vec::with_capacity(count as usize);
    let mut logw = Vec::with_capacity(count as usize);
    let mut phi = vec![-l; sites];
    for _ in 0..count {
        let mut q = 0.0;
        for i in 0..sites {
            let mut row = 0.0;
            for j in 0..sites {
                row += lap[(i, j)] * phi[j] as f64;
            }
            q += phi[i] as f64 * row;
        }
        states.push(phi.clone());
        logw.push(half_beta * q);
        for slot in phi.iter_mut().rev() {
            if *slot < l {
                *slot += 1;
                break;
            }
            *slot = -l;
        }
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let var = (n + 1) as f64 / params.beta;
    Ok(ExactLaw {
        states,
        probs: w.iter().map(|x| x / total).collect(),
        tail_bound: sites as f64 * 2.0 * (-(l as f64).powi(2) / (2.0 * var)).exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_params;
    use crate::stats::total_variation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_width() {
        assert_eq!(DiscreteKernel::new(14.0).w, 4);
        assert_eq!(DiscreteKernel::new(1.0).w, 10);
        let k = DiscreteKernel::new(5.0);
        // the window loses less than 1e−15 of the mass of a wide reference window
        for phi in [0.0, 0.3, 0.5, -2.7] {
            let (_, w) = k.weights(phi);
            let r: f64 = phi.round();
            let wide: f64 = (-60..=60)
                .map(|d| {
                    let x = r + d as f64 - phi;
                    (-2.5 * (x * x - (r - phi).powi(2))).exp()
                })
                .sum();
            assert!(1.0 - w.iter().sum::<f64>() / wide < 1e-15);
        }
    }

    #[test]
    fn discrete_weights_recurrence_matches_direct() {
        for beta in [0.5, 5.0, 14.0, 49.0, 80.0] {
            let k = DiscreteKernel::new(beta);
            for phi in [0.0, 0.25, 0.5, 1.49, -3.2] {
                let (lo, w) = k.weights(phi);
                let d = phi.round() - phi;
                for (i, &wi) in w.iter().enumerate() {
                    let x = (lo + i as i64) as f64 - phi;
                    let direct = (-0.5 * beta * (x * x - d * d)).exp();
                    assert!((wi - direct).abs() <= 1e-13 * direct.max(1e-300), "beta={beta} phi={phi}");
                }
            }
        }
    }

    #[test]
    fn discrete_half_integer_symmetric() {
        let k = DiscreteKernel::new(5.0);
        let (lo, w) = k.weights(0.5);
        let p = |m: i64| w[(m - lo) as usize];
        assert!((p(1) - p(0)).abs() < 1e-15);
        assert!((p(2) - p(-1)).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..10_000).filter(|_| DiscreteKernel::new(200.0).sample(0.0, &mut rng) == 0).count();
        assert_eq!(hits, 10_000);
    }

    #[test]
    fn gff_is_deterministic_and_reconstructs() {
        let p = make_params(2, 3.0).unwrap();
        let a = sample_gff(&p, 5, &mut ChaCha8Rng::seed_from_u64(9), true);
        let b = sample_gff(&p, 5, &mut ChaCha8Rng::seed_from_u64(9), true);
        assert_eq!(a, b);
        assert_eq!(a.reconstruct().unwrap(), a.values);
        assert_eq!(a.values.len(), 32);
    }

    #[test]
    fn dg_leaves_are_integers_and_reconstruct() {
        let p = make_params(3, 5.0).unwrap();
        let table = PotentialTable::dg(&p, 4).unwrap();
        let mut ctx = KernelContext::new(&table);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = sample_dg(&mut ctx, 4, &mut rng, true).unwrap();
            assert!(s.values.iter().all(|v| v.fract() == 0.0));
            let rec = s.reconstruct().unwrap();
            for (a, b) in rec.iter().zip(&s.values) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(matches!(
            sample_dg(&mut ctx, 5, &mut rng, false),
            Err(Error::MissingLevel { .. })
        ));
    }

    #[test]
    fn exact_law_basics() {
        let p = make_params(2, 5.0).unwrap();
        let law = dg_exact_small(&p, 1, 6).unwrap();
        let map = law.as_map();
        let (mode, _) = law
            .states
            .iter()
            .zip(&law.probs)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert_eq!(mode, &vec![0, 0]);
        for (s, &pr) in &map {
            let neg: Vec<i32> = s.iter().map(|x| -x).collect();
            assert!((map[&neg] - pr).abs() < 1e-15);
        }
        assert!(law.tail_bound < 1e-10);
        let big = make_params(2, 5.0).unwrap();
        assert!(matches!(dg_exact_small(&big, 3, 6), Err(Error::SizeGuard { .. })));
    }

    #[test]
    fn continuous_kernel_acceptance_and_normalization() {
        let p = ModelParams::from_ratio(2, 0.5).unwrap();
        let table = PotentialTable::dg(&p, 3).unwrap();
        let mut ctx = KernelContext::new(&table);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let phi = 0.3;
        for j in 1..=3 {
            let reps = 200_000;
            for _ in 0..reps {
                sample_kernel_continuous(&mut ctx, j, phi, &mut rng).unwrap();
            }
            let acc = ctx.stats.acceptance(j).unwrap();
            let expect = (-table.r[j] / 2.0).exp();
            let sd = (expect * expect * (1.0 - expect) / reps as f64).sqrt();
            assert!((acc - expect).abs() <= 5.0 * sd + 1e-12, "j={j} acc={acc} expect={expect}");
            // E_gauss[f] = 1
            let m = 400_000;
            let mean: f64 = (0..m)
                .map(|_| {
                    let g: f64 = rng.sample(StandardNormal);
                    ctx.log_density(j, phi, ctx.sigma * g).exp()
                })
                .sum::<f64>()
                / m as f64;
            assert!((mean - 1.0).abs() < 0.01, "j={j} mean={mean}");
        }
    }

    #[test]
    fn dg_n1_matches_exact_law() {
        let p = make_params(2, 5.0).unwrap();
        let table = PotentialTable::dg(&p, 1).unwrap();
        let mut ctx = KernelContext::new(&table);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps = 200_000;
        let mut counts: HashMap<Vec<i32>, u64> = HashMap::new();
        for _ in 0..reps {
            let s = sample_dg(&mut ctx, 1, &mut rng, false).unwrap();
            *counts.entry(s.values.iter().map(|&v| v as i32).collect()).or_default() += 1;
        }
        let emp = crate::stats::normalize_counts(&counts);
        let tv = total_variation(&emp, &dg_exact_small(&p, 1, 6).unwrap().as_map());
        assert!(tv < 0.01, "tv={tv}");
    }
}

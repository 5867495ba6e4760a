//! Hierarchical lattice geometry and the linear algebra of hierarchical operators.
//!
//! The dense-matrix routines here exist to validate operator identities on small
//! lattices; sampling never builds a matrix.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative tolerance on `b·θ − 1` used to classify the critical point.
pub const REGIME_EPS: f64 = 1e-12;

/// Largest lattice (`b^n` sites) accepted by the dense routines.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Subcritical,
    Critical,
    Supercritical,
}

/// Branching factor, inverse temperature and the constants derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub b: usize,
    pub beta: f64,
    pub beta_c: f64,
    pub theta: f64,
    pub alpha: f64,
    pub regime: Regime,
}

impl ModelParams {
    pub fn new(b: usize, beta: f64) -> Result<Self> {
        if b < 2 {
            return Err(invalid("b", format!("branching factor must be >= 2, got {b}")));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(invalid("beta", format!("inverse temperature must be positive, got {beta}")));
        }
        let log_b = (b as f64).ln();
        let theta = (-2.0 * PI * PI / beta).exp();
        let b_theta = b as f64 * theta;
        let regime = if (b_theta - 1.0).abs() <= REGIME_EPS {
            Regime::Critical
        } else if b_theta < 1.0 {
            Regime::Subcritical
        } else {
            Regime::Supercritical
        };
        Ok(Self {
            b,
            beta,
            beta_c: 2.0 * PI * PI / log_b,
            theta,
            alpha: (2.0 * log_b).sqrt(),
            regime,
        })
    }

    /// Parameters at `beta = ratio · beta_c`.
    pub fn from_ratio(b: usize, ratio: f64) -> Result<Self> {
        if b < 2 {
            return Err(invalid("b", format!("branching factor must be >= 2, got {b}")));
        }
        if !(ratio > 0.0) {
            return Err(invalid("beta_ratio", format!("must be positive, got {ratio}")));
        }
        let beta_c = 2.0 * PI * PI / (b as f64).ln();
        let mut p = Self::new(b, ratio * beta_c)?;
        if ratio == 1.0 {
            p.regime = Regime::Critical;
        }
        Ok(p)
    }

    /// Overrides the classified regime.
    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = regime;
        self
    }

    pub fn b_theta(&self) -> f64 {
        self.b as f64 * self.theta
    }

    /// `2π²/β`, i.e. `−log θ`, kept separately so that `θ^{n²}` never underflows.
    pub fn neg_log_theta(&self) -> f64 {
        2.0 * PI * PI / self.beta
    }

    pub fn sigma(&self) -> f64 {
        self.beta.powf(-0.5)
    }
}

pub fn make_params(b: usize, beta: f64) -> Result<ModelParams> {
    ModelParams::new(b, beta)
}

/// A leaf or internal vertex of the `b`-ary tree, as a digit string in `{1..b}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vertex {
    pub digits: Vec<u32>,
}

impl Vertex {
    pub fn new(b: usize, digits: Vec<u32>) -> Result<Self> {
        if let Some(d) = digits.iter().find(|&&d| d == 0 || d as usize > b) {
            return Err(invalid("digits", format!("digit {d} outside 1..={b}")));
        }
        Ok(Self { digits })
    }

    pub fn root() -> Self {
        Self { digits: Vec::new() }
    }

    pub fn depth(&self) -> usize {
        self.digits.len()
    }

    /// Vertex with lexicographic index `index` among the `b^n` vertices of depth `n`.
    pub fn from_index(b: usize, n: usize, mut index: usize) -> Self {
        let mut digits = vec![0u32; n];
        for slot in digits.iter_mut().rev() {
            *slot = (index % b) as u32 + 1;
            index /= b;
        }
        Self { digits }
    }

    pub fn index(&self, b: usize) -> usize {
        self.digits
            .iter()
            .fold(0usize, |acc, &d| acc * b + (d as usize - 1))
    }

    /// The ancestor `m(x)`: drop the last digit.
    pub fn parent(&self) -> Option<Self> {
        if self.digits.is_empty() {
            None
        } else {
            Some(Self {
                digits: self.digits[..self.digits.len() - 1].to_vec(),
            })
        }
    }

    /// `m^j(x)`.
    pub fn ancestor(&self, j: usize) -> Self {
        let keep = self.digits.len().saturating_sub(j);
        Self {
            digits: self.digits[..keep].to_vec(),
        }
    }
}

/// Ultrametric distance: the smallest `j` such that `x` and `y` agree on their first `n − j` digits.
/// Equal vertices are at distance zero.
pub fn hierarchical_distance(x: &Vertex, y: &Vertex) -> Result<usize> {
    if x.depth() != y.depth() {
        return Err(Error::DepthMismatch(x.depth(), y.depth()));
    }
    Ok(distance_unchecked(&x.digits, &y.digits))
}

fn distance_unchecked(x: &[u32], y: &[u32]) -> usize {
    let common = x.iter().zip(y).take_while(|(a, b)| a == b).count();
    x.len() - common
}

/// Distance between leaves given by lexicographic index.
pub fn index_distance(b: usize, mut i: usize, mut j: usize, n: usize) -> usize {
    let mut d = 0;
    while i != j {
        i /= b;
        j /= b;
        d += 1;
    }
    debug_assert!(d <= n);
    d
}

/// Position `[x]_n = Σ (x_i − 1) b^{−i}` in `[0, 1)`.
pub fn embed(b: usize, x: &Vertex) -> f64 {
    let inv_b = 1.0 / b as f64;
    let mut scale = inv_b;
    let mut sum = 0.0;
    for &d in &x.digits {
        sum += (d as f64 - 1.0) * scale;
        scale *= inv_b;
    }
    sum
}

/// Embedded position of the leaf with lexicographic index `index` at depth `n`.
pub fn embed_index(b: usize, n: usize, index: usize) -> f64 {
    index as f64 / (b as f64).powi(n as i32)
}

fn lattice_size(b: usize, n: usize) -> Result<usize> {
    let mut size = 1usize;
    for _ in 0..n {
        size = size.saturating_mul(b);
        if size > DENSE_LIMIT {
            return Err(Error::SizeGuard {
                size,
                limit: DENSE_LIMIT,
            });
        }
    }
    Ok(size)
}

/// `Σ_{j=0}^{k} b^j`.
fn geometric_sum(b: usize, k: usize) -> f64 {
    (0..=k).map(|j| (b as f64).powi(j as i32)).sum()
}

/// Dense hierarchical Laplacian `Δ_n` on `ℓ²(Λ_n)` in lexicographic leaf order.
pub fn laplacian_matrix(params: &ModelParams, n: usize) -> Result<DMatrix<f64>> {
    let lambda = lambda_canonical(params, n, 1.0)?;
    hierarchical_operator(params.b, n, &lambda.values)
}

/// The operator `L_n` built from its ball-sum definition for an arbitrary positive λ-sequence.
pub fn hierarchical_operator(b: usize, n: usize, lambda: &[f64]) -> Result<DMatrix<f64>> {
    if lambda.len() != n + 1 {
        return Err(invalid(
            "lambda",
            format!("expected {} values, got {}", n + 1, lambda.len()),
        ));
    }
    if lambda.iter().any(|&l| !(l > 0.0)) {
        return Err(invalid("lambda", "entries must be positive"));
    }
    let size = lattice_size(b, n)?;
    // weight of the ball of radius k
    let w: Vec<f64> = (1..=n)
        .map(|k| (1.0 / lambda[k - 1] - 1.0 / lambda[k]) / (b as f64).powi(k as i32))
        .collect();
    let mut m = DMatrix::zeros(size, size);
    for i in 0..size {
        for j in 0..size {
            let d = index_distance(b, i, j, n);
            if i == j {
                let diag: f64 = (1..=n)
                    .map(|k| w[k - 1] * (1.0 - (b as f64).powi(k as i32)))
                    .sum();
                m[(i, j)] = diag - 1.0 / lambda[n];
            } else {
                m[(i, j)] = (d..=n).map(|k| w[k - 1]).sum();
            }
        }
    }
    Ok(m)
}

/// Ball-averaging projector `Q_k` (`Q_0 = I`, `Q_{n+1} = 0`).
pub fn averaging_matrix(b: usize, n: usize, k: usize) -> Result<DMatrix<f64>> {
    let size = lattice_size(b, n)?;
    if k == 0 {
        return Ok(DMatrix::identity(size, size));
    }
    if k > n {
        return Ok(DMatrix::zeros(size, size));
    }
    let v = 1.0 / (b as f64).powi(k as i32);
    Ok(DMatrix::from_fn(size, size, |i, j| {
        if index_distance(b, i, j, n) <= k {
            v
        } else {
            0.0
        }
    }))
}

/// `−Σ_k w_k (Q_k − Q_{k+1})` with `w_k = lambda[k]^{power}`.
pub fn spectral_operator(b: usize, n: usize, lambda: &[f64], power: i32) -> Result<DMatrix<f64>> {
    let size = lattice_size(b, n)?;
    let mut acc = DMatrix::zeros(size, size);
    for k in 0..=n {
        let diff = averaging_matrix(b, n, k)? - averaging_matrix(b, n, k + 1)?;
        acc -= diff * lambda[k].powi(power);
    }
    Ok(acc)
}

/// The full Green matrix `−Δ_n^{−1}`, obtained by LU solve.
pub fn green_matrix(params: &ModelParams, n: usize) -> Result<DMatrix<f64>> {
    let lap = laplacian_matrix(params, n)?;
    let size = lap.nrows();
    let neg = -lap;
    neg.lu()
        .solve(&DMatrix::identity(size, size))
        .ok_or_else(|| Error::Singular(format!("−Δ_{n} is singular (b={})", params.b)))
}

/// `(δ_x, −Δ_n^{−1} δ_y)`.
pub fn green_entry(params: &ModelParams, n: usize, x: &Vertex, y: &Vertex) -> Result<f64> {
    if x.depth() != n || y.depth() != n {
        return Err(Error::DepthMismatch(x.depth(), y.depth()));
    }
    let lap = laplacian_matrix(params, n)?;
    let size = lap.nrows();
    let mut rhs = nalgebra::DVector::zeros(size);
    rhs[y.index(params.b)] = 1.0;
    let sol = (-lap)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular(format!("−Δ_{n} is singular (b={})", params.b)))?;
    Ok(sol[x.index(params.b)])
}

/// Scale parameters `λ_0, …, λ_n` of a hierarchical operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSequence {
    pub b: usize,
    pub values: Vec<f64>,
}

/// `λ_k = λ_0 Σ_{j≤k} b^j`: the sequence that makes `L_n` a multiple of `Δ_n`.
pub fn lambda_canonical(params: &ModelParams, n: usize, lambda0: f64) -> Result<LambdaSequence> {
    if !(lambda0 > 0.0) {
        return Err(invalid("lambda0", format!("must be positive, got {lambda0}")));
    }
    Ok(LambdaSequence {
        b: params.b,
        values: (0..=n).map(|k| lambda0 * geometric_sum(params.b, k)).collect(),
    })
}

/// One coarse-graining step of the λ-sequence.
pub fn lambda_renormalize(seq: &LambdaSequence) -> Result<LambdaSequence> {
    let v = &seq.values;
    if v.len() < 2 {
        return Err(invalid("lambda", "need at least two entries"));
    }
    let b = seq.b as f64;
    let mut out = Vec::with_capacity(v.len() - 1);
    out.push((v[1] - v[0]) / b);
    for k in 1..v.len() - 1 {
        let prev = out[k - 1];
        out.push(prev + (v[k + 1] - v[k]) / b);
    }
    if let Some(pos) = out.iter().position(|&l| !(l > 0.0)) {
        return Err(invalid(
            "lambda",
            format!("renormalized λ'_{pos} = {} is not positive", out[pos]),
        ));
    }
    Ok(LambdaSequence {
        b: seq.b,
        values: out,
    })
}

/// Survival function `P(τ > k)` of the maximal height reached between leaf visits,
/// for a tree-symmetric walk with up/down probabilities `p_k`, `b·q_k`.
pub fn tau_survival(b: usize, p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() || p.is_empty() {
        return Err(invalid("p/q", "sequences must be non-empty and of equal length"));
    }
    if q[0] != 0.0 {
        return Err(invalid("q", "q_0 must be 0"));
    }
    for (k, (&pk, &qk)) in p.iter().zip(q).enumerate() {
        if !(pk > 0.0) || qk < 0.0 {
            return Err(invalid("p", format!("p_{k} must be positive and q_{k} non-negative")));
        }
        if (pk + b as f64 * qk - 1.0).abs() > 1e-12 {
            return Err(invalid(
                "p/q",
                format!("p_{k} + b q_{k} = {} != 1", pk + b as f64 * qk),
            ));
        }
    }
    let mut out = Vec::with_capacity(p.len());
    let mut prod = 1.0;
    let mut partial = 0.0;
    for k in 0..p.len() {
        if k > 0 {
            prod *= b as f64 * q[k] / p[k];
        }
        partial += prod;
        out.push(1.0 / partial);
    }
    Ok(out)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ultrametric(b in 2usize..5, n in 1usize..7, seed in any::<u64>()) {
            let size = b.pow(n as u32);
            let i = (seed % size as u64) as usize;
            let j = ((seed / 7) % size as u64) as usize;
            let k = ((seed / 49) % size as u64) as usize;
            let (x, y, z) = (Vertex::from_index(b, n, i), Vertex::from_index(b, n, j), Vertex::from_index(b, n, k));
            let dxy = hierarchical_distance(&x, &y).unwrap();
            let dyz = hierarchical_distance(&y, &z).unwrap();
            let dxz = hierarchical_distance(&x, &z).unwrap();
            prop_assert!(dxz <= dxy.max(dyz));
            prop_assert_eq!(dxy, hierarchical_distance(&y, &x).unwrap());
            prop_assert_eq!(dxy == 0, i == j);
            prop_assert_eq!(dxy, index_distance(b, i, j, n));
        }

        #[test]
        fn canonical_is_renormalization_fixed_point(b in 2usize..6, n in 1usize..10, l0 in 0.01f64..100.0) {
            let p = make_params(b, 1.0).unwrap();
            let seq = lambda_canonical(&p, n, l0).unwrap();
            let r = lambda_renormalize(&seq).unwrap();
            for (a, c) in r.values.iter().zip(&seq.values) {
                prop_assert!((a - c).abs() <= 1e-12 * c.abs());
            }
        }

        #[test]
        fn tau_survival_monotone(raw in proptest::collection::vec(0.05f64..0.95, 1..12), b in 2usize..5) {
            let mut p = vec![1.0];
            let mut q = vec![0.0];
            for r in raw {
                p.push(r);
                q.push((1.0 - r) / b as f64);
            }
            let s = tau_survival(b, &p, &q).unwrap();
            prop_assert_eq!(s[0], 1.0);
            for w in s.windows(2) {
                prop_assert!(w[1] <= w[0] && w[1] > 0.0);
            }
        }
    }
}

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::runner::{flow_summary, parallel_map, BATCH};
use super::seed::{depth_tag, seed_stream, TAG_VALIDATE};
use crate::coupling::{couple_fields, CouplingAccumulator, CouplingContext};
use crate::error::Result;
use crate::extremes::centering;
use crate::model::{green_matrix, index_distance, ModelParams};
use crate::rg::{poisson_residual, PotentialTable};
use crate::sampler::{dg_exact_small, sample_dg, sample_gff, KernelContext};
use crate::stats::{chi_square_sf, mean_var, total_variation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// `max |(δ_x, −Δ_n^{−1} δ_y) − (n + 1 − d(x, y))|` over all leaf pairs.
pub fn green_identity_error(b: usize, n: usize) -> Result<f64> {
    let g = green_matrix(&ModelParams::new(b, 1.0)?, n)?;
    let mut worst: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let d = index_distance(b, i, j, n);
            worst = worst.max((g[(i, j)] - (n + 1 - d) as f64).abs());
        }
    }
    Ok(worst)
}

/// 101 equally spaced points of `[0, 1]`.
pub fn poisson_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub reps: u64,
    pub tv: f64,
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Mass of the exact law outside the enumeration box (estimate).
    pub box_tail: f64,
}

/// Empirical joint law of `reps` exact DG samples against brute-force enumeration on
/// `{−L..L}^{Λ_n}`. Cells with expected count below 5 are pooled for the chi-square test.
pub fn compare_with_oracle(
    params: &ModelParams,
    n: usize,
    l: i32,
    reps: u64,
    seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<OracleComparison> {
    let exact = dg_exact_small(params, n, l)?;
    let table = PotentialTable::dg(params, n)?;
    let tag = depth_tag(TAG_VALIDATE, n) ^ (params.b as u64) << 16;
    let mut counts: HashMap<Vec<i32>, u64> = HashMap::new();
    let mut start = 0;
    while start < reps {
        let end = (start + 16 * BATCH).min(reps);
        let states = parallel_map(pool, start..end, |r| {
            let mut rng = seed_stream(seed, r, tag);
            let mut ctx = KernelContext::new(&table);
            let s = sample_dg(&mut ctx, n, &mut rng, false)?;
            Ok(s.values.iter().map(|&v| v as i32).collect::<Vec<i32>>())
        })?;
        for s in states {
            *counts.entry(s).or_default() += 1;
        }
        start = end;
    }
    let total = reps as f64;
    let empirical: HashMap<Vec<i32>, f64> = counts.iter().map(|(k, &c)| (k.clone(), c as f64 / total)).collect();
    let tv = total_variation(&empirical, &exact.as_map());
    let (mut chi, mut cells) = (0.0, 0usize);
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    let mut seen = 0u64;
    for (s, &p) in exact.states.iter().zip(&exact.probs) {
        let o = counts.get(s).copied().unwrap_or(0);
        seen += o;
        let e = p * total;
        if e >= 5.0 {
            chi += (o as f64 - e).powi(2) / e;
            cells += 1;
        } else {
            pooled_obs += o as f64;
            pooled_exp += e;
        }
    }
    pooled_obs += (reps - seen) as f64;
    if pooled_exp > 0.0 {
        chi += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        cells += 1;
    }
    let dof = cells.saturating_sub(1).max(1);
    Ok(OracleComparison {
        reps,
        tv,
        chi_square: chi,
        dof,
        p_value: chi_square_sf(chi, dof as f64),
        box_tail: exact.tail_bound,
    })
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let r = CheckResult {
        name: name.into(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    };
    if r.passed {
        log::info!("{}: ok ({})", r.name, r.detail);
    } else {
        log::error!("{}: FAILED ({})", r.name, r.detail);
    }
    r
}

/// Oracle and invariant checks; `quick` shrinks sizes and replicate counts.
pub fn validate_suite(quick: bool, seed: u64, pool: &rayon::ThreadPool) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let max_n = if quick { 3 } else { 4 };
    out.push(timed("green-identity", || {
        let mut worst: f64 = 0.0;
        for b in [2, 3] {
            for n in 1..=max_n {
                worst = worst.max(green_identity_error(b, n)?);
            }
        }
        Ok((worst <= 1e-9, format!("max error {worst:.3e}")))
    }));
    out.push(timed("poisson-summation", || {
        let zs = poisson_grid();
        let worst = [5.0, 14.0, 28.0]
            .iter()
            .map(|&beta| poisson_residual(beta, &zs))
            .fold(0.0, f64::max);
        Ok((worst <= 1e-10, format!("max relative error {worst:.3e}")))
    }));
    out.push(timed("centering", || {
        let p = ModelParams::new(2, 1.0)?;
        let m1 = centering(&p, 1)?.m_n;
        let err = (m1 - (2.0 * 2f64.ln()).sqrt()).abs();
        Ok((err < 1e-15, format!("m_1 = {m1}")))
    }));
    for (ratio, levels) in [(0.5, if quick { 20 } else { 60 }), (1.0, if quick { 60 } else { 700 })] {
        out.push(timed(&format!("flow-bounds-ratio-{ratio}"), || {
            let table = PotentialTable::dg(&ModelParams::from_ratio(2, ratio)?, levels)?;
            let s = flow_summary(&table);
            let tol = 1e-9f64.ln_1p();
            let ok = s.bound_violations.is_empty() && s.ratio_excess <= tol && s.envelope_excess <= tol;
            Ok((
                ok,
                format!(
                    "{} levels checked, {} violations, ratio excess {:.2e}, envelope excess {:.2e}",
                    s.bound_checked,
                    s.bound_violations.len(),
                    s.ratio_excess,
                    s.envelope_excess
                ),
            ))
        }));
    }
    let oracle_cases: &[(usize, usize, f64, i32)] = if quick {
        &[(2, 1, 5.0, 5)]
    } else {
        &[(2, 1, 5.0, 5), (2, 2, 14.0, 4), (3, 1, 5.0, 5)]
    };
    let reps = if quick { 20_000 } else { 200_000 };
    for &(b, n, beta, l) in oracle_cases {
        out.push(timed(&format!("sampler-oracle-b{b}-n{n}-beta{beta}"), || {
            let c = compare_with_oracle(&ModelParams::new(b, beta)?, n, l, reps, seed, pool)?;
            Ok((
                c.p_value > 1e-4,
                format!("TV {:.4}, chi2 {:.1} on {} dof, p = {:.3}", c.tv, c.chi_square, c.dof, c.p_value),
            ))
        }));
    }
    out.push(timed("gff-variance", || {
        let p = ModelParams::new(2, 1.0)?;
        let n = 6;
        let reps = if quick { 4000 } else { 40_000 };
        let first = parallel_map(pool, 0..reps, |r| {
            let mut rng = seed_stream(seed, r, TAG_VALIDATE ^ 0xFF);
            Ok(sample_gff(&p, n, &mut rng, false).values[0])
        })?;
        let (_, var) = mean_var(&first);
        let expect = (n + 1) as f64 / p.beta;
        let sd = expect * (2.0 / (reps as f64 - 1.0)).sqrt();
        Ok(((var - expect).abs() < 5.0 * sd, format!("leaf variance {var:.4} vs {expect}")))
    }));
    out.push(timed("coupling-bounds", || {
        let params = ModelParams::new(2, 5.0)?;
        let n = if quick { 4 } else { 6 };
        let reps = if quick { 200 } else { 2000 };
        let table = PotentialTable::dg(&params, n)?;
        let ctx = CouplingContext::new(&table)?;
        let samples = parallel_map(pool, 0..reps, |r| {
            let mut rng = seed_stream(seed, r, TAG_VALIDATE ^ 0xC0);
            couple_fields(&ctx, n, &mut rng)
        })?;
        let mut acc = CouplingAccumulator::new(&ctx);
        samples.iter().for_each(|s| acc.add(s));
        let rep = acc.finish()?;
        let ok = rep.bound_violations == 0 && rep.equality_failures == 0 && rep.path_bound_violations == 0;
        Ok((
            ok,
            format!(
                "C = {:.3}, max deviation {:.3}, violations {}/{}/{}",
                rep.c, rep.max_increment_deviation, rep.bound_violations, rep.equality_failures, rep.path_bound_violations
            ),
        ))
    }));
    out.push(timed("seed-streams", || {
        let count = if quick { 10_000 } else { 1_000_000 };
        let mut firsts = HashSet::with_capacity(count as usize);
        for r in 0..count {
            firsts.insert(seed_stream(seed, r, TAG_VALIDATE).next_u64());
        }
        let repeat = seed_stream(seed, 5, TAG_VALIDATE).next_u64() == seed_stream(seed, 5, TAG_VALIDATE).next_u64();
        Ok((
            repeat && firsts.len() == count as usize,
            format!("{} distinct first outputs of {count}", firsts.len()),
        ))
    }));
    out
}

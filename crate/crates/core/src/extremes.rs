//! Centering of the maximum, extremal records, tail-exponent estimation and tightness summaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{embed_index, ModelParams};
use crate::sampler::{FieldKind, FieldSample};
use crate::stats::{linear_fit, quantile_sorted, quantiles};

/// Thresholds `λ` at which level-set sizes `G_n(λ)` are recorded.
pub const LAMBDA_LADDER: [f64; 5] = [0.0, 1.0, 2.0, 4.0, 8.0];
pub const MIN_TAIL_RECORDS: usize = 10_000;
/// Exceedances required at the largest threshold of the automatic tail range.
pub const MIN_EXCEEDANCES: usize = 10;
pub const TIGHTNESS_QUANTILES: [f64; 5] = [0.01, 0.25, 0.5, 0.75, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenteringInfo {
    pub n: usize,
    pub m_n: f64,
    pub floor_m: i64,
    pub frac_s: f64,
}

/// `m_n = β^{−1/2} [α n − (3/2) α^{−1} log n]`, `α = √(2 log b)`.
pub fn centering(params: &ModelParams, n: usize) -> Result<CenteringInfo> {
    if n == 0 {
        return Err(invalid("n", "centering needs n >= 1"));
    }
    let a = params.alpha;
    let m_n = (a * n as f64 - 1.5 / a * (n as f64).ln()) / params.beta.sqrt();
    let floor = m_n.floor();
    Ok(CenteringInfo {
        n,
        m_n,
        floor_m: floor as i64,
        frac_s: m_n - floor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsequenceEntry {
    pub n: usize,
    pub frac: f64,
    /// Signed circular offset `frac − s` in `(−1/2, 1/2]`; negative entries sit below the
    /// target (possibly across the wrap at 0).
    pub offset: f64,
}

fn circular_offset(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    if d > 0.5 {
        d - 1.0
    } else {
        d
    }
}

/// Depths in `[n_min, n_max]` whose fractional part of `m_n` lies within `tol` of `s_target`
/// in circular distance.
pub fn select_subsequence(
    params: &ModelParams,
    s_target: f64,
    tol: f64,
    n_min: usize,
    n_max: usize,
) -> Result<Vec<SubsequenceEntry>> {
    if !(0.0..1.0).contains(&s_target) {
        return Err(invalid("s", format!("target must lie in [0, 1), got {s_target}")));
    }
    let mut out = Vec::new();
    for n in n_min.max(1)..=n_max {
        let c = centering(params, n)?;
        let offset = circular_offset(c.frac_s, s_target);
        if offset.abs() <= tol {
            out.push(SubsequenceEntry {
                n,
                frac: c.frac_s,
                offset,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremalRecord {
    pub max: f64,
    /// DG: `max − ⌊m_n⌋` (an integer); GFF: `max − m_n`.
    pub max_centered: f64,
    pub argmax_index: usize,
    pub argmax_position: f64,
    /// `(position, centered height)` of every leaf with centered height `≥ −window`.
    pub points: Vec<(f64, f64)>,
    /// `(λ, G_n(λ))` with `G_n(λ) = #{x : φ_x ≥ m_n − λ}`.
    pub level_counts: Vec<(f64, u64)>,
}

pub fn center_of(kind: FieldKind, info: &CenteringInfo) -> f64 {
    match kind {
        FieldKind::Dg => info.floor_m as f64,
        FieldKind::Gff => info.m_n,
    }
}

pub fn extract_record(sample: &FieldSample, info: &CenteringInfo, lambda_window: f64) -> Result<ExtremalRecord> {
    if sample.n != info.n {
        return Err(Error::DepthMismatch(sample.n, info.n));
    }
    let center = center_of(sample.kind, info);
    let (max, arg) = sample.argmax();
    let points = sample
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v - center >= -lambda_window)
        .map(|(i, &v)| (embed_index(sample.b, sample.n, i), v - center))
        .collect();
    let level_counts = LAMBDA_LADDER
        .iter()
        .map(|&l| {
            let thr = info.m_n - l;
            (l, sample.values.iter().filter(|&&v| v >= thr).count() as u64)
        })
        .collect();
    Ok(ExtremalRecord {
        max,
        max_centered: max - center,
        argmax_index: arg,
        argmax_position: embed_index(sample.b, sample.n, arg),
        points,
        level_counts,
    })
}

/// Fitted tail exponent with a bootstrap percentile interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSlope {
    pub slope: f64,
    pub intercept: f64,
    pub ci: (f64, f64),
    pub u: Vec<f64>,
    /// `log(−log P̂(max ≤ u))` at each `u`.
    pub y: Vec<f64>,
    pub resamples: usize,
    pub degenerate_resamples: usize,
}

/// Thresholds `median + 1, median + 1 + step, …` up to the largest with at least
/// [`MIN_EXCEEDANCES`] exceedances. With `step = 1` the start is rounded down to an integer.
pub fn default_tail_range(sorted: &[f64], step: f64) -> Vec<f64> {
    let med = quantile_sorted(sorted, 0.5);
    let start = if step == 1.0 { med.floor() + 1.0 } else { med + 1.0 };
    let mut u = Vec::new();
    let mut t = start;
    loop {
        let exceed = sorted.len() - sorted.partition_point(|&x| x <= t);
        if exceed < MIN_EXCEEDANCES {
            break;
        }
        u.push(t);
        t += step;
    }
    u
}

fn log_neg_log_cdf(counts_le: &[u64], total: u64) -> Option<Vec<f64>> {
    counts_le
        .iter()
        .map(|&c| {
            let p = c as f64 / total as f64;
            (p > 0.0 && p < 1.0).then(|| (-p.ln()).ln())
        })
        .collect()
}

/// Least-squares slope of `log(−log P̂(max ≤ u))` against `u`, which estimates `−α√β`
/// in the upper tail; `u` defaults to [`default_tail_range`].
pub fn tail_slope(maxima: &[f64], u: Option<&[f64]>, step: f64, resamples: usize, seed: u64) -> Result<TailSlope> {
    if maxima.len() < MIN_TAIL_RECORDS {
        return Err(Error::InsufficientData(format!(
            "tail slope needs >= {MIN_TAIL_RECORDS} records, got {}",
            maxima.len()
        )));
    }
    let mut sorted = maxima.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let u: Vec<f64> = match u {
        Some(u) => u.to_vec(),
        None => default_tail_range(&sorted, step),
    };
    if u.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "tail range has {} thresholds; need at least 2",
            u.len()
        )));
    }
    // bucket[i] = number of thresholds strictly below record i, so record i counts toward
    // P(max ≤ u_k) for every k ≥ bucket[i]
    let bucket: Vec<usize> = maxima.iter().map(|&m| u.partition_point(|&t| t < m)).collect();
    let counts = |idx: &mut dyn Iterator<Item = usize>| {
        let mut hist = vec![0u64; u.len() + 1];
        for i in idx {
            hist[bucket[i]] += 1;
        }
        let mut acc = 0;
        hist[..u.len()]
            .iter()
            .map(|&h| {
                acc += h;
                acc
            })
            .collect::<Vec<u64>>()
    };
    let total = maxima.len() as u64;
    let y = log_neg_log_cdf(&counts(&mut (0..maxima.len())), total).ok_or_else(|| {
        Error::InsufficientData("empirical CDF is 0 or 1 inside the tail range".into())
    })?;
    let (slope, intercept) = linear_fit(&u, &y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slopes = Vec::with_capacity(resamples);
    let mut degenerate = 0;
    let n = maxima.len();
    for _ in 0..resamples {
        let mut draw = (0..n).map(|_| rng.random_range(0..n));
        match log_neg_log_cdf(&counts(&mut draw), total) {
            Some(yb) => slopes.push(linear_fit(&u, &yb).0),
            None => degenerate += 1,
        }
    }
    let ci = if slopes.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let q = quantiles(&slopes, &[0.025, 0.975]);
        (q[0], q[1])
    };
    Ok(TailSlope {
        slope,
        intercept,
        ci,
        u,
        y,
        resamples,
        degenerate_resamples: degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub n: usize,
    pub records: usize,
    /// Quantiles of `max − m_n` at [`TIGHTNESS_QUANTILES`].
    pub quantiles: Vec<f64>,
    pub iqr: f64,
    pub median_level_count: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessReport {
    pub rows: Vec<TightnessRow>,
    /// Consecutive depth pairs whose median grew by more than 0.5.
    pub violations: Vec<(usize, usize)>,
    /// `(max − min) / min` of the IQR across depths; infinite when some IQR is zero.
    #[serde(with = "spread")]
    pub iqr_spread: f64,
    /// `(max − min) / min` of the median of `G_n(1)` across depths, when provided.
    #[serde(default, with = "opt_spread")]
    pub level_count_spread: Option<f64>,
}

/// JSON has no infinity; an unbounded spread is written as the string `"inf"`.
mod spread {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Num(f64),
        Text(String),
    }

    pub(super) fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else {
            Repr::Text("inf".into())
        }
    }

    pub(super) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(E::custom(format!("unexpected spread {t:?}"))),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

mod opt_spread {
    use super::spread::{from_repr, to_repr, Repr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(to_repr).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
    }
}

/// One group per depth: `(n, max − m_n per record, optional G_n(1) per record)`.
pub type TightnessGroup = (usize, Vec<f64>, Option<Vec<f64>>);

fn relative_spread(v: &[f64]) -> f64 {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo > 0.0 {
        (hi - lo) / lo
    } else if hi == lo {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn tightness_report(groups: &[TightnessGroup]) -> Result<TightnessReport> {
    if groups.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "tightness needs >= 3 depths, got {}",
            groups.len()
        )));
    }
    let mut rows: Vec<TightnessRow> = groups
        .iter()
        .map(|(n, centered, counts)| {
            let q = quantiles(centered, &TIGHTNESS_QUANTILES);
            TightnessRow {
                n: *n,
                records: centered.len(),
                iqr: q[3] - q[1],
                quantiles: q,
                median_level_count: counts.as_ref().map(|c| quantiles(c, &[0.5])[0]),
            }
        })
        .collect();
    rows.sort_by_key(|r| r.n);
    let violations = rows
        .windows(2)
        .filter(|w| w[1].quantiles[2] - w[0].quantiles[2] > 0.5)
        .map(|w| (w[0].n, w[1].n))
        .collect();
    let iqrs: Vec<f64> = rows.iter().map(|r| r.iqr).collect();
    let counts: Option<Vec<f64>> = rows.iter().map(|r| r.median_level_count).collect();
    Ok(TightnessReport {
        iqr_spread: relative_spread(&iqrs),
        level_count_spread: counts.map(|c| relative_spread(&c)),
        rows,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_params;
    use rand_distr::{Distribution, Gumbel};

    #[test]
    fn unbounded_spread_round_trips() {
        let spread: Vec<f64> = (0..20).map(|i| i as f64 / 10.0).collect();
        let mut groups = vec![
            (4, vec![1.0; 20], Some(vec![2.0; 20])),
            (5, spread, Some(vec![3.0; 20])),
            (6, vec![1.0; 20], Some(vec![2.0; 20])),
        ];
        let rep = tightness_report(&groups).unwrap();
        assert!(rep.iqr_spread.is_infinite());
        let text = serde_json::to_string(&rep).unwrap();
        assert!(text.contains(r#""iqr_spread":"inf""#));
        assert_eq!(serde_json::from_str::<TightnessReport>(&text).unwrap(), rep);
        groups[2].2 = None;
        assert!(tightness_report(&groups).unwrap().level_count_spread.is_none());
    }

    #[test]
    fn centering_values() {
        let p = make_params(2, 1.0).unwrap();
        let c1 = centering(&p, 1).unwrap();
        assert!((c1.m_n - (2.0 * 2f64.ln()).sqrt()).abs() < 1e-15);
        // oracle: α n − 1.5/α ln n at b = 2, n = 10
        let c10 = centering(&p, 10).unwrap();
        assert!((c10.m_n - 8.840_646_650_407_66).abs() < 1e-12, "{}", c10.m_n);
        assert_eq!(c10.floor_m, 8);
        assert!((c10.floor_m as f64 + c10.frac_s - c10.m_n).abs() < 1e-15);
        let big = centering(&p, 100_000).unwrap();
        assert!((big.m_n / 100_000.0 - p.alpha).abs() < 1e-3);
        assert!(centering(&p, 0).is_err());
    }

    #[test]
    fn subsequence_selection() {
        let p = make_params(2, 1.0).unwrap();
        assert_eq!(select_subsequence(&p, 0.3, 0.5, 1, 50).unwrap().len(), 50);
        let hits = select_subsequence(&p, 0.3, 0.05, 10, 200).unwrap();
        assert!(hits.len() >= 5);
        for h in &hits {
            assert!(circular_offset(h.frac, 0.3).abs() <= 0.05);
        }
        let wrap = select_subsequence(&p, 0.01, 0.05, 1, 400).unwrap();
        assert!(wrap.iter().any(|h| h.frac > 0.9));
        assert!(select_subsequence(&p, 1.0, 0.1, 1, 5).is_err());
    }

    fn toy(kind: FieldKind, values: Vec<f64>) -> FieldSample {
        FieldSample {
            kind,
            b: 2,
            n: 2,
            values,
            increments: None,
        }
    }

    #[test]
    fn record_consistency() {
        let p = make_params(2, 1.0).unwrap();
        let info = centering(&p, 2).unwrap();
        let s = toy(FieldKind::Dg, vec![0.0, 3.0, 1.0, -2.0]);
        let r = extract_record(&s, &info, 8.0).unwrap();
        assert_eq!(r.max, 3.0);
        assert_eq!(r.argmax_index, 1);
        assert_eq!(r.argmax_position, 0.25);
        assert_eq!(r.max_centered, 3.0 - info.floor_m as f64);
        let best = r.points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, r.max_centered);
        for (l, g) in &r.level_counts {
            let from_points = r
                .points
                .iter()
                .filter(|(_, h)| *h >= info.m_n - l - info.floor_m as f64)
                .count() as u64;
            assert_eq!(*g, from_points);
        }
        for w in r.level_counts.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
        let empty = extract_record(&s, &info, -100.0).unwrap();
        assert!(empty.points.is_empty());
        assert_eq!(empty.max, 3.0);
        let gff = toy(FieldKind::Gff, vec![0.5, 0.25, 1.5, -2.0]);
        assert_eq!(extract_record(&gff, &info, 8.0).unwrap().max_centered, 1.5 - info.m_n);
    }

    #[test]
    fn slope_on_synthetic_gumbel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Gumbel::new(0.0, 1.0 / 1.7).unwrap();
        let data: Vec<f64> = (0..50_000).map(|_| g.sample(&mut rng)).collect();
        let fit = tail_slope(&data, None, 0.25, 200, 7).unwrap();
        assert!(fit.ci.0 <= -1.7 && -1.7 <= fit.ci.1, "{fit:?}");
        assert!(tail_slope(&data[..100], None, 0.25, 10, 1).is_err());
    }

    #[test]
    fn slope_on_discrete_gumbel() {
        // P(max ≤ u) = exp(−c e^{−r u}) on the integers
        let (c, r) = (3.0f64, 1.1f64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..50_000)
            .map(|_| {
                let v: f64 = rng.random();
                // smallest integer u with F(u) ≥ v
                ((c / -v.ln()).ln() / r).ceil()
            })
            .collect();
        let fit = tail_slope(&data, None, 1.0, 200, 3).unwrap();
        assert!(fit.u.iter().all(|u| u.fract() == 0.0));
        assert!(fit.ci.0 <= -r && -r <= fit.ci.1, "{fit:?}");
    }

    #[test]
    fn tightness_shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Gumbel::new(0.0, 1.0).unwrap();
        let groups: Vec<TightnessGroup> = [4, 6, 8]
            .iter()
            .map(|&n| (n, (0..2000).map(|_| g.sample(&mut rng)).collect(), None))
            .collect();
        let a = tightness_report(&groups).unwrap();
        let shifted: Vec<TightnessGroup> = groups
            .iter()
            .map(|(n, v, c)| (*n, v.iter().map(|x| x + 2.5).collect(), c.clone()))
            .collect();
        let b = tightness_report(&shifted).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            for (qa, qb) in ra.quantiles.iter().zip(&rb.quantiles) {
                assert!((qb - qa - 2.5).abs() < 1e-12);
            }
        }
        assert!(a.violations.is_empty());
        let drift: Vec<TightnessGroup> = groups
            .iter()
            .map(|(n, v, c)| (*n, v.iter().map(|x| x + *n as f64).collect(), c.clone()))
            .collect();
        assert_eq!(tightness_report(&drift).unwrap().violations.len(), 2);
    }
}

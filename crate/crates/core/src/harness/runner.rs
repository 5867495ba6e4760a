use std::collections::BTreeMap;
use std::io;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::*;
use super::io::{read_jsonl, write_atomic, write_summary, Header, RecordWriter};
use super::seed::{depth_tag, derive_seed, seed_stream, DERIVATION, TAG_BOOTSTRAP, TAG_COUPLE, TAG_SAMPLE};
use super::validate::{validate_suite, CheckResult};
use crate::coupling::{couple_fields, CouplingAccumulator, CouplingContext, CouplingReport, REPORT_QUANTILES};
use crate::error::{Error, Result};
use crate::extremes::*;
use crate::model::{ModelParams, Regime, Vertex};
use crate::rg::{
    choose_truncation, fit_decay_rate, gamma_critical, gap_bound, init_dg, init_sine_gordon, ratio_envelope_excess,
    PotentialTable, N_MAX, N_MIN,
};
use crate::sampler::{sample_dg, sample_gff, FieldKind, FieldSample, KernelContext, KernelStats};
use crate::stats::quantiles;

/// Replicates handed to the worker pool at a time; results are written between batches.
pub const BATCH: u64 = 1024;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Data file; records go to stdout when absent.
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub outputs: Vec<PathBuf>,
    pub workers: usize,
    pub seed_derivation: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub phases: Vec<PhaseTiming>,
    pub records: u64,
    /// Proposal and acceptance counts per scale of the continuous rejection kernels.
    pub rejection: Option<KernelStats>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub passed: bool,
    pub summary: Value,
    pub manifest: RunManifest,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    let n = if workers == 0 { default_workers() } else { workers };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Io(io::Error::other(e)))
}

/// Runs `f` on every index of `range` in the pool; results come back in index order.
pub fn parallel_map<T, F>(pool: &rayon::ThreadPool, range: Range<u64>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    pool.install(|| range.into_par_iter().map(&f).collect())
}

/// Path of a sidecar next to the data file, e.g. `run.jsonl.manifest.json`.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

struct Phases(Vec<PhaseTiming>, Instant);

impl Phases {
    fn new() -> Self {
        Self(Vec::new(), Instant::now())
    }

    fn mark(&mut self, name: &str) {
        self.0.push(PhaseTiming {
            name: name.into(),
            seconds: self.1.elapsed().as_secs_f64(),
        });
        self.1 = Instant::now();
    }
}

struct Produced {
    summary: Value,
    passed: bool,
    records: u64,
    rejection: Option<KernelStats>,
    outputs: Vec<PathBuf>,
}

pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let started = unix_now();
    let pool = build_pool(opts.workers)?;
    let mut phases = Phases::new();
    let out = opts.out.as_deref();
    let p = match &config.command {
        Command::RgFlow(c) => run_rg_flow(config, c, out, &mut phases)?,
        Command::Sample(c) => run_sample(config, c, out, &pool, &mut phases)?,
        Command::Couple(c) => run_couple(config, c, opts, &pool, &mut phases)?,
        Command::Extremes(c) => run_extremes(config, c, out, &mut phases)?,
        Command::Subseq(c) => run_subseq(config, c, out, &mut phases)?,
        Command::Validate(c) => run_validate(config, c, out, &pool, &mut phases)?,
    };
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        version: CODE_VERSION.into(),
        command: config.command.name().into(),
        config_hash: config.hash()?,
        config: config.clone(),
        outputs: p.outputs,
        workers: pool.current_num_threads(),
        seed_derivation: DERIVATION.into(),
        started_unix: started,
        finished_unix: unix_now(),
        phases: phases.0,
        records: p.records,
        rejection: p.rejection,
    };
    if let Some(o) = out {
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&sidecar(o, ".manifest.json"), text.as_bytes())?;
    }
    Ok(RunOutcome {
        passed: p.passed,
        summary: p.summary,
        manifest,
    })
}

/// Writes `summary` next to the data file, or logs it when records went to stdout.
fn emit_summary<T: Serialize>(config: &ExperimentConfig, out: Option<&Path>, summary: &T) -> Result<Vec<PathBuf>> {
    let mut outputs = Vec::new();
    if let Some(o) = out {
        outputs.push(o.to_path_buf());
        let s = sidecar(o, ".summary.json");
        write_summary(Some(&s), &Header::new("summary", config), summary)?;
        outputs.push(s);
    } else {
        log::info!("summary: {}", serde_json::to_string(summary)?);
    }
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub k: usize,
    #[serde(rename = "N")]
    pub n_trunc: usize,
    pub c_k: f64,
    pub gap_sup: f64,
    #[serde(rename = "R_k")]
    pub r_k: f64,
    pub log_a0: f64,
    pub ahat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub b: usize,
    pub beta: f64,
    pub beta_c: f64,
    pub regime: Regime,
    pub b_theta: f64,
    pub c0: f64,
    pub gamma: Option<f64>,
    pub levels: usize,
    /// Levels where the proven gap bound applies, and those among them where it failed.
    pub bound_checked: usize,
    pub bound_violations: Vec<usize>,
    /// `log(measured / bound)` maxima of the ratio and envelope inequalities.
    pub ratio_excess: f64,
    pub envelope_excess: f64,
    pub decay_rate: Option<f64>,
    pub expected_decay_rate: Option<f64>,
}

pub fn flow_table(c: &RgFlowConfig) -> Result<PotentialTable> {
    let params = c.beta.params(c.b)?;
    let n0 = c
        .truncation
        .unwrap_or_else(|| choose_truncation(params.b, params.theta, params.neg_log_theta(), N_MAX).max(N_MIN));
    let v0 = match c.sine_gordon {
        Some(kappa) => init_sine_gordon(&params, kappa, n0)?,
        None => init_dg(&params, n0)?,
    };
    PotentialTable::build(v0, c.levels)
}

pub fn flow_records(table: &PotentialTable) -> Vec<FlowRecord> {
    (1..=table.depth())
        .map(|k| {
            let v = &table.levels[k];
            FlowRecord {
                k,
                n_trunc: v.truncation(),
                c_k: table.c_ratios[k],
                gap_sup: table.gaps[k - 1],
                r_k: table.r[k],
                log_a0: v.log_a0,
                ahat: v.half(),
            }
        })
        .collect()
}

pub fn flow_summary(table: &PotentialTable) -> FlowSummary {
    let p = table.params;
    let c0 = table.c_ratios[0];
    let gamma = (p.regime == Regime::Critical).then(|| gamma_critical(&table.levels[0]));
    let mut checked = 0;
    let mut violations = Vec::new();
    for (k, &g) in table.gaps.iter().enumerate() {
        if let Some((bound, true)) = gap_bound(&p, c0, gamma.unwrap_or(0.0), k) {
            checked += 1;
            if g > bound {
                violations.push(k);
            }
        }
    }
    let (ratio_excess, envelope_excess) = ratio_envelope_excess(table);
    let last = (1..table.r.len()).take_while(|&k| table.r[k] > 1e-280).last();
    let decay_rate = match (p.regime, last) {
        (Regime::Subcritical, Some(hi)) if hi >= 4 => Some(fit_decay_rate(&table.r, 2, hi)),
        _ => None,
    };
    FlowSummary {
        b: p.b,
        beta: p.beta,
        beta_c: p.beta_c,
        regime: p.regime,
        b_theta: p.b_theta(),
        c0,
        gamma,
        levels: table.depth(),
        bound_checked: checked,
        bound_violations: violations,
        ratio_excess,
        envelope_excess,
        decay_rate,
        expected_decay_rate: (p.regime == Regime::Subcritical).then(|| -p.b_theta().ln()),
    }
}

fn run_rg_flow(config: &ExperimentConfig, c: &RgFlowConfig, out: Option<&Path>, ph: &mut Phases) -> Result<Produced> {
    let table = flow_table(c)?;
    ph.mark("flow");
    let mut w = RecordWriter::create(out, config.format, &Header::new("header", config))?;
    for r in flow_records(&table) {
        w.write(&r)?;
    }
    let records = w.count;
    w.finish()?;
    let summary = flow_summary(&table);
    let outputs = emit_summary(config, out, &summary)?;
    ph.mark("write");
    Ok(Produced {
        passed: summary.bound_violations.is_empty(),
        summary: serde_json::to_value(summary)?,
        records,
        rejection: None,
        outputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub replicate: u64,
    pub model: FieldKind,
    pub b: usize,
    pub beta: f64,
    pub depth: usize,
    pub max: f64,
    pub argmax_index: usize,
    pub argmax_digits: Vec<u32>,
    pub argmax_position: f64,
    /// `(value, count)` for DG leaves; `(k, #leaves in [k, k+1))` for GFF leaves.
    pub leaf_histogram: Vec<(i64, u64)>,
    pub values: Option<Vec<f64>>,
}

pub fn sample_record(replicate: u64, beta: f64, s: FieldSample, full: bool) -> SampleRecord {
    let (max, arg) = s.argmax();
    let mut hist = BTreeMap::new();
    for &v in &s.values {
        *hist.entry(v.floor() as i64).or_insert(0u64) += 1;
    }
    SampleRecord {
        replicate,
        model: s.kind,
        b: s.b,
        beta,
        depth: s.n,
        max,
        argmax_index: arg,
        argmax_digits: Vertex::from_index(s.b, s.n, arg).digits,
        argmax_position: crate::model::embed_index(s.b, s.n, arg),
        leaf_histogram: hist.into_iter().collect(),
        values: full.then_some(s.values),
    }
}

/// Draws replicates `range` at one depth, in replicate order.
pub fn sample_batch(
    pool: &rayon::ThreadPool,
    model: FieldKind,
    params: &ModelParams,
    table: Option<&PotentialTable>,
    depth: usize,
    seed: u64,
    range: Range<u64>,
    full: bool,
) -> Result<Vec<(SampleRecord, KernelStats)>> {
    let tag = depth_tag(TAG_SAMPLE, depth);
    parallel_map(pool, range, |r| {
        let mut rng = seed_stream(seed, r, tag);
        match model {
            FieldKind::Gff => Ok((
                sample_record(r, params.beta, sample_gff(params, depth, &mut rng, false), full),
                KernelStats::default(),
            )),
            FieldKind::Dg => {
                let table = table.ok_or_else(|| Error::MissingLevel { need: depth, have: 0 })?;
                let mut ctx = KernelContext::new(table);
                let s = sample_dg(&mut ctx, depth, &mut rng, false)?;
                Ok((sample_record(r, params.beta, s, full), ctx.stats))
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub depth: usize,
    pub reps: u64,
    pub mean_max: f64,
    pub max_quantiles: Vec<(f64, f64)>,
}

fn run_sample(
    config: &ExperimentConfig,
    c: &SampleConfig,
    out: Option<&Path>,
    pool: &rayon::ThreadPool,
    ph: &mut Phases,
) -> Result<Produced> {
    let params = c.beta.params(c.b)?;
    let deepest = *c.depths.iter().max().unwrap_or(&0);
    let table = match c.model {
        FieldKind::Dg => Some(PotentialTable::dg(&params, deepest)?),
        FieldKind::Gff => None,
    };
    ph.mark("flow");
    let mut w = RecordWriter::create(out, config.format, &Header::new("header", config))?;
    let mut stats = KernelStats::default();
    let mut summaries = Vec::new();
    for &depth in &c.depths {
        let mut maxima = Vec::with_capacity(c.reps as usize);
        let mut start = 0;
        while start < c.reps {
            let end = (start + BATCH).min(c.reps);
            for (rec, st) in sample_batch(pool, c.model, &params, table.as_ref(), depth, config.seed, start..end, c.full)? {
                maxima.push(rec.max);
                w.write(&rec)?;
                stats.merge(&st);
            }
            start = end;
        }
        let q = quantiles(&maxima, &REPORT_QUANTILES);
        summaries.push(SampleSummary {
            depth,
            reps: c.reps,
            mean_max: maxima.iter().sum::<f64>() / maxima.len() as f64,
            max_quantiles: REPORT_QUANTILES.iter().copied().zip(q).collect(),
        });
    }
    let records = w.count;
    w.finish()?;
    ph.mark("sample");
    let outputs = emit_summary(config, out, &summaries)?;
    Ok(Produced {
        passed: true,
        summary: serde_json::to_value(summaries)?,
        records,
        rejection: (c.model == FieldKind::Dg).then_some(stats),
        outputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupleRecord {
    pub replicate: u64,
    pub depth: usize,
    pub max_dg: f64,
    pub max_gff: f64,
    pub max_increment_deviation: f64,
    /// `(scale, trials, successes)` for scales `1..=n`.
    pub bernoulli: Vec<(usize, u64, u64)>,
    /// Quantiles of `|φ^DG_x − φ^GFF_x|` over leaves.
    pub leaf_diff_quantiles: Vec<(f64, f64)>,
    pub tau_histogram: Vec<u64>,
}

fn run_couple(
    config: &ExperimentConfig,
    c: &CoupleConfig,
    opts: &RunOptions,
    pool: &rayon::ThreadPool,
    ph: &mut Phases,
) -> Result<Produced> {
    let params = c.beta.params(c.b)?;
    let table = PotentialTable::dg(&params, c.depth)?;
    let ctx = CouplingContext::new(&table)?.with_cache_dir(opts.cache_dir.clone());
    ph.mark("flow");
    let out = opts.out.as_deref();
    let mut w = RecordWriter::create(out, config.format, &Header::new("header", config))?;
    let mut acc = CouplingAccumulator::new(&ctx);
    let tag = depth_tag(TAG_COUPLE, c.depth);
    let mut start = 0;
    while start < c.reps {
        let end = (start + BATCH).min(c.reps);
        let batch = parallel_map(pool, start..end, |r| {
            let mut rng = seed_stream(config.seed, r, tag);
            couple_fields(&ctx, c.depth, &mut rng)
        })?;
        for (i, s) in batch.iter().enumerate() {
            w.write(&couple_record(start + i as u64, s))?;
            acc.add(s);
        }
        start = end;
    }
    let records = w.count;
    w.finish()?;
    ph.mark("couple");
    let report: CouplingReport = acc.finish()?;
    let passed = report.bound_violations == 0 && report.equality_failures == 0 && report.path_bound_violations == 0;
    let outputs = emit_summary(config, out, &report)?;
    Ok(Produced {
        passed,
        summary: serde_json::to_value(report)?,
        records,
        rejection: None,
        outputs,
    })
}

pub fn couple_record(replicate: u64, s: &crate::coupling::CoupledSample) -> CoupleRecord {
    let n = s.n;
    let mut dev: f64 = 0.0;
    for (ld, lg) in s.xi_dg.iter().zip(&s.xi_gff) {
        for (d, g) in ld.iter().zip(lg) {
            dev = dev.max((d - g).abs());
        }
    }
    let bernoulli = (0..n)
        .map(|l| {
            let f = &s.flags[l];
            (n - l, f.len() as u64, f.iter().filter(|&&x| x).count() as u64)
        })
        .rev()
        .collect();
    let diffs: Vec<f64> = s.dg.iter().zip(&s.gff).map(|(d, g)| (d - g).abs()).collect();
    let mut tau = vec![0u64; n + 1];
    for &t in &s.tau {
        tau[t as usize] += 1;
    }
    let mx = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    CoupleRecord {
        replicate,
        depth: n,
        max_dg: mx(&s.dg),
        max_gff: mx(&s.gff),
        max_increment_deviation: dev,
        bernoulli,
        leaf_diff_quantiles: REPORT_QUANTILES.iter().copied().zip(quantiles(&diffs, &REPORT_QUANTILES)).collect(),
        tau_histogram: tau,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthExtremes {
    pub n: usize,
    pub records: usize,
    pub centering: CenteringInfo,
    /// Quantiles of the centered maximum (by `⌊m_n⌋` for DG, `m_n` for GFF).
    pub max_centered_quantiles: Vec<(f64, f64)>,
    pub mean_max_centered: f64,
    /// `(λ, median G_n(λ))`, when level counts are recoverable from the records.
    pub level_count_medians: Option<Vec<(f64, f64)>>,
    /// Mean number of window points per record at each centered height bin `[h, h+1)`.
    pub point_intensity: Option<Vec<(f64, f64)>>,
    /// Argmax positions in 16 equal bins of `[0, 1)`.
    pub argmax_histogram: Vec<u64>,
    pub tail: Option<TailSlope>,
    pub tail_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremesSummary {
    pub model: FieldKind,
    pub b: usize,
    pub beta: f64,
    pub window: f64,
    pub depths: Vec<DepthExtremes>,
    pub tightness: Option<TightnessReport>,
    pub tightness_note: Option<String>,
}

/// `G_n(λ)` for every λ on the ladder, from full values or an exact DG histogram.
fn level_counts(rec: &SampleRecord, info: &CenteringInfo) -> Option<Vec<f64>> {
    if let Some(v) = &rec.values {
        let s = FieldSample {
            kind: rec.model,
            b: rec.b,
            n: rec.depth,
            values: v.clone(),
            increments: None,
        };
        let r = extract_record(&s, info, f64::NEG_INFINITY).ok()?;
        return Some(r.level_counts.iter().map(|&(_, g)| g as f64).collect());
    }
    (rec.model == FieldKind::Dg).then(|| {
        LAMBDA_LADDER
            .iter()
            .map(|l| {
                let thr = (info.m_n - l).ceil() as i64;
                rec.leaf_histogram.iter().filter(|(v, _)| *v >= thr).map(|(_, c)| *c).sum::<u64>() as f64
            })
            .collect()
    })
}

/// Extreme-value statistics for records of a single model, grouped by depth.
pub fn analyze_samples(
    records: &[SampleRecord],
    centering_params: &ModelParams,
    window: f64,
    bootstrap: usize,
    seed: u64,
) -> Result<ExtremesSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::InsufficientData("no sample records".into()))?;
    let mut by_depth: BTreeMap<usize, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        if r.model != first.model || r.b != first.b {
            return Err(Error::Schema("records mix models or branching numbers".into()));
        }
        by_depth.entry(r.depth).or_default().push(r);
    }
    let mut depths = Vec::new();
    let mut groups: Vec<TightnessGroup> = Vec::new();
    for (&n, recs) in &by_depth {
        let info = centering(centering_params, n)?;
        let center = center_of(first.model, &info);
        let centered: Vec<f64> = recs.iter().map(|r| r.max - center).collect();
        let counts: Option<Vec<Vec<f64>>> = recs.iter().map(|r| level_counts(r, &info)).collect();
        let level_count_medians = counts.as_ref().map(|cs| {
            LAMBDA_LADDER
                .iter()
                .enumerate()
                .map(|(i, &l)| (l, quantiles(&cs.iter().map(|c| c[i]).collect::<Vec<_>>(), &[0.5])[0]))
                .collect()
        });
        let mut intensity: BTreeMap<i64, u64> = BTreeMap::new();
        let mut have_points = true;
        for r in recs {
            let Some(v) = &r.values else {
                have_points = false;
                break;
            };
            let s = FieldSample {
                kind: r.model,
                b: r.b,
                n,
                values: v.clone(),
                increments: None,
            };
            for (_, h) in extract_record(&s, &info, window)?.points {
                *intensity.entry(h.floor() as i64).or_default() += 1;
            }
        }
        let point_intensity = have_points.then(|| {
            intensity
                .into_iter()
                .map(|(h, c)| (h as f64, c as f64 / recs.len() as f64))
                .collect()
        });
        let mut argmax_histogram = vec![0u64; 16];
        for r in recs {
            argmax_histogram[((r.argmax_position * 16.0) as usize).min(15)] += 1;
        }
        let step = match first.model {
            FieldKind::Dg => 1.0,
            FieldKind::Gff => 0.25,
        };
        let (tail, tail_note) = if recs.len() < MIN_TAIL_RECORDS {
            (None, Some(format!("{} records; tail fit needs {MIN_TAIL_RECORDS}", recs.len())))
        } else {
            match tail_slope(&centered, None, step, bootstrap, derive_seed(seed, n as u64, TAG_BOOTSTRAP)) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };
        let q = quantiles(&centered, &TIGHTNESS_QUANTILES);
        groups.push((
            n,
            recs.iter().map(|r| r.max - info.m_n).collect(),
            counts.map(|cs| cs.iter().map(|c| c[1]).collect()),
        ));
        depths.push(DepthExtremes {
            n,
            records: recs.len(),
            centering: info,
            max_centered_quantiles: TIGHTNESS_QUANTILES.iter().copied().zip(q).collect(),
            mean_max_centered: centered.iter().sum::<f64>() / centered.len() as f64,
            level_count_medians,
            point_intensity,
            argmax_histogram,
            tail,
            tail_note,
        });
    }
    let (tightness, tightness_note) = match tightness_report(&groups) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(ExtremesSummary {
        model: first.model,
        b: first.b,
        beta: first.beta,
        window,
        depths,
        tightness,
        tightness_note,
    })
}

fn run_extremes(config: &ExperimentConfig, c: &ExtremesConfig, out: Option<&Path>, ph: &mut Phases) -> Result<Produced> {
    let (header, raw) = read_jsonl(&c.input)?;
    let Command::Sample(sc) = &header.config.command else {
        return Err(Error::Schema(format!(
            "{} holds `{}` records; extremes needs a sample run",
            c.input.display(),
            header.config.command.name()
        )));
    };
    let records: Vec<SampleRecord> = raw.into_iter().map(serde_json::from_value).collect::<std::result::Result<_, _>>()?;
    ph.mark("read");
    let params = match c.centering {
        Some((b, beta)) => ModelParams::new(b, beta)?,
        None => sc.beta.params(sc.b)?,
    };
    let summary = analyze_samples(&records, &params, c.window, c.bootstrap, config.seed)?;
    ph.mark("analyze");
    write_summary(out, &Header::new("extremes", config), &summary)?;
    Ok(Produced {
        passed: summary.tightness.as_ref().is_none_or(|t| t.violations.is_empty()),
        summary: serde_json::to_value(&summary)?,
        records: records.len() as u64,
        rejection: None,
        outputs: out.map(|o| vec![o.to_path_buf()]).unwrap_or_default(),
    })
}

fn run_subseq(config: &ExperimentConfig, c: &SubseqConfig, out: Option<&Path>, ph: &mut Phases) -> Result<Produced> {
    let params = c.beta.params(c.b)?;
    let hits = select_subsequence(&params, c.s, c.tol, c.n_min, c.n_max)?;
    if hits.is_empty() {
        log::warn!("no depth in {}..={} has frac(m_n) within {} of {}", c.n_min, c.n_max, c.tol, c.s);
    }
    let mut w = RecordWriter::create(out, config.format, &Header::new("header", config))?;
    for h in &hits {
        w.write(h)?;
    }
    let records = w.count;
    w.finish()?;
    ph.mark("scan");
    Ok(Produced {
        passed: true,
        summary: serde_json::json!({ "hits": hits.len() }),
        records,
        rejection: None,
        outputs: out.map(|o| vec![o.to_path_buf()]).unwrap_or_default(),
    })
}

fn run_validate(
    config: &ExperimentConfig,
    c: &ValidateConfig,
    out: Option<&Path>,
    pool: &rayon::ThreadPool,
    ph: &mut Phases,
) -> Result<Produced> {
    let results: Vec<CheckResult> = validate_suite(c.quick, config.seed, pool);
    ph.mark("checks");
    let mut w = RecordWriter::create(out, config.format, &Header::new("header", config))?;
    for r in &results {
        w.write(r)?;
    }
    let records = w.count;
    w.finish()?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    Ok(Produced {
        passed: failed.is_empty(),
        summary: serde_json::json!({ "checks": results.len(), "failed": failed }),
        records,
        rejection: None,
        outputs: out.map(|o| vec![o.to_path_buf()]).unwrap_or_default(),
    })
}

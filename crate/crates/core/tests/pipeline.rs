use std::path::Path;

use hdg_core::harness::*;
use hdg_core::model::{index_distance, ModelParams};
use hdg_core::sampler::{sample_gff, FieldKind};
use hdg_core::Error;

fn opts(out: &Path) -> RunOptions {
    RunOptions {
        out: Some(out.to_path_buf()),
        workers: 2,
        cache_dir: None,
    }
}

fn sample_config(model: FieldKind, beta: f64, depths: Vec<usize>, reps: u64, full: bool) -> ExperimentConfig {
    ExperimentConfig::new(
        11,
        OutputFormat::Jsonl,
        Command::Sample(SampleConfig {
            model,
            b: 2,
            beta: BetaSpec::Beta(beta),
            depths,
            reps,
            full,
        }),
    )
}

#[test]
fn rg_flow_run_writes_one_record_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flow.jsonl");
    let config = ExperimentConfig::new(
        0,
        OutputFormat::Jsonl,
        Command::RgFlow(RgFlowConfig {
            b: 2,
            beta: BetaSpec::Ratio(0.5),
            levels: 40,
            sine_gordon: None,
            truncation: None,
        }),
    );
    let outcome = run(&config, &opts(&out)).unwrap();
    assert!(outcome.passed);
    let (header, records) = read_jsonl(&out).unwrap();
    assert_eq!(header.config, config);
    assert_eq!(records.len(), 40);
    let r: Vec<f64> = records.iter().map(|v| v["R_k"].as_f64().unwrap()).collect();
    let ks: Vec<u64> = records.iter().map(|v| v["k"].as_u64().unwrap()).collect();
    assert_eq!(ks, (1..=40).collect::<Vec<_>>());
    assert!(r[1..].windows(2).all(|w| w[1] < w[0]));

    let manifest: RunManifest =
        serde_json::from_slice(&std::fs::read(runner::sidecar(&out, ".manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config_hash, config.hash().unwrap());
    assert_eq!(manifest.records, 40);
    assert!(manifest.finished_unix >= manifest.started_unix);
}

#[test]
fn sample_then_extremes_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("dg.jsonl");
    let config = sample_config(FieldKind::Dg, 14.0, vec![4, 6, 8], 400, false);
    run(&config, &opts(&samples)).unwrap();
    let (_, raw) = read_jsonl(&samples).unwrap();
    assert_eq!(raw.len(), 1200);
    let recs: Vec<runner::SampleRecord> = raw.into_iter().map(|v| serde_json::from_value(v).unwrap()).collect();
    for r in &recs {
        assert_eq!(r.leaf_histogram.iter().map(|x| x.1).sum::<u64>(), 1 << r.depth);
        assert_eq!(r.leaf_histogram.last().unwrap().0 as f64, r.max);
    }

    let summary = dir.path().join("ext.json");
    let ext = ExperimentConfig::new(
        11,
        OutputFormat::Jsonl,
        Command::Extremes(ExtremesConfig {
            input: samples.clone(),
            centering: None,
            window: 8.0,
            bootstrap: 50,
        }),
    );
    run(&ext, &opts(&summary)).unwrap();
    let (header, value) = read_summary(&summary).unwrap();
    assert_eq!(header.kind, "extremes");
    let s: runner::ExtremesSummary = serde_json::from_value(value).unwrap();
    assert_eq!(s.depths.iter().map(|d| d.n).collect::<Vec<_>>(), vec![4, 6, 8]);
    assert!(s.depths.iter().all(|d| d.tail.is_none() && d.tail_note.is_some()));
    assert_eq!(s.tightness.unwrap().rows.len(), 3);
}

#[test]
fn extremes_rejects_non_sample_input() {
    let dir = tempfile::tempdir().unwrap();
    let flow = dir.path().join("flow.jsonl");
    let config = ExperimentConfig::new(
        0,
        OutputFormat::Jsonl,
        Command::RgFlow(RgFlowConfig {
            b: 2,
            beta: BetaSpec::Ratio(0.5),
            levels: 3,
            sine_gordon: None,
            truncation: None,
        }),
    );
    run(&config, &opts(&flow)).unwrap();
    let ext = ExperimentConfig::new(
        0,
        OutputFormat::Jsonl,
        Command::Extremes(ExtremesConfig {
            input: flow,
            centering: None,
            window: 8.0,
            bootstrap: 0,
        }),
    );
    let err = run(&ext, &opts(&dir.path().join("x.json"))).unwrap_err();
    assert!(matches!(err, Error::Schema(_)), "{err}");
    assert!(!dir.path().join("x.json").exists());
}

#[test]
fn csv_sample_output_has_header_comment_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gff.csv");
    let mut config = sample_config(FieldKind::Gff, 1.0, vec![5], 50, false);
    config.format = OutputFormat::Csv;
    run(&config, &opts(&out)).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# "));
    assert!(lines.next().unwrap().split(',').any(|c| c == "replicate"));
    assert_eq!(lines.count(), 50);
}

#[test]
fn gff_covariance_matches_green_function() {
    let (b, n, beta, reps) = (2, 3, 2.0, 40_000u64);
    let p = ModelParams::new(b, beta).unwrap();
    let size = b.pow(n as u32);
    let mut sum = vec![0.0; size * size];
    for r in 0..reps {
        let v = sample_gff(&p, n, &mut seed_stream(5, r, seed::TAG_SAMPLE), false).values;
        for i in 0..size {
            for j in 0..size {
                sum[i * size + j] += v[i] * v[j];
            }
        }
    }
    for i in 0..size {
        for j in 0..size {
            let want = (n + 1 - index_distance(b, i, j, n)) as f64 / beta;
            let got = sum[i * size + j] / reps as f64;
            assert!((got - want).abs() < 0.08, "({i},{j}): {got} vs {want}");
        }
    }
}

#[test]
fn quick_validation_passes() {
    let pool = runner::build_pool(1).unwrap();
    let checks = validate_suite(true, 0, &pool);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| &c.name).collect();
    assert!(failed.is_empty(), "{failed:?}");
}

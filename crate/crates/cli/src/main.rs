use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdg_core::harness::*;
use hdg_core::sampler::FieldKind;

#[derive(Parser, Debug)]
#[command(name = "hdg", version, about = "Hierarchical Discrete Gaussian model lab")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = available parallelism).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Output file; records go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Jsonl)]
    format: Format,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Format {
    Jsonl,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Model {
    Dg,
    Gff,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Beta {
    #[arg(long)]
    beta: Option<f64>,
    /// Inverse temperature as a multiple of the critical value.
    #[arg(long)]
    beta_ratio: Option<f64>,
}

impl Beta {
    fn spec(&self) -> BetaSpec {
        match (self.beta, self.beta_ratio) {
            (Some(b), _) => BetaSpec::Beta(b),
            (None, Some(r)) => BetaSpec::Ratio(r),
            (None, None) => unreachable!("clap enforces one of --beta / --beta-ratio"),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Iterate the renormalization map and emit one record per level.
    RgFlow {
        #[arg(long)]
        b: usize,
        #[command(flatten)]
        beta: Beta,
        #[arg(long)]
        levels: usize,
        /// Start from the sine-Gordon potential with this coupling.
        #[arg(long)]
        sine_gordon: Option<f64>,
        /// Initial Fourier truncation.
        #[arg(long)]
        truncation: Option<usize>,
    },
    /// Draw exact DG or GFF fields.
    Sample {
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long)]
        b: usize,
        #[command(flatten)]
        beta: Beta,
        /// One or more depths (comma separated or repeated).
        #[arg(long, value_delimiter = ',', required = true)]
        depth: Vec<usize>,
        #[arg(long)]
        reps: u64,
        /// Include every leaf value in the records.
        #[arg(long)]
        full: bool,
    },
    /// Couple DG and GFF fields increment by increment.
    Couple {
        #[arg(long)]
        b: usize,
        #[command(flatten)]
        beta: Beta,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        reps: u64,
    },
    /// Extreme-value statistics of a sample run.
    Extremes {
        #[arg(long = "in")]
        input: PathBuf,
        /// Centering parameters as "b,beta"; defaults to those of the sample run.
        #[arg(long)]
        centering: Option<String>,
        #[arg(long, default_value_t = 8.0)]
        window: f64,
        #[arg(long, default_value_t = 200)]
        bootstrap: usize,
    },
    /// Depths whose centering has a fractional part near a target.
    Subseq {
        #[arg(long)]
        b: usize,
        #[command(flatten)]
        beta: Beta,
        #[arg(long)]
        s: f64,
        #[arg(long)]
        tol: f64,
        /// Depth range as A:B (inclusive).
        #[arg(long)]
        range: String,
    },
    /// Run the oracle and invariant checks.
    Validate {
        #[arg(long)]
        quick: bool,
    },
}

fn parse_pair<A: std::str::FromStr, B: std::str::FromStr>(s: &str, sep: char, what: &str) -> Result<(A, B), String> {
    let (a, b) = s
        .split_once(sep)
        .ok_or_else(|| format!("{what}: expected two values separated by '{sep}', got {s:?}"))?;
    let a = a.trim().parse().map_err(|_| format!("{what}: cannot parse {a:?}"))?;
    let b = b.trim().parse().map_err(|_| format!("{what}: cannot parse {b:?}"))?;
    Ok((a, b))
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, String> {
    let command = match &cli.command {
        Cmd::RgFlow {
            b,
            beta,
            levels,
            sine_gordon,
            truncation,
        } => Command::RgFlow(RgFlowConfig {
            b: *b,
            beta: beta.spec(),
            levels: *levels,
            sine_gordon: *sine_gordon,
            truncation: *truncation,
        }),
        Cmd::Sample {
            model,
            b,
            beta,
            depth,
            reps,
            full,
        } => Command::Sample(SampleConfig {
            model: match model {
                Model::Dg => FieldKind::Dg,
                Model::Gff => FieldKind::Gff,
            },
            b: *b,
            beta: beta.spec(),
            depths: depth.clone(),
            reps: *reps,
            full: *full,
        }),
        Cmd::Couple { b, beta, depth, reps } => Command::Couple(CoupleConfig {
            b: *b,
            beta: beta.spec(),
            depth: *depth,
            reps: *reps,
        }),
        Cmd::Extremes {
            input,
            centering,
            window,
            bootstrap,
        } => Command::Extremes(ExtremesConfig {
            input: input.clone(),
            centering: centering.as_deref().map(|c| parse_pair(c, ',', "--centering")).transpose()?,
            window: *window,
            bootstrap: *bootstrap,
        }),
        Cmd::Subseq { b, beta, s, tol, range } => {
            let (n_min, n_max) = parse_pair(range, ':', "--range")?;
            Command::Subseq(SubseqConfig {
                b: *b,
                beta: beta.spec(),
                s: *s,
                tol: *tol,
                n_min,
                n_max,
            })
        }
        Cmd::Validate { quick } => Command::Validate(ValidateConfig { quick: *quick }),
    };
    let format = match cli.format {
        Format::Jsonl => OutputFormat::Jsonl,
        Format::Csv => OutputFormat::Csv,
    };
    Ok(ExperimentConfig::new(cli.seed, format, command))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    let config = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let opts = RunOptions {
        out: cli.out.clone(),
        workers: cli.workers,
        cache_dir: std::env::var_os("HDG_CACHE_DIR").map(PathBuf::from),
    };
    match run(&config, &opts) {
        Ok(outcome) => {
            log::info!(
                "{} finished: {} records in {:.2}s",
                outcome.manifest.command,
                outcome.manifest.records,
                outcome.manifest.finished_unix - outcome.manifest.started_unix
            );
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                log::error!("checks failed: {}", outcome.summary);
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

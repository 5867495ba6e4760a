use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::model::ModelParams;
use crate::rg::{MAX_LEVELS, N_MAX, N_MIN};
use crate::sampler::FieldKind;

/// Major version of every file the harness writes.
pub const SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Largest depth accepted for sampling runs, in leaves.
pub const MAX_LEAVES: usize = 1 << 24;

/// Inverse temperature, given directly or as a multiple of `β_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpec {
    Beta(f64),
    Ratio(f64),
}

impl BetaSpec {
    pub fn params(&self, b: usize) -> Result<ModelParams> {
        match *self {
            BetaSpec::Beta(beta) => ModelParams::new(b, beta),
            BetaSpec::Ratio(r) => ModelParams::from_ratio(b, r),
        }
    }

    fn check(&self) -> Result<()> {
        let (field, v) = match *self {
            BetaSpec::Beta(v) => ("beta", v),
            BetaSpec::Ratio(v) => ("beta_ratio", v),
        };
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(field, format!("must be a positive finite number, got {v}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgFlowConfig {
    pub b: usize,
    pub beta: BetaSpec,
    pub levels: usize,
    /// Start from a sine-Gordon potential `−κ cos 2πz` instead of the DG weights.
    pub sine_gordon: Option<f64>,
    /// Initial Fourier truncation.
    pub truncation: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub model: FieldKind,
    pub b: usize,
    pub beta: BetaSpec,
    pub depths: Vec<usize>,
    pub reps: u64,
    /// Include every leaf value in the records.
    pub full: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupleConfig {
    pub b: usize,
    pub beta: BetaSpec,
    pub depth: usize,
    pub reps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremesConfig {
    pub input: PathBuf,
    /// `(b, β)` used for centering; defaults to the parameters of the input run.
    pub centering: Option<(usize, f64)>,
    pub window: f64,
    pub bootstrap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubseqConfig {
    pub b: usize,
    pub beta: BetaSpec,
    pub s: f64,
    pub tol: f64,
    pub n_min: usize,
    pub n_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateConfig {
    pub quick: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    RgFlow(RgFlowConfig),
    Sample(SampleConfig),
    Couple(CoupleConfig),
    Extremes(ExtremesConfig),
    Subseq(SubseqConfig),
    Validate(ValidateConfig),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::RgFlow(_) => "rg-flow",
            Command::Sample(_) => "sample",
            Command::Couple(_) => "couple",
            Command::Extremes(_) => "extremes",
            Command::Subseq(_) => "subseq",
            Command::Validate(_) => "validate",
        }
    }
}

/// Everything that determines the content of a run's data files. Output paths and the
/// worker count are run options and deliberately excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub format: OutputFormat,
    pub command: Command,
}

fn check_b(b: usize) -> Result<()> {
    if b < 2 {
        return Err(invalid("b", format!("branching number must be >= 2, got {b}")));
    }
    Ok(())
}

fn check_leaves(b: usize, depth: usize) -> Result<()> {
    let leaves = (b as f64).powi(depth as i32);
    if leaves > MAX_LEAVES as f64 {
        return Err(invalid(
            "depth",
            format!("b^depth = {leaves} leaves exceeds the limit {MAX_LEAVES}"),
        ));
    }
    Ok(())
}

fn check_reps(reps: u64) -> Result<()> {
    if reps == 0 {
        return Err(invalid("reps", "need at least one replicate"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn new(seed: u64, format: OutputFormat, command: Command) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            format,
            command,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        match &self.command {
            Command::RgFlow(c) => {
                check_b(c.b)?;
                c.beta.check()?;
                if c.levels == 0 || c.levels > MAX_LEVELS {
                    return Err(invalid("levels", format!("must be in 1..={MAX_LEVELS}, got {}", c.levels)));
                }
                if let Some(n) = c.truncation {
                    if !(N_MIN..=N_MAX).contains(&n) {
                        return Err(invalid("truncation", format!("must be in {N_MIN}..={N_MAX}, got {n}")));
                    }
                }
                if let Some(k) = c.sine_gordon {
                    if !(k.is_finite() && k >= 0.0) {
                        return Err(invalid("sine_gordon", format!("coupling must be >= 0, got {k}")));
                    }
                }
            }
            Command::Sample(c) => {
                check_b(c.b)?;
                c.beta.check()?;
                check_reps(c.reps)?;
                if c.depths.is_empty() {
                    return Err(invalid("depth", "need at least one depth"));
                }
                for &d in &c.depths {
                    check_leaves(c.b, d)?;
                }
            }
            Command::Couple(c) => {
                check_b(c.b)?;
                c.beta.check()?;
                check_reps(c.reps)?;
                check_leaves(c.b, c.depth)?;
            }
            Command::Extremes(c) => {
                if !c.window.is_finite() {
                    return Err(invalid("window", "must be finite"));
                }
                if let Some((b, beta)) = c.centering {
                    check_b(b)?;
                    BetaSpec::Beta(beta).check()?;
                }
            }
            Command::Subseq(c) => {
                check_b(c.b)?;
                c.beta.check()?;
                if !(0.0..1.0).contains(&c.s) {
                    return Err(invalid("s", format!("must lie in [0, 1), got {}", c.s)));
                }
                if !(0.0..=0.5).contains(&c.tol) {
                    return Err(invalid("tol", format!("must lie in [0, 0.5], got {}", c.tol)));
                }
                if c.n_min == 0 || c.n_min > c.n_max {
                    return Err(invalid("range", format!("need 1 <= A <= B, got {}:{}", c.n_min, c.n_max)));
                }
            }
            Command::Validate(_) => {}
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

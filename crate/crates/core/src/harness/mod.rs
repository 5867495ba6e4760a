//! Experiment configuration, deterministic seeding, parallel replication and result files.

pub mod config;
pub mod io;
pub mod runner;
pub mod seed;
pub mod validate;

pub use config::{
    BetaSpec, Command, CoupleConfig, ExperimentConfig, ExtremesConfig, OutputFormat, RgFlowConfig, SampleConfig,
    SubseqConfig, ValidateConfig, SCHEMA_VERSION,
};
pub use io::{read_jsonl, read_summary, Header, RecordWriter};
pub use runner::{run, RunManifest, RunOptions, RunOutcome};
pub use seed::seed_stream;
pub use validate::{validate_suite, CheckResult};

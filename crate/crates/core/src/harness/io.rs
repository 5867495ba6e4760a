use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{ExperimentConfig, OutputFormat, CODE_VERSION, SCHEMA_VERSION};
use crate::error::{Error, Result};

/// First line of every JSONL file; also embedded in summaries and manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub schema_version: u32,
    pub version: String,
    pub config: ExperimentConfig,
}

impl Header {
    pub fn new(kind: &str, config: &ExperimentConfig) -> Self {
        Self {
            kind: kind.to_string(),
            schema_version: SCHEMA_VERSION,
            version: CODE_VERSION.to_string(),
            config: config.clone(),
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(io::Error::other(e))
}

/// Writes to `path` through a temporary sibling renamed into place on [`Staged::commit`];
/// dropping without committing removes the temporary file.
struct Staged {
    tmp: PathBuf,
    path: PathBuf,
    done: bool,
}

impl Staged {
    fn create(path: &Path) -> Result<(Self, File)> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".tmp{}", std::process::id()));
        let tmp = path.with_file_name(name);
        let file = File::create(&tmp)?;
        Ok((
            Self {
                tmp,
                path: path.to_path_buf(),
                done: false,
            },
            file,
        ))
    }

    fn commit(mut self) -> Result<()> {
        fs::rename(&self.tmp, &self.path)?;
        self.done = true;
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let (staged, mut file) = Staged::create(path)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    staged.commit()
}

enum Sink {
    Jsonl(BufWriter<Box<dyn Write>>),
    Csv(csv::Writer<Box<dyn Write>>, Option<Vec<String>>),
}

/// Per-record output in JSONL (header line first) or CSV (header as a `#` comment line,
/// nested values as JSON text).
pub struct RecordWriter {
    sink: Sink,
    staged: Option<Staged>,
    pub count: u64,
}

impl RecordWriter {
    /// Writes to `path`, or to stdout when `None`.
    pub fn create(path: Option<&Path>, format: OutputFormat, header: &Header) -> Result<Self> {
        let (staged, out): (Option<Staged>, Box<dyn Write>) = match path {
            Some(p) => {
                let (s, f) = Staged::create(p)?;
                (Some(s), Box::new(f))
            }
            None => (None, Box::new(io::stdout())),
        };
        let head = serde_json::to_string(header)?;
        let sink = match format {
            OutputFormat::Jsonl => {
                let mut w = BufWriter::new(out);
                writeln!(w, "{head}")?;
                Sink::Jsonl(w)
            }
            OutputFormat::Csv => {
                let mut w = BufWriter::new(out);
                writeln!(w, "# {head}")?;
                let inner: Box<dyn Write> = Box::new(w);
                Sink::Csv(csv::Writer::from_writer(inner), None)
            }
        };
        Ok(Self {
            sink,
            staged,
            count: 0,
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        match &mut self.sink {
            Sink::Jsonl(w) => {
                serde_json::to_writer(&mut *w, record)?;
                w.write_all(b"\n")?;
            }
            Sink::Csv(w, columns) => {
                let value = serde_json::to_value(record)?;
                let Value::Object(map) = value else {
                    return Err(Error::Schema("CSV rows must be JSON objects".into()));
                };
                let cols = columns.get_or_insert_with(|| map.keys().cloned().collect());
                if self.count == 0 {
                    w.write_record(cols.iter()).map_err(csv_err)?;
                }
                let row: Vec<String> = cols
                    .iter()
                    .map(|c| match map.get(c) {
                        None | Some(Value::Null) => String::new(),
                        Some(Value::String(s)) => s.clone(),
                        Some(v) => v.to_string(),
                    })
                    .collect();
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        match self.sink {
            Sink::Jsonl(mut w) => w.flush()?,
            Sink::Csv(mut w, _) => w.flush()?,
        }
        if let Some(s) = self.staged {
            s.commit()?;
        }
        Ok(())
    }
}

fn check_schema(head: &Value) -> Result<()> {
    match head.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == SCHEMA_VERSION as u64 => Ok(()),
        Some(v) => Err(Error::Schema(format!(
            "unsupported schema major version {v} (this build reads {SCHEMA_VERSION})"
        ))),
        None => Err(Error::Schema("missing schema_version".into())),
    }
}

/// Reads a JSONL record file, rejecting unknown schema versions.
pub fn read_jsonl(path: &Path) -> Result<(Header, Vec<Value>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{} is empty", path.display())))??;
    let head: Value = serde_json::from_str(&first)?;
    check_schema(&head)?;
    let header: Header = serde_json::from_value(head)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok((header, records))
}

/// Single-JSON output: the header fields plus a `summary` object.
pub fn write_summary<T: Serialize>(path: Option<&Path>, header: &Header, summary: &T) -> Result<()> {
    let doc = serde_json::json!({
        "kind": header.kind,
        "schema_version": header.schema_version,
        "version": header.version,
        "config": header.config,
        "summary": summary,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub fn read_summary(path: &Path) -> Result<(Header, Value)> {
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    check_schema(&doc)?;
    let summary = doc
        .as_object_mut()
        .and_then(|m| m.remove("summary"))
        .ok_or_else(|| Error::Schema("missing summary".into()))?;
    Ok((serde_json::from_value(doc)?, summary))
}

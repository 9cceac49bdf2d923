//! Output directories, run manifests and error reporting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};
use vpc_core::Error;

use crate::config::{self, Entry};
use crate::Common;

pub const ARTIFACT_ROOT_VAR: &str = "VPC_ARTIFACT_ROOT";
pub const MANIFEST: &str = "run_manifest.json";
pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug)]
pub enum Failure {
    /// Exit 1: the request itself is malformed.
    Config(String),
    /// Exit 2: the request was valid but could not be carried out.
    Runtime { kind: &'static str, message: String },
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Failure {
        Failure::Config(msg.into())
    }

    pub fn runtime(kind: &'static str, msg: impl Into<String>) -> Failure {
        Failure::Runtime {
            kind,
            message: msg.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime { .. } => 2,
        }
    }

    pub fn to_json(&self) -> Value {
        let (kind, message) = match self {
            Failure::Config(m) => ("invalid_config", m.as_str()),
            Failure::Runtime { kind, message } => (*kind, message.as_str()),
        };
        json!({"error": {"kind": kind, "message": message, "exit_code": self.exit_code()}})
    }

    pub fn report(&self) -> ExitCode {
        eprintln!("{}", self.to_json());
        ExitCode::from(self.exit_code())
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::NonFinite(_) => "non_finite",
        Error::NonDeterministic(_) => "non_deterministic",
        Error::UnsupportedAudio(_) => "unsupported_audio",
        Error::TooShort(_) => "too_short",
        Error::Degenerate(_) => "degenerate",
        Error::Contract(_) => "contract",
        Error::Mismatch(_) => "mismatch",
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
        Error::Wav(_) => "wav",
        Error::Json(_) => "json",
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        Failure::runtime(error_kind(&e), e.to_string())
    }
}

/// `path` under the artifact root when it is relative and the root is set.
pub fn resolve_path(path: &Path) -> PathBuf {
    match std::env::var_os(ARTIFACT_ROOT_VAR) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Config file entries followed by `--set` overrides.
pub fn entries(common: &Common) -> Result<Vec<Entry>, Failure> {
    let mut out = match &common.config {
        Some(p) => config::parse_file(&resolve_path(p)).map_err(Failure::Config)?,
        None => Vec::new(),
    };
    out.extend(config::parse_overrides(&common.set).map_err(Failure::Config)?);
    Ok(out)
}

pub fn require_seed(common: &Common, command: &str) -> Result<u64, Failure> {
    common
        .seed
        .ok_or_else(|| Failure::config(format!("`{command}` is stochastic and needs --seed")))
}

/// Drops a `seed` key that agrees with `--seed`; one that disagrees is an error.
pub fn check_seed_key(entries: &mut Vec<Entry>, seed: u64) -> Result<(), Failure> {
    if let Some(e) = entries.iter().find(|e| e.key == "seed" && e.value.as_u64() != Some(seed)) {
        return Err(Failure::config(format!("{}: seed {} differs from --seed {seed}", e.origin, e.value)));
    }
    entries.retain(|e| e.key != "seed");
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    config_path: Option<PathBuf>,
    config: &'a Value,
    seed: Option<u64>,
    inputs: &'a BTreeMap<String, PathBuf>,
    artifacts: Vec<PathBuf>,
    status: &'a str,
    error: Option<Value>,
    tool_version: &'a str,
    timestamp_unix: u64,
}

pub struct Run {
    pub command: &'static str,
    pub out: PathBuf,
    seed: Option<u64>,
    config_path: Option<PathBuf>,
    config: Value,
    inputs: BTreeMap<String, PathBuf>,
}

impl Run {
    /// Creates the output directory, refusing one that already has content.
    pub fn start(command: &'static str, common: &Common, seed: Option<u64>, config: Value) -> Result<Run, Failure> {
        let out = resolve_path(&common.out);
        if out.exists() {
            let non_empty = std::fs::read_dir(&out)
                .map_err(|e| Failure::from(Error::io(&out, e)))?
                .next()
                .is_some();
            if non_empty {
                return Err(Failure::config(format!(
                    "output directory {} is not empty; artifacts are never overwritten",
                    out.display()
                )));
            }
        }
        std::fs::create_dir_all(&out).map_err(|e| Failure::from(Error::io(&out, e)))?;
        let path = out.join(RESOLVED_CONFIG);
        std::fs::write(&path, config::render(&config)).map_err(|e| Failure::from(Error::io(&path, e)))?;
        Ok(Run {
            command,
            out,
            seed,
            config_path: common.config.as_ref().map(|p| resolve_path(p)),
            config,
            inputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.to_path_buf());
    }

    /// Writes the manifest and prints the summary of a finished command.
    pub fn finish(self, result: Result<String, Failure>) -> Result<(), Failure> {
        let mut artifacts = Vec::new();
        list_files(&self.out, &self.out, &mut artifacts);
        artifacts.retain(|p| p != Path::new(MANIFEST));
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            config_path: self.config_path.clone(),
            config: &self.config,
            seed: self.seed,
            inputs: &self.inputs,
            artifacts,
            status: if result.is_ok() { "ok" } else { "failed" },
            error: result.as_ref().err().map(Failure::to_json),
            tool_version: env!("CARGO_PKG_VERSION"),
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let path = self.out.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Failure::from(Error::io(&path, e)))?;
        let summary = result?;
        print!("{summary}");
        println!("artifacts: {}", self.out.display());
        Ok(())
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(rd) = std::fs::read_dir(dir) else { return };
    let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list_files(root, &p, out);
        } else if let Ok(rel) = p.strip_prefix(root) {
            out.push(rel.to_path_buf());
        }
    }
}

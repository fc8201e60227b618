//! Shared plumbing: error reporting, config and model setup, run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ragan::backbones::{parse_selector, WeightSource};
use ragan::weights::write_atomic;
use ragan::{Config, RaGan32, RaganError};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Global;

pub enum Outcome {
    Complete,
    /// Finished, but this many inputs failed.
    Partial(usize),
}

#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub exit: u8,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage".into(),
            message: message.into(),
            exit: 2,
        }
    }

    /// Prints the error as one JSON object on stderr.
    pub fn report(&self, command: Option<&str>) -> ExitCode {
        let body = serde_json::json!({
            "error": { "kind": self.kind, "message": self.message, "command": command }
        });
        eprintln!("{body}");
        ExitCode::from(self.exit)
    }
}

impl From<RaganError> for CliError {
    fn from(e: RaganError) -> Self {
        Self {
            kind: e.kind().into(),
            message: e.to_string(),
            exit: 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn config(g: &Global) -> CliResult<Config> {
    let mut cfg = Config::load(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Toy model with any requested backbone/generator files, then trained
/// weights from `trained` (a checkpoint directory or weight file).
pub fn model(g: &Global, cfg: &Config, trained: Option<&Path>) -> CliResult<RaGan32> {
    let mut m = RaGan32::toy(cfg)?;
    for sel in &g.backbones {
        let (kind, src) = parse_selector(sel)?;
        m.load_backbone(kind, &src)?;
    }
    m.load_generator(&g.generator.parse::<WeightSource>()?)?;
    if let Some(path) = trained {
        let file = if path.is_dir() {
            path.join(ragan::training::CHECKPOINT_WEIGHTS)
        } else {
            path.to_path_buf()
        };
        m.load_trained(&file)?;
    }
    Ok(m)
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    RaganError::io(path, e).into()
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::from(RaganError::Validation(e.to_string())))?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    version: &'a str,
    inputs: Vec<String>,
    /// Output path (relative to the output directory) to SHA-256.
    outputs: BTreeMap<String, String>,
    failures: &'a [String],
    started_unix: u64,
    elapsed_seconds: f64,
}

/// Collects what a command read and wrote; [`Run::finish`] writes the
/// single run manifest next to the outputs.
pub struct Run {
    command: &'static str,
    out: PathBuf,
    started: Instant,
    started_unix: u64,
    inputs: Vec<String>,
    outputs: Vec<PathBuf>,
    pub failures: Vec<String>,
}

impl Run {
    pub fn start(command: &'static str, out: &Path) -> CliResult<Self> {
        ensure_dir(out)?;
        Ok(Self {
            command,
            out: out.to_path_buf(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            inputs: Vec::new(),
            outputs: Vec::new(),
            failures: Vec::new(),
        })
    }

    pub fn out(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn finish(self, cfg: &Config) -> CliResult<Outcome> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let bytes = std::fs::read(p).map_err(|e| io_err(p, e))?;
            let key = p.strip_prefix(&self.out).unwrap_or(p).display().to_string();
            outputs.insert(key, hex::encode(Sha256::digest(&bytes)));
        }
        let manifest = RunManifest {
            command: self.command,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: env!("RAGAN_GIT_DESCRIBE"),
            inputs: self.inputs,
            outputs,
            failures: &self.failures,
            started_unix: self.started_unix,
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
        };
        write_json(&self.out.join(RUN_MANIFEST), &manifest)?;
        Ok(if self.failures.is_empty() {
            Outcome::Complete
        } else {
            Outcome::Partial(self.failures.len())
        })
    }
}

/// Comma-separated ages; an empty list is a usage error.
pub fn parse_ages(s: &str) -> CliResult<Vec<u32>> {
    let ages: Vec<u32> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::usage(format!("bad age `{t}`")))
        })
        .collect::<CliResult<_>>()?;
    if ages.is_empty() {
        return Err(CliError::usage("no target ages given"));
    }
    for &a in &ages {
        ragan::AgeValue::new(a as f64)?;
    }
    Ok(ages)
}

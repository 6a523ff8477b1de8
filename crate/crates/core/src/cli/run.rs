//! Output directories, run manifests and artifact writing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{runtime, CliError};

pub const MANIFEST: &str = "manifest.json";
pub const RESULTS: &str = "results.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

/// Record of one command invocation, stored as `manifest.json` in its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub subcommand: String,
    pub command: Vec<String>,
    /// Parsed config as used by the run.
    pub config: Value,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: Option<f64>,
    pub wall_clock_s: Option<f64>,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Command-specific listing, e.g. generated studies with their ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Value>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(runtime)?;
    tmp.write_all(bytes).map_err(runtime)?;
    tmp.persist(path).map_err(|e| runtime(e.error))?;
    Ok(())
}

/// Shortest round-trip text of `v`, in scientific notation for very small or large magnitudes.
pub fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if v.is_finite() && a != 0.0 && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut b = serde_json::to_vec_pretty(value).map_err(runtime)?;
    b.push(b'\n');
    Ok(b)
}

/// Read a versioned JSON config; unknown keys and other versions are rejected.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<(T, Value), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    match raw.get("version") {
        Some(Value::Number(n)) if n.as_u64() == Some(1) => {}
        Some(v) => return Err(CliError::Config(format!("{}: unsupported config version {v}", path.display()))),
        None => return Err(CliError::Config(format!("{}: missing config version", path.display()))),
    }
    let parsed = serde_json::from_value(raw.clone()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((parsed, raw))
}

/// Read JSON written by an earlier run.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// An in-progress command writing into its output directory.
pub struct Run {
    pub out: PathBuf,
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    /// Create the output directory and write the `running` manifest. Refuses an
    /// output directory that holds a completed run or lies inside an input directory.
    pub fn start(
        out: &Path,
        subcommand: &str,
        argv: &[String],
        config: Value,
        seeds: Vec<u64>,
        inputs: &[&Path],
    ) -> Result<Self, CliError> {
        let out_abs = absolute(out);
        for input in inputs {
            let input = absolute(input);
            if input.is_dir() && out_abs.starts_with(&input) {
                return Err(CliError::Config(format!(
                    "output {} lies inside input directory {}",
                    out.display(),
                    input.display()
                )));
            }
        }
        let path = out.join(MANIFEST);
        if path.exists() {
            let old: RunManifest = read_json(&path)?;
            if old.status == RunStatus::Completed {
                return Err(runtime(format!("{} already holds the completed run {}", out.display(), old.run_id)));
            }
        }
        fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
        let started_at = unix_now();
        let mut h = crc32fast::Hasher::new();
        h.update(subcommand.as_bytes());
        h.update(config.to_string().as_bytes());
        h.update(format!("{seeds:?}").as_bytes());
        let run_id = format!("{subcommand}-{}-{:08x}", (started_at * 1000.0) as u64, h.finalize()).replace(' ', "-");
        let manifest = RunManifest {
            run_id,
            subcommand: subcommand.to_string(),
            command: argv.to_vec(),
            config,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            inputs: inputs.iter().map(|p| absolute(p)).collect(),
            output_dir: out_abs,
            outputs: Vec::new(),
            started_at,
            finished_at: None,
            wall_clock_s: None,
            status: RunStatus::Running,
            error: None,
            summary: None,
        };
        let run = Self { out: out.to_path_buf(), manifest, clock: Instant::now() };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> Result<(), CliError> {
        write_atomic(&self.out.join(MANIFEST), &to_json_bytes(&self.manifest)?)
    }

    /// Note a file written under the output directory.
    pub fn record(&mut self, rel: impl Into<String>) {
        self.manifest.outputs.push(rel.into());
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(runtime)?;
        }
        write_atomic(&path, &to_json_bytes(value)?)?;
        self.record(rel);
        Ok(())
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<(), CliError> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(runtime)?;
        }
        write_atomic(&path, text.as_bytes())?;
        self.record(rel);
        Ok(())
    }

    pub fn set_summary(&mut self, summary: Value) {
        self.manifest.summary = Some(summary);
    }

    /// Write `results.json`, then mark the manifest completed.
    pub fn finish<T: Serialize>(mut self, results: &T) -> Result<(), CliError> {
        self.write_json(RESULTS, results)?;
        self.manifest.status = RunStatus::Completed;
        self.manifest.finished_at = Some(unix_now());
        self.manifest.wall_clock_s = Some(self.clock.elapsed().as_secs_f64());
        self.write_manifest()
    }

    /// Mark the manifest failed; the original error is returned.
    pub fn fail(mut self, err: CliError) -> CliError {
        self.manifest.status = RunStatus::Failed;
        self.manifest.error = Some(err.to_string());
        self.manifest.finished_at = Some(unix_now());
        self.manifest.wall_clock_s = Some(self.clock.elapsed().as_secs_f64());
        let _ = self.write_manifest();
        err
    }
}

/// Run `body` inside a started run, recording failure in its manifest.
pub fn with_run<F>(run: Run, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut Run) -> Result<Value, CliError>,
{
    let mut run = run;
    match body(&mut run) {
        Ok(results) => run.finish(&results),
        Err(e) => Err(run.fail(e)),
    }
}

/// Container files (`*.cmrc`) of a directory, sorted by name.
pub fn container_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(runtime)?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "cmrc") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

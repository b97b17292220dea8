//! Run manifest and line-delimited JSON logging.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use voxbox::train::RunConfig;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Succeeded,
    Failed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Fully resolved configuration, after environment and flag overrides.
    pub config: RunConfig,
    pub code_version: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub out_dir: PathBuf,
    pub status: Status,
}

impl RunManifest {
    pub fn start(command: &str, config_path: Option<&Path>, config: &RunConfig, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_path: config_path.map(Path::to_path_buf),
            config: config.clone(),
            code_version: CODE_VERSION.to_string(),
            seed: config.train.seed,
            started_at: now(),
            finished_at: None,
            out_dir: out_dir.to_path_buf(),
            status: Status::Running,
        }
    }

    /// Writes the manifest and the standalone config snapshot.
    pub fn write(&self) -> io::Result<()> {
        write_json(&self.out_dir.join(MANIFEST_FILE), self)?;
        write_json(&self.out_dir.join(CONFIG_FILE), &self.config)
    }

    pub fn finish(&mut self, status: Status) -> io::Result<()> {
        self.status = status;
        self.finished_at = Some(now());
        self.write()
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
}

/// One JSON object per line, to stdout and optionally to `log.jsonl`.
pub struct JsonLog {
    file: Option<BufWriter<File>>,
}

impl JsonLog {
    pub fn stdout() -> Self {
        JsonLog { file: None }
    }

    pub fn to_dir(dir: &Path) -> io::Result<Self> {
        Ok(JsonLog {
            file: Some(BufWriter::new(File::create(dir.join(LOG_FILE))?)),
        })
    }

    /// `record` must serialize to an object; a `ts` field is prepended.
    pub fn emit<S: Serialize>(&mut self, record: &S) {
        let mut obj = Map::new();
        obj.insert("ts".into(), Value::String(now()));
        match serde_json::to_value(record) {
            Ok(Value::Object(m)) => obj.extend(m),
            Ok(other) => {
                obj.insert("value".into(), other);
            }
            Err(e) => {
                obj.insert("event".into(), "log_error".into());
                obj.insert("message".into(), e.to_string().into());
            }
        }
        let line = Value::Object(obj).to_string();
        println!("{line}");
        if let Some(f) = &mut self.file {
            // A failing log file must not take the run down with it.
            let _ = writeln!(f, "{line}").and_then(|_| f.flush());
        }
    }

    pub fn event(&mut self, name: &str, fields: Value) {
        let mut obj = Map::new();
        obj.insert("event".into(), name.into());
        if let Value::Object(m) = fields {
            obj.extend(m);
        }
        self.emit(&Value::Object(obj));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::start("train", None, &RunConfig::default(), dir.path());
        m.write().unwrap();
        m.finish(Status::Succeeded).unwrap();
        let back: RunManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(back.finished_at.is_some());
        let cfg = RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn log_lines_are_objects() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = JsonLog::to_dir(dir.path()).unwrap();
        log.event("hello", serde_json::json!({"n": 1}));
        log.emit(&3);
        drop(log);
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["event"], "hello");
        assert_eq!(lines[0]["n"], 1);
        assert_eq!(lines[1]["value"], 3);
        assert!(lines.iter().all(|l| l["ts"].is_string()));
    }
}

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

const LOCK_FILE: &str = ".lock";

/// An output directory held exclusively for the life of a command.
pub struct RunDir {
    path: PathBuf,
    seed: u64,
    config_hash: String,
}

impl RunDir {
    /// Creates `path` if needed, takes the lock and writes `config.json`.
    pub fn open(path: &Path, cfg: &RunConfig) -> CliResult<Self> {
        let dir = Self::lock(path, cfg.seed(), cfg.hash())?;
        dir.write_text("config.json", &cfg.to_json())?;
        Ok(dir)
    }

    /// Locks a directory whose outputs are not tied to one run config.
    pub fn lock(path: &Path, seed: u64, config_hash: String) -> CliResult<Self> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Usage(format!(
                    "{} is locked by another run (delete {} if stale)",
                    path.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(CliError::io(&lock, e)),
        }
        Ok(RunDir {
            path: path.to_path_buf(),
            seed,
            config_hash,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        let p = self.file(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.file(name);
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    /// Pretty JSON with the run's seed and config hash stamped in.
    pub fn write_json(&self, name: &str, value: impl Serialize) -> CliResult<()> {
        let stamped = self.stamp(value);
        self.write_text(name, &(serde_json::to_string_pretty(&stamped).expect("json") + "\n"))
    }

    pub fn stamp(&self, value: impl Serialize) -> Value {
        let mut v = serde_json::to_value(value).expect("serializable");
        if let Value::Object(map) = &mut v {
            map.insert("seed".into(), json!(self.seed));
            map.insert("config_hash".into(), json!(self.config_hash));
        }
        v
    }

    /// Truncates `name` and returns an appender for JSON lines.
    pub fn jsonl(&self, name: &str) -> CliResult<JsonLines> {
        let p = self.file(name);
        let file = File::create(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(JsonLines { path: p, file })
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

pub struct JsonLines {
    path: PathBuf,
    file: File,
}

impl JsonLines {
    pub fn push(&mut self, value: &Value) -> CliResult<()> {
        writeln!(self.file, "{value}").map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn read_json(path: &Path) -> CliResult<Value> {
    if !path.exists() {
        return Err(CliError::missing(path));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

//! The output directory: content-named artifacts plus one record per
//! finished stage under `stages/`. Stages find their inputs only through
//! these records.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sslspk::network::{hex_digest, Checkpoint};

use crate::error::{io_err, CliError};

/// Stages that produce models, in pipeline order.
pub const MODEL_STAGES: [&str; 4] = ["train-dino", "train-supervised", "iterate", "finetune-lm"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Role → file name relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    /// Model name → checkpoint file name, in the order produced.
    pub models: Vec<(String, String)>,
    pub summary: Value,
}

pub struct Store {
    root: PathBuf,
    lock: PathBuf,
}

impl Store {
    /// Create the directory if needed and take its lock.
    pub fn open(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root.join("stages")).map_err(io_err(root))?;
        let lock = root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CliError::Locked(lock)),
            Err(e) => return Err(io_err(&lock)(e)),
        }
        Ok(Self { root: root.to_path_buf(), lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Write `bytes` as `<stem>-<hash>.<ext>` and return the file name.
    pub fn put(&self, stem: &str, ext: &str, bytes: &[u8]) -> Result<String, CliError> {
        let name = format!("{stem}-{}.{ext}", &hex_digest(bytes)[..16]);
        let path = self.path(&name);
        let tmp = self.path(&format!(".{name}.tmp"));
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(name)
    }

    pub fn put_checkpoint(&self, stem: &str, ck: &Checkpoint) -> Result<String, CliError> {
        self.put(stem, "ssvc", &ck.to_bytes())
    }

    pub fn checkpoint(&self, name: &str) -> Result<Checkpoint, CliError> {
        Ok(Checkpoint::load(&self.path(name))?)
    }

    pub fn read_text(&self, name: &str) -> Result<String, CliError> {
        let p = self.path(name);
        fs::read_to_string(&p).map_err(io_err(p))
    }

    fn record_path(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.json"))
    }

    pub fn record(&self, stage: &str) -> Result<Option<StageRecord>, CliError> {
        let p = self.record_path(stage);
        match fs::read(&p) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| CliError::Io { path: p, message: format!("corrupt stage record: {e}") }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(p)(e)),
        }
    }

    /// The record of `needs`, or a dependency error on behalf of `stage`.
    pub fn require(&self, stage: &'static str, needs: &'static str) -> Result<StageRecord, CliError> {
        self.record(needs)?.ok_or_else(|| CliError::Dependency { stage, needs, missing: self.record_path(needs) })
    }

    pub fn save_record(&self, rec: &StageRecord) -> Result<(), CliError> {
        let p = self.record_path(&rec.stage);
        let mut bytes = serde_json::to_vec_pretty(rec).expect("record serializes");
        bytes.push(b'\n');
        let tmp = p.with_extension("json.tmp");
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &p).map_err(io_err(&p))
    }

    /// Every stored model as (name, checkpoint file), in pipeline order.
    pub fn models(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        for stage in MODEL_STAGES {
            if let Some(r) = self.record(stage)? {
                out.extend(r.models);
            }
        }
        Ok(out)
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

//! Persisted per-unit status with output digests.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::{file_digest, read_json, sha256_hex, tree_digest, write_json_atomic};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum UnitStatus {
    Pending,
    Done,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitRecord {
    #[serde(flatten)]
    pub status: UnitStatus,
    /// Output paths relative to the store root.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl UnitRecord {
    pub fn pending(note: Option<String>) -> Self {
        Self {
            status: UnitStatus::Pending,
            outputs: Vec::new(),
            digest: None,
            note,
        }
    }

    pub fn is_done(&self) -> bool {
        self.status == UnitStatus::Done
    }
}

/// Keys are `<stage>/<topic>/<unit>`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub units: BTreeMap<String, UnitRecord>,
}

impl RunState {
    pub fn load(path: &Path, run_id: &str) -> io::Result<Self> {
        if path.exists() {
            let mut s: Self = read_json(path)?;
            s.run_id = run_id.to_string();
            Ok(s)
        } else {
            Ok(Self {
                run_id: run_id.to_string(),
                units: BTreeMap::new(),
            })
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        write_json_atomic(path, self)
    }

    pub fn get(&self, key: &str) -> Option<&UnitRecord> {
        self.units.get(key)
    }

    pub fn is_done(&self, key: &str) -> bool {
        self.units.get(key).is_some_and(UnitRecord::is_done)
    }
}

/// Digest over a set of files and directories under `root`.
pub fn outputs_digest(root: &Path, outputs: &[String]) -> io::Result<String> {
    let mut sorted: Vec<&String> = outputs.iter().collect();
    sorted.sort();
    let mut acc = String::new();
    for rel in sorted {
        let path = root.join(rel);
        let d = if path.is_dir() {
            tree_digest(&path)?
        } else {
            file_digest(&path)?
        };
        acc.push_str(rel);
        acc.push('\0');
        acc.push_str(&d);
        acc.push('\n');
    }
    Ok(sha256_hex(acc.as_bytes()))
}

/// True when every recorded output still hashes to the recorded digest.
pub fn verify(root: &Path, record: &UnitRecord) -> bool {
    match &record.digest {
        Some(d) => outputs_digest(root, &record.outputs).is_ok_and(|now| &now == d),
        None => false,
    }
}

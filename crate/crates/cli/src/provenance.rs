//! Run manifests: what was run, with which configuration, on which bytes.
//!
//! Content hashes follow git's object scheme (`blob <len>\0` + content)
//! but use SHA-256. A directory is summarised by hashing the sorted
//! `relative-path\thash\n` lines of every file under it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(blob_hash(&bytes))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeHash {
    pub hash: String,
    pub files: usize,
}

pub fn tree_hash(root: &Path) -> Result<TreeHash> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    let mut lines: Vec<String> = files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(root).unwrap_or(p);
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            Ok(format!("{rel}\t{}\n", file_hash(p)?))
        })
        .collect::<Result<_>>()?;
    lines.sort();
    Ok(TreeHash {
        hash: blob_hash(lines.concat().as_bytes()),
        files: lines.len(),
    })
}

/// One command's entry in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: Value,
    pub inputs: BTreeMap<String, Value>,
    pub outputs: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(config: Value) -> Self {
        RunRecord {
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input_file(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.to_string(), Value::String(file_hash(path)?));
        Ok(())
    }

    pub fn input_tree(&mut self, name: &str, root: &Path) -> Result<()> {
        self.inputs
            .insert(name.to_string(), serde_json::to_value(tree_hash(root)?)?);
        Ok(())
    }

    /// Records the hash of a file that was just written into `dir`.
    pub fn output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.to_string(), file_hash(&dir.join(name))?);
        Ok(())
    }
}

/// Merges `record` under `command` into `dir/manifest.json`, so that a
/// train followed by an evaluate leaves both entries behind.
pub fn write_manifest(dir: &Path, command: &str, record: RunRecord) -> Result<()> {
    let path = dir.join(MANIFEST_NAME);
    let mut runs: BTreeMap<String, RunRecord> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        Err(_) => BTreeMap::new(),
    };
    runs.insert(command.to_string(), record);
    fs::write(&path, serde_json::to_string_pretty(&runs)? + "\n").with_context(|| format!("writing {}", path.display()))
}

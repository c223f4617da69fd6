//! Content-addressed stage directories under the experiment root.
//!
//! A stage lives at `<root>/<area>/<key>/` where `key` digests everything
//! the stage's output depends on, upstream keys included. `manifest.json`
//! is written last, so its presence marks a complete stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dlt_core::digest::json_digest;
use dlt_core::Error;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Top-level directories of an experiment root.
pub const AREAS: [&str; 7] = ["splits", "models", "aux", "correspondence", "attacks", "query", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub stage: String,
    pub key: String,
    pub seed: u64,
    pub config_digest: String,
    /// Upstream stage name to key.
    pub inputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub key: String,
    pub dir: PathBuf,
}

impl Stage {
    /// `name` is the subcommand that produces the stage; `area` is its
    /// top-level directory.
    pub fn new<T: Serialize>(root: &Path, area: &str, name: &str, material: &T) -> Self {
        let key = json_digest(&(name, material))[..16].to_string();
        Self { name: name.to_string(), dir: root.join(area).join(&key), key }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST)
    }

    pub fn manifest(&self) -> Option<Manifest> {
        let text = fs::read_to_string(self.manifest_path()).ok()?;
        let m: Manifest = serde_json::from_str(&text).ok()?;
        (m.key == self.key && m.stage == self.name).then_some(m)
    }

    pub fn is_complete(&self) -> bool {
        self.manifest().is_some()
    }

    /// Fails with the producing stage's name when it has not run.
    pub fn require(&self) -> Result<()> {
        if self.is_complete() {
            return Ok(());
        }
        Err(Error::MissingStage {
            stage: self.name.clone(),
            detail: format!("no completed output at {}; run `dlt {}` first", self.dir.display(), self.name),
        }
        .into())
    }

    /// Clears leftovers of an interrupted run and creates the directory.
    pub fn begin(&self) -> Result<()> {
        if self.dir.exists() {
            fs::remove_dir_all(&self.dir).with_context(|| format!("clearing {}", self.dir.display()))?;
        }
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        Ok(())
    }

    pub fn finish(&self, seed: u64, config_digest: &str, inputs: &[&Stage]) -> Result<Manifest> {
        let mut outputs = Vec::new();
        collect_files(&self.dir, &self.dir, &mut outputs)?;
        outputs.sort();
        let m = Manifest {
            version: MANIFEST_VERSION,
            stage: self.name.clone(),
            key: self.key.clone(),
            seed,
            config_digest: config_digest.to_string(),
            inputs: inputs.iter().map(|s| (s.name.clone(), s.key.clone())).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs,
        };
        fs::write(self.manifest_path(), serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }
}

fn collect_files(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(base, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST) {
            out.push(path.strip_prefix(base).expect("under base").to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Completed stages in `area`, newest manifest first.
pub fn completed_in(root: &Path, area: &str) -> Result<Vec<(PathBuf, Manifest)>> {
    let dir = root.join(area);
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let Ok(text) = fs::read_to_string(path.join(MANIFEST)) else { continue };
        if let Ok(m) = serde_json::from_str::<Manifest>(&text) {
            out.push((path, m));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

//! Experiment configuration: one strict JSON document per experiment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dlt_core::attacks::{AttackParams, TuningConfig};
use dlt_core::datasets::synth::DeskConfig;
use dlt_core::digest::json_digest;
use dlt_core::models::{AuxConfig, TrainConfig};
use dlt_core::nn::arch::{BLACKBOX_ARCHS, WHITEBOX_ARCHS};
use dlt_core::nn::LayerId;
use dlt_core::query::QueryConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_root")]
    pub root: PathBuf,
    #[serde(default)]
    pub environment: EnvironmentSection,
    #[serde(default)]
    pub models: ModelsSection,
    #[serde(default)]
    pub aux: AuxConfig,
    #[serde(default)]
    pub correspondence: CorrespondenceSection,
    #[serde(default)]
    pub tuning: TuningConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub query: QuerySection,
}

fn default_root() -> PathBuf {
    PathBuf::from("runs")
}

/// Where the base images and the class grouping come from. Absent paths
/// select the bundled desk-scale environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentSection {
    /// Directory holding a saved base dataset; synthesized from `desk` when absent.
    pub base: Option<PathBuf>,
    pub desk: DeskConfig,
    pub mapping: Option<PathBuf>,
    /// Partition file; when absent with a custom mapping, a seeded random halving.
    pub partition: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsSection {
    pub whitebox: Vec<String>,
    pub blackbox: Vec<String>,
    pub train: TrainConfig,
}

impl Default for ModelsSection {
    fn default() -> Self {
        Self {
            whitebox: WHITEBOX_ARCHS.iter().map(|s| s.to_string()).collect(),
            blackbox: BLACKBOX_ARCHS.iter().map(|s| s.to_string()).collect(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrespondenceSection {
    pub samples_per_class: usize,
    /// Strongest (target, proxy) pairs carried into the attack stages.
    pub pairs: usize,
}

impl Default for CorrespondenceSection {
    fn default() -> Self {
        Self { samples_per_class: 100, pairs: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub params: AttackParams,
    /// Feature-distance weight per whitebox architecture; missing entries use 0.
    pub eta: BTreeMap<String, f64>,
    /// Fixed FDA layer sets per architecture. Architectures listed here skip
    /// greedy tuning.
    pub layers: BTreeMap<String, Vec<LayerId>>,
    /// Clean images attacked per target; 0 attacks every non-target image.
    pub examples: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { params: AttackParams::default(), eta: BTreeMap::new(), layers: BTreeMap::new(), examples: 0 }
    }
}

impl AttackSection {
    pub fn eta_for(&self, arch: &str) -> f64 {
        self.eta.get(arch).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuerySection {
    pub rgf: QueryConfig,
    pub checkpoints: Vec<usize>,
    /// Eligible examples refined per variant; 0 refines all of them.
    pub examples: usize,
}

impl Default for QuerySection {
    fn default() -> Self {
        Self {
            rgf: QueryConfig { max_queries: 500, ..QueryConfig::default() },
            checkpoints: vec![0, 100, 250, 500],
            examples: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn desk_default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            root: default_root(),
            environment: EnvironmentSection::default(),
            models: ModelsSection::default(),
            aux: AuxConfig::default(),
            correspondence: CorrespondenceSection::default(),
            tuning: TuningConfig::default(),
            attack: AttackSection::default(),
            query: QuerySection::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text).context("config is not valid JSON")?;
        match probe.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CONFIG_VERSION) => {}
            Some(v) => bail!("config schema version {v} is not supported (expected {CONFIG_VERSION})"),
            None => bail!("config lacks a numeric `version` field (expected {CONFIG_VERSION})"),
        }
        let cfg: Self = serde_json::from_value(probe).context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file and resolves relative input paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let env = &mut cfg.environment;
        for p in [&mut env.base, &mut env.mapping, &mut env.partition].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.params.validate()?;
        self.tuning.params.validate()?;
        if self.models.whitebox.is_empty() || self.models.blackbox.is_empty() {
            bail!("at least one whitebox and one blackbox architecture are required");
        }
        if self.correspondence.samples_per_class == 0 || self.correspondence.pairs == 0 {
            bail!("correspondence.samples_per_class and correspondence.pairs must be positive");
        }
        if self.attack.eta.values().any(|&e| !(e >= 0.0)) {
            bail!("attack.eta values must be non-negative");
        }
        if self.query.checkpoints.windows(2).any(|w| w[0] > w[1]) {
            bail!("query.checkpoints must be ascending");
        }
        Ok(())
    }

    /// Every referenced input path must exist at launch.
    pub fn check_paths(&self) -> Result<()> {
        let env = &self.environment;
        for (what, p) in [("base", &env.base), ("mapping", &env.mapping), ("partition", &env.partition)] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!("environment.{what} path {} does not exist", p.display());
                }
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_takes_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"version": 1}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::desk_default());
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "sead": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "attack": {"iters": 3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"seed": 2}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.attack.eta.insert("resnet-a".into(), 1e-3);
        cfg.attack.layers.insert("resnet-a".into(), vec!["2.1".parse().unwrap()]);
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "attack": {"params": {"alpha": 1.0}}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "attack": {"eta": {"resnet-a": -1}}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "query": {"checkpoints": [5, 1]}}"#).is_err());
    }
}

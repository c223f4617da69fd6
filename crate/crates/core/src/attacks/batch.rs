//! Adversarial batches and their on-disk form.
//!
//! A batch directory holds `clean.xadv`, `delta.xadv` (f32, `(n, c, h, w)`),
//! `labels.xadv` (u32 true labels in the evaluation label space) and
//! `manifest.json`.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3, Axis, Ix4};
use serde::{Deserialize, Serialize};

use super::{AttackFamily, Perturbation};
use crate::container::{self, TensorData};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Slack allowed on the L∞ bound when checking stored examples.
const LINF_SLACK: f64 = 1e-9;

/// `max |delta| <= epsilon + 1e-9` and `clean + delta` inside `[0,1]`.
pub fn constraint_ok(clean: &ArrayView3<f64>, delta: &ArrayView3<f64>, epsilon: f64) -> bool {
    clean.iter().zip(delta.iter()).all(|(&c, &d)| d.abs() <= epsilon + LINF_SLACK && (0.0..=1.0).contains(&(c + d)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample {
    pub clean: Array3<f64>,
    pub delta: Array3<f64>,
    pub proxy: usize,
    pub target_set: Vec<usize>,
    pub family: AttackFamily,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchManifest {
    pub version: u32,
    pub family: AttackFamily,
    pub config_digest: String,
    pub seed: u64,
    pub epsilon: f64,
    pub proxy: usize,
    pub proxy_name: String,
    pub target_set: Vec<usize>,
    pub target_names: Vec<String>,
    pub example_ids: Vec<usize>,
    pub constraint_ok: Vec<bool>,
    pub loss_traces: Vec<Vec<f64>>,
    pub final_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub clean: Array4<f64>,
    pub delta: Array4<f64>,
    /// True labels in the label space the batch will be evaluated in.
    pub labels: Vec<usize>,
    pub manifest: BatchManifest,
}

pub struct BatchMeta<'a> {
    pub family: AttackFamily,
    pub config_digest: String,
    pub seed: u64,
    pub epsilon: f64,
    pub proxy: usize,
    pub proxy_name: &'a str,
    pub target_set: &'a [usize],
    pub target_names: &'a [String],
}

impl AdversarialBatch {
    pub fn new(
        clean: Array4<f64>,
        labels: Vec<usize>,
        example_ids: Vec<usize>,
        perturbation: Perturbation,
        meta: BatchMeta<'_>,
    ) -> Result<Self> {
        let n = clean.dim().0;
        if perturbation.delta.dim() != clean.dim() || labels.len() != n || example_ids.len() != n {
            return Err(Error::Shape("clean, delta, labels and ids must agree in length".into()));
        }
        let mut batch = Self {
            clean,
            delta: perturbation.delta,
            labels,
            manifest: BatchManifest {
                version: MANIFEST_VERSION,
                family: meta.family,
                config_digest: meta.config_digest,
                seed: meta.seed,
                epsilon: meta.epsilon,
                proxy: meta.proxy,
                proxy_name: meta.proxy_name.to_string(),
                target_set: meta.target_set.to_vec(),
                target_names: meta.target_names.to_vec(),
                example_ids,
                constraint_ok: Vec::new(),
                loss_traces: perturbation.loss_traces,
                final_losses: perturbation.final_losses,
            },
        };
        batch.manifest.constraint_ok = batch.check_constraints();
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn adversarial(&self) -> Array4<f64> {
        &self.clean + &self.delta
    }

    /// Constraint check of every example against the manifest epsilon.
    pub fn check_constraints(&self) -> Vec<bool> {
        self.clean
            .axis_iter(Axis(0))
            .zip(self.delta.axis_iter(Axis(0)))
            .map(|(c, d)| constraint_ok(&c, &d, self.manifest.epsilon))
            .collect()
    }

    pub fn example(&self, i: usize) -> AdversarialExample {
        AdversarialExample {
            clean: self.clean.index_axis(Axis(0), i).to_owned(),
            delta: self.delta.index_axis(Axis(0), i).to_owned(),
            proxy: self.manifest.proxy,
            target_set: self.manifest.target_set.clone(),
            family: self.manifest.family,
            loss_trace: self.manifest.loss_traces.get(i).cloned().unwrap_or_default(),
        }
    }

    /// Same attack restricted to the given positions.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<f64>>| idx.iter().filter_map(|&i| v.get(i).cloned()).collect();
        let mut manifest = self.manifest.clone();
        manifest.example_ids = idx.iter().map(|&i| self.manifest.example_ids[i]).collect();
        manifest.constraint_ok = idx.iter().map(|&i| self.manifest.constraint_ok[i]).collect();
        manifest.loss_traces = pick(&self.manifest.loss_traces);
        manifest.final_losses = idx.iter().filter_map(|&i| self.manifest.final_losses.get(i).copied()).collect();
        Self {
            clean: self.clean.select(Axis(0), idx),
            delta: self.delta.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            manifest,
        }
    }

    /// Writes the batch. Fails if a stored value would not survive the f32
    /// container exactly.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let exact = |a: &Array4<f64>| a.iter().all(|&v| (v as f32) as f64 == v);
        if !exact(&self.clean) || !exact(&self.delta) {
            return Err(Error::InvalidArgument("batch values are not f32-exact; quantize before saving".into()));
        }
        fs::create_dir_all(dir)?;
        container::save(&dir.join("clean.xadv"), &TensorData::from_f64(&self.clean.clone().into_dyn()))?;
        container::save(&dir.join("delta.xadv"), &TensorData::from_f64(&self.delta.clone().into_dyn()))?;
        container::save(&dir.join("labels.xadv"), &TensorData::from_labels(&self.labels))?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BatchManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported batch manifest version {}", manifest.version)));
        }
        let tensor = |f: &str| -> Result<Array4<f64>> {
            container::load(&dir.join(f))?
                .into_f64()?
                .into_dimensionality::<Ix4>()
                .map_err(|e| Error::Format(format!("{f}: {e}")))
        };
        let batch = Self {
            clean: tensor("clean.xadv")?,
            delta: tensor("delta.xadv")?,
            labels: container::load(&dir.join("labels.xadv"))?.into_labels()?,
            manifest,
        };
        let n = batch.labels.len();
        if batch.clean.dim() != batch.delta.dim()
            || batch.clean.dim().0 != n
            || batch.manifest.example_ids.len() != n
            || batch.manifest.constraint_ok.len() != n
        {
            return Err(Error::Format(format!("{}: inconsistent batch lengths", dir.display())));
        }
        Ok(batch)
    }
}

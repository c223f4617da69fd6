//! Trained classifiers, checkpoints, feature extraction and the
//! per-(class, layer) auxiliary feature-distribution probes.

mod aux;
mod train;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::datasets::LabelSpaceSpec;
use crate::error::{Error, Result};
use crate::nn::{arch, ops, serialize, LayerId, Network, Normalization};

pub use aux::{auc, train_aux_models, AuxConfig, AuxEntry, AuxModelSet, Probe};
pub use train::{train_classifier, TrainConfig, TrainReport};

/// Inference batch size; bounds peak memory of the im2col buffers.
pub const INFER_CHUNK: usize = 256;

/// Anything that maps `[0,1]` image batches to class probabilities.
pub trait Classifier: Send + Sync {
    fn id(&self) -> String;
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> [usize; 3];
    fn probabilities(&self, batch: &ArrayView4<f64>) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub probabilities: Array2<f64>,
}

pub fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn predict<C: Classifier + ?Sized>(model: &C, batch: &ArrayView4<f64>) -> Result<Prediction> {
    let probabilities = model.probabilities(batch)?;
    Ok(Prediction { labels: argmax_rows(&probabilities), probabilities })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub architecture_id: String,
    pub label_space: LabelSpaceSpec,
    pub label_space_digest: String,
    pub input_shape: [usize; 3],
    pub normalization: Normalization,
    pub accuracy: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
}

/// A trained classifier over a label space. Immutable after training.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    pub info: ModelInfo,
    pub network: Network,
}

impl ModelHandle {
    pub fn label_space(&self) -> &LabelSpaceSpec {
        &self.info.label_space
    }

    pub fn logits(&self, batch: &ArrayView4<f64>) -> Result<Array2<f64>> {
        let n = batch.dim().0;
        let mut out = Array2::zeros((n, self.network.num_classes));
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let l = self.network.logits(&batch.slice(s![start..end, .., .., ..]))?;
            out.slice_mut(s![start..end, ..]).assign(&l);
        }
        Ok(out)
    }

    /// Feature map of `layer` for every input.
    pub fn extract_features(&self, layer: &LayerId, batch: &ArrayView4<f64>) -> Result<Array4<f64>> {
        self.network.site_index(layer)?;
        let n = batch.dim().0;
        let mut parts = Vec::new();
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let fw = self.network.forward(&batch.slice(s![start..end, .., .., ..]), Some(layer))?;
            parts.push(self.network.feature(&fw.tape, layer)?.clone());
        }
        if parts.is_empty() {
            let probe = self.network.forward(&Array4::zeros((1, 3, self.info.input_shape[1], self.info.input_shape[2])).view(), Some(layer))?;
            let (_, c, h, w) = self.network.feature(&probe.tape, layer)?.dim();
            return Ok(Array4::zeros((0, c, h, w)));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("consistent feature shapes"))
    }

    /// Gradient of `sum(features(layer) * upstream)` with respect to the input.
    pub fn feature_input_gradient(
        &self,
        layer: &LayerId,
        batch: &ArrayView4<f64>,
        upstream: &Array4<f64>,
    ) -> Result<Array4<f64>> {
        let site = self.network.site_index(layer)?;
        let fw = self.network.forward(batch, Some(layer))?;
        let f = self.network.feature(&fw.tape, layer)?;
        if f.dim() != upstream.dim() {
            return Err(Error::Shape(format!("upstream {:?} vs features {:?}", upstream.dim(), f.dim())));
        }
        Ok(self.network.backward(&fw.tape, None, &[(site, upstream.clone())], None))
    }

    pub fn accuracy(&self, inputs: &ArrayView4<f64>, labels: &[usize]) -> Result<f64> {
        let pred = predict(self, inputs)?;
        let correct = pred.labels.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("model.weights"))?);
        serialize::write_weights(&mut w, &self.network.params)?;
        w.flush()?;
        fs::write(dir.join("model.json"), serde_json::to_string_pretty(&self.info)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let info: ModelInfo = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
        if info.label_space.digest() != info.label_space_digest {
            return Err(Error::Format(format!("{}: label-space digest mismatch", dir.display())));
        }
        let mut network = arch::build(&info.architecture_id, info.label_space.len(), info.input_shape[1], 0)?;
        let params = serialize::read_weights(BufReader::new(File::open(dir.join("model.weights"))?))?;
        if params.len() != network.params.len()
            || params.iter().zip(&network.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format(format!(
                "{}: weights do not match architecture `{}`",
                dir.display(),
                info.architecture_id
            )));
        }
        network.params = params;
        network.normalization = info.normalization.clone();
        Ok(Self { info, network })
    }
}

impl Classifier for ModelHandle {
    fn id(&self) -> String {
        format!("{}@{}", self.info.architecture_id, &self.info.label_space_digest[..12])
    }

    fn num_classes(&self) -> usize {
        self.network.num_classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.info.input_shape
    }

    fn probabilities(&self, batch: &ArrayView4<f64>) -> Result<Array2<f64>> {
        Ok(ops::softmax(&self.logits(batch)?.view()))
    }
}

use std::f64::consts::PI;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelHandle, ModelInfo};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{arch, ops, optim::Adam, Normalization};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, learning_rate: 3e-3, weight_decay: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub validation_accuracy: Option<f64>,
}

fn channel_stats(x: &Array4<f64>) -> Normalization {
    let c = x.dim().1;
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for plane in x.axis_iter(Axis(1)) {
        let m = plane.mean().unwrap_or(0.0);
        let v = plane.mapv(|p| (p - m).powi(2)).mean().unwrap_or(1.0);
        mean.push(m);
        std.push(v.sqrt().max(1e-3));
    }
    Normalization { mean, std }
}

/// Mini-batch Adam with cosine learning-rate decay. Deterministic for a
/// fixed seed (single-threaded kernels).
pub fn train_classifier(
    dataset: &LabeledDataset,
    architecture_id: &str,
    cfg: &TrainConfig,
    validation: Option<&LabeledDataset>,
) -> Result<(ModelHandle, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
    }
    let side = dataset.inputs.dim().2;
    let mut net = arch::build(architecture_id, dataset.num_classes(), side, cfg.seed)?;
    net.normalization = channel_stats(&dataset.inputs);
    let mut opt = Adam::new(&net.params, cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        opt.lr = cfg.learning_rate * 0.5 * (1.0 + (PI * epoch as f64 / cfg.epochs as f64).cos());
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = dataset.inputs.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let fw = net.forward(&x.view(), None)?;
            let logits = fw.logits.as_ref().expect("full pass");
            let (loss, dlogits) = ops::cross_entropy(&logits.view(), &y);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += loss * chunk.len() as f64;
            let mut grads = net.zero_grads();
            net.backward(&fw.tape, Some(&dlogits), &[], Some(&mut grads));
            opt.step(&mut net.params, &grads);
        }
        let mean = total / dataset.len() as f64;
        log::info!("{architecture_id} epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let mut handle = ModelHandle {
        info: ModelInfo {
            architecture_id: architecture_id.to_string(),
            label_space: dataset.spec.clone(),
            label_space_digest: dataset.spec.digest(),
            input_shape: net.input_shape,
            normalization: net.normalization.clone(),
            accuracy: None,
            seed: cfg.seed,
            epochs: cfg.epochs,
        },
        network: net,
    };
    let validation_accuracy = match validation {
        Some(v) => Some(handle.accuracy(&v.inputs.view(), &v.labels)?),
        None => None,
    };
    handle.info.accuracy = validation_accuracy;
    Ok((handle, TrainReport { epoch_losses, validation_accuracy }))
}

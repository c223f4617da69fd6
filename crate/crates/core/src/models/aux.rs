//! Auxiliary feature-distribution probes estimating `p(y = c | f_l(x))`.
//!
//! Each probe global-average-pools the feature map, standardises the pooled
//! vector with statistics frozen at training time, and applies one hidden
//! ReLU layer and a sigmoid output.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView4, Axis, Ix1, Ix2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Classifier, ModelHandle};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{ops, optim::Adam, LayerId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub in_mean: Array1<f64>,
    pub in_std: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct PooledPass {
    z: Array2<f64>,
    h: Array2<f64>,
    p: Array1<f64>,
}

impl Probe {
    fn pooled_forward(&self, g: &ArrayView2<f64>) -> PooledPass {
        let z = (g - &self.in_mean) / &self.in_std;
        let h = ops::linear_forward(&z.view(), &self.w1.view(), &self.b1.view()).mapv(|v| v.max(0.0));
        let p = h.dot(&self.w2).mapv(|v| sigmoid(v + self.b2));
        PooledPass { z, h, p }
    }

    /// Gradient of `sum_i up_i * p_i` w.r.t. the pooled input, plus parameter
    /// gradients `[w1, b1, w2, b2]` when asked.
    fn pooled_backward(
        &self,
        pass: &PooledPass,
        dlogit: &ArrayView1<f64>,
        want_params: bool,
    ) -> (Array2<f64>, Option<[ArrayD<f64>; 4]>) {
        let n = dlogit.len();
        let dh = Array2::from_shape_fn((n, self.w2.len()), |(i, j)| {
            if pass.h[[i, j]] > 0.0 {
                dlogit[i] * self.w2[j]
            } else {
                0.0
            }
        });
        let dz = dh.dot(&self.w1);
        let dg = dz / &self.in_std;
        let pg = want_params.then(|| {
            [
                dh.t().dot(&pass.z).into_dyn(),
                dh.sum_axis(Axis(0)).into_dyn(),
                pass.h.t().dot(dlogit).into_dyn(),
                Array1::from_elem(1, dlogit.sum()).into_dyn(),
            ]
        });
        (dg, pg)
    }

    /// Probability for each feature map in the batch.
    pub fn prob(&self, features: &ArrayView4<f64>) -> Array1<f64> {
        self.pooled_forward(&ops::gap_forward(features).view()).p
    }

    /// Probabilities and the gradient of `sum_i upstream_i * p_i` with respect
    /// to the feature maps.
    pub fn prob_and_grad(&self, features: &ArrayView4<f64>, upstream: &ArrayView1<f64>) -> (Array1<f64>, Array4<f64>) {
        let pass = self.pooled_forward(&ops::gap_forward(features).view());
        let dlogit = Array1::from_shape_fn(pass.p.len(), |i| upstream[i] * pass.p[i] * (1.0 - pass.p[i]));
        let (dg, _) = self.pooled_backward(&pass, &dlogit.view(), false);
        (pass.p, ops::gap_backward(&dg.view(), features.dim()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self { hidden: 32, epochs: 300, learning_rate: 1e-2, weight_decay: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxEntry {
    pub class: usize,
    pub layer: LayerId,
    pub probe: Probe,
}

/// Frozen probes for one whitebox, keyed by `(class, layer)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxModelSet {
    pub whitebox: String,
    pub entries: Vec<AuxEntry>,
}

impl AuxModelSet {
    pub fn get(&self, class: usize, layer: &LayerId) -> Result<&Probe> {
        self.entries
            .iter()
            .find(|e| e.class == class && &e.layer == layer)
            .map(|e| &e.probe)
            .ok_or_else(|| Error::MissingAux { class, layer: layer.to_string() })
    }

    pub fn contains(&self, class: usize, layer: &LayerId) -> bool {
        self.get(class, layer).is_ok()
    }

    pub fn layers(&self) -> Vec<LayerId> {
        let mut l: Vec<LayerId> = self.entries.iter().map(|e| e.layer.clone()).collect();
        l.sort();
        l.dedup();
        l
    }

    pub fn merge(&mut self, other: AuxModelSet) {
        for e in other.entries {
            if !self.contains(e.class, &e.layer) {
                self.entries.push(e);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn train_probe(pos: &ArrayView2<f64>, neg: &ArrayView2<f64>, cfg: &AuxConfig, rng: &mut ChaCha8Rng) -> Probe {
    let g = ndarray::concatenate(Axis(0), &[pos.view(), neg.view()]).expect("same width");
    let y: Array1<f64> = (0..g.nrows()).map(|i| if i < pos.nrows() { 1.0 } else { 0.0 }).collect();
    let c = g.ncols();
    let in_mean = g.mean_axis(Axis(0)).expect("non-empty");
    let in_std = g.var_axis(Axis(0), 0.0).mapv(|v| v.sqrt().max(1e-6));
    let n1 = Normal::new(0.0, (2.0 / c as f64).sqrt()).expect("finite");
    let n2 = Normal::new(0.0, (1.0 / cfg.hidden as f64).sqrt()).expect("finite");
    let mut params: Vec<ArrayD<f64>> = vec![
        Array2::from_shape_fn((cfg.hidden, c), |_| n1.sample(rng)).into_dyn(),
        Array1::<f64>::zeros(cfg.hidden).into_dyn(),
        Array1::from_shape_fn(cfg.hidden, |_| n2.sample(rng)).into_dyn(),
        Array1::<f64>::zeros(1).into_dyn(),
    ];
    let assemble = |p: &[ArrayD<f64>]| Probe {
        in_mean: in_mean.clone(),
        in_std: in_std.clone(),
        w1: p[0].clone().into_dimensionality::<Ix2>().expect("w1"),
        b1: p[1].clone().into_dimensionality::<Ix1>().expect("b1"),
        w2: p[2].clone().into_dimensionality::<Ix1>().expect("w2"),
        b2: p[3][[0]],
    };
    let mut opt = Adam::new(&params, cfg.learning_rate, cfg.weight_decay);
    let n = g.nrows() as f64;
    for _ in 0..cfg.epochs {
        let probe = assemble(&params);
        let pass = probe.pooled_forward(&g.view());
        // d(mean BCE)/dlogit = (p - y) / n
        let dlogit = (&pass.p - &y) / n;
        let (_, pg) = probe.pooled_backward(&pass, &dlogit.view(), true);
        let grads: Vec<ArrayD<f64>> = pg.expect("param grads").into_iter().collect();
        opt.step(&mut params, &grads);
    }
    assemble(&params)
}

/// Trains one balanced binary probe per `(class, layer)`. Negatives are a
/// seeded uniform sample, without replacement, of as many non-class
/// examples as there are positives.
pub fn train_aux_models(
    whitebox: &ModelHandle,
    dataset: &LabeledDataset,
    layers: &[LayerId],
    classes: &[usize],
    cfg: &AuxConfig,
) -> Result<AuxModelSet> {
    for l in layers {
        whitebox.network.site_index(l)?;
    }
    let nclass = whitebox.num_classes();
    for &c in classes {
        if c >= nclass {
            return Err(Error::InvalidArgument(format!("class {c} outside the whitebox label space")));
        }
        if !dataset.labels.contains(&c) {
            return Err(Error::EmptyClass(c));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for layer in layers {
        let feats = whitebox.extract_features(layer, &dataset.inputs.view())?;
        let pooled = ops::gap_forward(&feats.view());
        for &c in classes {
            let pos_idx = dataset.indices_of(c);
            let others: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] != c).collect();
            let mut neg_idx: Vec<usize> = others.choose_multiple(&mut rng, pos_idx.len()).copied().collect();
            neg_idx.shuffle(&mut rng);
            let pos = pooled.select(Axis(0), &pos_idx);
            let neg = pooled.select(Axis(0), &neg_idx);
            let probe = train_probe(&pos.view(), &neg.view(), cfg, &mut rng);
            entries.push(AuxEntry { class: c, layer: layer.clone(), probe });
        }
    }
    Ok(AuxModelSet { whitebox: whitebox.id(), entries })
}

/// Area under the ROC curve by pair counting (ties count one half).
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for &p in pos {
        for &q in neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};

use dlt_core::datasets::{LabelSpaceSpec, LabeledDataset, Role, SuperClass};
use dlt_core::models::{Classifier, ModelHandle, ModelInfo};
use dlt_core::nn::ops::ConvGeom;
use dlt_core::nn::{arch, Network, Normalization, Op};
use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};

pub fn toy_space(n: usize) -> LabelSpaceSpec {
    let classes = (0..n).map(|i| SuperClass { name: format!("c{i}"), members: vec![i] }).collect();
    LabelSpaceSpec::new("toy", classes, "toy-base").unwrap()
}

pub fn handle(network: Network) -> ModelHandle {
    let spec = toy_space(network.num_classes);
    ModelHandle {
        info: ModelInfo {
            architecture_id: network.arch.clone(),
            label_space_digest: spec.digest(),
            label_space: spec,
            input_shape: network.input_shape,
            normalization: network.normalization.clone(),
            accuracy: None,
            seed: 0,
            epochs: 0,
        },
        network,
    }
}

/// Randomly initialised registry network on `side`x`side` inputs.
pub fn tiny(arch_id: &str, classes: usize, side: usize, seed: u64) -> ModelHandle {
    handle(arch::build(arch_id, classes, side, seed).unwrap())
}

/// `logits = w x + b` on a two-value input laid out as `(2, 1, 1)`; the single
/// feature site is the identity.
pub fn affine(w: Array2<f64>, b: Array1<f64>) -> ModelHandle {
    let classes = w.nrows();
    let geom = ConvGeom { cin: 2, cout: 2, kernel: 1, stride: 1, pad: 0, groups: 1 };
    let mut eye = Array4::<f64>::zeros((2, 2, 1, 1));
    eye[[0, 0, 0, 0]] = 1.0;
    eye[[1, 1, 0, 0]] = 1.0;
    let network = Network {
        arch: "affine".into(),
        input_shape: [2, 1, 1],
        num_classes: classes,
        normalization: Normalization::identity(2),
        stages: vec![vec![vec![Op::Conv { geom, weight: 0, bias: 1 }]]],
        head_weight: 2,
        head_bias: 3,
        params: vec![eye.into_dyn(), Array1::<f64>::zeros(2).into_dyn(), w.into_dyn(), b.into_dyn()],
    };
    handle(network)
}

/// Classifier backed by a per-image closure returning a class index; the
/// closure sees the image as a flat slice. Counts every image it labels.
pub struct FnClassifier<F: Fn(&[f64]) -> usize + Send + Sync> {
    pub f: F,
    pub classes: usize,
    pub shape: [usize; 3],
    pub calls: AtomicUsize,
    /// Fails once this many images have been labelled.
    pub fail_after: Option<usize>,
}

impl<F: Fn(&[f64]) -> usize + Send + Sync> FnClassifier<F> {
    pub fn new(classes: usize, shape: [usize; 3], f: F) -> Self {
        Self { f, classes, shape, calls: AtomicUsize::new(0), fail_after: None }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F: Fn(&[f64]) -> usize + Send + Sync> Classifier for FnClassifier<F> {
    fn id(&self) -> String {
        format!("fn-{}", self.classes)
    }
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }
    fn probabilities(&self, batch: &ArrayView4<f64>) -> dlt_core::Result<Array2<f64>> {
        let n = batch.dim().0;
        if let Some(limit) = self.fail_after {
            if self.calls() + n > limit {
                return Err(dlt_core::Error::InvalidArgument("oracle went away".into()));
            }
        }
        self.calls.fetch_add(n, Ordering::SeqCst);
        let mut p = Array2::zeros((n, self.classes));
        for (i, x) in batch.axis_iter(Axis(0)).enumerate() {
            let v: Vec<f64> = x.iter().copied().collect();
            p[[i, (self.f)(&v)]] = 1.0;
        }
        Ok(p)
    }
}

/// `per_class` examples of each of `classes` classes laid out as `(2, 1, 1)`:
/// channel 0 encodes the label, channel 1 the example index.
pub fn coded_dataset(classes: usize, per_class: usize) -> LabeledDataset {
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut inputs = Array4::zeros((n, 2, 1, 1));
    for i in 0..n {
        inputs[[i, 0, 0, 0]] = encode(labels[i], classes);
        inputs[[i, 1, 0, 0]] = encode(i, n);
    }
    LabeledDataset {
        spec: toy_space(classes),
        role: Role::Validation,
        inputs,
        base_labels: labels.clone(),
        labels,
    }
}

pub fn encode(k: usize, n: usize) -> f64 {
    (k as f64 + 0.5) / n as f64
}

pub fn decode(v: f64, n: usize) -> usize {
    ((v * n as f64).floor() as usize).min(n - 1)
}

/// Two classes with `logit_0 = f(x)` and `logit_1 = 0`, so the margin loss
/// for target `{0}` equals `f(x)` exactly. Counts every image it scores.
pub struct ScalarOracle<F: Fn(&[f64]) -> f64 + Send + Sync> {
    pub f: F,
    pub shape: [usize; 3],
    pub calls: AtomicUsize,
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> ScalarOracle<F> {
    pub fn new(shape: [usize; 3], f: F) -> Self {
        Self { f, shape, calls: AtomicUsize::new(0) }
    }
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Classifier for ScalarOracle<F> {
    fn id(&self) -> String {
        "scalar".into()
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }
    fn probabilities(&self, batch: &ArrayView4<f64>) -> dlt_core::Result<Array2<f64>> {
        let n = batch.dim().0;
        self.calls.fetch_add(n, Ordering::SeqCst);
        let mut p = Array2::zeros((n, 2));
        for (i, x) in batch.axis_iter(Axis(0)).enumerate() {
            let v: Vec<f64> = x.iter().copied().collect();
            let z = (self.f)(&v);
            // softmax of (z, 0) without overflow
            let (a, b) = if z >= 0.0 { (1.0, (-z).exp()) } else { (z.exp(), 1.0) };
            p[[i, 0]] = a / (a + b);
            p[[i, 1]] = b / (a + b);
        }
        Ok(p)
    }
}

/// Forwards to a real classifier and counts the images it is shown.
pub struct Counting {
    pub inner: std::sync::Arc<dyn Classifier>,
    pub calls: AtomicUsize,
}

impl Counting {
    pub fn new(inner: std::sync::Arc<dyn Classifier>) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Classifier for Counting {
    fn id(&self) -> String {
        self.inner.id()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn input_shape(&self) -> [usize; 3] {
        self.inner.input_shape()
    }
    fn probabilities(&self, batch: &ArrayView4<f64>) -> dlt_core::Result<Array2<f64>> {
        self.calls.fetch_add(batch.dim().0, Ordering::SeqCst);
        self.inner.probabilities(batch)
    }
}

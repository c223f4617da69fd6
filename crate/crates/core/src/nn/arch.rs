//! Registry of the small convolutional families used at desk scale.
//!
//! Whitebox families: `resnet-a`, `densenet-a`.
//! Blackbox families: `resnet-b`, `densenet-b`, `vgg-s`, `mobilenet-s`.

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::network::{Network, Normalization, Op};
use super::ops::ConvGeom;
use crate::error::{Error, Result};

pub const WHITEBOX_ARCHS: [&str; 2] = ["resnet-a", "densenet-a"];
pub const BLACKBOX_ARCHS: [&str; 4] = ["resnet-b", "densenet-b", "vgg-s", "mobilenet-s"];

pub fn registered_archs() -> Vec<&'static str> {
    WHITEBOX_ARCHS.iter().chain(BLACKBOX_ARCHS.iter()).copied().collect()
}

struct Builder {
    params: Vec<ArrayD<f64>>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize, groups: usize) -> Op {
        let geom = ConvGeom { cin, cout, kernel, stride, pad: kernel / 2, groups };
        let fan_in = (geom.cin_per_group() * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let [a, b, c, d] = geom.weight_shape();
        let w = Array4::from_shape_fn((a, b, c, d), |_| normal.sample(&mut self.rng));
        let weight = self.push(w.into_dyn());
        let bias = self.push(Array1::<f64>::zeros(cout).into_dyn());
        Op::Conv { geom, weight, bias }
    }

    fn push(&mut self, p: ArrayD<f64>) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    fn head(&mut self, cin: usize, classes: usize) -> (usize, usize) {
        let normal = Normal::new(0.0, (1.0 / cin as f64).sqrt()).expect("finite std");
        let w = Array2::from_shape_fn((classes, cin), |_| normal.sample(&mut self.rng));
        (self.push(w.into_dyn()), self.push(Array1::<f64>::zeros(classes).into_dyn()))
    }

    fn stem(&mut self, cout: usize) -> Vec<Op> {
        vec![self.conv(3, cout, 3, 1, 1), Op::Relu, Op::MaxPool2]
    }

    fn res(&mut self, c: usize) -> Vec<Op> {
        let body = vec![self.conv(c, c, 3, 1, 1), Op::Relu, self.conv(c, c, 3, 1, 1)];
        vec![Op::Residual { body, shortcut: vec![] }]
    }

    fn res_down(&mut self, cin: usize, cout: usize) -> Vec<Op> {
        let body = vec![self.conv(cin, cout, 3, 2, 1), Op::Relu, self.conv(cout, cout, 3, 1, 1)];
        let shortcut = vec![self.conv(cin, cout, 1, 2, 1)];
        vec![Op::Residual { body, shortcut }]
    }

    fn dense_layer(&mut self, cin: usize, growth: usize) -> Vec<Op> {
        vec![Op::Concat { body: vec![self.conv(cin, growth, 3, 1, 1), Op::Relu] }]
    }

    fn transition(&mut self, cin: usize, cout: usize) -> Vec<Op> {
        vec![self.conv(cin, cout, 1, 1, 1), Op::Relu, Op::AvgPool2]
    }

    fn plain(&mut self, cin: usize, cout: usize, pool: bool) -> Vec<Op> {
        let mut v = vec![self.conv(cin, cout, 3, 1, 1), Op::Relu];
        if pool {
            v.push(Op::MaxPool2);
        }
        v
    }

    fn separable(&mut self, cin: usize, cout: usize, stride: usize) -> Vec<Op> {
        vec![
            self.conv(cin, cin, 3, stride, cin),
            Op::Relu,
            self.conv(cin, cout, 1, 1, 1),
            Op::Relu,
        ]
    }
}

fn dense_stage(b: &mut Builder, mut c: usize, growth: usize, layers: usize) -> (Vec<Vec<Op>>, usize) {
    let mut blocks = Vec::new();
    for _ in 0..layers {
        blocks.push(b.dense_layer(c, growth));
        c += growth;
    }
    (blocks, c)
}

/// Builds a freshly initialised network. Input images are `3 x side x side`
/// with `side` divisible by 8.
pub fn build(arch: &str, num_classes: usize, side: usize, seed: u64) -> Result<Network> {
    if num_classes == 0 {
        return Err(Error::InvalidArgument("a classifier needs at least one class".into()));
    }
    if side % 8 != 0 || side == 0 {
        return Err(Error::InvalidArgument(format!("image side {side} must be a multiple of 8")));
    }
    let mut b = Builder { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
    let (stages, last_c): (Vec<Vec<Vec<Op>>>, usize) = match arch {
        "resnet-a" => {
            let s1 = vec![b.stem(16)];
            let s2 = vec![b.res(16), b.res(16)];
            let s3 = vec![b.res_down(16, 32), b.res(32)];
            let s4 = vec![b.res_down(32, 48)];
            (vec![s1, s2, s3, s4], 48)
        }
        "resnet-b" => {
            let s1 = vec![b.stem(12)];
            let s2 = vec![b.res(12)];
            let s3 = vec![b.res_down(12, 24), b.res(24)];
            let s4 = vec![b.res_down(24, 48), b.res(48)];
            (vec![s1, s2, s3, s4], 48)
        }
        "densenet-a" => {
            let s1 = vec![b.stem(16)];
            let (s2, c) = dense_stage(&mut b, 16, 8, 3);
            let t = b.transition(c, 24);
            let (mut s3, c) = dense_stage(&mut b, 24, 8, 3);
            s3.insert(0, t);
            let s4 = vec![b.transition(c, 48)];
            (vec![s1, s2, s3, s4], 48)
        }
        "densenet-b" => {
            let s1 = vec![b.stem(12)];
            let (s2, c) = dense_stage(&mut b, 12, 6, 4);
            let t = b.transition(c, 24);
            let (mut s3, c) = dense_stage(&mut b, 24, 6, 4);
            s3.insert(0, t);
            let t2 = b.transition(c, 32);
            let (mut s4, c) = dense_stage(&mut b, 32, 8, 2);
            s4.insert(0, t2);
            (vec![s1, s2, s3, s4], c)
        }
        "vgg-s" => {
            let s1 = vec![b.plain(3, 12, false), b.plain(12, 16, true)];
            let s2 = vec![b.plain(16, 24, false), b.plain(24, 32, true)];
            let s3 = vec![b.plain(32, 48, true)];
            (vec![s1, s2, s3], 48)
        }
        "mobilenet-s" => {
            let s1 = vec![b.stem(16)];
            let s2 = vec![b.separable(16, 24, 1), b.separable(24, 24, 1)];
            let s3 = vec![b.separable(24, 48, 2), b.separable(48, 48, 1)];
            let s4 = vec![b.separable(48, 64, 2)];
            (vec![s1, s2, s3, s4], 64)
        }
        other => {
            return Err(Error::UnknownArch {
                arch: other.to_string(),
                known: registered_archs().join(", "),
            })
        }
    };
    let (head_weight, head_bias) = b.head(last_c, num_classes);
    Ok(Network {
        arch: arch.to_string(),
        input_shape: [3, side, side],
        num_classes,
        normalization: Normalization::identity(3),
        stages,
        head_weight,
        head_bias,
        params: b.params,
    })
}

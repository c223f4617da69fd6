//! Staged feed-forward networks with addressable feature sites.
//!
//! A network is a list of stages, each a list of blocks, each a short
//! sequence of [`Op`]s. The output of every block is a feature site, named by
//! a 1-based `(stage, block)` [`LayerId`]. The classifier head is a global
//! average pool of the last site followed by one affine map.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, ArrayD, ArrayView4, Axis, Ix1, Ix2, Ix4};
use serde::{Deserialize, Serialize};

use super::ops::{self, ConvCache, ConvGeom};
use crate::error::{Error, Result};

/// Path into the stage/block hierarchy, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerId {
    pub path: Vec<usize>,
}

impl LayerId {
    pub fn new(stage: usize, block: usize) -> Self {
        Self { path: vec![stage, block] }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.path.iter().map(|p| p.to_string()).collect();
        write!(f, "{}", parts.join("."))
    }
}

impl FromStr for LayerId {
    type Err = Error;

    /// Accepts `2.1`, `(2,1)` or `2,1`.
    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim().trim_start_matches('(').trim_end_matches(')');
        let path = trimmed
            .split(|c| c == '.' || c == ',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Parse(format!("bad layer id `{s}`")))?;
        if path.is_empty() || path.contains(&0) {
            return Err(Error::Parse(format!("bad layer id `{s}`")));
        }
        Ok(Self { path })
    }
}

impl TryFrom<String> for LayerId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerId> for String {
    fn from(l: LayerId) -> String {
        l.to_string()
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Conv { geom: ConvGeom, weight: usize, bias: usize },
    Relu,
    MaxPool2,
    AvgPool2,
    /// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual { body: Vec<Op>, shortcut: Vec<Op> },
    /// Channel concatenation `[x, body(x)]`.
    Concat { body: Vec<Op> },
}

enum OpCache {
    Conv(ConvCache),
    Relu(Array4<f64>),
    MaxPool(Vec<u8>, (usize, usize, usize, usize)),
    AvgPool((usize, usize, usize, usize)),
    Residual { body: Vec<OpCache>, shortcut: Vec<OpCache>, out: Array4<f64> },
    Concat { body: Vec<OpCache>, cin: usize },
}

/// Per-channel affine normalisation applied before the first stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub arch: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub normalization: Normalization,
    pub stages: Vec<Vec<Vec<Op>>>,
    pub head_weight: usize,
    pub head_bias: usize,
    pub params: Vec<ArrayD<f64>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    in_dim: (usize, usize, usize, usize),
    caches: Vec<Vec<OpCache>>,
    outputs: Vec<Array4<f64>>,
    pooled: Option<Array2<f64>>,
}

impl Tape {
    /// Number of blocks that were executed.
    pub fn depth(&self) -> usize {
        self.outputs.len()
    }
}

pub struct Forward {
    /// `None` when the pass stopped at an intermediate site.
    pub logits: Option<Array2<f64>>,
    pub tape: Tape,
}

/// Parameter gradients, index-aligned with [`Network::params`].
pub type ParamGrads = Vec<ArrayD<f64>>;

fn run_seq(ops: &[Op], x: Array4<f64>, params: &[ArrayD<f64>]) -> (Array4<f64>, Vec<OpCache>) {
    let mut caches = Vec::with_capacity(ops.len());
    let mut h = x;
    for op in ops {
        let (y, c) = run_op(op, h, params);
        h = y;
        caches.push(c);
    }
    (h, caches)
}

fn view4(p: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    p.view().into_dimensionality::<Ix4>().expect("rank-4 param")
}

fn view1(p: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    p.view().into_dimensionality::<Ix1>().expect("rank-1 param")
}

fn run_op(op: &Op, x: Array4<f64>, params: &[ArrayD<f64>]) -> (Array4<f64>, OpCache) {
    match op {
        Op::Conv { geom, weight, bias } => {
            let (y, c) =
                ops::conv2d_forward(&x.view(), &view4(&params[*weight]), &view1(&params[*bias]), geom);
            (y, OpCache::Conv(c))
        }
        Op::Relu => {
            let y = ops::relu_forward(x);
            (y.clone(), OpCache::Relu(y))
        }
        Op::MaxPool2 => {
            let d = x.dim();
            let (y, arg) = ops::maxpool2_forward(&x.view());
            (y, OpCache::MaxPool(arg, d))
        }
        Op::AvgPool2 => {
            let d = x.dim();
            (ops::avgpool2_forward(&x.view()), OpCache::AvgPool(d))
        }
        Op::Residual { body, shortcut } => {
            let (b, bc) = run_seq(body, x.clone(), params);
            let (sc, scc) = if shortcut.is_empty() {
                (x, Vec::new())
            } else {
                run_seq(shortcut, x, params)
            };
            let y = ops::relu_forward(b + sc);
            (y.clone(), OpCache::Residual { body: bc, shortcut: scc, out: y })
        }
        Op::Concat { body } => {
            let cin = x.dim().1;
            let (b, bc) = run_seq(body, x.clone(), params);
            let y = ndarray::concatenate(Axis(1), &[x.view(), b.view()]).expect("concat dims");
            (y, OpCache::Concat { body: bc, cin })
        }
    }
}

fn back_seq(
    ops: &[Op],
    caches: &[OpCache],
    dy: Array4<f64>,
    params: &[ArrayD<f64>],
    grads: &mut Option<&mut ParamGrads>,
) -> Array4<f64> {
    let mut d = dy;
    for (op, cache) in ops.iter().zip(caches).rev() {
        d = back_op(op, cache, d, params, grads);
    }
    d
}

fn back_op(
    op: &Op,
    cache: &OpCache,
    dy: Array4<f64>,
    params: &[ArrayD<f64>],
    grads: &mut Option<&mut ParamGrads>,
) -> Array4<f64> {
    match (op, cache) {
        (Op::Conv { geom, weight, bias }, OpCache::Conv(c)) => {
            let want = grads.is_some();
            let (dx, pg) =
                ops::conv2d_backward(c, &dy.view(), &view4(&params[*weight]), geom, want);
            if let (Some(g), Some((dw, db))) = (grads.as_deref_mut(), pg) {
                g[*weight] += &dw.into_dyn();
                g[*bias] += &db.into_dyn();
            }
            dx
        }
        (Op::Relu, OpCache::Relu(y)) => ops::relu_backward(&y.view(), &dy.view()),
        (Op::MaxPool2, OpCache::MaxPool(arg, d)) => ops::maxpool2_backward(arg, &dy.view(), *d),
        (Op::AvgPool2, OpCache::AvgPool(d)) => ops::avgpool2_backward(&dy.view(), *d),
        (Op::Residual { body, shortcut }, OpCache::Residual { body: bc, shortcut: scc, out }) => {
            let dsum = ops::relu_backward(&out.view(), &dy.view());
            let dx_body = back_seq(body, bc, dsum.clone(), params, grads);
            let dx_sc = if shortcut.is_empty() {
                dsum
            } else {
                back_seq(shortcut, scc, dsum, params, grads)
            };
            dx_body + dx_sc
        }
        (Op::Concat { body }, OpCache::Concat { body: bc, cin }) => {
            let d_pass = dy.slice(s![.., ..*cin, .., ..]).to_owned();
            let d_body = dy.slice(s![.., *cin.., .., ..]).to_owned();
            d_pass + back_seq(body, bc, d_body, params, grads)
        }
        _ => unreachable!("op/cache mismatch"),
    }
}

impl Network {
    /// Every addressable feature site, in execution order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(si, st)| (0..st.len()).map(move |bi| LayerId::new(si + 1, bi + 1)))
            .collect()
    }

    /// Flat block index of a site, or an error listing the valid paths.
    pub fn site_index(&self, layer: &LayerId) -> Result<usize> {
        let ids = self.layer_ids();
        ids.iter().position(|l| l == layer).ok_or_else(|| Error::UnknownLayer {
            layer: layer.to_string(),
            valid: ids.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", "),
        })
    }

    pub fn last_layer(&self) -> LayerId {
        self.layer_ids().pop().expect("network has at least one block")
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn check_input(&self, x: &ArrayView4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if [c, h, w] != self.input_shape {
            return Err(Error::Shape(format!(
                "expected inputs of shape {:?}, got {:?}",
                self.input_shape,
                [c, h, w]
            )));
        }
        Ok(())
    }

    fn normalize(&self, x: &ArrayView4<f64>) -> Array4<f64> {
        let mut out = x.to_owned();
        for (c, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.normalization.mean[c], self.normalization.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    /// Runs the network on raw `[0,1]` inputs. With `upto`, execution stops
    /// after that site and no logits are produced.
    pub fn forward(&self, x: &ArrayView4<f64>, upto: Option<&LayerId>) -> Result<Forward> {
        self.check_input(x)?;
        let stop = match upto {
            Some(l) => Some(self.site_index(l)?),
            None => None,
        };
        let mut h = self.normalize(x);
        let mut caches = Vec::new();
        let mut outputs = Vec::new();
        'outer: for stage in &self.stages {
            for block in stage {
                let (y, c) = run_seq(block, h, &self.params);
                caches.push(c);
                outputs.push(y.clone());
                h = y;
                if stop == Some(outputs.len() - 1) {
                    break 'outer;
                }
            }
        }
        let (logits, pooled) = if stop.is_none() {
            let pooled = ops::gap_forward(&h.view());
            let w = self.params[self.head_weight].view().into_dimensionality::<Ix2>().expect("head");
            let b = view1(&self.params[self.head_bias]);
            (Some(ops::linear_forward(&pooled.view(), &w, &b)), Some(pooled))
        } else {
            (None, None)
        };
        Ok(Forward { logits, tape: Tape { in_dim: x.dim(), caches, outputs, pooled } })
    }

    /// Output of a site recorded on the tape.
    pub fn feature<'t>(&self, tape: &'t Tape, layer: &LayerId) -> Result<&'t Array4<f64>> {
        let i = self.site_index(layer)?;
        tape.outputs
            .get(i)
            .ok_or_else(|| Error::Shape(format!("layer {layer} was not reached by the forward pass")))
    }

    /// Back-propagates `dlogits` plus any gradients injected at feature sites
    /// and returns the gradient with respect to the raw input.
    pub fn backward(
        &self,
        tape: &Tape,
        dlogits: Option<&Array2<f64>>,
        site_grads: &[(usize, Array4<f64>)],
        mut grads: Option<&mut ParamGrads>,
    ) -> Array4<f64> {
        let depth = tape.depth();
        let mut d: Option<Array4<f64>> = None;
        if let Some(dl) = dlogits {
            let pooled = tape.pooled.as_ref().expect("backward through logits needs a full pass");
            let w = self.params[self.head_weight].view().into_dimensionality::<Ix2>().expect("head");
            let (dpool, pg) = ops::linear_backward(&pooled.view(), &w, &dl.view(), grads.is_some());
            if let (Some(g), Some((dw, db))) = (grads.as_deref_mut(), pg) {
                g[self.head_weight] += &dw.into_dyn();
                g[self.head_bias] += &db.into_dyn();
            }
            d = Some(ops::gap_backward(&dpool.view(), tape.outputs[depth - 1].dim()));
        }
        let flat: Vec<&Vec<Op>> = self.stages.iter().flatten().collect();
        for i in (0..depth).rev() {
            for (site, g) in site_grads {
                if *site == i {
                    d = Some(match d.take() {
                        Some(acc) => acc + g,
                        None => g.clone(),
                    });
                }
            }
            if let Some(dy) = d.take() {
                d = Some(back_seq(flat[i], &tape.caches[i], dy, &self.params, &mut grads));
            }
        }
        let mut dx = d.unwrap_or_else(|| Array4::zeros(tape.in_dim));
        for (c, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
            let s = self.normalization.std[c];
            plane.mapv_inplace(|v| v / s);
        }
        dx
    }

    /// Class logits for a batch.
    pub fn logits(&self, x: &ArrayView4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, None)?.logits.expect("full pass"))
    }

    /// Applies the head to a last-site feature map.
    pub fn readout(&self, features: &ArrayView4<f64>) -> Array2<f64> {
        let pooled = ops::gap_forward(features);
        let w = self.params[self.head_weight].view().into_dimensionality::<Ix2>().expect("head");
        ops::linear_forward(&pooled.view(), &w, &view1(&self.params[self.head_bias]))
    }
}

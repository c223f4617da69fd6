//! Targeted L∞ attacks against whitebox ensembles.
//!
//! Both families share one momentum-iterative loop: TMIM descends the mean
//! ensemble cross-entropy to the proxy class, FDA ascends the mean ensemble
//! feature-distribution objective. All perturbations live in raw pixel space.

mod batch;
mod objectives;
mod tuning;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array4, ArrayD, ArrayView4, ArrayViewD, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{AuxModelSet, Classifier, ModelHandle};
use crate::nn::LayerId;

pub use batch::{constraint_ok, AdversarialBatch, AdversarialExample, BatchManifest, BatchMeta};
pub use objectives::{fda_loss, fda_loss_and_grad, tmim_loss_and_grad, FdaTarget, FDA_NORM_FLOOR};
pub use tuning::{greedy_layer_tuning, greedy_select, TuningConfig};

pub const DEFAULT_EPSILON: f64 = 16.0 / 255.0;
pub const DEFAULT_ALPHA: f64 = 2.0 / 255.0;
pub const DEFAULT_ITERS: usize = 10;
pub const DEFAULT_MOMENTUM: f64 = 1.0;

/// Examples per forward/backward pass inside the attack loop.
const ATTACK_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Tmim,
    Fda,
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackFamily::Tmim => "tmim",
            AttackFamily::Fda => "fda",
        })
    }
}

impl FromStr for AttackFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tmim" => Ok(AttackFamily::Tmim),
            "fda" => Ok(AttackFamily::Fda),
            other => Err(Error::Parse(format!("unknown attack family `{other}` (expected tmim or fda)"))),
        }
    }
}

/// Step-size schedule shared by both families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackParams {
    pub epsilon: f64,
    pub alpha: f64,
    pub iters: usize,
    pub momentum_decay: f64,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, alpha: DEFAULT_ALPHA, iters: DEFAULT_ITERS, momentum_decay: DEFAULT_MOMENTUM }
    }
}

impl AttackParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon.is_finite()
            && self.epsilon >= 0.0
            && self.alpha >= 0.0
            && self.alpha <= self.epsilon
            && self.iters >= 1
            && self.momentum_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "attack params need 0 <= alpha <= epsilon and iters >= 1, got {self:?}"
            )))
        }
    }
}

/// One whitebox in the ensemble. `aux`, `layers` and `eta` matter only for FDA.
#[derive(Debug, Clone)]
pub struct WhiteboxMember {
    pub model: Arc<ModelHandle>,
    pub aux: Option<Arc<AuxModelSet>>,
    pub layers: Vec<LayerId>,
    pub eta: f64,
}

impl WhiteboxMember {
    pub fn tmim(model: Arc<ModelHandle>) -> Self {
        Self { model, aux: None, layers: Vec::new(), eta: 0.0 }
    }

    pub fn fda(model: Arc<ModelHandle>, aux: Arc<AuxModelSet>, layers: Vec<LayerId>, eta: f64) -> Self {
        Self { model, aux: Some(aux), layers, eta }
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub params: AttackParams,
    pub family: AttackFamily,
    pub ensemble: Vec<WhiteboxMember>,
}

impl AttackConfig {
    pub fn validate(&self, proxy: usize) -> Result<()> {
        self.params.validate()?;
        if self.ensemble.is_empty() {
            return Err(Error::InvalidArgument("attack ensemble is empty".into()));
        }
        let shape = self.ensemble[0].model.input_shape();
        for m in &self.ensemble {
            if m.model.input_shape() != shape {
                return Err(Error::Shape("ensemble members disagree on input shape".into()));
            }
            if proxy >= m.model.num_classes() {
                return Err(Error::InvalidArgument(format!(
                    "proxy {proxy} outside the label space of {}",
                    m.model.id()
                )));
            }
            if self.family == AttackFamily::Fda {
                if !(m.eta >= 0.0 && m.eta.is_finite()) {
                    return Err(Error::InvalidArgument(format!("eta must be finite and >= 0, got {}", m.eta)));
                }
                if m.layers.is_empty() {
                    return Err(Error::InvalidArgument(format!("FDA member {} has no attack layers", m.model.id())));
                }
                let aux = m
                    .aux
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument(format!("FDA member {} has no aux models", m.model.id())))?;
                for l in &m.layers {
                    m.model.network.site_index(l)?;
                    aux.get(proxy, l)?;
                }
            }
        }
        Ok(())
    }

    /// Stable digest of everything that determines the perturbation.
    pub fn digest(&self) -> String {
        let members: Vec<serde_json::Value> = self
            .ensemble
            .iter()
            .map(|m| {
                serde_json::json!({
                    "model": m.model.id(),
                    "layers": m.layers,
                    "eta": m.eta,
                })
            })
            .collect();
        crate::digest::json_digest(&serde_json::json!({
            "params": self.params,
            "family": self.family,
            "ensemble": members,
        }))
    }
}

/// Clamps `delta` so that `|delta| <= epsilon` and `clean + delta` stays in
/// `[0,1]`. Each component is clamped to one interval that depends only on
/// `clean` and `epsilon`, so the map is exactly idempotent.
pub fn project_linf(clean: &ArrayViewD<f64>, delta: &ArrayViewD<f64>, epsilon: f64) -> ArrayD<f64> {
    let mut out = delta.to_owned();
    project_in_place(clean, &mut out.view_mut(), epsilon);
    out
}

pub(crate) fn project_in_place(clean: &ArrayViewD<f64>, delta: &mut ndarray::ArrayViewMutD<f64>, epsilon: f64) {
    Zip::from(delta).and(clean).for_each(|d, &c| {
        let (lo, hi) = feasible_interval(c, epsilon);
        *d = d.clamp(lo, hi);
    });
}

fn feasible_interval(c: f64, epsilon: f64) -> (f64, f64) {
    let lo = (-epsilon).max(-c);
    let mut hi = epsilon.min(1.0 - c);
    // 1 - c can round up when c < 0.5
    while c + hi > 1.0 {
        hi = f64::from_bits(hi.to_bits() - 1);
    }
    (lo.min(hi), hi)
}

/// Rounds every component toward zero to the nearest f32. Feasibility is
/// preserved and the result survives the f32 container unchanged.
pub fn quantize_toward_zero(delta: &mut Array4<f64>) {
    delta.mapv_inplace(f32_toward_zero);
}

/// Nearest f32 with magnitude not above `d`.
pub fn f32_toward_zero(d: f64) -> f64 {
    let f = d as f32;
    let f = if (f as f64).abs() > d.abs() { f32::from_bits(f.to_bits() - 1) } else { f };
    f as f64
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One momentum update: `state' = decay * state + grad / |grad|_1`,
/// `direction = sign(state')`. A zero gradient contributes nothing, so the
/// state only decays.
pub fn momentum_step(grad: &ArrayViewD<f64>, state: &ArrayViewD<f64>, decay: f64) -> (ArrayD<f64>, ArrayD<f64>) {
    let l1: f64 = grad.iter().map(|g| g.abs()).sum();
    let new_state = if l1 > 0.0 { state.mapv(|s| decay * s) + grad.mapv(|g| g / l1) } else { state.mapv(|s| decay * s) };
    (new_state.mapv(sign), new_state)
}

/// Perturbations and objective traces for a batch.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub delta: Array4<f64>,
    /// Objective at the start of each iteration, per example.
    pub loss_traces: Vec<Vec<f64>>,
    /// Objective at the returned perturbation, per example.
    pub final_losses: Vec<f64>,
}

/// Decision-space attack: momentum descent on the mean ensemble
/// cross-entropy to `proxy`.
pub fn tmim_attack(cfg: &AttackConfig, clean: &ArrayView4<f64>, proxy: usize) -> Result<Perturbation> {
    if cfg.family != AttackFamily::Tmim {
        return Err(Error::InvalidArgument("tmim_attack needs a TMIM config".into()));
    }
    run_attack(cfg, clean, proxy)
}

/// Feature-space attack: momentum ascent on the mean ensemble FDA objective.
pub fn fda_attack(cfg: &AttackConfig, clean: &ArrayView4<f64>, proxy: usize) -> Result<Perturbation> {
    if cfg.family != AttackFamily::Fda {
        return Err(Error::InvalidArgument("fda_attack needs an FDA config".into()));
    }
    run_attack(cfg, clean, proxy)
}

/// Dispatches on `cfg.family`.
pub fn run_attack(cfg: &AttackConfig, clean: &ArrayView4<f64>, proxy: usize) -> Result<Perturbation> {
    cfg.validate(proxy)?;
    let shape = cfg.ensemble[0].model.input_shape();
    let (n, c, h, w) = clean.dim();
    if [c, h, w] != shape {
        return Err(Error::Shape(format!("inputs {:?} vs whitebox {:?}", [c, h, w], shape)));
    }
    if clean.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("clean inputs must lie in [0,1]".into()));
    }
    let mut delta = Array4::zeros(clean.raw_dim());
    let mut loss_traces = Vec::with_capacity(n);
    let mut final_losses = Vec::with_capacity(n);
    for start in (0..n).step_by(ATTACK_CHUNK) {
        let end = (start + ATTACK_CHUNK).min(n);
        let x = clean.slice(ndarray::s![start..end, .., .., ..]);
        let (d, traces, fin) = iterate(cfg, &x, proxy)?;
        delta.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&d);
        loss_traces.extend(traces);
        final_losses.extend(fin);
    }
    Ok(Perturbation { delta, loss_traces, final_losses })
}

enum Objective<'a> {
    Tmim,
    Fda(Vec<FdaTarget<'a>>),
}

impl Objective<'_> {
    fn eval(&self, cfg: &AttackConfig, x: &ArrayView4<f64>, proxy: usize) -> Result<(Array1<f64>, Array4<f64>)> {
        match self {
            Objective::Tmim => {
                let models: Vec<&ModelHandle> = cfg.ensemble.iter().map(|m| m.model.as_ref()).collect();
                tmim_loss_and_grad(&models, x, proxy)
            }
            Objective::Fda(targets) => {
                let scale = 1.0 / targets.len() as f64;
                let mut total: Option<(Array1<f64>, Array4<f64>)> = None;
                for t in targets {
                    let (l, g) = fda_loss_and_grad(t, x)?;
                    total = Some(match total {
                        None => (l * scale, g * scale),
                        Some((tl, tg)) => (tl + l * scale, tg + g * scale),
                    });
                }
                Ok(total.expect("non-empty ensemble"))
            }
        }
    }
}

type IterOut = (Array4<f64>, Vec<Vec<f64>>, Vec<f64>);

fn iterate(cfg: &AttackConfig, clean: &ArrayView4<f64>, proxy: usize) -> Result<IterOut> {
    let p = &cfg.params;
    let objective = match cfg.family {
        AttackFamily::Tmim => Objective::Tmim,
        AttackFamily::Fda => Objective::Fda(
            cfg.ensemble
                .iter()
                .map(|m| {
                    FdaTarget::new(
                        m.model.as_ref(),
                        m.aux.as_deref().expect("validated"),
                        clean,
                        proxy,
                        &m.layers,
                        m.eta,
                    )
                })
                .collect::<Result<_>>()?,
        ),
    };
    // descent for TMIM, ascent for FDA
    let step_sign = match cfg.family {
        AttackFamily::Tmim => -1.0,
        AttackFamily::Fda => 1.0,
    };
    let n = clean.dim().0;
    let clean_dyn = clean.view().into_dyn();
    let mut delta = Array4::<f64>::zeros(clean.raw_dim());
    let mut state = Array4::<f64>::zeros(clean.raw_dim());
    let mut traces = vec![Vec::with_capacity(p.iters); n];
    for it in 0..p.iters {
        let x = clean + &delta;
        let (loss, grad) = objective.eval(cfg, &x.view(), proxy)?;
        if loss.iter().any(|l| !l.is_finite()) || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        for (t, l) in traces.iter_mut().zip(loss.iter()) {
            t.push(*l);
        }
        for i in 0..n {
            let g = grad.index_axis(Axis(0), i).into_dyn();
            let s = state.index_axis(Axis(0), i).into_dyn();
            let (dir, s_new) = momentum_step(&g, &s, p.momentum_decay);
            state.index_axis_mut(Axis(0), i).assign(&s_new.into_dimensionality::<ndarray::Ix3>().expect("3-d"));
            let mut d = delta.index_axis_mut(Axis(0), i);
            d.zip_mut_with(&dir.into_dimensionality::<ndarray::Ix3>().expect("3-d"), |dv, &r| {
                *dv += step_sign * p.alpha * r;
            });
        }
        project_in_place(&clean_dyn, &mut delta.view_mut().into_dyn(), p.epsilon);
    }
    quantize_toward_zero(&mut delta);
    let x = clean + &delta;
    let (fin, _) = objective.eval(cfg, &x.view(), proxy)?;
    if fin.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss { iteration: p.iters });
    }
    Ok((delta, traces, fin.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, ArrayD, IxDyn};
    use proptest::prelude::*;

    fn reference_project(c: f64, d: f64, eps: f64) -> f64 {
        let d1 = d.clamp(-eps, eps);
        (c + d1).clamp(0.0, 1.0) - c
    }

    #[test]
    fn project_zero_is_zero() {
        let c = ArrayD::from_elem(IxDyn(&[3, 2]), 0.4);
        let d = ArrayD::zeros(IxDyn(&[3, 2]));
        assert_eq!(project_linf(&c.view(), &d.view(), DEFAULT_EPSILON), d);
    }

    #[test]
    fn project_clamp_dominates() {
        let c = ArrayD::from_elem(IxDyn(&[4]), 0.3);
        let d = ArrayD::from_elem(IxDyn(&[4]), 0.5);
        let p = project_linf(&c.view(), &d.view(), 16.0 / 255.0);
        assert!(p.iter().all(|&v| v == 16.0 / 255.0));
    }

    #[test]
    fn momentum_first_step_is_sign_of_grad() {
        let g = array![0.5, -2.0, 0.0].into_dyn();
        let s = ArrayD::zeros(IxDyn(&[3]));
        let (dir, st) = momentum_step(&g.view(), &s.view(), 1.0);
        assert_eq!(dir, array![1.0, -1.0, 0.0].into_dyn());
        assert_eq!(st, array![0.2, -0.8, 0.0].into_dyn());
    }

    #[test]
    fn momentum_zero_grad_only_decays() {
        let g = ArrayD::zeros(IxDyn(&[2]));
        let s = array![0.3, -0.1].into_dyn();
        let (dir, st) = momentum_step(&g.view(), &s.view(), 0.5);
        assert_eq!(st, array![0.15, -0.05].into_dyn());
        assert_eq!(dir, array![1.0, -1.0].into_dyn());
        let (dir0, st0) = momentum_step(&g.view(), &ArrayD::zeros(IxDyn(&[2])).view(), 1.0);
        assert!(dir0.iter().all(|&v| v == 0.0));
        assert!(st0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn momentum_three_step_recurrence() {
        let grads = [array![1.0, -3.0], array![-4.0, 0.0], array![1.0, 1.0]];
        let decay = 0.9;
        let mut s = ArrayD::zeros(IxDyn(&[2]));
        // hand-unrolled: s1 = (.25,-.75); s2 = .9*s1 + (-1,0) = (-.775,-.675); s3 = .9*s2 + (.5,.5) = (-.1975,-.1075)
        let expect_state = [[0.25, -0.75], [-0.775, -0.675], [-0.1975, -0.1075]];
        let expect_dir = [[1.0, -1.0], [-1.0, -1.0], [-1.0, -1.0]];
        for k in 0..3 {
            let g = grads[k].clone().into_dyn();
            let (dir, st) = momentum_step(&g.view(), &s.view(), decay);
            for j in 0..2 {
                assert!((st[j] - expect_state[k][j]).abs() < 1e-12);
                assert_eq!(dir[j], expect_dir[k][j]);
            }
            s = st;
        }
    }

    #[test]
    fn momentum_decay_zero_is_plain_sign() {
        let g = array![0.1, -0.2, 0.3].into_dyn();
        let s = array![-5.0, 5.0, -5.0].into_dyn();
        let (dir, _) = momentum_step(&g.view(), &s.view(), 0.0);
        assert_eq!(dir, array![1.0, -1.0, 1.0].into_dyn());
    }

    #[test]
    fn params_validation() {
        assert!(AttackParams::default().validate().is_ok());
        assert!(AttackParams { alpha: 0.1, epsilon: 0.05, ..Default::default() }.validate().is_err());
        assert!(AttackParams { iters: 0, ..Default::default() }.validate().is_err());
        assert!(AttackParams { epsilon: -1.0, alpha: -2.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn family_parses() {
        assert_eq!("FDA".parse::<AttackFamily>().unwrap(), AttackFamily::Fda);
        assert!("pgd".parse::<AttackFamily>().is_err());
    }

    proptest! {
        #[test]
        fn project_matches_reference_and_is_idempotent(
            pairs in prop::collection::vec((0.0f64..=1.0, -1.0f64..1.0), 1..64),
            eps in 0.0f64..0.6,
        ) {
            let c = ArrayD::from_shape_vec(IxDyn(&[pairs.len()]), pairs.iter().map(|p| p.0).collect()).unwrap();
            let d = ArrayD::from_shape_vec(IxDyn(&[pairs.len()]), pairs.iter().map(|p| p.1).collect()).unwrap();
            let p = project_linf(&c.view(), &d.view(), eps);
            let pp = project_linf(&c.view(), &p.view(), eps);
            prop_assert_eq!(&p, &pp);
            for i in 0..pairs.len() {
                prop_assert!((p[i] - reference_project(c[i], d[i], eps)).abs() <= 1e-15);
                prop_assert!(p[i].abs() <= eps);
                let x = c[i] + p[i];
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn projection_feasible_at_larger_eps(
            pairs in prop::collection::vec((0.0f64..=1.0, -1.0f64..1.0), 1..32),
            e1 in 0.0f64..0.3,
            extra in 0.0f64..0.3,
        ) {
            let c = ArrayD::from_shape_vec(IxDyn(&[pairs.len()]), pairs.iter().map(|p| p.0).collect()).unwrap();
            let d = ArrayD::from_shape_vec(IxDyn(&[pairs.len()]), pairs.iter().map(|p| p.1).collect()).unwrap();
            let p = project_linf(&c.view(), &d.view(), e1);
            prop_assert_eq!(project_linf(&c.view(), &p.view(), e1 + extra), p);
        }

        #[test]
        fn quantization_keeps_feasibility(
            pairs in prop::collection::vec((0.0f32..=1.0, -1.0f64..1.0), 1..64),
        ) {
            let n = pairs.len();
            let c = Array4::from_shape_vec((1, 1, 1, n), pairs.iter().map(|p| p.0 as f64).collect()).unwrap();
            let d = Array4::from_shape_vec((1, 1, 1, n), pairs.iter().map(|p| p.1).collect()).unwrap();
            let mut p = project_linf(&c.view().into_dyn(), &d.view().into_dyn(), DEFAULT_EPSILON)
                .into_dimensionality::<ndarray::Ix4>().unwrap();
            quantize_toward_zero(&mut p);
            for i in 0..n {
                let v = p[[0, 0, 0, i]];
                prop_assert_eq!(v, (v as f32) as f64);
                prop_assert!(v.abs() <= DEFAULT_EPSILON);
                let x = c[[0, 0, 0, i]] + v;
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}

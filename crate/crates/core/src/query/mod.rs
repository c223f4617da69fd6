//! Score-based query refinement of transfer attacks.
//!
//! Every oracle call goes through an [`OracleHandle`], which charges its
//! [`QueryLedger`] once per input before the model runs.

mod ledger;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{constraint_ok, f32_toward_zero, project_linf, sign, DEFAULT_ALPHA, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::models::{predict, Classifier};

pub use ledger::{Charge, ExampleRecord, LedgerSnapshot, QueryLedger, DEFAULT_BUDGET};

pub const DEFAULT_DIRECTIONS: usize = 20;
pub const DEFAULT_SIGMA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    LabelOnly,
    Score,
}

/// Metered access to a blackbox classifier.
#[derive(Clone)]
pub struct OracleHandle {
    model: Arc<dyn Classifier>,
    mode: OracleMode,
    ledger: Arc<QueryLedger>,
}

impl OracleHandle {
    pub fn new(model: Arc<dyn Classifier>, mode: OracleMode, ledger: Arc<QueryLedger>) -> Self {
        Self { model, mode, ledger }
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn ledger(&self) -> &Arc<QueryLedger> {
        &self.ledger
    }

    pub fn model_id(&self) -> String {
        self.model.id()
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn run(&self, batch: &ArrayView4<f64>, to: &Charge) -> Result<Array2<f64>> {
        let n = batch.dim().0;
        self.ledger.charge(n, to)?;
        self.model.probabilities(batch).map_err(|e| Error::OracleFailure {
            completed: 0,
            total: n,
            reason: e.to_string(),
        })
    }

    /// Top-1 labels; one charged query per input.
    pub fn labels(&self, batch: &ArrayView4<f64>, to: &Charge) -> Result<Vec<usize>> {
        let p = self.run(batch, to)?;
        Ok(crate::models::argmax_rows(&p))
    }

    /// Class probabilities; one charged query per input. Score mode only.
    pub fn scores(&self, batch: &ArrayView4<f64>, to: &Charge) -> Result<Array2<f64>> {
        if self.mode != OracleMode::Score {
            return Err(Error::InvalidArgument("score query on a label-only oracle".into()));
        }
        self.run(batch, to)
    }
}

/// Refinement objective computed from one score vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossSpec {
    pub target_set: Vec<usize>,
}

impl LossSpec {
    pub fn new(target_set: Vec<usize>) -> Result<Self> {
        if target_set.is_empty() {
            return Err(Error::InvalidArgument("empty target set".into()));
        }
        Ok(Self { target_set })
    }

    /// `log p(target set) - max_{j outside} log p(j)`; positive iff the
    /// target set holds the top-1 class mass.
    pub fn margin(&self, probs: &[f64]) -> f64 {
        let tiny = f64::MIN_POSITIVE;
        let pt: f64 = self.target_set.iter().map(|&t| probs[t]).sum();
        let other = probs
            .iter()
            .enumerate()
            .filter(|(j, _)| !self.target_set.contains(j))
            .map(|(_, &p)| p)
            .fold(0.0f64, f64::max);
        pt.max(tiny).ln() - other.max(tiny).ln()
    }
}

#[derive(Debug, Clone)]
pub struct RgfEstimate {
    pub gradient: Array3<f64>,
    /// Loss at the unperturbed point.
    pub baseline: f64,
}

/// Random-gradient-free estimate at `clean + delta` from one batched call
/// of `q + 1` score queries (baseline first). Probe directions are uniform
/// on the unit sphere. With `epsilon`, each probe perturbation is projected
/// so no query leaves the feasible set.
#[allow(clippy::too_many_arguments)]
pub fn rgf_estimate(
    oracle: &OracleHandle,
    loss: &LossSpec,
    clean: &ArrayView3<f64>,
    delta: &ArrayView3<f64>,
    epsilon: Option<f64>,
    q: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
    to: &Charge,
) -> Result<RgfEstimate> {
    if !(sigma > 0.0) || q == 0 {
        return Err(Error::InvalidArgument(format!("rgf needs sigma > 0 and q >= 1 (sigma {sigma}, q {q})")));
    }
    let (c, h, w) = clean.dim();
    let mut dirs = Vec::with_capacity(q);
    let mut batch = Array4::zeros((q + 1, c, h, w));
    batch.index_axis_mut(Axis(0), 0).assign(&(clean + delta));
    for i in 0..q {
        let mut u = Array3::from_shape_fn((c, h, w), |_| StandardNormal.sample(rng));
        let norm = u.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        u /= norm;
        let mut d = delta + &(&u * sigma);
        if let Some(eps) = epsilon {
            d = project_linf(&clean.view().into_dyn(), &d.view().into_dyn(), eps)
                .into_dimensionality()
                .expect("3-d");
        }
        batch.index_axis_mut(Axis(0), i + 1).assign(&(clean + &d));
        dirs.push(u);
    }
    let scores = oracle.scores(&batch.view(), to)?;
    let values: Vec<f64> = scores.rows().into_iter().map(|r| loss.margin(r.as_slice().expect("row-major"))).collect();
    let mut g = Array3::zeros((c, h, w));
    for (u, &v) in dirs.iter().zip(&values[1..]) {
        g.scaled_add((v - values[0]) / sigma, u);
    }
    g /= q as f64;
    Ok(RgfEstimate { gradient: g, baseline: values[0] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub directions: usize,
    pub sigma: f64,
    /// Per-example cap on refinement queries.
    pub max_queries: usize,
    pub seed: u64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            directions: DEFAULT_DIRECTIONS,
            sigma: DEFAULT_SIGMA,
            max_queries: DEFAULT_BUDGET,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HybridOutcome {
    pub delta: Array3<f64>,
    pub queries: usize,
    /// Confirmed by a charged label query.
    pub success: bool,
    /// Queries spent when success was confirmed.
    pub success_at: Option<usize>,
}

fn example_rng(seed: u64, example: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (example as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Refines `warm` (or zero) with rounds of RGF estimate, plain sign step,
/// projection and one charged label check, until the label lands in the
/// target set or the next round would not fit the per-example cap or the
/// ledger. No momentum is carried over from the transfer attack. On
/// failure the iterate with the best observed margin is returned.
pub fn hybrid_attack(
    clean: &ArrayView3<f64>,
    warm: Option<&ArrayView3<f64>>,
    oracle: &OracleHandle,
    target_set: &[usize],
    cfg: &QueryConfig,
    example: usize,
) -> Result<HybridOutcome> {
    let loss = LossSpec::new(target_set.to_vec())?;
    let mut delta = match warm {
        Some(w) => {
            if !constraint_ok(clean, w, cfg.epsilon) {
                return Err(Error::InvalidArgument("warm start violates the epsilon constraint".into()));
            }
            w.to_owned()
        }
        None => Array3::zeros(clean.raw_dim()),
    };
    let round = cfg.directions + 2;
    let to = Charge::Example(example);
    let mut rng = example_rng(cfg.seed, example);
    let mut used = 0;
    let mut best = (delta.clone(), f64::NEG_INFINITY);
    while used + round <= cfg.max_queries && oracle.ledger().remaining() >= round {
        let est = match rgf_estimate(
            oracle,
            &loss,
            clean,
            &delta.view(),
            Some(cfg.epsilon),
            cfg.directions,
            cfg.sigma,
            &mut rng,
            &to,
        ) {
            Ok(e) => e,
            Err(Error::BudgetExhausted { .. }) => break,
            Err(e) => return Err(e),
        };
        used += cfg.directions + 1;
        if est.baseline > best.1 {
            best = (delta.clone(), est.baseline);
        }
        delta.zip_mut_with(&est.gradient, |d, &g| *d += cfg.alpha * sign(g));
        delta = project_linf(&clean.view().into_dyn(), &delta.view().into_dyn(), cfg.epsilon)
            .into_dimensionality()
            .expect("3-d");
        delta.mapv_inplace(f32_toward_zero);
        let x = (clean + &delta).insert_axis(Axis(0));
        let label = match oracle.labels(&x.view(), &to) {
            Ok(l) => l[0],
            Err(Error::BudgetExhausted { .. }) => break,
            Err(e) => return Err(e),
        };
        used += 1;
        if target_set.contains(&label) {
            oracle.ledger().finish(example, true);
            return Ok(HybridOutcome { delta, queries: used, success: true, success_at: Some(used) });
        }
    }
    oracle.ledger().finish(example, false);
    let delta = if best.1.is_finite() { best.0 } else { delta };
    Ok(HybridOutcome { delta, queries: used, success: false, success_at: None })
}

/// Per-example results of one refinement variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: String,
    /// Warm start already in the target set, judged without queries.
    pub initial_success: Vec<bool>,
    pub success_at: Vec<Option<usize>>,
    pub queries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub variant: String,
    pub checkpoint: usize,
    pub tsuc: f64,
}

/// Attacks every example of a batch. Examples whose warm start already
/// fools `judge` count as successes at zero queries and are not refined.
#[allow(clippy::too_many_arguments)]
pub fn run_variant(
    variant: &str,
    judge: &dyn Classifier,
    oracle: &OracleHandle,
    clean: &ArrayView4<f64>,
    warm: Option<&ArrayView4<f64>>,
    example_ids: &[usize],
    target_set: &[usize],
    cfg: &QueryConfig,
) -> Result<(VariantRun, Array4<f64>)> {
    let n = clean.dim().0;
    if example_ids.len() != n || warm.is_some_and(|w| w.dim() != clean.dim()) {
        return Err(Error::Shape("clean, warm start and ids must agree".into()));
    }
    let start = match warm {
        Some(w) => w.to_owned(),
        None => Array4::zeros(clean.raw_dim()),
    };
    let initial: Vec<bool> =
        predict(judge, &(clean + &start).view())?.labels.iter().map(|l| target_set.contains(l)).collect();
    let mut run = VariantRun {
        variant: variant.to_string(),
        initial_success: initial.clone(),
        success_at: vec![None; n],
        queries: vec![0; n],
    };
    let mut out = start.clone();
    for i in 0..n {
        if initial[i] {
            continue;
        }
        let w = start.index_axis(Axis(0), i);
        let res = hybrid_attack(&clean.index_axis(Axis(0), i), Some(&w), oracle, target_set, cfg, example_ids[i])?;
        run.success_at[i] = res.success_at;
        run.queries[i] = res.queries;
        out.index_axis_mut(Axis(0), i).assign(&res.delta);
    }
    Ok((run, out))
}

/// Fraction of examples that succeeded within each checkpoint's refinement
/// budget. Warm-start successes count at every checkpoint.
pub fn tsuc_vs_queries(runs: &[VariantRun], checkpoints: &[usize]) -> Result<Vec<CurvePoint>> {
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("checkpoints must be ascending".into()));
    }
    let mut out = Vec::new();
    for r in runs {
        let n = r.initial_success.len();
        for &c in checkpoints {
            let hits = (0..n)
                .filter(|&i| r.initial_success[i] || r.success_at[i].is_some_and(|q| q <= c))
                .count();
            out.push(CurvePoint {
                variant: r.variant.clone(),
                checkpoint: c,
                tsuc: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            });
        }
    }
    Ok(out)
}

pub fn write_curves_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "checkpoint", "tsuc"])?;
    for p in points {
        w.write_record([p.variant.clone(), p.checkpoint.to_string(), p.tsuc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Format("short curve row".into()));
        out.push(CurvePoint {
            variant: field(0)?.to_string(),
            checkpoint: field(1)?.parse().map_err(|_| Error::Format("bad checkpoint".into()))?,
            tsuc: field(2)?.parse().map_err(|_| Error::Format("bad tsuc".into()))?,
        });
    }
    Ok(out)
}

pub fn save_runs(path: &Path, runs: &[VariantRun]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(runs)?.as_bytes())?;
    Ok(())
}

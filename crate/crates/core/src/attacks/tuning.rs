use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{fda_attack, AttackConfig, AttackFamily, AttackParams, WhiteboxMember};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{predict, AuxModelSet, ModelHandle};
use crate::nn::LayerId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningConfig {
    pub max_set_size: usize,
    /// Tuning images attacked per proxy class; 0 uses every eligible image.
    pub examples_per_proxy: usize,
    pub params: AttackParams,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self { max_set_size: 4, examples_per_proxy: 100, params: AttackParams::default() }
    }
}

/// Forward greedy selection. Each round adds the candidate whose addition
/// scores highest (earliest candidate on ties) and stops when the best
/// addition does not strictly improve the current score.
pub fn greedy_select<T, F>(candidates: &[T], max_size: usize, mut score: F) -> Result<(Vec<T>, Vec<f64>)>
where
    T: Clone + PartialEq,
    F: FnMut(&[T]) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("greedy selection needs at least one candidate".into()));
    }
    if max_size == 0 {
        return Err(Error::InvalidArgument("max set size must be at least 1".into()));
    }
    let mut chosen: Vec<T> = Vec::new();
    let mut history = Vec::new();
    let mut current = f64::NEG_INFINITY;
    while chosen.len() < max_size {
        let mut best: Option<(usize, f64)> = None;
        for (k, c) in candidates.iter().enumerate() {
            if chosen.contains(c) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(c.clone());
            let s = score(&trial)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        match best {
            Some((k, s)) if s > current => {
                chosen.push(candidates[k].clone());
                history.push(s);
                current = s;
            }
            _ => break,
        }
    }
    Ok((chosen, history))
}

/// Tunes each whitebox's FDA layer set by greedy selection on cross-whitebox
/// targeted success: FDA noise from model `i` is scored by how often the
/// other whiteboxes predict the proxy. Only whiteboxes are consulted.
pub fn greedy_layer_tuning(
    whiteboxes: &[Arc<ModelHandle>],
    aux: &[Arc<AuxModelSet>],
    candidates: &[Vec<LayerId>],
    eta: &[f64],
    proxies: &[usize],
    tuning: &LabeledDataset,
    cfg: &TuningConfig,
) -> Result<Vec<Vec<LayerId>>> {
    let m = whiteboxes.len();
    if m < 2 {
        return Err(Error::InvalidArgument("layer tuning needs at least two whiteboxes".into()));
    }
    if aux.len() != m || candidates.len() != m || eta.len() != m {
        return Err(Error::InvalidArgument("aux, candidates and eta need one entry per whitebox".into()));
    }
    let digest = &whiteboxes[0].info.label_space_digest;
    if whiteboxes.iter().any(|w| &w.info.label_space_digest != digest) || &tuning.spec.digest() != digest {
        return Err(Error::LabelSpaceMismatch("tuning whiteboxes and data must share one split".into()));
    }
    if proxies.is_empty() {
        return Err(Error::InvalidArgument("no proxy classes to tune for".into()));
    }
    for (i, cands) in candidates.iter().enumerate() {
        for l in cands {
            whiteboxes[i].network.site_index(l)?;
        }
    }
    let pools: Vec<(usize, Vec<usize>)> = proxies
        .iter()
        .map(|&c| {
            let mut idx: Vec<usize> = (0..tuning.len()).filter(|&k| tuning.labels[k] != c).collect();
            if cfg.examples_per_proxy > 0 {
                idx.truncate(cfg.examples_per_proxy);
            }
            (c, idx)
        })
        .collect();

    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let score = |layers: &[LayerId]| -> Result<f64> {
            let attack = AttackConfig {
                params: cfg.params,
                family: AttackFamily::Fda,
                ensemble: vec![WhiteboxMember::fda(whiteboxes[i].clone(), aux[i].clone(), layers.to_vec(), eta[i])],
            };
            let mut total = 0.0;
            let mut terms = 0usize;
            for (c, idx) in &pools {
                if idx.is_empty() {
                    continue;
                }
                let clean = tuning.inputs.select(ndarray::Axis(0), idx);
                let adv = &clean + &fda_attack(&attack, &clean.view(), *c)?.delta;
                for (j, other) in whiteboxes.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    let pred = predict(other.as_ref(), &adv.view())?;
                    total += pred.labels.iter().filter(|&&p| p == *c).count() as f64 / idx.len() as f64;
                    terms += 1;
                }
            }
            Ok(if terms == 0 { 0.0 } else { total / terms as f64 })
        };
        let (chosen, history) = greedy_select(&candidates[i], cfg.max_set_size, score)?;
        log::info!("tuned layers for {}: {:?} (scores {:?})", whiteboxes[i].info.architecture_id, chosen, history);
        out.push(chosen);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_candidate_is_returned() {
        let (s, _) = greedy_select(&["only"], 4, |_| Ok(0.0)).unwrap();
        assert_eq!(s, vec!["only"]);
    }

    #[test]
    fn empty_candidates_rejected() {
        let c: [u8; 0] = [];
        assert!(greedy_select(&c, 4, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn signal_candidate_first_and_strict_stop() {
        // only "b" carries signal; extra members add nothing
        let score = |s: &[&str]| Ok(if s.contains(&"b") { 0.7 } else { 0.1 });
        let (chosen, hist) = greedy_select(&["a", "b", "c"], 4, score).unwrap();
        assert_eq!(chosen, vec!["b"]);
        assert_eq!(hist, vec![0.7]);
    }

    #[test]
    fn respects_max_size_and_ties() {
        let score = |s: &[u32]| Ok(s.iter().map(|&v| v as f64).sum::<f64>());
        let (chosen, _) = greedy_select(&[1, 3, 3, 2, 5], 2, score).unwrap();
        assert_eq!(chosen, vec![5, 3]);
    }
}

//! Class-correspondence matrices between a whitebox label space (rows) and
//! a blackbox label space (columns), built from label-only oracle queries.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledDataset, TargetSet};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::models::INFER_CHUNK;
use crate::query::{Charge, OracleHandle};

pub const CORRESPONDENCE_PHASE: &str = "correspondence";

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Array2<f64>,
    pub samples_per_class: usize,
    pub seed: u64,
    pub oracle_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    seed: u64,
    samples_per_class: usize,
    oracle_digest: String,
}

fn sidecar_path(csv: &Path) -> PathBuf {
    let mut p = csv.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Samples `samples_per_class` whitebox inputs per class (seeded, without
/// replacement) and tallies the oracle's labels. Charges exactly
/// `|A| * samples_per_class` queries to the correspondence phase.
pub fn build_matrix(
    oracle: &OracleHandle,
    whitebox_data: &LabeledDataset,
    blackbox_classes: &[String],
    samples_per_class: usize,
    seed: u64,
) -> Result<CorrespondenceMatrix> {
    let rows = whitebox_data.spec.class_names();
    let nb = oracle.num_classes();
    if blackbox_classes.len() != nb {
        return Err(Error::LabelSpaceMismatch(format!(
            "{} blackbox class names for an oracle with {nb} classes",
            blackbox_classes.len()
        )));
    }
    if samples_per_class == 0 {
        return Err(Error::InvalidArgument("samples_per_class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::with_capacity(rows.len());
    for (a, name) in rows.iter().enumerate() {
        let pool = whitebox_data.indices_of(a);
        if pool.len() < samples_per_class {
            return Err(Error::InvalidArgument(format!(
                "class `{name}` has {} examples, fewer than samples_per_class = {samples_per_class}",
                pool.len()
            )));
        }
        let mut chosen: Vec<usize> = pool.choose_multiple(&mut rng, samples_per_class).copied().collect();
        chosen.shuffle(&mut rng);
        picks.push(chosen);
    }
    let total = rows.len() * samples_per_class;
    let charge = Charge::Phase(CORRESPONDENCE_PHASE.into());
    let mut counts = Array2::<u64>::zeros((rows.len(), nb));
    let mut done = 0;
    for (a, chosen) in picks.iter().enumerate() {
        for chunk in chosen.chunks(INFER_CHUNK) {
            let batch = whitebox_data.inputs.select(Axis(0), chunk);
            let labels = oracle.labels(&batch.view(), &charge).map_err(|e| match e {
                Error::OracleFailure { reason, .. } => Error::OracleFailure { completed: done, total, reason },
                Error::BudgetExhausted { .. } => {
                    Error::OracleFailure { completed: done, total, reason: e.to_string() }
                }
                other => other,
            })?;
            for l in labels {
                if l >= nb {
                    return Err(Error::OracleFailure {
                        completed: done,
                        total,
                        reason: format!("label {l} outside the blackbox label space"),
                    });
                }
                counts[[a, l]] += 1;
            }
            done += chunk.len();
        }
    }
    let s = samples_per_class as f64;
    Ok(CorrespondenceMatrix {
        rows,
        cols: blackbox_classes.to_vec(),
        values: counts.mapv(|c| c as f64 / s),
        samples_per_class,
        seed,
        oracle_digest: sha256_hex(oracle.model_id().as_bytes()),
    })
}

/// Column index of the row maximum; ties go to the lower index.
pub fn row_argmax(values: &Array2<f64>, row: usize) -> usize {
    let r = values.row(row);
    let mut best = 0;
    for (j, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyRanking {
    pub target: String,
    /// `(whitebox class index, name, score)`, best first.
    pub ranked: Vec<(usize, String, f64)>,
}

impl ProxyRanking {
    pub fn top(&self) -> Option<(usize, &str, f64)> {
        self.ranked.first().map(|(i, n, s)| (*i, n.as_str(), *s))
    }
}

/// Ranks whitebox classes by summed correspondence to the target columns.
/// Ties keep ascending row order.
pub fn select_proxy(matrix: &CorrespondenceMatrix, target: &TargetSet, k: usize) -> Result<ProxyRanking> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if let Some(&bad) = target.members.iter().find(|&&t| t >= matrix.cols.len()) {
        return Err(Error::UnknownTarget(format!("column {bad} of `{}`", target.name)));
    }
    let mut ranked: Vec<(usize, String, f64)> = (0..matrix.rows.len())
        .map(|a| {
            let s: f64 = target.members.iter().map(|&t| matrix.values[[a, t]]).sum();
            (a, matrix.rows[a].clone(), s)
        })
        .collect();
    // stable sort keeps ascending index among equal scores
    ranked.sort_by(|x, y| y.2.partial_cmp(&x.2).unwrap_or(std::cmp::Ordering::Equal));
    ranked.truncate(k);
    Ok(ProxyRanking { target: target.name.clone(), ranked })
}

/// Resolves a target-set expression against the matrix columns.
pub fn resolve_columns(matrix: &CorrespondenceMatrix, text: &str) -> Result<TargetSet> {
    let text = text.trim();
    let find = |n: &str| matrix.cols.iter().position(|c| c == n);
    let mut members: Vec<usize> = if let Some(i) = find(text) {
        vec![i]
    } else if let Some(prefix) = text.strip_suffix("-any") {
        let head = format!("{prefix}-");
        (0..matrix.cols.len()).filter(|&j| matrix.cols[j].starts_with(&head)).collect()
    } else if text.contains('+') {
        text.split('+')
            .map(|p| find(p.trim()).ok_or_else(|| Error::UnknownTarget(p.trim().to_string())))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    members.sort_unstable();
    members.dedup();
    if members.is_empty() {
        return Err(Error::UnknownTarget(text.to_string()));
    }
    Ok(TargetSet { name: text.to_string(), members })
}

/// One `(target column, proxy row)` pair with its correspondence value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub target: usize,
    pub proxy: usize,
    pub score: f64,
}

/// Strongest pairs, each target column used at most once.
pub fn top_pairs(matrix: &CorrespondenceMatrix, k: usize) -> Vec<Pair> {
    let mut all: Vec<Pair> = (0..matrix.rows.len())
        .flat_map(|a| (0..matrix.cols.len()).map(move |b| (a, b)))
        .map(|(a, b)| Pair { target: b, proxy: a, score: matrix.values[[a, b]] })
        .collect();
    all.sort_by(|x, y| {
        y.score
            .partial_cmp(&x.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.proxy.cmp(&y.proxy))
            .then(x.target.cmp(&y.target))
    });
    let mut used = Vec::new();
    let mut out = Vec::new();
    for p in all {
        if out.len() == k {
            break;
        }
        if !used.contains(&p.target) {
            used.push(p.target);
            out.push(p);
        }
    }
    out
}

/// Entries at or above twice the uniform rate `1/|B|`, strongest first.
pub fn hotspots(matrix: &CorrespondenceMatrix) -> Vec<Pair> {
    let thr = 2.0 / matrix.cols.len() as f64;
    let mut v: Vec<Pair> = top_pairs_unfiltered(matrix).into_iter().filter(|p| p.score >= thr).collect();
    v.sort_by(|x, y| y.score.partial_cmp(&x.score).unwrap_or(std::cmp::Ordering::Equal));
    v
}

fn top_pairs_unfiltered(matrix: &CorrespondenceMatrix) -> Vec<Pair> {
    let mut v = Vec::new();
    for a in 0..matrix.rows.len() {
        for b in 0..matrix.cols.len() {
            v.push(Pair { target: b, proxy: a, score: matrix.values[[a, b]] });
        }
    }
    v
}

fn check_aligned(m1: &CorrespondenceMatrix, m2: &CorrespondenceMatrix) -> Result<()> {
    if m1.rows != m2.rows || m1.cols != m2.cols || m1.values.dim() != m2.values.dim() {
        return Err(Error::LabelSpaceMismatch("matrices have different row or column labels".into()));
    }
    Ok(())
}

/// Fraction of rows whose argmax column agrees.
pub fn consistency_score(m1: &CorrespondenceMatrix, m2: &CorrespondenceMatrix) -> Result<f64> {
    check_aligned(m1, m2)?;
    Ok(agreement(&m1.values, &m2.values, None))
}

fn agreement(a: &Array2<f64>, b: &Array2<f64>, perm: Option<&[usize]>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n)
        .filter(|&r| {
            let j = row_argmax(b, r);
            let j = perm.map_or(j, |p| p[j]);
            row_argmax(a, r) == j
        })
        .count();
    hits as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullComparison {
    pub observed: f64,
    pub null_mean: f64,
    /// Share of permutations scoring at least the observed value.
    pub p_value: f64,
    pub draws: usize,
}

/// Compares the observed score with random relabelings of `m2`'s columns.
pub fn consistency_null(
    m1: &CorrespondenceMatrix,
    m2: &CorrespondenceMatrix,
    draws: usize,
    seed: u64,
) -> Result<NullComparison> {
    check_aligned(m1, m2)?;
    let observed = agreement(&m1.values, &m2.values, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..m2.cols.len()).collect();
    let mut sum = 0.0;
    let mut at_least = 0;
    for _ in 0..draws {
        perm.shuffle(&mut rng);
        let s = agreement(&m1.values, &m2.values, Some(&perm));
        sum += s;
        if s >= observed {
            at_least += 1;
        }
    }
    let d = draws.max(1) as f64;
    Ok(NullComparison { observed, null_mean: sum / d, p_value: (at_least + 1) as f64 / (d + 1.0), draws })
}

impl CorrespondenceMatrix {
    /// Largest deviation of a row sum from 1.
    pub fn row_sum_error(&self) -> f64 {
        self.values.sum_axis(Axis(1)).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }

    /// CSV at `path` plus a JSON sidecar at `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![String::new()];
        header.extend(self.cols.iter().cloned());
        w.write_record(&header)?;
        for (a, name) in self.rows.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.values.row(a).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let side = Sidecar {
            seed: self.seed,
            samples_per_class: self.samples_per_class,
            oracle_digest: self.oracle_digest.clone(),
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let cols: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != cols.len() + 1 {
                return Err(Error::Format(format!("{}: ragged row", path.display())));
            }
            rows.push(rec[0].to_string());
            for f in rec.iter().skip(1) {
                data.push(f.parse::<f64>().map_err(|_| Error::Format(format!("bad matrix entry `{f}`")))?);
            }
        }
        let values = Array2::from_shape_vec((rows.len(), cols.len()), data)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            rows,
            cols,
            values,
            samples_per_class: side.samples_per_class,
            seed: side.seed,
            oracle_digest: side.oracle_digest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mat(values: Array2<f64>) -> CorrespondenceMatrix {
        let (r, c) = values.dim();
        CorrespondenceMatrix {
            rows: (0..r).map(|i| format!("a{i}")).collect(),
            cols: (0..c).map(|j| format!("b{j}")).collect(),
            values,
            samples_per_class: 4,
            seed: 1,
            oracle_digest: "x".into(),
        }
    }

    fn ts(members: Vec<usize>) -> TargetSet {
        TargetSet { name: "t".into(), members }
    }

    #[test]
    fn one_hot_column_ranks_its_row_first() {
        let m = mat(array![[0.5, 0.5, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        let r = select_proxy(&m, &ts(vec![2]), 2).unwrap();
        assert_eq!(r.top(), Some((1, "a1", 1.0)));
        assert_eq!(r.ranked.len(), 2);
    }

    #[test]
    fn ties_prefer_lower_row() {
        let m = mat(array![[0.25, 0.75], [0.5, 0.5], [0.5, 0.5]]);
        let r = select_proxy(&m, &ts(vec![0]), 3).unwrap();
        let order: Vec<usize> = r.ranked.iter().map(|x| x.0).collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    #[test]
    fn target_sets_sum_columns() {
        let m = mat(array![[0.4, 0.4, 0.2], [0.0, 0.5, 0.5], [0.9, 0.0, 0.1]]);
        let r = select_proxy(&m, &ts(vec![0, 1]), 1).unwrap();
        assert_eq!(r.top().unwrap().0, 2);
        assert!((r.top().unwrap().2 - 0.9).abs() < 1e-15);
        assert!(select_proxy(&m, &ts(vec![5]), 1).is_err());
    }

    #[test]
    fn consistency_extremes() {
        let m1 = mat(array![[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]);
        assert_eq!(consistency_score(&m1, &m1).unwrap(), 1.0);
        // a cyclic column shift moves every row's argmax
        let shifted = mat(m1.values.select(ndarray::Axis(1), &[1, 2, 0]));
        assert_eq!(consistency_score(&m1, &shifted).unwrap(), 0.0);
        let mut other = m1.clone();
        other.cols[0] = "zzz".into();
        assert!(consistency_score(&m1, &other).is_err());
    }

    #[test]
    fn null_is_below_identical_score() {
        let m1 = mat(Array2::from_shape_fn((6, 6), |(i, j)| if i == j { 0.75 } else { 0.05 }));
        let n = consistency_null(&m1, &m1, 200, 3).unwrap();
        assert_eq!(n.observed, 1.0);
        assert!(n.null_mean < 0.5);
        assert!(n.p_value < 0.05);
    }

    #[test]
    fn hotspot_rule() {
        let m = mat(array![[0.5, 0.3, 0.2, 0.0], [0.25, 0.25, 0.25, 0.25]]);
        let h = hotspots(&m);
        assert_eq!(h.len(), 1);
        assert_eq!((h[0].proxy, h[0].target), (0, 0));
    }

    #[test]
    fn top_pairs_use_each_target_once() {
        let m = mat(array![[0.9, 0.1], [0.8, 0.2], [0.0, 0.6]]);
        let p = top_pairs(&m, 3);
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].proxy, p[0].target), (0, 0));
        assert_eq!((p[1].proxy, p[1].target), (2, 1));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = mat(array![[1.0 / 3.0, 2.0 / 3.0], [0.1, 0.9]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        m.save(&p).unwrap();
        assert_eq!(CorrespondenceMatrix::load(&p).unwrap(), m);
        assert!(sidecar_path(&p).exists());
    }

    #[test]
    fn column_expressions() {
        let mut m = mat(Array2::zeros((1, 3)));
        m.cols = vec!["dog-a".into(), "cat".into(), "dog-b".into()];
        assert_eq!(resolve_columns(&m, "dog-any").unwrap().members, vec![0, 2]);
        assert_eq!(resolve_columns(&m, "cat+dog-a").unwrap().members, vec![0, 1]);
        assert!(resolve_columns(&m, "cow").is_err());
    }
}

//! Error and targeted-success metrics on adversarial batches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::attacks::AdversarialBatch;
use crate::datasets::{LabeledDataset, TargetSet};
use crate::error::{Error, Result};
use crate::models::{predict, Classifier};

/// Indices the blackbox classifies correctly and whose class is outside the
/// target set.
pub fn filter_clean(dataset: &LabeledDataset, blackbox: &dyn Classifier, target_set: &[usize]) -> Result<Vec<usize>> {
    let pred = predict(blackbox, &dataset.inputs.view())?;
    let keep: Vec<usize> = (0..dataset.len())
        .filter(|&i| pred.labels[i] == dataset.labels[i] && !target_set.contains(&dataset.labels[i]))
        .collect();
    if keep.is_empty() {
        log::warn!("no eligible clean examples for {}", blackbox.id());
    }
    Ok(keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub n: usize,
    pub errors: usize,
    pub hits: usize,
}

impl SourceStats {
    pub fn error(&self) -> f64 {
        ratio(self.errors, self.n)
    }
    pub fn tsuc(&self) -> f64 {
        ratio(self.hits, self.n)
    }
}

fn ratio(a: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        a as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub blackbox_id: String,
    pub target_set: Vec<usize>,
    pub target_name: String,
    pub proxy: String,
    pub family: String,
    pub n_attacked: usize,
    pub error: f64,
    pub tsuc: f64,
    /// Keyed by source class index.
    pub per_source_class: BTreeMap<usize, SourceStats>,
}

impl EvalResult {
    /// `0 <= tsuc <= error <= 1` and per-class counts add up.
    pub fn check(&self) -> Result<()> {
        let n: usize = self.per_source_class.values().map(|s| s.n).sum();
        if !(0.0 <= self.tsuc && self.tsuc <= self.error && self.error <= 1.0) || n != self.n_attacked {
            return Err(Error::InvalidArgument(format!(
                "inconsistent result for {}: error {}, tsuc {}, n {} vs {}",
                self.blackbox_id, self.error, self.tsuc, self.n_attacked, n
            )));
        }
        Ok(())
    }
}

/// Counts errors and target hits from true and predicted labels.
pub fn metrics_from_predictions(
    labels: &[usize],
    predicted: &[usize],
    target_set: &[usize],
) -> Result<(usize, usize, BTreeMap<usize, SourceStats>)> {
    if labels.len() != predicted.len() {
        return Err(Error::Shape("labels and predictions differ in length".into()));
    }
    let mut per = BTreeMap::new();
    let (mut errors, mut hits) = (0, 0);
    for (&y, &p) in labels.iter().zip(predicted) {
        if target_set.contains(&y) {
            return Err(Error::InvalidArgument(format!("source class {y} lies in the target set")));
        }
        let s = per.entry(y).or_insert(SourceStats { n: 0, errors: 0, hits: 0 });
        s.n += 1;
        if p != y {
            errors += 1;
            s.errors += 1;
        }
        if target_set.contains(&p) {
            hits += 1;
            s.hits += 1;
        }
    }
    Ok((errors, hits, per))
}

/// Error and targeted success of `blackbox` on the adversarial batch.
pub fn compute_metrics(batch: &AdversarialBatch, blackbox: &dyn Classifier, target: &TargetSet) -> Result<EvalResult> {
    let nb = blackbox.num_classes();
    if let Some(&t) = target.members.iter().find(|&&t| t >= nb) {
        return Err(Error::LabelSpaceMismatch(format!("target class {t} outside {}", blackbox.id())));
    }
    if let Some(&l) = batch.labels.iter().find(|&&l| l >= nb) {
        return Err(Error::LabelSpaceMismatch(format!("batch label {l} outside {}", blackbox.id())));
    }
    if batch.manifest.target_set != target.members {
        return Err(Error::LabelSpaceMismatch(format!(
            "batch was crafted for target {:?}, evaluated against {:?}",
            batch.manifest.target_set, target.members
        )));
    }
    let pred = predict(blackbox, &batch.adversarial().view())?;
    let (errors, hits, per) = metrics_from_predictions(&batch.labels, &pred.labels, &target.members)?;
    let n = batch.len();
    let r = EvalResult {
        blackbox_id: blackbox.id(),
        target_set: target.members.clone(),
        target_name: target.name.clone(),
        proxy: batch.manifest.proxy_name.clone(),
        family: batch.manifest.family.to_string(),
        n_attacked: n,
        error: ratio(errors, n),
        tsuc: ratio(hits, n),
        per_source_class: per,
    };
    r.check()?;
    Ok(r)
}

/// Eligible examples of `dataset` for `blackbox`, restricted to one batch:
/// positions in `batch` whose example id is in the blackbox's clean set.
pub fn eligible_positions(batch: &AdversarialBatch, eligible_ids: &[usize]) -> Vec<usize> {
    let set: std::collections::BTreeSet<usize> = eligible_ids.iter().copied().collect();
    batch.manifest.example_ids.iter().enumerate().filter(|(_, id)| set.contains(id)).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    /// `(source class, n, tsuc)`, highest tsuc first.
    pub rows: Vec<(usize, usize, f64)>,
    pub range: f64,
}

impl Breakdown {
    /// n-weighted mean of the per-class rates.
    pub fn weighted_tsuc(&self) -> f64 {
        let n: usize = self.rows.iter().map(|r| r.1).sum();
        if n == 0 {
            return 0.0;
        }
        self.rows.iter().map(|r| r.1 as f64 * r.2).sum::<f64>() / n as f64
    }
}

pub fn source_class_breakdown(result: &EvalResult) -> Breakdown {
    let mut rows: Vec<(usize, usize, f64)> =
        result.per_source_class.iter().map(|(&c, s)| (c, s.n, s.tsuc())).collect();
    rows.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let range = match (rows.first(), rows.last()) {
        (Some(hi), Some(lo)) => hi.2 - lo.2,
        _ => 0.0,
    };
    Breakdown { rows, range }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    PerBlackbox,
    Averaged,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-blackbox" => Ok(Layout::PerBlackbox),
            "averaged" => Ok(Layout::Averaged),
            other => Err(Error::Parse(format!("unknown layout `{other}` (per-blackbox or averaged)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub csv: String,
    pub table: String,
}

impl Report {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), &self.csv)?;
        fs::write(dir.join("report.txt"), &self.table)?;
        Ok(())
    }
}

/// `"xx.x / yy.y"` in percent.
pub fn cell(error: f64, tsuc: f64) -> String {
    format!("{:.1} / {:.1}", 100.0 * error, 100.0 * tsuc)
}

type RowKey = (String, String, String);

/// One row per (target, proxy, family), one column per blackbox in first-
/// seen order, plus the unweighted average over the row's blackboxes.
pub fn render_report(results: &[EvalResult], layout: Layout) -> Result<Report> {
    let mut blackboxes: Vec<String> = Vec::new();
    let mut rows: Vec<RowKey> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    let mut row_targets: Vec<Vec<usize>> = Vec::new();
    for r in results {
        r.check()?;
        let bi = match blackboxes.iter().position(|b| b == &r.blackbox_id) {
            Some(i) => i,
            None => {
                blackboxes.push(r.blackbox_id.clone());
                blackboxes.len() - 1
            }
        };
        let key = (r.target_name.clone(), r.proxy.clone(), r.family.clone());
        let ri = match rows.iter().position(|k| k == &key) {
            Some(i) => i,
            None => {
                rows.push(key);
                row_targets.push(r.target_set.clone());
                rows.len() - 1
            }
        };
        if row_targets[ri] != r.target_set {
            return Err(Error::InvalidArgument(format!("target `{}` has inconsistent members", r.target_name)));
        }
        if cells.insert((ri, bi), (r.error, r.tsuc)).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate result for {} on {}/{}",
                r.blackbox_id, r.target_name, r.family
            )));
        }
    }
    let shown: Vec<usize> = match layout {
        Layout::PerBlackbox => (0..blackboxes.len()).collect(),
        Layout::Averaged => Vec::new(),
    };
    let mut header = vec!["target".to_string(), "proxy".into(), "family".into()];
    header.extend(shown.iter().map(|&b| blackboxes[b].clone()));
    header.push("avg".into());

    let mut grid: Vec<Vec<String>> = Vec::new();
    for (ri, (t, p, f)) in rows.iter().enumerate() {
        let mut line = vec![t.clone(), p.clone(), f.clone()];
        for &b in &shown {
            line.push(cells.get(&(ri, b)).map_or_else(|| "-".to_string(), |&(e, s)| cell(e, s)));
        }
        let present: Vec<(f64, f64)> = (0..blackboxes.len()).filter_map(|b| cells.get(&(ri, b)).copied()).collect();
        let k = present.len() as f64;
        let avg_e = present.iter().map(|c| c.0).sum::<f64>() / k;
        let avg_s = present.iter().map(|c| c.1).sum::<f64>() / k;
        line.push(cell(avg_e, avg_s));
        grid.push(line);
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for line in &grid {
        w.write_record(line)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))?;

    let widths: Vec<usize> = (0..header.len())
        .map(|c| std::iter::once(&header[c]).chain(grid.iter().map(|l| &l[c])).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    let mut table = String::new();
    let fmt_line = |cols: &[String]| -> String {
        cols.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect::<Vec<_>>().join(" | ")
    };
    let _ = writeln!(table, "{}", fmt_line(&header));
    let _ = writeln!(table, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for line in &grid {
        let _ = writeln!(table, "{}", fmt_line(line));
    }
    let _ = writeln!(table, "(cells: error / tSuc in percent)");
    Ok(Report { csv, table })
}

/// Predicted labels of `model` on the positions `idx` of `dataset`.
pub fn predictions_on(model: &dyn Classifier, dataset: &LabeledDataset, idx: &[usize]) -> Result<Vec<usize>> {
    let x = dataset.inputs.select(Axis(0), idx);
    Ok(predict(model, &x.view())?.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(bb: &str, e: f64, s: f64) -> EvalResult {
        let mut per = BTreeMap::new();
        per.insert(0, SourceStats { n: 10, errors: (e * 10.0) as usize, hits: (s * 10.0) as usize });
        EvalResult {
            blackbox_id: bb.into(),
            target_set: vec![3],
            target_name: "t".into(),
            proxy: "p".into(),
            family: "fda".into(),
            n_attacked: 10,
            error: e,
            tsuc: s,
            per_source_class: per,
        }
    }

    #[test]
    fn counting_arithmetic() {
        let labels = vec![0; 10];
        let pred = vec![3, 3, 3, 1, 2, 0, 0, 0, 0, 0];
        let (e, h, per) = metrics_from_predictions(&labels, &pred, &[3]).unwrap();
        assert_eq!((e, h), (5, 3));
        assert_eq!(per[&0].n, 10);
    }

    #[test]
    fn source_in_target_rejected() {
        assert!(metrics_from_predictions(&[3], &[3], &[3]).is_err());
    }

    #[test]
    fn uniform_breakdown_has_zero_range() {
        let mut r = result("bb", 0.5, 0.2);
        r.per_source_class.insert(1, SourceStats { n: 5, errors: 3, hits: 1 });
        r.n_attacked = 15;
        let b = source_class_breakdown(&r);
        assert_eq!(b.range, 0.0);
    }

    #[test]
    fn single_result_one_row() {
        let rep = render_report(&[result("bb", 0.5, 0.3)], Layout::PerBlackbox).unwrap();
        assert_eq!(rep.csv.lines().count(), 2);
        assert!(rep.csv.lines().nth(1).unwrap().contains("50.0 / 30.0"));
    }

    #[test]
    fn average_is_unweighted_mean() {
        let rs: Vec<EvalResult> =
            (0..6).map(|i| result(&format!("bb{i}"), 0.1 * (i + 1) as f64, 0.1 * i as f64)).collect();
        let rep = render_report(&rs, Layout::PerBlackbox).unwrap();
        let row = rep.csv.lines().nth(1).unwrap();
        assert!(row.ends_with(&cell(0.35, 0.25)), "{row}");
        let avg = render_report(&rs, Layout::Averaged).unwrap();
        assert_eq!(avg.csv.lines().next().unwrap(), "target,proxy,family,avg");
    }

    #[test]
    fn duplicate_cells_rejected() {
        assert!(render_report(&[result("bb", 0.5, 0.3), result("bb", 0.4, 0.3)], Layout::Averaged).is_err());
    }
}

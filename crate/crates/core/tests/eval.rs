mod common;

use std::sync::Arc;

use common::{coded_dataset, decode, FnClassifier};
use dlt_core::attacks::{AdversarialBatch, AttackFamily, BatchMeta, Perturbation};
use dlt_core::datasets::TargetSet;
use dlt_core::eval::*;
use dlt_core::models::predict;
use ndarray::Array4;
use proptest::prelude::*;

fn batch(clean: Array4<f64>, delta: Array4<f64>, labels: Vec<usize>, target: &[usize]) -> AdversarialBatch {
    let n = labels.len();
    let names: Vec<String> = target.iter().map(|t| format!("c{t}")).collect();
    AdversarialBatch::new(
        clean,
        labels,
        (0..n).collect(),
        Perturbation { delta, loss_traces: vec![Vec::new(); n], final_losses: vec![0.0; n] },
        BatchMeta {
            family: AttackFamily::Fda,
            config_digest: "test".into(),
            seed: 0,
            epsilon: 16.0 / 255.0,
            proxy: 0,
            proxy_name: "p",
            target_set: target,
            target_names: &names,
        },
    )
    .unwrap()
}

fn target(members: Vec<usize>) -> TargetSet {
    TargetSet { name: "t".into(), members }
}

#[test]
fn ten_predictions_counting_example() {
    // 3 land in the target, 2 are wrong elsewhere, 5 are right
    let labels = vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
    let predicted = vec![3, 3, 3, 1, 2, 2, 0, 1, 2, 0];
    let (errors, hits, per) = metrics_from_predictions(&labels, &predicted, &[3]).unwrap();
    assert_eq!((errors, hits), (5, 3));
    assert_eq!(per.values().map(|s| s.n).sum::<usize>(), 10);
    assert!(metrics_from_predictions(&[3], &[3], &[3]).is_err());
}

#[test]
fn perfect_blackbox_leaves_fourteen_classes() {
    let data = coded_dataset(15, 250);
    let bb = FnClassifier::new(15, [2, 1, 1], |x| decode(x[0], 15));
    let kept = filter_clean(&data, &bb, &[6]).unwrap();
    assert_eq!(kept.len(), 3500);
    assert!(kept.iter().all(|&i| data.labels[i] != 6));
}

#[test]
fn always_wrong_blackbox_keeps_nothing() {
    let data = coded_dataset(5, 20);
    let bb = FnClassifier::new(5, [2, 1, 1], |x| (decode(x[0], 5) + 1) % 5);
    assert!(filter_clean(&data, &bb, &[0]).unwrap().is_empty());
}

#[test]
fn zero_delta_after_filtering_scores_nothing() {
    let (k, per) = (6, 30);
    let n = k * per;
    let data = coded_dataset(k, per);
    // wrong on every seventh example
    let bb = FnClassifier::new(k, [2, 1, 1], move |x| {
        let (y, i) = (decode(x[0], k), decode(x[1], n));
        if i % 7 == 0 { (y + 2) % k } else { y }
    });
    let t = target(vec![1, 4]);
    let kept = filter_clean(&data, &bb, &t.members).unwrap();
    let sub = data.subset(&kept);
    let b = batch(sub.inputs.clone(), Array4::zeros(sub.inputs.dim()), sub.labels.clone(), &t.members);
    let r = compute_metrics(&b, &bb, &t).unwrap();
    assert_eq!((r.error, r.tsuc), (0.0, 0.0));
    assert_eq!(r.n_attacked, kept.len());
}

#[test]
fn target_mismatch_and_label_space_are_rejected() {
    let data = coded_dataset(3, 4);
    let b = batch(data.inputs.clone(), Array4::zeros(data.inputs.dim()), vec![0; 12], &[2]);
    let bb = FnClassifier::new(3, [2, 1, 1], |_| 0);
    assert!(compute_metrics(&b, &bb, &target(vec![1])).is_err());
    let small = FnClassifier::new(2, [2, 1, 1], |_| 0);
    assert!(compute_metrics(&b, &small, &target(vec![2])).is_err());
}

#[test]
fn six_blackbox_average_column() {
    let rates = [(0.9, 0.5), (0.8, 0.2), (0.7, 0.1), (0.95, 0.6), (0.5, 0.05), (0.6, 0.3)];
    let results: Vec<EvalResult> = rates
        .iter()
        .enumerate()
        .map(|(i, &(e, s))| {
            let mut per = std::collections::BTreeMap::new();
            per.insert(0, SourceStats { n: 20, errors: (e * 20.0_f64).round() as usize, hits: (s * 20.0_f64).round() as usize });
            EvalResult {
                blackbox_id: format!("bb{i}"),
                target_set: vec![1],
                target_name: "t".into(),
                proxy: "p".into(),
                family: "fda".into(),
                n_attacked: 20,
                error: e,
                tsuc: s,
                per_source_class: per,
            }
        })
        .collect();
    let avg_e = rates.iter().map(|r| r.0).sum::<f64>() / 6.0;
    let avg_s = rates.iter().map(|r| r.1).sum::<f64>() / 6.0;
    let rep = render_report(&results, Layout::PerBlackbox).unwrap();
    let mut rd = csv::Reader::from_reader(rep.csv.as_bytes());
    let row = rd.records().next().unwrap().unwrap();
    assert_eq!(&row[row.len() - 1], format!("{:.1} / {:.1}", avg_e * 100.0, avg_s * 100.0));
    assert_eq!(&row[3], "90.0 / 50.0");
    let avg = render_report(&results, Layout::Averaged).unwrap();
    assert_eq!(avg.csv.lines().next().unwrap(), "target,proxy,family,avg");
}

proptest! {
    #[test]
    fn metrics_match_a_recount(
        k in 3usize..9,
        per in 1usize..20,
        salt in any::<u64>(),
        t0 in 0usize..9,
        two in any::<bool>(),
    ) {
        let t0 = t0 % k;
        let mut members = vec![t0];
        if two { members.push((t0 + 1) % k); }
        members.sort_unstable();
        let t = target(members.clone());
        let data = coded_dataset(k, per);
        let n = k * per;
        let keep: Vec<usize> = (0..n).filter(|&i| !members.contains(&data.labels[i])).collect();
        let sub = data.subset(&keep);
        let bb = Arc::new(FnClassifier::new(k, [2, 1, 1], move |x| {
            let i = decode(x[1], n) as u64;
            (i.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ salt).rotate_left(17) as usize % k
        }));
        let b = batch(sub.inputs.clone(), Array4::zeros(sub.inputs.dim()), sub.labels.clone(), &members);
        let r = compute_metrics(&b, bb.as_ref(), &t).unwrap();

        let pred = predict(bb.as_ref(), &b.adversarial().view()).unwrap().labels;
        let mut errors = 0;
        let mut hits = 0;
        for (i, &p) in pred.iter().enumerate() {
            if p != b.labels[i] { errors += 1; }
            if members.contains(&p) { hits += 1; }
        }
        let m = pred.len();
        prop_assert_eq!(r.n_attacked, m);
        prop_assert_eq!(r.error, if m == 0 { 0.0 } else { errors as f64 / m as f64 });
        prop_assert_eq!(r.tsuc, if m == 0 { 0.0 } else { hits as f64 / m as f64 });
        prop_assert!(r.tsuc <= r.error);
        let bd = source_class_breakdown(&r);
        prop_assert!((bd.weighted_tsuc() - r.tsuc).abs() <= 1e-9);
        prop_assert!(bd.rows.windows(2).all(|w| w[0].2 >= w[1].2));
    }

    #[test]
    fn filter_matches_double_loop(k in 2usize..8, per in 1usize..25, salt in any::<u64>(), t in 0usize..8) {
        let t = t % k;
        let data = coded_dataset(k, per);
        let n = k * per;
        let bb = FnClassifier::new(k, [2, 1, 1], move |x| {
            let (y, i) = (decode(x[0], k), decode(x[1], n) as u64);
            if (i ^ salt) % 3 == 0 { (i as usize) % k } else { y }
        });
        let kept = filter_clean(&data, &bb, &[t]).unwrap();
        let pred = predict(&bb, &data.inputs.view()).unwrap().labels;
        let mut oracle = Vec::new();
        for (i, (&p, &y)) in pred.iter().zip(&data.labels).enumerate() {
            if p == y && y != t {
                oracle.push(i);
            }
        }
        prop_assert_eq!(kept, oracle);
    }
}

#[test]
fn eligible_positions_follow_example_ids() {
    let data = coded_dataset(3, 4);
    let b = batch(data.inputs.clone(), Array4::zeros(data.inputs.dim()), data.labels.clone(), &[9]);
    let sub = b.subset(&[1, 5, 7]);
    assert_eq!(eligible_positions(&sub, &[7, 1, 100]), vec![0, 2]);
}

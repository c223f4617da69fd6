mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::{coded_dataset, decode, FnClassifier};
use dlt_core::correspondence::*;
use dlt_core::datasets::TargetSet;
use dlt_core::query::{OracleHandle, OracleMode, QueryLedger};
use dlt_core::Error;
use ndarray::{array, Array2};
use proptest::prelude::*;

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn label_oracle<C: dlt_core::models::Classifier + 'static>(c: Arc<C>) -> (OracleHandle, Arc<QueryLedger>) {
    let ledger = Arc::new(QueryLedger::unbounded());
    (OracleHandle::new(c, OracleMode::LabelOnly, ledger.clone()), ledger)
}

#[test]
fn constant_oracle_fills_one_column() {
    let data = coded_dataset(5, 12);
    let (oracle, _) = label_oracle(Arc::new(FnClassifier::new(7, [2, 1, 1], |_| 3)));
    let m = build_matrix(&oracle, &data, &names("b", 7), 10, 1).unwrap();
    let mut expected = Array2::zeros((5, 7));
    expected.column_mut(3).fill(1.0);
    assert_eq!(m.values, expected);
    assert_eq!(m.row_sum_error(), 0.0);
}

#[test]
fn exactly_rows_times_samples_queries() {
    let data = coded_dataset(6, 40);
    let model = Arc::new(FnClassifier::new(4, [2, 1, 1], |x| decode(x[1], 240) % 4));
    let (oracle, ledger) = label_oracle(model.clone());
    build_matrix(&oracle, &data, &names("b", 4), 25, 9).unwrap();
    assert_eq!(model.calls(), 6 * 25);
    let snap = ledger.snapshot();
    assert_eq!(snap.used, 150);
    assert_eq!(snap.phases, BTreeMap::from([(CORRESPONDENCE_PHASE.to_string(), 150)]));
}

#[test]
fn identical_spaces_recover_the_diagonal() {
    // class 2 is always confused with 4; class 5 is right 80% of the time
    let (k, per) = (8, 50);
    let n = k * per;
    let data = coded_dataset(k, per);
    let model = Arc::new(FnClassifier::new(k, [2, 1, 1], move |x| {
        let (y, i) = (decode(x[0], k), decode(x[1], n));
        match y {
            2 => 4,
            5 if i % 5 == 0 => 0,
            _ => y,
        }
    }));
    let (oracle, _) = label_oracle(model.clone());
    let m = build_matrix(&oracle, &data, &names("c", k), per, 3).unwrap();
    let accuracy: Vec<f64> = (0..k).map(|a| m.values[[a, a]]).collect();
    assert!(accuracy[2] < 0.9);
    for a in (0..k).filter(|&a| accuracy[a] >= 0.9) {
        assert_eq!(row_argmax(&m.values, a), a);
    }
    assert_eq!(row_argmax(&m.values, 5), 5);
    assert_eq!(row_argmax(&m.values, 2), 4);
}

#[test]
fn same_seed_is_bit_identical_through_csv() {
    let data = coded_dataset(5, 30);
    let model = Arc::new(FnClassifier::new(3, [2, 1, 1], |x| decode(x[1], 150) * 7 % 3));
    let (oracle, _) = label_oracle(model);
    let m1 = build_matrix(&oracle, &data, &names("b", 3), 7, 42).unwrap();
    let m2 = build_matrix(&oracle, &data, &names("b", 3), 7, 42).unwrap();
    let m3 = build_matrix(&oracle, &data, &names("b", 3), 7, 43).unwrap();
    assert_eq!(m1, m2);
    assert_ne!(m1.values, m3.values);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    m1.save(&p).unwrap();
    let back = CorrespondenceMatrix::load(&p).unwrap();
    assert_eq!(back, m1);
    for (a, b) in back.values.iter().zip(&m1.values) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    back.save(&dir.path().join("m2.csv")).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("m2.csv")).unwrap());
}

#[test]
fn oracle_failure_reports_progress() {
    let data = coded_dataset(4, 10);
    let mut c = FnClassifier::new(2, [2, 1, 1], |_| 0);
    c.fail_after = Some(25);
    let (oracle, _) = label_oracle(Arc::new(c));
    match build_matrix(&oracle, &data, &names("b", 2), 10, 0) {
        Err(Error::OracleFailure { completed, total, .. }) => {
            assert_eq!((completed, total), (20, 40));
        }
        other => panic!("expected oracle failure, got {other:?}"),
    }
}

#[test]
fn exhausted_budget_is_an_oracle_failure() {
    let data = coded_dataset(4, 10);
    let oracle = OracleHandle::new(
        Arc::new(FnClassifier::new(2, [2, 1, 1], |_| 1)),
        OracleMode::LabelOnly,
        Arc::new(QueryLedger::new(15)),
    );
    assert!(matches!(
        build_matrix(&oracle, &data, &names("b", 2), 5, 0),
        Err(Error::OracleFailure { completed: 15, total: 20, .. })
    ));
}

#[test]
fn rejects_bad_arguments() {
    let data = coded_dataset(3, 4);
    let (oracle, _) = label_oracle(Arc::new(FnClassifier::new(2, [2, 1, 1], |_| 0)));
    assert!(build_matrix(&oracle, &data, &names("b", 3), 2, 0).is_err());
    assert!(build_matrix(&oracle, &data, &names("b", 2), 0, 0).is_err());
    assert!(build_matrix(&oracle, &data, &names("b", 2), 5, 0).is_err());
}

fn fixed(values: Array2<f64>) -> CorrespondenceMatrix {
    CorrespondenceMatrix {
        rows: names("a", values.nrows()),
        cols: vec!["dog-x".into(), "dog-y".into(), "cat".into()],
        values,
        samples_per_class: 10,
        seed: 0,
        oracle_digest: String::new(),
    }
}

#[test]
fn proxy_selection_for_single_and_compound_targets() {
    let m = fixed(array![[0.1, 0.1, 0.8], [0.5, 0.4, 0.1], [0.2, 0.7, 0.1], [0.6, 0.0, 0.4]]);
    let t = resolve_columns(&m, "dog-any").unwrap();
    assert_eq!(t.members, vec![0, 1]);
    let r = select_proxy(&m, &t, 2).unwrap();
    assert_eq!(r.top().unwrap().0, 1);
    assert_eq!(r.ranked[1].0, 2);
    let r = select_proxy(&m, &resolve_columns(&m, "cat").unwrap(), 1).unwrap();
    assert_eq!(r.top(), Some((0, "a0", 0.8)));
    assert!(resolve_columns(&m, "horse").is_err());
    let bad = TargetSet { name: "x".into(), members: vec![3] };
    assert!(select_proxy(&m, &bad, 1).is_err());
}

#[test]
fn top_pairs_use_each_target_once() {
    let m = fixed(array![[0.9, 0.05, 0.05], [0.8, 0.1, 0.1], [0.1, 0.3, 0.6], [0.0, 0.5, 0.5]]);
    let p: Vec<(usize, usize)> = top_pairs(&m, 3).iter().map(|p| (p.proxy, p.target)).collect();
    assert_eq!(p, vec![(0, 0), (2, 2), (3, 1)]);
}

proptest! {
    #[test]
    fn rows_are_stochastic_for_any_oracle(
        rows in 1usize..7,
        cols in 1usize..9,
        spc in 1usize..12,
        salt in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let per = spc + 3;
        let data = coded_dataset(rows, per);
        let n = rows * per;
        let model = Arc::new(FnClassifier::new(cols, [2, 1, 1], move |x| {
            let i = decode(x[1], n) as u64;
            (i.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt) as usize % cols
        }));
        let (oracle, ledger) = label_oracle(model.clone());
        let m = build_matrix(&oracle, &data, &names("b", cols), spc, seed).unwrap();
        prop_assert!(m.row_sum_error() <= 1e-9);
        prop_assert!(m.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(model.calls(), rows * spc);
        prop_assert_eq!(ledger.used(), rows * spc);
    }
}

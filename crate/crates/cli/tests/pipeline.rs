use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use dlt_cli::stage::{completed_in, MANIFEST};
use dlt_cli::{run, run_pipeline, Cli, Experiment, ExperimentConfig, PIPELINE_STAGES};

/// A desk environment small enough to run every stage in seconds.
fn tiny_config(root: &Path) -> serde_json::Value {
    serde_json::json!({
        "version": 1,
        "seed": 5,
        "root": root,
        "environment": { "desk": { "side": 8, "train_per_class": 6, "val_per_class": 4 } },
        "models": {
            "whitebox": ["resnet-a", "densenet-a"],
            "blackbox": ["vgg-s", "mobilenet-s"],
            "train": { "epochs": 1, "batch_size": 32, "learning_rate": 0.003, "weight_decay": 0.0001, "seed": 0 }
        },
        "aux": { "hidden": 4, "epochs": 5 },
        "correspondence": { "samples_per_class": 10, "pairs": 1 },
        "attack": {
            "params": { "iters": 2 },
            "layers": { "resnet-a": ["4.1"], "densenet-a": ["3.1", "4.1"] },
            "eta": { "densenet-a": 1e-5 },
            "examples": 12
        },
        "query": {
            "rgf": { "directions": 10, "max_queries": 44 },
            "checkpoints": [0, 22, 44],
            "examples": 3
        }
    })
}

fn write_config(dir: &Path, root: &Path) -> PathBuf {
    let path = dir.join("experiment.json");
    fs::write(&path, serde_json::to_string_pretty(&tiny_config(root)).unwrap()).unwrap();
    path
}

fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("dlt").chain(args.iter().copied())).unwrap()
}

fn all_stages() -> Vec<String> {
    PIPELINE_STAGES.iter().map(|s| s.to_string()).collect()
}

fn correspondence_csvs(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for (dir, _) in completed_in(root, "correspondence").unwrap() {
        let mut files: Vec<_> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for f in files {
            out.push((f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()));
        }
    }
    out
}

fn manifests(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for area in dlt_cli::stage::AREAS {
        for (dir, _) in completed_in(root, area).unwrap() {
            out.push((dir.clone(), fs::read(dir.join(MANIFEST)).unwrap()));
        }
    }
    out
}

#[test]
fn attack_without_whiteboxes_names_the_train_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tmp.path().join("runs"));
    let cfg = cfg.to_str().unwrap();
    run(cli(&["--config", cfg, "build-splits"])).unwrap();
    let err = run(cli(&["--config", cfg, "attack", "--family", "tmim", "--target", "crab", "--proxy", "fish"]))
        .unwrap_err()
        .to_string();
    assert!(err.contains("`train`"), "{err}");
    let err = run(cli(&["--config", cfg, "evaluate", "--target", "crab", "--proxy", "fish"])).unwrap_err().to_string();
    assert!(err.contains("`attack`"), "{err}");
    let err = run(cli(&["--config", cfg, "pipeline", "--stages", "attack"])).unwrap_err().to_string();
    assert!(err.contains("`train`"), "{err}");
}

#[test]
fn config_must_be_strict_and_paths_must_exist() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc = tiny_config(tmp.path());
    doc["attack"]["itres"] = 3.into();
    let p = tmp.path().join("bad.json");
    fs::write(&p, doc.to_string()).unwrap();
    assert!(ExperimentConfig::load(&p).is_err());

    let mut doc = tiny_config(tmp.path());
    doc["environment"]["mapping"] = "missing.map".into();
    fs::write(&p, doc.to_string()).unwrap();
    let err = format!("{:#}", ExperimentConfig::load(&p).unwrap_err());
    assert!(err.contains("missing.map"), "{err}");
}

#[test]
fn pipeline_is_deterministic_and_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let roots = [tmp.path().join("one"), tmp.path().join("two")];
    for root in &roots {
        let cfg = ExperimentConfig::from_json(&tiny_config(root).to_string()).unwrap();
        run_pipeline(&Experiment::new(cfg), &all_stages()).unwrap();
    }
    let first = correspondence_csvs(&roots[0]);
    assert!(first.iter().any(|(n, _)| n == "mean.csv"));
    assert_eq!(first, correspondence_csvs(&roots[1]));

    // Every stage is already complete, so a rerun rewrites no manifest.
    let before = manifests(&roots[0]);
    let cfg = ExperimentConfig::from_json(&tiny_config(&roots[0]).to_string()).unwrap();
    let exp = Experiment::new(cfg);
    run_pipeline(&exp, &all_stages()).unwrap();
    assert_eq!(before, manifests(&roots[0]));

    // Evaluation alone re-emits the report from the stored artifacts.
    fs::remove_dir_all(roots[0].join("eval/report")).unwrap();
    run_pipeline(&exp, &["evaluate".into()]).unwrap();
    let table = fs::read_to_string(roots[0].join("eval/report/report.txt")).unwrap();
    let pair = &exp.pairs().unwrap()[0];
    for needle in [pair.target.as_str(), pair.proxy.as_str(), "tmim", "fda"] {
        assert!(table.contains(needle), "{needle} missing from\n{table}");
    }
    assert_eq!(before, manifests(&roots[0]));

    let curves = completed_in(&roots[0], "query").unwrap();
    assert_eq!(curves.len(), 2);
    for (dir, m) in curves {
        assert_eq!(m.seed, 5);
        assert_eq!(m.config_digest, exp.cfg.digest());
        assert_eq!(fs::read_to_string(dir.join("curves.csv")).unwrap().lines().count(), 4);
    }
}

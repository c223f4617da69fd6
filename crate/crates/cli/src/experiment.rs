//! Stage implementations. Each `run_*` method is idempotent: it returns the
//! existing stage untouched when its manifest is already in place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use dlt_core::attacks::{
    greedy_layer_tuning, run_attack, AdversarialBatch, AttackConfig, AttackFamily, BatchMeta, WhiteboxMember,
};
use dlt_core::correspondence::{build_matrix, hotspots, select_proxy, top_pairs, CorrespondenceMatrix};
use dlt_core::datasets::{
    self, synth, BaseDataset, EnvironmentPair, LabeledDataset, Partition, Role, SuperclassMapping, TargetSet,
};
use dlt_core::digest::sha256_hex;
use dlt_core::eval::{
    compute_metrics, eligible_positions, filter_clean, render_report, source_class_breakdown, EvalResult, Layout,
};
use dlt_core::models::{train_aux_models, train_classifier, AuxModelSet, ModelHandle, TrainConfig};
use dlt_core::nn::LayerId;
use dlt_core::query::{
    run_variant, save_runs, tsuc_vs_queries, write_curves_csv, OracleHandle, OracleMode, QueryLedger,
};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::stage::{completed_in, Stage};

const BASE_DIR: &str = "base";
const ENV_FILE: &str = "environment.json";
const MEAN_MATRIX: &str = "mean.csv";
const PAIRS_FILE: &str = "pairs.json";
const LAYERS_FILE: &str = "layers.json";
const RESULTS_FILE: &str = "results.json";

/// A (target, proxy) pair by name, as carried between stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPair {
    pub target: String,
    pub proxy: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmStart {
    None,
    Family(AttackFamily),
}

impl std::str::FromStr for WarmStart {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(WarmStart::None),
            other => Ok(WarmStart::Family(other.parse().map_err(|e| anyhow!("warm start: {e}"))?)),
        }
    }
}

impl WarmStart {
    pub fn variant_name(self) -> String {
        match self {
            WarmStart::None => "RGF".into(),
            WarmStart::Family(f) => format!("{}+RGF", f.to_string().to_uppercase()),
        }
    }
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    config_digest: String,
}

fn model_dir(stage: &Stage, side: &str, arch: &str) -> PathBuf {
    stage.dir.join(side).join(arch)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn slug(text: &str) -> String {
    text.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let root = cfg.root.clone();
        let config_digest = cfg.digest();
        Self { cfg, root, config_digest }
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn finish(&self, stage: &Stage, inputs: &[&Stage]) -> Result<()> {
        stage.finish(self.seed(), &self.config_digest, inputs)?;
        info!("{} complete: {}", stage.name, stage.dir.display());
        Ok(())
    }

    // ---- splits -------------------------------------------------------

    fn mapping_text(&self) -> Result<String> {
        match &self.cfg.environment.mapping {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading mapping {}", p.display())),
            None => Ok(datasets::DESK_MAPPING.to_string()),
        }
    }

    fn partition(&self, mapping: &SuperclassMapping) -> Result<Partition> {
        let env = &self.cfg.environment;
        match (&env.partition, &env.mapping) {
            (Some(p), _) => Ok(datasets::parse_partition(
                &fs::read_to_string(p).with_context(|| format!("reading partition {}", p.display()))?,
            )?),
            (None, None) => Ok(datasets::parse_partition(datasets::DESK_TEST1_PARTITION)?),
            (None, Some(_)) => Ok(datasets::random_partition(mapping, self.seed())),
        }
    }

    pub fn splits_stage(&self) -> Result<Stage> {
        let mapping_text = self.mapping_text()?;
        let mapping = datasets::parse_mapping(&mapping_text)?;
        let partition = self.partition(&mapping)?;
        let base = match &self.cfg.environment.base {
            Some(dir) => {
                let meta = fs::read(dir.join("meta.json"))
                    .with_context(|| format!("reading base dataset metadata in {}", dir.display()))?;
                serde_json::json!({ "dir": dir, "meta": sha256_hex(&meta) })
            }
            None => serde_json::to_value(&self.cfg.environment.desk)?,
        };
        Ok(Stage::new(&self.root, "splits", "build-splits", &(sha256_hex(mapping_text.as_bytes()), &partition, base)))
    }

    pub fn run_splits(&self) -> Result<Stage> {
        let stage = self.splits_stage()?;
        if stage.is_complete() {
            info!("build-splits up to date ({})", stage.key);
            return Ok(stage);
        }
        stage.begin()?;
        let mapping = datasets::parse_mapping(&self.mapping_text()?)?;
        let env = datasets::build_environment(&mapping, &self.partition(&mapping)?)?;
        env.save(&stage.dir.join(ENV_FILE))?;
        if self.cfg.environment.base.is_none() {
            info!("synthesizing the desk base dataset");
            synth::generate(&self.cfg.environment.desk).save(&stage.dir.join(BASE_DIR))?;
        }
        self.finish(&stage, &[])?;
        Ok(stage)
    }

    pub fn environment(&self, splits: &Stage) -> Result<EnvironmentPair> {
        splits.require()?;
        Ok(EnvironmentPair::load(&splits.dir.join(ENV_FILE))?)
    }

    fn base(&self, splits: &Stage) -> Result<BaseDataset> {
        splits.require()?;
        let dir = self.cfg.environment.base.clone().unwrap_or_else(|| splits.dir.join(BASE_DIR));
        Ok(BaseDataset::load(&dir)?)
    }

    /// `side` is "a" or "b".
    pub fn data(&self, splits: &Stage, side: &str, role: Role) -> Result<LabeledDataset> {
        let env = self.environment(splits)?;
        let spec = if side == "a" { &env.split_a } else { &env.split_b };
        Ok(datasets::materialize(&self.base(splits)?, spec, role)?.0)
    }

    // ---- train --------------------------------------------------------

    pub fn train_stage(&self) -> Result<Stage> {
        let splits = self.splits_stage()?;
        Ok(Stage::new(&self.root, "models", "train", &(&splits.key, &self.cfg.models, self.seed())))
    }

    fn roster(&self) -> Vec<(&'static str, String)> {
        let m = &self.cfg.models;
        m.whitebox.iter().map(|a| ("a", a.clone())).chain(m.blackbox.iter().map(|a| ("b", a.clone()))).collect()
    }

    pub fn run_train(&self) -> Result<Stage> {
        let splits = self.splits_stage()?;
        splits.require()?;
        let stage = self.train_stage()?;
        if stage.is_complete() {
            info!("train up to date ({})", stage.key);
            return Ok(stage);
        }
        stage.begin()?;
        let mut accuracy = BTreeMap::new();
        for (k, (side, arch)) in self.roster().into_iter().enumerate() {
            let train = self.data(&splits, side, Role::Train)?;
            let val = self.data(&splits, side, Role::Validation)?;
            let cfg = TrainConfig { seed: self.seed().wrapping_add(k as u64), ..self.cfg.models.train.clone() };
            info!("training {arch} on split {} ({} images)", side.to_uppercase(), train.len());
            let (model, report) = train_classifier(&train, &arch, &cfg, Some(&val))?;
            info!("{arch}: validation accuracy {:.3}", report.validation_accuracy.unwrap_or(f64::NAN));
            model.save(&model_dir(&stage, side, &arch))?;
            accuracy.insert(format!("{side}/{arch}"), report);
        }
        write_json(&stage.dir.join("training.json"), &accuracy)?;
        self.finish(&stage, &[&splits])?;
        Ok(stage)
    }

    fn models(&self, side: &str) -> Result<Vec<Arc<ModelHandle>>> {
        let stage = self.train_stage()?;
        stage.require()?;
        let archs = if side == "a" { &self.cfg.models.whitebox } else { &self.cfg.models.blackbox };
        archs.iter().map(|a| Ok(Arc::new(ModelHandle::load(&model_dir(&stage, side, a))?))).collect()
    }

    pub fn whiteboxes(&self) -> Result<Vec<Arc<ModelHandle>>> {
        self.models("a")
    }

    pub fn blackboxes(&self) -> Result<Vec<Arc<ModelHandle>>> {
        self.models("b")
    }

    // ---- train-aux ----------------------------------------------------

    pub fn aux_stage(&self) -> Result<Stage> {
        let train = self.train_stage()?;
        Ok(Stage::new(&self.root, "aux", "train-aux", &(&train.key, &self.cfg.aux, self.seed())))
    }

    pub fn run_aux(&self) -> Result<Stage> {
        let splits = self.splits_stage()?;
        let train = self.train_stage()?;
        train.require()?;
        let stage = self.aux_stage()?;
        if stage.is_complete() {
            info!("train-aux up to date ({})", stage.key);
            return Ok(stage);
        }
        stage.begin()?;
        let data = self.data(&splits, "a", Role::Train)?;
        let classes: Vec<usize> = (0..data.num_classes()).collect();
        for w in self.whiteboxes()? {
            let layers = w.network.layer_ids();
            info!("training {} probes for {}", layers.len() * classes.len(), w.info.architecture_id);
            let cfg = dlt_core::models::AuxConfig { seed: self.seed(), ..self.cfg.aux.clone() };
            let set = train_aux_models(&w, &data, &layers, &classes, &cfg)?;
            set.save(&stage.dir.join(format!("{}.json", w.info.architecture_id)))?;
        }
        self.finish(&stage, &[&train])?;
        Ok(stage)
    }

    fn aux_sets(&self) -> Result<Vec<Arc<AuxModelSet>>> {
        let stage = self.aux_stage()?;
        stage.require()?;
        self.cfg
            .models
            .whitebox
            .iter()
            .map(|a| Ok(Arc::new(AuxModelSet::load(&stage.dir.join(format!("{a}.json")))?)))
            .collect()
    }

    // ---- correspondence -----------------------------------------------

    pub fn correspondence_stage(&self) -> Result<Stage> {
        let train = self.train_stage()?;
        Ok(Stage::new(&self.root, "correspondence", "correspondence", &(&train.key, &self.cfg.correspondence, self.seed())))
    }

    pub fn run_correspondence(&self) -> Result<Stage> {
        let splits = self.splits_stage()?;
        let train = self.train_stage()?;
        train.require()?;
        let stage = self.correspondence_stage()?;
        if stage.is_complete() {
            info!("correspondence up to date ({})", stage.key);
            return Ok(stage);
        }
        stage.begin()?;
        let env = self.environment(&splits)?;
        let probe_data = self.data(&splits, "a", Role::Validation)?;
        let names = env.split_b.class_names();
        let spc = self.cfg.correspondence.samples_per_class;
        let mut mean: Option<CorrespondenceMatrix> = None;
        let mut queries = BTreeMap::new();
        let blackboxes = self.blackboxes()?;
        for b in &blackboxes {
            let ledger = Arc::new(QueryLedger::unbounded());
            let oracle = OracleHandle::new(b.clone(), OracleMode::LabelOnly, ledger.clone());
            let m = build_matrix(&oracle, &probe_data, &names, spc, self.seed())?;
            m.save(&stage.dir.join(format!("{}.csv", b.info.architecture_id)))?;
            queries.insert(b.info.architecture_id.clone(), ledger.used());
            mean = Some(match mean {
                None => m,
                Some(mut acc) => {
                    acc.values = &acc.values + &m.values;
                    acc
                }
            });
        }
        let mut mean = mean.ok_or_else(|| anyhow!("no blackboxes configured"))?;
        mean.values /= blackboxes.len() as f64;
        mean.oracle_digest =
            sha256_hex(blackboxes.iter().map(|b| b.info.architecture_id.as_str()).collect::<Vec<_>>().join(",").as_bytes());
        mean.save(&stage.dir.join(MEAN_MATRIX))?;
        let named = |p: &dlt_core::correspondence::Pair| NamedPair {
            target: mean.cols[p.target].clone(),
            proxy: mean.rows[p.proxy].clone(),
            score: p.score,
        };
        let pairs: Vec<NamedPair> = top_pairs(&mean, self.cfg.correspondence.pairs).iter().map(named).collect();
        let hot: Vec<NamedPair> = hotspots(&mean).iter().map(named).collect();
        for p in &pairs {
            info!("pair: target {} via proxy {} ({:.3})", p.target, p.proxy, p.score);
        }
        write_json(&stage.dir.join(PAIRS_FILE), &pairs)?;
        write_json(&stage.dir.join("hotspots.json"), &hot)?;
        write_json(&stage.dir.join("queries.json"), &queries)?;
        self.finish(&stage, &[&train])?;
        Ok(stage)
    }

    pub fn mean_matrix(&self) -> Result<CorrespondenceMatrix> {
        let stage = self.correspondence_stage()?;
        stage.require()?;
        Ok(CorrespondenceMatrix::load(&stage.dir.join(MEAN_MATRIX))?)
    }

    pub fn pairs(&self) -> Result<Vec<NamedPair>> {
        let stage = self.correspondence_stage()?;
        stage.require()?;
        read_json(&stage.dir.join(PAIRS_FILE))
    }

    /// Proxy ranking for a target expression over the mean matrix.
    pub fn rank_proxies(&self, target: &str, k: usize) -> Result<dlt_core::correspondence::ProxyRanking> {
        let m = self.mean_matrix()?;
        let t = self.target(target)?;
        Ok(select_proxy(&m, &t, k)?)
    }

    pub fn target(&self, text: &str) -> Result<TargetSet> {
        let env = self.environment(&self.splits_stage()?)?;
        Ok(TargetSet::resolve(&env.split_b, text)?)
    }

    fn proxy_index(&self, target: &TargetSet, proxy: Option<&str>) -> Result<(usize, String)> {
        let env = self.environment(&self.splits_stage()?)?;
        match proxy {
            Some(name) => {
                let i = env.split_a.index_of(name).ok_or_else(|| anyhow!("unknown proxy class `{name}`"))?;
                Ok((i, name.to_string()))
            }
            None => {
                let r = select_proxy(&self.mean_matrix()?, target, 1)?;
                let (i, n, _) = r.top().ok_or_else(|| anyhow!("no proxy for `{}`", target.name))?;
                Ok((i, n.to_string()))
            }
        }
    }

    // ---- tune-layers --------------------------------------------------

    pub fn tune_stage(&self) -> Result<Stage> {
        let aux = self.aux_stage()?;
        let corr = self.correspondence_stage()?;
        Ok(Stage::new(
            &self.root,
            "aux",
            "tune-layers",
            &(&aux.key, &corr.key, &self.cfg.tuning, &self.cfg.attack.eta, &self.cfg.attack.layers, self.seed()),
        ))
    }

    pub fn run_tune(&self) -> Result<Stage> {
        let splits = self.splits_stage()?;
        let aux = self.aux_stage()?;
        let corr = self.correspondence_stage()?;
        aux.require()?;
        corr.require()?;
        let stage = self.tune_stage()?;
        if stage.is_complete() {
            info!("tune-layers up to date ({})", stage.key);
            return Ok(stage);
        }
        stage.begin()?;
        let fixed = &self.cfg.attack.layers;
        let archs = &self.cfg.models.whitebox;
        let mut chosen: BTreeMap<String, Vec<LayerId>> = BTreeMap::new();
        if archs.iter().all(|a| fixed.contains_key(a)) {
            chosen = archs.iter().map(|a| (a.clone(), fixed[a].clone())).collect();
        } else {
            let whiteboxes = self.whiteboxes()?;
            let aux_sets = self.aux_sets()?;
            let env = self.environment(&splits)?;
            let proxies: Vec<usize> = self
                .pairs()?
                .iter()
                .filter_map(|p| env.split_a.index_of(&p.proxy))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let candidates: Vec<Vec<LayerId>> = whiteboxes.iter().map(|w| w.network.layer_ids()).collect();
            let eta: Vec<f64> = archs.iter().map(|a| self.cfg.attack.eta_for(a)).collect();
            let tuning_data = self.data(&splits, "a", Role::Validation)?;
            info!("greedy layer tuning over {} proxies", proxies.len());
            let tuned =
                greedy_layer_tuning(&whiteboxes, &aux_sets, &candidates, &eta, &proxies, &tuning_data, &self.cfg.tuning)?;
            for (a, layers) in archs.iter().zip(tuned) {
                let layers = fixed.get(a).cloned().unwrap_or(layers);
                info!("{a}: layers {}", layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", "));
                chosen.insert(a.clone(), layers);
            }
        }
        write_json(&stage.dir.join(LAYERS_FILE), &chosen)?;
        self.finish(&stage, &[&aux, &corr])?;
        Ok(stage)
    }

    pub fn layers(&self) -> Result<BTreeMap<String, Vec<LayerId>>> {
        let stage = self.tune_stage()?;
        stage.require()?;
        read_json(&stage.dir.join(LAYERS_FILE))
    }

    // ---- attack -------------------------------------------------------

    /// Validation images of split B outside the target. When `attack.examples`
    /// caps the count, an evenly strided subset keeps every source class.
    fn attack_ids(&self, bval: &LabeledDataset, target: &TargetSet) -> Vec<usize> {
        let ids: Vec<usize> = (0..bval.len()).filter(|&i| !target.contains(bval.labels[i])).collect();
        let n = self.cfg.attack.examples;
        if n == 0 || n >= ids.len() {
            return ids;
        }
        (0..n).map(|k| ids[k * ids.len() / n]).collect()
    }

    pub fn attack_stage(&self, family: AttackFamily, target: &TargetSet, proxy: usize) -> Result<Stage> {
        let train = self.train_stage()?;
        let upstream = match family {
            AttackFamily::Tmim => String::new(),
            AttackFamily::Fda => format!("{}/{}", self.aux_stage()?.key, self.tune_stage()?.key),
        };
        let material = (
            family,
            &target.members,
            proxy,
            &train.key,
            upstream,
            &self.cfg.attack.params,
            &self.cfg.attack.eta,
            self.cfg.attack.examples,
            self.seed(),
        );
        let mut stage = Stage::new(&self.root, "attacks", "attack", &material);
        stage.dir = self.root.join("attacks").join(format!("{family}-{}-{}", slug(&target.name), stage.key));
        Ok(stage)
    }

    pub fn run_attack(&self, family: AttackFamily, target_text: &str, proxy: Option<&str>) -> Result<Stage> {
        let splits = self.splits_stage()?;
        let train = self.train_stage()?;
        train.require()?;
        if proxy.is_none() {
            self.correspondence_stage()?.require()?;
        }
        let target = self.target(target_text)?;
        let (proxy, proxy_name) = self.proxy_index(&target, proxy)?;
        let stage = self.attack_stage(family, &target, proxy)?;
        if stage.is_complete() {
            info!("attack {family} on {} up to date ({})", target.name, stage.key);
            return Ok(stage);
        }
        let whiteboxes = self.whiteboxes()?;
        let ensemble = match family {
            AttackFamily::Tmim => whiteboxes.iter().map(|w| WhiteboxMember::tmim(w.clone())).collect(),
            AttackFamily::Fda => {
                let aux_sets = self.aux_sets()?;
                let layers = self.layers()?;
                whiteboxes
                    .iter()
                    .zip(aux_sets)
                    .map(|(w, a)| {
                        let arch = &w.info.architecture_id;
                        let l = layers.get(arch).cloned().ok_or_else(|| anyhow!("no tuned layers for {arch}"))?;
                        Ok(WhiteboxMember::fda(w.clone(), a, l, self.cfg.attack.eta_for(arch)))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let cfg = AttackConfig { params: self.cfg.attack.params, family, ensemble };
        stage.begin()?;
        let bval = self.data(&splits, "b", Role::Validation)?;
        let ids = self.attack_ids(&bval, &target);
        let sub = bval.subset(&ids);
        info!("{family}: attacking {} images toward {} via {proxy_name}", ids.len(), target.name);
        let pert = run_attack(&cfg, &sub.inputs.view(), proxy)?;
        let target_names: Vec<String> = target.members.iter().map(|&t| bval.spec.classes[t].name.clone()).collect();
        let batch = AdversarialBatch::new(
            sub.inputs,
            sub.labels,
            ids,
            pert,
            BatchMeta {
                family,
                config_digest: cfg.digest(),
                seed: self.seed(),
                epsilon: cfg.params.epsilon,
                proxy,
                proxy_name: &proxy_name,
                target_set: &target.members,
                target_names: &target_names,
            },
        )?;
        let bad = batch.manifest.constraint_ok.iter().filter(|ok| !**ok).count();
        if bad > 0 {
            bail!("{bad} adversarial examples violate the epsilon constraint");
        }
        batch.save(&stage.dir.join("batch"))?;
        let upstream = match family {
            AttackFamily::Tmim => vec![train],
            AttackFamily::Fda => vec![train, self.aux_stage()?, self.tune_stage()?],
        };
        self.finish(&stage, &upstream.iter().collect::<Vec<_>>())?;
        Ok(stage)
    }

    pub fn load_batch(&self, stage: &Stage) -> Result<AdversarialBatch> {
        stage.require()?;
        Ok(AdversarialBatch::load(&stage.dir.join("batch"))?)
    }

    // ---- evaluate -----------------------------------------------------

    pub fn eval_stage(&self, attack: &Stage) -> Result<Stage> {
        let train = self.train_stage()?;
        let mut stage = Stage::new(&self.root, "eval", "evaluate", &(&attack.key, &train.key, &self.cfg.models.blackbox));
        let leaf = attack.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        stage.dir = self.root.join("eval").join(format!("{leaf}-{}", stage.key));
        Ok(stage)
    }

    pub fn run_evaluate(&self, family: AttackFamily, target_text: &str, proxy: Option<&str>) -> Result<Stage> {
        let splits = self.splits_stage()?;
        let target = self.target(target_text)?;
        let (proxy, _) = self.proxy_index(&target, proxy)?;
        let attack = self.attack_stage(family, &target, proxy)?;
        attack.require()?;
        let stage = self.eval_stage(&attack)?;
        if stage.is_complete() {
            info!("evaluate {family} on {} up to date ({})", target.name, stage.key);
            return Ok(stage);
        }
        stage.begin()?;
        let batch = self.load_batch(&attack)?;
        let bval = self.data(&splits, "b", Role::Validation)?;
        let mut results = Vec::new();
        for b in self.blackboxes()? {
            let eligible = filter_clean(&bval, b.as_ref(), &target.members)?;
            let sub = batch.subset(&eligible_positions(&batch, &eligible));
            let r = compute_metrics(&sub, b.as_ref(), &target)?;
            let bd = source_class_breakdown(&r);
            if (bd.weighted_tsuc() - r.tsuc).abs() > 1e-9 {
                bail!("source-class breakdown does not reconstruct tSuc for {}", r.blackbox_id);
            }
            info!("{}: error {:.3} tsuc {:.3} over {}", b.info.architecture_id, r.error, r.tsuc, r.n_attacked);
            results.push(r);
        }
        write_json(&stage.dir.join(RESULTS_FILE), &results)?;
        let breakdowns: Vec<_> = results.iter().map(|r| (r.blackbox_id.clone(), source_class_breakdown(r))).collect();
        write_json(&stage.dir.join("breakdown.json"), &breakdowns)?;
        self.finish(&stage, &[&attack])?;
        Ok(stage)
    }

    /// Collects every completed evaluation and renders the table.
    pub fn run_report(&self, layout: Layout) -> Result<PathBuf> {
        let mut results: Vec<EvalResult> = Vec::new();
        for (dir, m) in completed_in(&self.root, "eval")? {
            if m.stage == "evaluate" {
                results.extend(read_json::<Vec<EvalResult>>(&dir.join(RESULTS_FILE))?);
            }
        }
        if results.is_empty() {
            return Err(dlt_core::Error::MissingStage {
                stage: "evaluate".into(),
                detail: format!("no completed evaluations under {}", self.root.join("eval").display()),
            }
            .into());
        }
        let report = render_report(&results, layout)?;
        let out = self.root.join("eval").join("report");
        report.save(&out)?;
        print!("{}", report.table);
        Ok(out)
    }

    // ---- query-attack -------------------------------------------------

    pub fn query_stage(&self, warm: WarmStart, target: &TargetSet, proxy: usize, blackbox: &str) -> Result<Stage> {
        let train = self.train_stage()?;
        let warm_key = match warm {
            WarmStart::None => String::new(),
            WarmStart::Family(f) => self.attack_stage(f, target, proxy)?.key,
        };
        let material = (&warm_key, &target.members, proxy, blackbox, &train.key, &self.cfg.query, self.cfg.attack.examples, self.seed());
        let mut stage = Stage::new(&self.root, "query", "query-attack", &material);
        stage.dir = self.root.join("query").join(format!("{}-{}-{}", slug(&warm.variant_name()), slug(&target.name), stage.key));
        Ok(stage)
    }

    pub fn run_query(
        &self,
        warm: WarmStart,
        target_text: &str,
        proxy: Option<&str>,
        blackbox: Option<&str>,
    ) -> Result<Stage> {
        let splits = self.splits_stage()?;
        self.train_stage()?.require()?;
        let target = self.target(target_text)?;
        let (proxy, _) = self.proxy_index(&target, proxy)?;
        let bb_arch = blackbox.unwrap_or(&self.cfg.models.blackbox[0]).to_string();
        let bb_pos = self
            .cfg
            .models
            .blackbox
            .iter()
            .position(|a| *a == bb_arch)
            .ok_or_else(|| anyhow!("blackbox `{bb_arch}` is not in the configuration"))?;
        let stage = self.query_stage(warm, &target, proxy, &bb_arch)?;
        if stage.is_complete() {
            info!("query-attack {} on {} up to date ({})", warm.variant_name(), target.name, stage.key);
            return Ok(stage);
        }
        let warm_batch = match warm {
            WarmStart::None => None,
            WarmStart::Family(f) => Some(self.load_batch(&self.attack_stage(f, &target, proxy)?)?),
        };
        stage.begin()?;
        let bval = self.data(&splits, "b", Role::Validation)?;
        let blackbox = self.blackboxes()?.swap_remove(bb_pos);
        let eligible = filter_clean(&bval, blackbox.as_ref(), &target.members)?;
        let mut ids: Vec<usize> = {
            let pool: std::collections::BTreeSet<usize> = self.attack_ids(&bval, &target).into_iter().collect();
            eligible.into_iter().filter(|i| pool.contains(i)).collect()
        };
        if self.cfg.query.examples > 0 {
            ids.truncate(self.cfg.query.examples);
        }
        let clean = bval.subset(&ids).inputs;
        let warm_delta = match &warm_batch {
            None => None,
            Some(b) => Some(b.subset(&eligible_positions(b, &ids)).delta),
        };
        if warm_delta.as_ref().is_some_and(|d| d.dim() != clean.dim()) {
            bail!("warm-start batch does not cover every eligible example");
        }
        let rgf = dlt_core::query::QueryConfig { seed: self.seed(), ..self.cfg.query.rgf };
        let ledger = Arc::new(QueryLedger::new(rgf.max_queries.saturating_mul(ids.len())));
        let oracle = OracleHandle::new(blackbox.clone(), OracleMode::Score, ledger.clone());
        info!("{}: refining {} images against {bb_arch}", warm.variant_name(), ids.len());
        let warm_view = warm_delta.as_ref().map(|d| d.view());
        let (run, _) = run_variant(
            &warm.variant_name(),
            blackbox.as_ref(),
            &oracle,
            &clean.view(),
            warm_view.as_ref(),
            &ids,
            &target.members,
            &rgf,
        )?;
        let curve = tsuc_vs_queries(std::slice::from_ref(&run), &self.cfg.query.checkpoints)?;
        for p in &curve {
            info!("{} @ {}: tsuc {:.3}", p.variant, p.checkpoint, p.tsuc);
        }
        write_curves_csv(&stage.dir.join("curves.csv"), &curve)?;
        save_runs(&stage.dir.join("runs.json"), std::slice::from_ref(&run))?;
        ledger.save(&stage.dir.join("ledger.json"))?;
        let mut upstream = vec![self.train_stage()?];
        if let WarmStart::Family(f) = warm {
            upstream.push(self.attack_stage(f, &target, proxy)?);
        }
        self.finish(&stage, &upstream.iter().collect::<Vec<_>>())?;
        Ok(stage)
    }
}

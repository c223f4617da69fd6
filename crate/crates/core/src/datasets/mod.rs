//! Disjoint-label-space environments: superclass mappings, A/B partitions and
//! materialised datasets over a base classification dataset.

pub mod base;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::error::{Error, Result};
pub use base::BaseDataset;

pub const DINS_MAPPING: &str = include_str!("../../data/dins.map");
pub const DINS_TEST1_PARTITION: &str = include_str!("../../data/dins_test1.part");
pub const DINS_TEST2_PARTITION: &str = include_str!("../../data/dins_test2.part");
pub const DESK_MAPPING: &str = include_str!("../../data/desk100.map");
pub const DESK_TEST1_PARTITION: &str = include_str!("../../data/desk_test1.part");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperClass {
    pub name: String,
    pub members: Vec<usize>,
}

/// A parsed mapping file: the declared superclasses plus the base dataset
/// they index into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperclassMapping {
    pub base_dataset: String,
    pub num_base_classes: usize,
    pub classes: Vec<SuperClass>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpaceSpec {
    pub name: String,
    pub classes: Vec<SuperClass>,
    pub base_dataset: String,
}

impl LabelSpaceSpec {
    pub fn new(name: impl Into<String>, classes: Vec<SuperClass>, base_dataset: impl Into<String>) -> Result<Self> {
        let spec = Self { name: name.into(), classes, base_dataset: base_dataset.into() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        let mut owner: HashMap<usize, &str> = HashMap::new();
        for sc in &self.classes {
            if !names.insert(sc.name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "superclass `{}` declared twice in `{}`",
                    sc.name, self.name
                )));
            }
            validate_superclass(sc)?;
            for &id in &sc.members {
                if let Some(prev) = owner.insert(id, &sc.name) {
                    return Err(Error::DuplicateBaseClass {
                        id,
                        first: prev.to_string(),
                        second: sc.name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn base_ids(&self) -> BTreeSet<usize> {
        self.classes.iter().flat_map(|c| c.members.iter().copied()).collect()
    }

    /// Superclass index owning a base label, if any.
    pub fn superclass_of(&self, base_label: usize) -> Option<usize> {
        self.classes.iter().position(|c| c.members.contains(&base_label))
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

/// A named set of classes in one label space, treated as a single target.
///
/// Spec grammar: a class name (`large-vehicle`), a `+`-joined union
/// (`dog-terrier+dog-retriever`), or `<prefix>-any` for every class whose
/// name starts with `<prefix>-` (`dog-any`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSet {
    pub name: String,
    pub members: Vec<usize>,
}

impl TargetSet {
    pub fn resolve(spec: &LabelSpaceSpec, text: &str) -> Result<Self> {
        let text = text.trim();
        let mut members = Vec::new();
        if let Some(i) = spec.index_of(text) {
            members.push(i);
        } else if let Some(prefix) = text.strip_suffix("-any") {
            let head = format!("{prefix}-");
            members.extend(spec.classes.iter().enumerate().filter(|(_, c)| c.name.starts_with(&head)).map(|(i, _)| i));
        } else if text.contains('+') {
            for part in text.split('+') {
                let part = part.trim();
                members.push(spec.index_of(part).ok_or_else(|| Error::UnknownTarget(part.to_string()))?);
            }
        }
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(Error::UnknownTarget(text.to_string()));
        }
        Ok(Self { name: text.to_string(), members })
    }

    pub fn single(spec: &LabelSpaceSpec, class: usize) -> Result<Self> {
        let c = spec
            .classes
            .get(class)
            .ok_or_else(|| Error::UnknownTarget(format!("class index {class}")))?;
        Ok(Self { name: c.name.clone(), members: vec![class] })
    }

    pub fn contains(&self, class: usize) -> bool {
        self.members.contains(&class)
    }
}

fn validate_superclass(sc: &SuperClass) -> Result<()> {
    if sc.members.is_empty() {
        return Err(Error::InvalidArgument(format!("superclass `{}` has no members", sc.name)));
    }
    let mut seen = BTreeSet::new();
    for &m in &sc.members {
        if !seen.insert(m) {
            return Err(Error::DuplicateBaseClass { id: m, first: sc.name.clone(), second: sc.name.clone() });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentPair {
    pub split_a: LabelSpaceSpec,
    pub split_b: LabelSpaceSpec,
}

#[derive(Serialize, Deserialize)]
struct EnvironmentDocument {
    split_a: LabelSpaceSpec,
    split_b: LabelSpaceSpec,
    digest: String,
}

impl EnvironmentPair {
    /// Checks the disjointness invariant by exhaustive enumeration of ids.
    pub fn validate(&self) -> Result<()> {
        self.split_a.validate()?;
        self.split_b.validate()?;
        for a in &self.split_a.classes {
            for b in &self.split_b.classes {
                if let Some(id) = a.members.iter().find(|id| b.members.contains(id)) {
                    return Err(Error::DuplicateBaseClass {
                        id: *id,
                        first: a.name.clone(),
                        second: b.name.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(&(&self.split_a, &self.split_b))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = EnvironmentDocument {
            split_a: self.split_a.clone(),
            split_b: self.split_b.clone(),
            digest: self.digest(),
        };
        fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: EnvironmentDocument = serde_json::from_str(&fs::read_to_string(path)?)?;
        let env = Self { split_a: doc.split_a, split_b: doc.split_b };
        env.validate()?;
        if env.digest() != doc.digest {
            return Err(Error::Format(format!("{}: content digest does not match", path.display())));
        }
        Ok(env)
    }
}

/// Strips a `#` comment and surrounding whitespace.
fn clean_line(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

fn split_record(line: &str, lineno: usize) -> Result<(&str, &str)> {
    let (name, rest) = line
        .split_once(':')
        .ok_or_else(|| Error::Parse(format!("line {lineno}: expected `name: values`")))?;
    let name = name.trim();
    if name.is_empty() {
        return Err(Error::Parse(format!("line {lineno}: empty record name")));
    }
    Ok((name, rest))
}

fn tokens(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty())
}

/// Parses the mapping grammar:
///
/// ```text
/// # comment
/// base <dataset-id> <num-base-classes>
/// <superclass>: <id>, <id>, ...
/// ```
pub fn parse_mapping(text: &str) -> Result<SuperclassMapping> {
    let mut base: Option<(String, usize)> = None;
    let mut classes: Vec<SuperClass> = Vec::new();
    let mut owner: BTreeMap<usize, String> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = clean_line(raw);
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("base ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [id, n] = parts.as_slice() else {
                return Err(Error::Parse(format!("line {lineno}: expected `base <id> <num-classes>`")));
            };
            let n = n
                .parse()
                .map_err(|_| Error::Parse(format!("line {lineno}: bad class count `{n}`")))?;
            base = Some((id.to_string(), n));
            continue;
        }
        let (name, rest) = split_record(line, lineno)?;
        let members = tokens(rest)
            .map(|t| t.parse::<usize>().map_err(|_| Error::Parse(format!("line {lineno}: bad id `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        if classes.iter().any(|c| c.name == name) {
            return Err(Error::Parse(format!("line {lineno}: superclass `{name}` declared twice")));
        }
        let sc = SuperClass { name: name.to_string(), members };
        validate_superclass(&sc)?;
        for &id in &sc.members {
            if let Some(prev) = owner.insert(id, sc.name.clone()) {
                return Err(Error::DuplicateBaseClass { id, first: prev, second: sc.name.clone() });
            }
        }
        classes.push(sc);
    }
    let (base_dataset, num_base_classes) =
        base.ok_or_else(|| Error::Parse("mapping has no `base <id> <num-classes>` directive".into()))?;
    for sc in &classes {
        if let Some(&id) = sc.members.iter().find(|&&id| id >= num_base_classes) {
            return Err(Error::UnknownBaseClass { id, superclass: sc.name.clone(), num_classes: num_base_classes });
        }
    }
    Ok(SuperclassMapping { base_dataset, num_base_classes, classes })
}

/// Reads and validates a mapping file.
pub fn build_superclasses(mapping_file: &Path) -> Result<SuperclassMapping> {
    parse_mapping(&fs::read_to_string(mapping_file)?)
}

/// A named two-way partition of superclass names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub name_a: String,
    pub names_a: Vec<String>,
    pub name_b: String,
    pub names_b: Vec<String>,
}

pub fn parse_partition(text: &str) -> Result<Partition> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = clean_line(raw);
        if line.is_empty() {
            continue;
        }
        let (name, rest) = split_record(line, i + 1)?;
        records.push((name.to_string(), tokens(rest).map(str::to_string).collect::<Vec<_>>()));
    }
    let [(name_a, names_a), (name_b, names_b)]: [(String, Vec<String>); 2] = records
        .try_into()
        .map_err(|r: Vec<_>| Error::Parse(format!("partition needs exactly two records, found {}", r.len())))?;
    Ok(Partition { name_a, names_a, name_b, names_b })
}

/// Seeded random halving of the mapping's superclasses (A gets the extra one
/// when the count is odd).
pub fn random_partition(mapping: &SuperclassMapping, seed: u64) -> Partition {
    let mut names: Vec<String> = mapping.classes.iter().map(|c| c.name.clone()).collect();
    names.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = names.len().div_ceil(2);
    let names_b = names.split_off(half);
    Partition {
        name_a: format!("{}-s{seed}.A", mapping.base_dataset),
        names_a: names,
        name_b: format!("{}-s{seed}.B", mapping.base_dataset),
        names_b,
    }
}

pub fn build_environment(mapping: &SuperclassMapping, partition: &Partition) -> Result<EnvironmentPair> {
    let set_a: BTreeSet<&str> = partition.names_a.iter().map(String::as_str).collect();
    if let Some(n) = partition.names_b.iter().find(|n| set_a.contains(n.as_str())) {
        return Err(Error::InvalidArgument(format!("superclass `{n}` is on both sides of the partition")));
    }
    let pick = |names: &[String]| -> Result<Vec<SuperClass>> {
        names
            .iter()
            .map(|n| {
                mapping
                    .classes
                    .iter()
                    .find(|c| &c.name == n)
                    .cloned()
                    .ok_or_else(|| Error::UnknownSuperclass(n.clone()))
            })
            .collect()
    };
    let env = EnvironmentPair {
        split_a: LabelSpaceSpec::new(&partition.name_a, pick(&partition.names_a)?, &mapping.base_dataset)?,
        split_b: LabelSpaceSpec::new(&partition.name_b, pick(&partition.names_b)?, &mapping.base_dataset)?,
    };
    env.validate()?;
    Ok(env)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Validation => "validation",
        })
    }
}

/// Images in `[0,1]` labelled with superclass indices of `spec`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub spec: LabelSpaceSpec,
    pub role: Role,
    pub inputs: Array4<f64>,
    pub labels: Vec<usize>,
    pub base_labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.len()
    }

    /// Indices of examples carrying `label`.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == label).map(|(i, _)| i).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            spec: self.spec.clone(),
            role: self.role,
            inputs: self.inputs.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            base_labels: idx.iter().map(|&i| self.base_labels[i]).collect(),
        }
    }
}

/// Tally of base examples left out because their label is outside the split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: usize,
    pub per_base_label: BTreeMap<usize, usize>,
}

/// Projects the base dataset onto `split`, keeping base-dataset order.
pub fn materialize(base: &BaseDataset, split: &LabelSpaceSpec, role: Role) -> Result<(LabeledDataset, SkipReport)> {
    if split.base_dataset != base.meta.name {
        return Err(Error::LabelSpaceMismatch(format!(
            "split `{}` is defined over `{}` but the base dataset is `{}`",
            split.name, split.base_dataset, base.meta.name
        )));
    }
    let (images, base_labels) = base.part(role);
    let lookup: HashMap<usize, usize> = split
        .classes
        .iter()
        .enumerate()
        .flat_map(|(si, c)| c.members.iter().map(move |&m| (m, si)))
        .collect();
    let mut keep = Vec::new();
    let mut labels = Vec::new();
    let mut skip = SkipReport::default();
    for (i, &bl) in base_labels.iter().enumerate() {
        match lookup.get(&bl) {
            Some(&si) => {
                keep.push(i);
                labels.push(si);
            }
            None => {
                skip.skipped += 1;
                *skip.per_base_label.entry(bl).or_default() += 1;
            }
        }
    }
    let ds = LabeledDataset {
        spec: split.clone(),
        role,
        inputs: images.select(Axis(0), &keep),
        base_labels: keep.iter().map(|&i| base_labels[i]).collect(),
        labels,
    };
    Ok((ds, skip))
}

/// Loads the base dataset from `dir` and materialises `split`.
pub fn materialize_from_dir(dir: &Path, split: &LabelSpaceSpec, role: Role) -> Result<(LabeledDataset, SkipReport)> {
    let base = BaseDataset::load(dir)?;
    materialize(&base, split, role)
}

//! Datasets, class spaces, few-shot sampling, synthetic ingestion, mixed
//! batches and in-batch triplet mining.
//!
//! On-disk layout of a real dataset:
//!
//! ```text
//! <root>/images/<class_name>/<file>
//! <root>/splits/{train,val,test}.txt      relative_path<TAB>class_name
//! <root>/splits/base_novel.txt            class_name<TAB>base|novel   (optional)
//! ```
//!
//! Synthetic images live under `<synth_root>/<class_name>/<file>`. A file is
//! either a PNG/JPEG image or a `.tok` text file holding one patch token per
//! line as whitespace-separated numbers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::VisualBackbone;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::prompts::DomainTag;
use crate::tensor::{Matrix, Real};

/// Canonical form used to match class names: lowercase, whitespace and
/// underscores folded to a single `_`.
pub fn normalize_class_name(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpace {
    names: Vec<String>,
    base: Vec<usize>,
    novel: Vec<usize>,
    template: String,
}

impl ClassSpace {
    /// Class ids index `names`. Every id must be either base or novel.
    pub fn new(names: Vec<String>, base: Vec<usize>, novel: Vec<usize>, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if template.matches("[CLS]").count() != 1 {
            return Err(Error::Config(format!("template {template:?} must contain exactly one [CLS]")));
        }
        let mut seen = vec![0u8; names.len()];
        for &id in base.iter().chain(&novel) {
            let slot = seen.get_mut(id).ok_or(Error::Index {
                index: id,
                len: names.len(),
            })?;
            *slot += 1;
        }
        if let Some(id) = seen.iter().position(|&s| s > 1) {
            return Err(Error::Config(format!(
                "class {:?} is listed more than once across base and novel",
                names[id]
            )));
        }
        if let Some(id) = seen.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("class {:?} is neither base nor novel", names[id])));
        }
        let mut normalized: Vec<String> = names.iter().map(|n| normalize_class_name(n)).collect();
        normalized.sort();
        if let Some(w) = normalized.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("two classes normalize to {:?}", w[0])));
        }
        Ok(Self {
            names,
            base,
            novel,
            template,
        })
    }

    /// First half (rounded up) of `names` in sorted order is base.
    pub fn half_split(mut names: Vec<String>, template: impl Into<String>) -> Result<Self> {
        names.sort();
        let n_base = names.len().div_ceil(2);
        let base = (0..n_base).collect();
        let novel = (n_base..names.len()).collect();
        Self::new(names, base, novel, template)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn base(&self) -> &[usize] {
        &self.base
    }

    pub fn novel(&self) -> &[usize] {
        &self.novel
    }

    /// Base ids followed by novel ids.
    pub fn all(&self) -> Vec<usize> {
        self.base.iter().chain(&self.novel).copied().collect()
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn is_base(&self, id: usize) -> bool {
        self.base.contains(&id)
    }

    pub fn is_novel(&self, id: usize) -> bool {
        self.novel.contains(&id)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        let key = normalize_class_name(name);
        self.names.iter().position(|n| normalize_class_name(n) == key)
    }

    pub fn names_of(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.names[i].clone()).collect()
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Result<Self> {
        let names = std::mem::take(&mut self.names);
        Self::new(names, self.base, self.novel, template)
    }
}

/// Where an example's patch tokens come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Content {
    /// An image or `.tok` file, decoded on demand.
    File(PathBuf),
    Patches(Arc<Matrix<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub content: Content,
    pub class_id: usize,
    pub domain: DomainTag,
}

impl LabeledExample {
    /// Patch tokens for `visual`; images are resized and patchified.
    pub fn patches<T: Real>(&self, visual: &dyn VisualBackbone<T>) -> Result<Matrix<T>> {
        match &self.content {
            Content::Patches(m) => Ok(m.cast()),
            Content::File(path) => {
                if path.extension().is_some_and(|e| e == "tok") {
                    Ok(read_tok_file::<f64>(path)?.cast())
                } else {
                    let img = image::open(path).map_err(|e| Error::Format {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                    Ok(visual.patchify(&img.to_rgb8()))
                }
            }
        }
    }
}

/// Decodes every example once.
pub fn materialize<T: Real>(examples: &[LabeledExample], visual: &dyn VisualBackbone<T>) -> Result<Vec<Matrix<T>>> {
    examples.iter().map(|e| e.patches(visual)).collect()
}

pub fn read_tok_file<T: Real>(path: &Path) -> Result<Matrix<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map(T::lit).map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", lineno + 1),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: ragged token width", lineno + 1),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "no tokens".into(),
        });
    }
    Ok(Matrix::from_rows(&rows))
}

pub fn write_tok_file(path: &Path, m: &Matrix<f64>) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 12);
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-dataset prompt template and loss-weight overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub template: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "default_images")]
    pub images_dir: String,
    #[serde(default = "default_splits")]
    pub splits_dir: String,
}

fn default_images() -> String {
    "images".into()
}

fn default_splits() -> String {
    "splits".into()
}

impl DatasetEntry {
    pub fn new(template: &str) -> Self {
        Self {
            template: template.into(),
            alpha: None,
            beta: None,
            images_dir: default_images(),
            splits_dir: default_splits(),
        }
    }

    /// `defaults` with this entry's overrides applied.
    pub fn weights(&self, defaults: LossWeights) -> LossWeights {
        LossWeights {
            alpha: self.alpha.unwrap_or(defaults.alpha),
            beta: self.beta.unwrap_or(defaults.beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Registry {
    pub datasets: BTreeMap<String, DatasetEntry>,
}

impl Registry {
    pub fn builtin() -> Self {
        let table: [(&str, &str, Option<f64>, Option<f64>); 16] = [
            ("ImageNet", "a photo of a [CLS]", Some(0.2), None),
            ("ImageNetV2", "a photo of a [CLS]", None, None),
            ("ImageNet-Sketch", "a photo of a [CLS]", None, None),
            ("ImageNet-A", "a photo of a [CLS]", None, None),
            ("ImageNet-R", "a photo of a [CLS]", None, None),
            ("Caltech101", "a photo of a [CLS].", None, None),
            ("OxfordPets", "a photo of a [CLS], a type of pet.", None, None),
            ("StanfordCars", "a photo of a [CLS].", None, None),
            ("Flowers102", "a photo of a [CLS], a type of flower.", Some(0.2), None),
            ("Food101", "a photo of [CLS], a type of food.", None, None),
            ("FGVCAircraft", "a photo of a [CLS], a type of aircraft.", None, Some(2.0)),
            ("SUN397", "a photo of a [CLS].", None, None),
            ("DTD", "[CLS] texture.", None, None),
            ("EuroSAT", "a centered satellite photo of [CLS].", None, Some(2.0)),
            ("UCF101", "a photo of a person doing [CLS].", None, None),
            ("toy", "a photo of a [CLS].", None, None),
        ];
        let datasets = table
            .into_iter()
            .map(|(name, template, alpha, beta)| {
                let mut e = DatasetEntry::new(template);
                e.alpha = alpha;
                e.beta = beta;
                (name.to_string(), e)
            })
            .collect();
        Self { datasets }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("registry: {e}")))
    }

    /// Entries of `other` replace same-named entries here.
    pub fn merge(&mut self, other: Registry) {
        self.datasets.extend(other.datasets);
    }

    /// Case-insensitive lookup.
    pub fn get(&self, name: &str) -> Result<&DatasetEntry> {
        self.datasets
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown dataset {name:?}; known: {}",
                    self.datasets.keys().cloned().collect::<Vec<_>>().join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub classes: ClassSpace,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .collect())
}

fn parse_split(path: &Path) -> Result<Vec<(String, String)>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(p), Some(c), None) if !p.is_empty() && !c.trim().is_empty() => {
                    Ok((p.to_string(), c.trim().to_string()))
                }
                _ => Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("line {n}: expected \"relative_path<TAB>class_name\""),
                }),
            }
        })
        .collect()
}

pub fn load_dataset(root: &Path, entry: &DatasetEntry) -> Result<Dataset> {
    let splits = root.join(&entry.splits_dir);
    let images = root.join(&entry.images_dir);
    let raw: Vec<Vec<(String, String)>> = ["train.txt", "val.txt", "test.txt"]
        .iter()
        .map(|f| parse_split(&splits.join(f)))
        .collect::<Result<_>>()?;

    // Distinct spellings of one class (after normalization) are a format error.
    let mut by_key: BTreeMap<String, String> = BTreeMap::new();
    let mut check = |name: &str, origin: &Path| -> Result<()> {
        let key = normalize_class_name(name);
        match by_key.get(&key) {
            Some(existing) if existing != name => Err(Error::Format {
                path: origin.to_path_buf(),
                message: format!("class {name:?} duplicates {existing:?}"),
            }),
            Some(_) => Ok(()),
            None => {
                by_key.insert(key, name.to_string());
                Ok(())
            }
        }
    };
    for (split, file) in raw.iter().zip(["train.txt", "val.txt", "test.txt"]) {
        for (_, c) in split {
            check(c, &splits.join(file))?;
        }
    }

    let override_path = splits.join("base_novel.txt");
    let classes = if override_path.exists() {
        let mut roles: BTreeMap<String, (String, bool)> = BTreeMap::new();
        for (n, line) in read_lines(&override_path)? {
            let fmt = |message: String| Error::Format {
                path: override_path.clone(),
                message,
            };
            let (name, role) = line
                .split_once('\t')
                .ok_or_else(|| fmt(format!("line {n}: expected \"class_name<TAB>base|novel\"")))?;
            let is_base = match role.trim() {
                "base" => true,
                "novel" => false,
                other => return Err(fmt(format!("line {n}: unknown role {other:?}"))),
            };
            check(name.trim(), &override_path)?;
            let key = normalize_class_name(name);
            if roles.insert(key, (name.trim().to_string(), is_base)).is_some() {
                return Err(fmt(format!("line {n}: class {:?} listed twice", name.trim())));
            }
        }
        if let Some(missing) = by_key.keys().find(|k| !roles.contains_key(*k)) {
            return Err(Error::Format {
                path: override_path.clone(),
                message: format!("class {:?} has no base/novel role", by_key[missing]),
            });
        }
        let mut names: Vec<(String, bool)> = roles.into_values().collect();
        names.sort();
        let base = (0..names.len()).filter(|&i| names[i].1).collect();
        let novel = (0..names.len()).filter(|&i| !names[i].1).collect();
        ClassSpace::new(names.into_iter().map(|(n, _)| n).collect(), base, novel, entry.template.clone())?
    } else {
        ClassSpace::half_split(by_key.into_values().collect(), entry.template.clone())?
    };

    let to_examples = |split: &[(String, String)]| -> Vec<LabeledExample> {
        split
            .iter()
            .map(|(rel, class)| LabeledExample {
                id: rel.clone(),
                content: Content::File(images.join(rel)),
                class_id: classes.id_of(class).expect("class collected above"),
                domain: DomainTag::Real,
            })
            .collect()
    };
    let [train, val, test] = [&raw[0], &raw[1], &raw[2]].map(|s| to_examples(s));
    Ok(Dataset {
        train,
        val,
        test,
        classes,
    })
}

/// Up to `shots` examples per base class. Selection is keyed by sorted
/// example ids, so it does not depend on the order of `train`.
pub fn few_shot_sample(train: &[LabeledExample], classes: &ClassSpace, shots: usize, seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &c in classes.base() {
        let mut pool: Vec<&LabeledExample> = train.iter().filter(|e| e.class_id == c).collect();
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        pool.dedup_by(|a, b| a.id == b.id);
        if pool.len() < shots {
            warn!(
                "class {:?} has {} training examples, fewer than {shots} shots",
                classes.name(c),
                pool.len()
            );
        }
        pool.shuffle(&mut rng);
        out.extend(pool.into_iter().take(shots).cloned());
    }
    out
}

/// Collects `<dir>/<class_name>/<file>` as synthetic examples.
pub fn ingest_synthetic(dir: &Path, classes: &ClassSpace) -> Result<Vec<LabeledExample>> {
    let mut folders: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    folders.sort();

    let mut unmatched = Vec::new();
    let mut matched = Vec::new();
    for folder in folders {
        let name = folder.file_name().unwrap_or_default().to_string_lossy().to_string();
        if name.starts_with('.') {
            continue;
        }
        match classes.id_of(&name) {
            Some(id) => matched.push((id, name, folder)),
            None => unmatched.push(name),
        }
    }
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedClasses(unmatched));
    }

    let mut out = Vec::new();
    let mut covered = vec![false; classes.len()];
    for (id, name, folder) in matched {
        let mut files: Vec<PathBuf> = fs::read_dir(&folder)
            .map_err(|e| Error::io(&folder, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && !p.file_name().unwrap_or_default().to_string_lossy().starts_with('.'))
            .collect();
        files.sort();
        if files.is_empty() {
            warn!("synthetic folder {name:?} is empty");
        }
        covered[id] |= !files.is_empty();
        for f in files {
            let file = f.file_name().unwrap_or_default().to_string_lossy().to_string();
            out.push(LabeledExample {
                id: format!("{name}/{file}"),
                content: Content::File(f),
                class_id: id,
                domain: DomainTag::Synthetic,
            });
        }
    }
    for (id, c) in covered.iter().enumerate() {
        if !c {
            warn!("no synthetic examples for class {:?}", classes.name(id));
        }
    }
    Ok(out)
}

/// Positions inside one [`MixedBatch`]: `anchor` indexes `synthetic`,
/// `positive` and `negative` index `real`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Indices into the real and synthetic training sets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MixedBatch {
    pub real: Vec<usize>,
    pub synthetic: Vec<usize>,
    pub triplets: Vec<TripletIndex>,
    pub skipped_triplets: usize,
}

/// Endless shuffled pass over `0..len`, reshuffled at every epoch boundary.
#[derive(Debug, Clone)]
struct Stream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Yields full batches forever; epochs of the two pools roll over independently.
#[derive(Debug, Clone)]
pub struct MixedBatchSampler {
    real: Stream,
    synth: Option<Stream>,
    real_batch_size: usize,
    ratio: usize,
}

impl MixedBatchSampler {
    pub fn real_batch_size(&self) -> usize {
        self.real_batch_size
    }

    pub fn synthetic_batch_size(&self) -> usize {
        if self.synth.is_some() {
            self.ratio * self.real_batch_size
        } else {
            0
        }
    }

    /// Advances past `n` batches.
    pub fn advance(&mut self, n: usize) {
        for _ in 0..n {
            self.next_batch();
        }
    }

    pub fn next_batch(&mut self) -> MixedBatch {
        let real = (0..self.real_batch_size).map(|_| self.real.next()).collect();
        let synthetic = match &mut self.synth {
            Some(s) => (0..self.ratio * self.real_batch_size).map(|_| s.next()).collect(),
            None => Vec::new(),
        };
        MixedBatch {
            real,
            synthetic,
            triplets: Vec::new(),
            skipped_triplets: 0,
        }
    }
}

impl Iterator for MixedBatchSampler {
    type Item = MixedBatch;

    fn next(&mut self) -> Option<MixedBatch> {
        Some(self.next_batch())
    }
}

/// Checks the pools and builds a sampler. An empty synthetic pool is only
/// accepted when neither synthetic loss term is active.
pub fn mixed_batch_sampler(
    real_set: &[LabeledExample],
    synth_set: &[LabeledExample],
    classes: &ClassSpace,
    real_batch_size: usize,
    ratio: usize,
    seed: u64,
    weights: &LossWeights,
) -> Result<MixedBatchSampler> {
    if real_batch_size == 0 {
        return Err(Error::Config("real_batch_size must be at least 1".into()));
    }
    if ratio == 0 {
        return Err(Error::Config("ratio must be at least 1".into()));
    }
    if real_set.is_empty() {
        return Err(Error::Config("no real training examples".into()));
    }
    if let Some(e) = real_set.iter().find(|e| e.domain != DomainTag::Real || !classes.is_base(e.class_id)) {
        return Err(Error::Config(format!(
            "real training pool may hold only real base-class examples; {:?} is {} class {:?}",
            e.id,
            e.domain.as_str(),
            classes.name(e.class_id)
        )));
    }
    if let Some(e) = synth_set.iter().find(|e| e.domain != DomainTag::Synthetic) {
        return Err(Error::Config(format!("{:?} in the synthetic pool is not synthetic", e.id)));
    }
    if synth_set.is_empty() && (weights.alpha > 0.0 || weights.beta > 0.0) {
        return Err(Error::Config(
            "no synthetic examples, but alpha or beta is positive".into(),
        ));
    }
    Ok(MixedBatchSampler {
        real: Stream::new(real_set.len(), seed, 1),
        synth: (!synth_set.is_empty()).then(|| Stream::new(synth_set.len(), seed, 2)),
        real_batch_size,
        ratio,
    })
}

/// Number of batches in one pass over the real pool.
pub fn steps_per_epoch(real_len: usize, real_batch_size: usize) -> usize {
    real_len.div_ceil(real_batch_size.max(1)).max(1)
}

/// One triplet per synthetic base-class element that has a same-class and a
/// different-class real element in the batch. Everything else is counted as
/// skipped. Fills `batch.triplets` and `batch.skipped_triplets`.
pub fn mine_triplets<R: Rng>(
    batch: &mut MixedBatch,
    real_labels: &[usize],
    synth_labels: &[usize],
    classes: &ClassSpace,
    rng: &mut R,
) {
    let mut by_class: HashMap<usize, Vec<usize>> = HashMap::new();
    for (pos, &i) in batch.real.iter().enumerate() {
        by_class.entry(real_labels[i]).or_default().push(pos);
    }
    let mut triplets = Vec::new();
    let mut skipped = 0;
    for (anchor, &s) in batch.synthetic.iter().enumerate() {
        let c = synth_labels[s];
        let positives = by_class.get(&c).filter(|_| classes.is_base(c));
        let negatives: Vec<usize> = batch
            .real
            .iter()
            .enumerate()
            .filter(|(_, &i)| real_labels[i] != c)
            .map(|(p, _)| p)
            .collect();
        match positives {
            Some(pos) if !negatives.is_empty() => {
                let positive = pos[rng.random_range(0..pos.len())];
                let negative = negatives[rng.random_range(0..negatives.len())];
                triplets.push(TripletIndex {
                    anchor,
                    positive,
                    negative,
                });
            }
            _ => skipped += 1,
        }
    }
    batch.triplets = triplets;
    batch.skipped_triplets = skipped;
}

/// Mining randomness for one step, derived from the seed and step alone.
pub fn mining_rng(mining_seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mining_seed);
    rng.set_stream(step as u64);
    rng
}

/// Generator for a two-domain dataset of Gaussian patch clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub n_base: usize,
    pub n_novel: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub synth_per_class: usize,
    pub tokens: usize,
    pub width: usize,
    /// Std-dev of the per-class mean pattern.
    pub cluster_scale: f64,
    /// Std-dev of per-example noise around the class mean.
    pub noise: f64,
    /// Magnitude (per entry) of the constant offset of the synthetic domain.
    pub shift: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_base: 8,
            n_novel: 4,
            train_per_class: 16,
            val_per_class: 4,
            test_per_class: 10,
            synth_per_class: 16,
            tokens: 9,
            width: 32,
            cluster_scale: 1.0,
            noise: 0.5,
            shift: 0.5,
            seed: 0,
        }
    }
}

const TOY_WORDS: [&str; 32] = [
    "apple", "bridge", "cactus", "daisy", "eagle", "falcon", "guitar", "harbor", "igloo", "jaguar",
    "kettle", "lantern", "meadow", "nebula", "orchid", "pepper", "quartz", "rocket", "saddle",
    "tulip", "umbrella", "violin", "walrus", "xylophone", "yacht", "zebra", "anchor", "bison",
    "candle", "dolphin", "ember", "fjord",
];

#[derive(Debug, Clone)]
pub struct ToyData {
    pub dataset: Dataset,
    pub synthetic: Vec<LabeledExample>,
    /// Per-class patch means, indexed by class id.
    pub means: Vec<Matrix<f64>>,
    /// Offset added to every synthetic sample.
    pub shift: Matrix<f64>,
}

pub fn generate_toy(spec: &ToySpec) -> Result<ToyData> {
    let n = spec.n_base + spec.n_novel;
    if n > TOY_WORDS.len() || spec.n_base == 0 || spec.tokens == 0 || spec.width == 0 {
        return Err(Error::Config(format!(
            "toy dataset needs 1..={} classes, at least one base class and non-empty patches",
            TOY_WORDS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |rng: &mut ChaCha8Rng, scale: f64| -> Matrix<f64> {
        Matrix::from_vec(
            spec.tokens,
            spec.width,
            (0..spec.tokens * spec.width).map(|_| unit.sample(rng) * scale).collect(),
        )
    };
    let mut names: Vec<String> = TOY_WORDS[..n].iter().map(|s| s.to_string()).collect();
    names.sort();
    let means: Vec<Matrix<f64>> = (0..n).map(|_| draw(&mut rng, spec.cluster_scale)).collect();
    let direction = draw(&mut rng, 1.0).map(|v| v.signum() * spec.shift);
    let classes = ClassSpace::new(
        names.clone(),
        (0..spec.n_base).collect(),
        (spec.n_base..n).collect(),
        "a photo of a [CLS].",
    )?;

    let sample = |rng: &mut ChaCha8Rng, c: usize, offset: Option<&Matrix<f64>>| {
        let mut m = draw(rng, spec.noise);
        m.add_assign(&means[c]);
        if let Some(o) = offset {
            m.add_assign(o);
        }
        Arc::new(m)
    };
    let split = |rng: &mut ChaCha8Rng, tag: &str, per_class: usize, which: &[usize], domain: DomainTag| {
        let mut out = Vec::new();
        for &c in which {
            for i in 0..per_class {
                let offset = (domain == DomainTag::Synthetic).then_some(&direction);
                out.push(LabeledExample {
                    id: format!("{tag}/{}/{i:04}.tok", names[c]),
                    content: Content::Patches(sample(rng, c, offset)),
                    class_id: c,
                    domain,
                });
            }
        }
        out
    };
    let all: Vec<usize> = (0..n).collect();
    let base: Vec<usize> = (0..spec.n_base).collect();
    let train = split(&mut rng, "train", spec.train_per_class, &base, DomainTag::Real);
    let val = split(&mut rng, "val", spec.val_per_class, &base, DomainTag::Real);
    let test = split(&mut rng, "test", spec.test_per_class, &all, DomainTag::Real);
    let synthetic = split(&mut rng, "synthetic", spec.synth_per_class, &all, DomainTag::Synthetic);
    Ok(ToyData {
        dataset: Dataset {
            train,
            val,
            test,
            classes,
        },
        synthetic,
        means,
        shift: direction,
    })
}

fn patches_of(e: &LabeledExample) -> Result<Arc<Matrix<f64>>> {
    match &e.content {
        Content::Patches(m) => Ok(Arc::clone(m)),
        Content::File(p) => Ok(Arc::new(read_tok_file(p)?)),
    }
}

/// Writes the real splits under `real_root` and the synthetic pool under
/// `synth_root`, both in the documented layouts.
pub fn write_toy(data: &ToyData, real_root: &Path, synth_root: &Path) -> Result<()> {
    let classes = &data.dataset.classes;
    let splits = real_root.join("splits");
    fs::create_dir_all(&splits).map_err(|e| Error::io(&splits, e))?;
    for (name, set) in [
        ("train", &data.dataset.train),
        ("val", &data.dataset.val),
        ("test", &data.dataset.test),
    ] {
        let mut listing = String::new();
        for e in set.iter() {
            let rel = format!("{}/{}", classes.name(e.class_id), e.id.replace('/', "_"));
            write_tok_file(&real_root.join("images").join(&rel), patches_of(e)?.as_ref())?;
            listing.push_str(&format!("{rel}\t{}\n", classes.name(e.class_id)));
        }
        let path = splits.join(format!("{name}.txt"));
        fs::write(&path, listing).map_err(|e| Error::io(&path, e))?;
    }
    let mut roles = String::new();
    for id in 0..classes.len() {
        let role = if classes.is_base(id) { "base" } else { "novel" };
        roles.push_str(&format!("{}\t{role}\n", classes.name(id)));
    }
    let path = splits.join("base_novel.txt");
    fs::write(&path, roles).map_err(|e| Error::io(&path, e))?;
    for e in &data.synthetic {
        let file = e.id.rsplit('/').next().unwrap_or(&e.id);
        write_tok_file(&synth_root.join(classes.name(e.class_id)).join(file), patches_of(e)?.as_ref())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_normalization() {
        assert_eq!(normalize_class_name("Golden Retriever"), "golden_retriever");
        assert_eq!(normalize_class_name(" golden_retriever "), "golden_retriever");
        assert_eq!(normalize_class_name("Golden  _ Retriever"), "golden_retriever");
    }

    #[test]
    fn class_space_checks() {
        let names: Vec<String> = ["b", "a", "c"].iter().map(|s| s.to_string()).collect();
        let cs = ClassSpace::half_split(names.clone(), "x [CLS]").unwrap();
        assert_eq!(cs.base(), &[0, 1]);
        assert_eq!(cs.name(0), "a");
        assert!(ClassSpace::new(names.clone(), vec![0], vec![0, 1, 2], "[CLS]").is_err());
        assert!(ClassSpace::new(names.clone(), vec![0], vec![1], "[CLS]").is_err());
        assert!(ClassSpace::new(names, vec![0], vec![1, 2], "no placeholder").is_err());
    }

    #[test]
    fn stream_covers_each_epoch() {
        let mut s = Stream::new(7, 3, 1);
        for _ in 0..3 {
            let mut epoch: Vec<usize> = (0..7).map(|_| s.next()).collect();
            epoch.sort();
            assert_eq!(epoch, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn registry_lookup() {
        let r = Registry::builtin();
        assert_eq!(r.get("eurosat").unwrap().template, "a centered satellite photo of [CLS].");
        let w = r.get("FGVCAircraft").unwrap().weights(LossWeights::default());
        assert_eq!((w.alpha, w.beta), (0.1, 2.0));
        assert!(r.get("nope").is_err());
    }
}

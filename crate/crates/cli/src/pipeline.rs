use std::path::{Path, PathBuf};

use dualprompt::data::{
    few_shot_sample, generate_toy, ingest_synthetic, load_dataset, ClassSpace, Content, LabeledExample, Registry,
    ToyData,
};
use dualprompt::encoders::DualEncoder;
use dualprompt::prompts::DomainTag;
use dualprompt::study::{aligned_towers, StudySettings};
use dualprompt::tensor::Real;
use dualprompt::{Error, Result};

use crate::config::RunConfig;

pub struct RunData {
    pub classes: ClassSpace,
    /// Few-shot real training pool.
    pub real: Vec<LabeledExample>,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub synthetic: Vec<LabeledExample>,
    toy: Option<ToyData>,
}

impl RunData {
    pub fn split(&self, name: &str) -> Result<&[LabeledExample]> {
        match name {
            "train" => Ok(&self.train),
            "few-shot" => Ok(&self.real),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            "synthetic" => Ok(&self.synthetic),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, few-shot, val, test or synthetic)"
            ))),
        }
    }
}

pub fn load_data(cfg: &RunConfig, registry: &Registry) -> Result<RunData> {
    let shots = cfg.train.shots;
    let seed = cfg.train.seed;
    if cfg.is_toy() {
        let toy = generate_toy(&cfg.toy)?;
        let ds = &toy.dataset;
        return Ok(RunData {
            classes: ds.classes.clone(),
            real: few_shot_sample(&ds.train, &ds.classes, shots, seed),
            train: ds.train.clone(),
            val: ds.val.clone(),
            test: ds.test.clone(),
            synthetic: toy.synthetic.clone(),
            toy: Some(toy),
        });
    }
    let entry = registry.get(&cfg.dataset)?;
    let root = cfg
        .paths
        .real_root
        .as_deref()
        .ok_or_else(|| Error::Config("paths.real_root is not set".into()))?;
    let ds = load_dataset(root, entry)?;
    let synthetic = match &cfg.paths.synthetic_root {
        Some(dir) => ingest_synthetic(dir, &ds.classes)?,
        None => Vec::new(),
    };
    Ok(RunData {
        real: few_shot_sample(&ds.train, &ds.classes, shots, seed),
        classes: ds.classes,
        train: ds.train,
        val: ds.val,
        test: ds.test,
        synthetic,
        toy: None,
    })
}

/// The frozen towers in 64-bit form; narrower precisions are derived from it.
pub fn build_model(cfg: &RunConfig, data: &RunData) -> Result<DualEncoder<f64>> {
    let enc = &cfg.encoder;
    if let Some(path) = &enc.archive {
        return DualEncoder::from_toy_archive(&dualprompt::archive::Archive::load(path)?);
    }
    match (&data.toy, cfg.align()) {
        (Some(toy), true) => {
            let settings = StudySettings {
                toy: cfg.toy.clone(),
                visual: enc.visual.clone(),
                text: enc.text.clone(),
                ..StudySettings::default()
            };
            aligned_towers(&settings, toy, enc.seed)
        }
        _ => DualEncoder::toy(enc.visual.clone(), enc.text.clone(), enc.seed),
    }
}

pub fn cast_model<T: Real>(model: &DualEncoder<f64>) -> Result<DualEncoder<T>> {
    DualEncoder::from_toy_archive(&model.to_archive())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let hidden = path.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
        if hidden {
            continue;
        }
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Every file below `dir`, sorted, as unlabeled examples of `domain`.
pub fn directory_examples(dir: &Path, domain: DomainTag) -> Result<Vec<LabeledExample>> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    Ok(files
        .into_iter()
        .map(|f| LabeledExample {
            id: f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().into_owned(),
            content: Content::File(f),
            class_id: 0,
            domain,
        })
        .collect())
}

//! Run configuration: a TOML file, dotted `--set` overrides, and a single
//! validation pass that lists every problem before anything is computed.

use std::path::{Path, PathBuf};

use dualprompt::data::{Registry, ToySpec};
use dualprompt::encoders::EncoderSpec;
use dualprompt::evaluation::Protocol;
use dualprompt::model::Baseline;
use dualprompt::objectives::LossWeights;
use dualprompt::prompts::PromptConfig;
use dualprompt::training::TrainConfig;
use dualprompt::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Overrides `paths.real_root`.
pub const DATA_ROOT_ENV: &str = "DUALPROMPT_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory holding `images/` and `splits/`.
    pub real_root: Option<PathBuf>,
    /// Directory of `<class name>/<file>` synthetic images.
    pub synthetic_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Extra registry entries merged over the built-in table.
    pub registry: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            real_root: None,
            synthetic_root: None,
            output_dir: PathBuf::from("runs/default"),
            registry: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub seed: u64,
    pub visual: EncoderSpec,
    pub text: EncoderSpec,
    /// Toy encoder archive to load instead of drawing random towers.
    pub archive: Option<PathBuf>,
    /// Fit the frozen heads to the toy classes before training. Only
    /// meaningful for the generated dataset; defaults to on there.
    pub align: Option<bool>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            visual: EncoderSpec::toy_visual(),
            text: EncoderSpec::toy_text(),
            archive: None,
            align: None,
        }
    }
}

/// Loss weights given explicitly; unset fields fall back to the dataset
/// registry entry and then to `train.weights`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightOverrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub baseline: Baseline,
    pub protocol: Protocol,
    pub paths: Paths,
    pub encoder: EncoderConfig,
    pub toy: ToySpec,
    pub prompts: PromptConfig,
    pub train: TrainConfig,
    pub weights: WeightOverrides,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            dataset: "toy".into(),
            baseline: Baseline::SyncClip,
            protocol: Protocol::Gzsl,
            paths: Paths::default(),
            prompts: PromptConfig {
                depth: encoder.visual.n_layers.min(encoder.text.n_layers),
                embed_dim_v: encoder.visual.embed_dim,
                embed_dim_t: encoder.text.embed_dim,
                ..PromptConfig::default()
            },
            encoder,
            toy: ToySpec::default(),
            train: TrainConfig::default(),
            weights: WeightOverrides::default(),
        }
    }
}

/// Parses `key.path=value`. The value is read as a TOML literal when it
/// parses as one and as a bare string otherwise.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not of the form key.path=value")))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override {raw:?} has an empty key segment")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((path, parsed))
}

/// Recursively lays `overlay` over `base`; tables merge, other values replace.
fn merge_tables(base: &mut Table, overlay: Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn apply_override(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, seg) in parents.iter().enumerate() {
        let slot = cur.entry(seg.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = slot.as_table_mut().ok_or_else(|| {
            Error::Config(format!("cannot set {}: {} is not a table", path.join("."), parents[..=i].join(".")))
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Lays the file at `path` over the defaults, then applies `overrides`
    /// in order. Partial tables keep the run defaults for missing keys.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: Table = toml::from_str(&Self::default().to_toml()).expect("defaults parse");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file = toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge_tables(&mut table, file);
        }
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            apply_override(&mut table, &key, value)?;
        }
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn is_toy(&self) -> bool {
        self.dataset.eq_ignore_ascii_case("toy")
    }

    pub fn align(&self) -> bool {
        self.encoder.align.unwrap_or(self.is_toy())
    }

    pub fn registry(&self) -> Result<Registry> {
        let mut reg = Registry::builtin();
        if let Some(p) = &self.paths.registry {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            reg.merge(Registry::from_toml(&text)?);
        }
        Ok(reg)
    }

    /// Loss weights after the registry entry and explicit overrides.
    pub fn resolved_weights(&self, registry: &Registry) -> LossWeights {
        let base = match registry.get(&self.dataset) {
            Ok(entry) => entry.weights(self.train.weights),
            Err(_) => self.train.weights,
        };
        LossWeights {
            alpha: self.weights.alpha.unwrap_or(base.alpha),
            beta: self.weights.beta.unwrap_or(base.beta),
        }
    }

    /// The training config that is actually run.
    pub fn effective_train(&self, registry: &Registry) -> TrainConfig {
        TrainConfig {
            weights: self.resolved_weights(registry),
            ..self.train.clone()
        }
    }

    /// Applies the data-root environment override.
    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.paths.real_root = Some(PathBuf::from(root));
        }
    }

    /// Every configuration problem, empty when the run may start.
    pub fn violations(&self, registry: &Registry) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = registry.get(&self.dataset) {
            v.push(e.to_string());
        }
        v.extend(self.baseline.violations(&self.prompts));
        if let Err(e) = self.prompts.validate() {
            v.push(format!("prompts: {e}"));
        }
        for (name, spec) in [("encoder.visual", &self.encoder.visual), ("encoder.text", &self.encoder.text)] {
            if let Err(e) = spec.validate() {
                v.push(format!("{name}: {e}"));
            }
        }
        if self.encoder.archive.is_none() {
            let (vis, txt) = (&self.encoder.visual, &self.encoder.text);
            if let Err(e) = self.prompts.validate_against(vis.n_layers, txt.n_layers, vis.embed_dim, txt.embed_dim) {
                v.push(format!("prompts: {e}"));
            }
        }
        let train = self.effective_train(registry);
        v.extend(train.violations());
        if self.is_toy() {
            if self.toy.width != self.encoder.visual.embed_dim {
                v.push(format!(
                    "toy.width ({}) must equal encoder.visual.embed_dim ({})",
                    self.toy.width, self.encoder.visual.embed_dim
                ));
            }
            if self.toy.n_base == 0 {
                v.push("toy.n_base must be at least 1".into());
            }
        } else {
            if self.paths.real_root.is_none() {
                v.push(format!("paths.real_root is required for dataset {:?} (or set {DATA_ROOT_ENV})", self.dataset));
            }
            if self.encoder.align == Some(true) {
                v.push("encoder.align applies only to the generated toy dataset".into());
            }
            let w = train.weights;
            if self.paths.synthetic_root.is_none() && (w.alpha > 0.0 || w.beta > 0.0) {
                v.push(format!(
                    "paths.synthetic_root is required when alpha ({}) or beta ({}) is positive",
                    w.alpha, w.beta
                ));
            }
        }
        if self.align() && self.encoder.archive.is_some() {
            v.push("encoder.align and encoder.archive are mutually exclusive".into());
        }
        v
    }

    pub fn validate(&self, registry: &Registry) -> Result<()> {
        let v = self.violations(registry);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} problem(s) in the run configuration:\n  - {}",
                v.len(),
                v.join("\n  - ")
            )))
        }
    }
}

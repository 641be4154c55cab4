//! SGD with cosine annealing over prompt parameters, checkpoints and resume.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{Tape, Var};
use crate::data::{mine_triplets, mining_rng, mixed_batch_sampler, steps_per_epoch, ClassSpace, LabeledExample, MixedBatch, MixedBatchSampler};
use crate::encoders::{BackboneChecksum, DualEncoder};
use crate::error::{Error, Result};
use crate::evaluation::{base_accuracy, Scorer};
use crate::model::{class_tokens, PromptParams};
use crate::objectives::{cross_entropy_var, reduce_var, triplet_var, LossWeights, Reduction, DEFAULT_TEMPERATURE};
use crate::prompts::DomainTag;
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Overrides `epochs × steps per epoch` when set.
    pub total_steps: Option<usize>,
    pub real_batch_size: usize,
    /// Synthetic examples per real example in every batch.
    pub ratio: usize,
    pub shots: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Seed of triplet mining; defaults to `seed`.
    pub mining_seed: Option<u64>,
    pub precision: Precision,
    pub temperature: f64,
    pub reduction: Reduction,
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2.5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            total_steps: None,
            real_batch_size: 8,
            ratio: 2,
            shots: 16,
            weights: LossWeights::default(),
            seed: 0,
            mining_seed: None,
            precision: Precision::F32,
            temperature: DEFAULT_TEMPERATURE,
            reduction: Reduction::Mean,
            warmup_steps: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Every violated invariant, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            v.push(format!("train.lr0 must be a finite non-negative number, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            v.push("train.epochs must be at least 1".into());
        }
        if self.total_steps == Some(0) {
            v.push("train.total_steps must be at least 1".into());
        }
        if self.real_batch_size == 0 {
            v.push("train.real_batch_size must be at least 1".into());
        }
        if self.ratio == 0 {
            v.push("train.ratio must be at least 1".into());
        }
        if self.shots == 0 {
            v.push("train.shots must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            v.push(format!("train.temperature must be positive, got {}", self.temperature));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                v.push(format!("train.clip_norm must be positive, got {c}"));
            }
        }
        if let Err(e) = self.weights.validate() {
            v.push(e.to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn mining_seed(&self) -> u64 {
        self.mining_seed.unwrap_or(self.seed)
    }

    pub fn total_steps(&self, real_len: usize) -> usize {
        self.total_steps
            .unwrap_or(self.epochs * steps_per_epoch(real_len, self.real_batch_size))
    }
}

/// `lr0 · (1 + cos(π·step/total_steps)) / 2`.
pub fn cosine_annealed_lr(lr0: f64, step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Index {
            index: step,
            len: total_steps + 1,
        });
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr0 * (1.0 + phase.cos()) / 2.0)
}

/// Cosine schedule preceded by an optional linear warmup.
pub fn scheduled_lr(cfg: &TrainConfig, step: usize, total_steps: usize) -> Result<f64> {
    if step < cfg.warmup_steps {
        return Ok(cfg.lr0 * (step + 1) as f64 / cfg.warmup_steps as f64);
    }
    cosine_annealed_lr(cfg.lr0, step, total_steps)
}

/// SGD with momentum and L2 weight decay:
/// `g ← ∇ + wd·p`, `buf ← μ·buf + g`, `p ← p − lr·buf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Matrix<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], lr: f64) {
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            let ps = p.as_mut_slice();
            for ((w, &d), b) in ps.iter_mut().zip(g.as_slice()).zip(buf.as_mut_slice()) {
                let grad = d + wd * *w;
                *b = mu * *b + grad;
                *w = *w - lr * *b;
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_rce: f64,
    /// `None` when the term's weight is zero and it was not computed.
    pub l_sce: Option<f64>,
    pub l_fs: Option<f64>,
    pub total: f64,
    pub skipped_triplets: usize,
    pub lr: f64,
}

/// Training data with decoded patch tokens.
pub struct TrainInputs<'a, T: Real> {
    pub model: &'a DualEncoder<T>,
    pub classes: &'a ClassSpace,
    pub real: &'a [LabeledExample],
    pub real_patches: &'a [Matrix<T>],
    pub synthetic: &'a [LabeledExample],
    pub synthetic_patches: &'a [Matrix<T>],
    pub val: &'a [LabeledExample],
    pub val_patches: &'a [Matrix<T>],
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: PromptParams<T>,
    pub momentum: Vec<Matrix<T>>,
    pub config: TrainConfig,
    pub step: usize,
    pub best_val: Option<f64>,
    pub best_params: Option<PromptParams<T>>,
    pub encoder_manifest: String,
    pub backbone_checksum: String,
}

fn encoder_manifest<T: Real>(model: &DualEncoder<T>) -> String {
    model.to_archive().text("manifest").expect("manifest entry").to_string()
}

impl<T: Real> Checkpoint<T> {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.put_text("kind", "prompt-checkpoint");
        self.params.export(&mut a);
        for ((name, _), m) in self.params.named().iter().zip(&self.momentum) {
            a.put_matrix(format!("optimizer.{name}"), m);
        }
        a.put_text("train_config", toml::to_string(&self.config).expect("train config serializes"));
        a.put_text("step", self.step.to_string());
        if let (Some(b), Some(p)) = (self.best_val, &self.best_params) {
            a.put_text("best_val", format!("{b:?}"));
            p.export_with_prefix(&mut a, "best.");
        }
        a.put_text("encoder_manifest", self.encoder_manifest.clone());
        a.put_text("backbone_checksum", self.backbone_checksum.clone());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.text("kind")? != "prompt-checkpoint" {
            return Err(Error::Input("archive is not a prompt checkpoint".into()));
        }
        let params = PromptParams::import(a)?;
        let momentum = params
            .named()
            .iter()
            .map(|(name, _)| a.matrix(&format!("optimizer.{name}")))
            .collect::<Result<Vec<_>>>()?;
        let config = toml::from_str(a.text("train_config")?)
            .map_err(|e| Error::Config(format!("stored train config: {e}")))?;
        let step = a
            .text("step")?
            .parse()
            .map_err(|e| Error::Input(format!("stored step: {e}")))?;
        let (best_val, best_params) = if a.contains("best_val") {
            (
                Some(a.text("best_val")?.parse().map_err(|e| Error::Input(format!("stored best_val: {e}")))?),
                Some(PromptParams::import_with_prefix(a, "best.")?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            params,
            momentum,
            config,
            step,
            best_val,
            best_params,
            encoder_manifest: a.text("encoder_manifest")?.to_string(),
            backbone_checksum: a.text("backbone_checksum")?.to_string(),
        })
    }

    /// Refuses checkpoints trained against different frozen towers.
    pub fn check_compatible(&self, model: &DualEncoder<T>) -> Result<()> {
        let here = encoder_manifest(model);
        if self.encoder_manifest != here {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained with encoder spec\n{}\nbut the bound encoder is\n{}",
                self.encoder_manifest, here
            )));
        }
        let sum = model.checksum();
        if self.backbone_checksum != sum {
            return Err(Error::Incompatible(format!(
                "backbone weights differ (checkpoint {}, bound {})",
                self.backbone_checksum, sum
            )));
        }
        let c = self.params.config();
        c.validate_against(
            model.visual.spec().n_layers,
            model.text.spec().n_layers,
            model.visual.spec().embed_dim,
            model.text.spec().embed_dim,
        )
        .map_err(|e| Error::Incompatible(e.to_string()))
    }
}

pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    ckpt.to_archive().save(path)
}

/// Loads a checkpoint and checks it against `model`.
pub fn load_checkpoint<T: Real>(path: &Path, model: &DualEncoder<T>) -> Result<Checkpoint<T>> {
    let ckpt = Checkpoint::from_archive(&Archive::load(path)?)?;
    ckpt.check_compatible(model)?;
    Ok(ckpt)
}

/// Drives training one step at a time.
pub struct Trainer<'a, T: Real> {
    inputs: TrainInputs<'a, T>,
    cfg: TrainConfig,
    params: PromptParams<T>,
    opt: Sgd<T>,
    step: usize,
    total_steps: usize,
    steps_per_epoch: usize,
    sampler: MixedBatchSampler,
    tokens: Vec<Matrix<T>>,
    order: Vec<usize>,
    n_base: usize,
    real_labels: Vec<usize>,
    synth_labels: Vec<usize>,
    best: Option<(f64, PromptParams<T>)>,
    backbone: BackboneChecksum,
    log: Vec<StepRecord>,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(inputs: TrainInputs<'a, T>, params: PromptParams<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if inputs.real.len() != inputs.real_patches.len()
            || inputs.synthetic.len() != inputs.synthetic_patches.len()
            || inputs.val.len() != inputs.val_patches.len()
        {
            return Err(Error::Input("every example needs decoded patches".into()));
        }
        let sampler = mixed_batch_sampler(
            inputs.real,
            inputs.synthetic,
            inputs.classes,
            cfg.real_batch_size,
            cfg.ratio,
            cfg.seed,
            &cfg.weights,
        )?;
        let order = inputs.classes.all();
        let names = inputs.classes.names_of(&order);
        let tokens = class_tokens(inputs.model, &names, inputs.classes.template())?;
        let shapes: Vec<_> = params.named().iter().map(|(_, m)| m.shape()).collect();
        Ok(Self {
            total_steps: cfg.total_steps(inputs.real.len()),
            steps_per_epoch: steps_per_epoch(inputs.real.len(), cfg.real_batch_size),
            n_base: inputs.classes.base().len(),
            real_labels: inputs.real.iter().map(|e| e.class_id).collect(),
            synth_labels: inputs.synthetic.iter().map(|e| e.class_id).collect(),
            backbone: BackboneChecksum::capture(inputs.model),
            opt: Sgd::new(cfg.momentum, cfg.weight_decay, &shapes),
            step: 0,
            sampler,
            tokens,
            order,
            inputs,
            cfg,
            params,
            best: None,
            log: Vec::new(),
        })
    }

    /// Continues from `ckpt`, replaying the sampler up to its step.
    pub fn resume(inputs: TrainInputs<'a, T>, ckpt: Checkpoint<T>) -> Result<Self> {
        ckpt.check_compatible(inputs.model)?;
        let mut t = Self::new(inputs, ckpt.params.clone(), ckpt.config.clone())?;
        t.opt.buffers = ckpt.momentum;
        t.step = ckpt.step;
        t.sampler.advance(ckpt.step);
        t.best = ckpt.best_val.zip(ckpt.best_params);
        Ok(t)
    }

    pub fn params(&self) -> &PromptParams<T> {
        &self.params
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            params: self.params.clone(),
            momentum: self.opt.buffers.clone(),
            config: self.cfg.clone(),
            step: self.step,
            best_val: self.best.as_ref().map(|b| b.0),
            best_params: self.best.as_ref().map(|b| b.1.clone()),
            encoder_manifest: encoder_manifest(self.inputs.model),
            backbone_checksum: self.backbone.0.clone(),
        }
    }

    /// The loss graph of one batch; returns (total, rce, sce, fs).
    fn build_loss(&self, tape: &mut Tape<T>, batch: &MixedBatch) -> Result<(Var, Var, Option<Var>, Option<Var>, Vec<Var>)> {
        let model = self.inputs.model;
        let temp = T::lit(self.cfg.temperature);
        let w = self.cfg.weights;
        let bound = self.params.bind(tape, true);
        let cocoop = self.params.needs_image_for_text();
        let shared_text = if cocoop {
            None
        } else {
            Some(bound.text_matrix(tape, model, &self.tokens, None)?)
        };
        let base_text = |tape: &mut Tape<T>, img: Option<Var>| -> Result<Var> {
            match shared_text {
                Some(all) => Ok(tape.slice_rows(all, 0, self.n_base)),
                None => bound.text_matrix(tape, model, &self.tokens[..self.n_base], img),
            }
        };
        let all_text = |tape: &mut Tape<T>, img: Option<Var>| -> Result<Var> {
            match shared_text {
                Some(all) => Ok(all),
                None => bound.text_matrix(tape, model, &self.tokens, img),
            }
        };
        let position = |c: usize| self.order.iter().position(|&o| o == c).expect("class in order");

        let mut real_imgs = Vec::with_capacity(batch.real.len());
        let mut rce_terms = Vec::with_capacity(batch.real.len());
        for &i in &batch.real {
            let img = bound.image(tape, model, &self.inputs.real_patches[i], DomainTag::Real.into())?;
            let text = base_text(tape, Some(img))?;
            rce_terms.push(cross_entropy_var(tape, img, text, position(self.real_labels[i]), temp));
            real_imgs.push(img);
        }
        let rce = reduce_var(tape, &rce_terms, self.cfg.reduction).expect("real batch is never empty");

        let need_synth = w.alpha > 0.0 || (w.beta > 0.0 && !batch.triplets.is_empty());
        let mut synth_imgs = Vec::new();
        if need_synth {
            for &i in &batch.synthetic {
                synth_imgs.push(bound.image(tape, model, &self.inputs.synthetic_patches[i], DomainTag::Synthetic.into())?);
            }
        }
        let sce = if w.alpha > 0.0 {
            let mut terms = Vec::with_capacity(batch.synthetic.len());
            for (&i, &img) in batch.synthetic.iter().zip(&synth_imgs) {
                let text = all_text(tape, Some(img))?;
                terms.push(cross_entropy_var(tape, img, text, position(self.synth_labels[i]), temp));
            }
            reduce_var(tape, &terms, self.cfg.reduction)
        } else {
            None
        };
        let fs = if w.beta > 0.0 {
            let terms: Vec<Var> = batch
                .triplets
                .iter()
                .map(|t| triplet_var(tape, synth_imgs[t.anchor], real_imgs[t.positive], real_imgs[t.negative]))
                .collect();
            reduce_var(tape, &terms, self.cfg.reduction)
        } else {
            None
        };

        let mut parts = vec![rce];
        if let Some(s) = sce {
            parts.push(tape.scale(s, T::lit(w.alpha)));
        }
        if let Some(f) = fs {
            parts.push(tape.scale(f, T::lit(w.beta)));
        }
        let total = tape.sum(&parts);
        Ok((total, rce, sce, fs, bound.leaves().to_vec()))
    }

    /// Samples the next batch (with mined triplets when the alignment term is on).
    pub fn next_batch(&mut self) -> MixedBatch {
        let mut batch = self.sampler.next_batch();
        if self.cfg.weights.beta > 0.0 {
            let mut rng = mining_rng(self.cfg.mining_seed(), self.step);
            mine_triplets(&mut batch, &self.real_labels, &self.synth_labels, self.inputs.classes, &mut rng);
        }
        batch
    }

    /// Loss and gradients of `batch` at the current parameters.
    pub fn loss_and_gradients(&self, batch: &MixedBatch) -> Result<(StepRecord, Vec<Matrix<T>>)> {
        let mut tape = Tape::new();
        let (total, rce, sce, fs, leaves) = self.build_loss(&mut tape, batch)?;
        let record = StepRecord {
            step: self.step,
            l_rce: tape.scalar(rce).f64(),
            l_sce: sce.map(|v| tape.scalar(v).f64()),
            l_fs: fs.map(|v| tape.scalar(v).f64()).or((self.cfg.weights.beta > 0.0).then_some(0.0)),
            total: tape.scalar(total).f64(),
            skipped_triplets: batch.skipped_triplets,
            lr: 0.0,
        };
        if !record.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                real: batch.real.clone(),
                synthetic: batch.synthetic.clone(),
            });
        }
        let grads = tape.backward(total);
        let named = self.params.named();
        let g = leaves
            .iter()
            .zip(&named)
            .map(|(&v, (_, m))| grads.get_or_zeros(v, m.shape()))
            .collect();
        Ok((record, g))
    }

    /// One optimizer step.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch();
        let (mut record, mut grads) = self.loss_and_gradients(&batch)?;
        if let Some(max) = self.cfg.clip_norm {
            let norm: f64 = grads.iter().map(|g| g.frobenius_sq().f64()).sum::<f64>().sqrt();
            if norm > max {
                let s = T::lit(max / norm);
                grads = grads.iter().map(|g| g.scale(s)).collect();
            }
        }
        let lr = scheduled_lr(&self.cfg, self.step, self.total_steps)?;
        record.lr = lr;
        let mut named = self.params.named_mut();
        let mut slots: Vec<&mut Matrix<T>> = named.iter_mut().map(|(_, m)| &mut **m).collect();
        self.opt.step(&mut slots, &grads, lr);
        if !self.params.is_finite() {
            return Err(Error::Numeric(format!("non-finite parameter after step {}", self.step)));
        }
        self.step += 1;
        if self.step % self.steps_per_epoch == 0 || self.step == self.total_steps {
            self.track_best()?;
        }
        self.log.push(record.clone());
        Ok(record)
    }

    fn track_best(&mut self) -> Result<()> {
        if self.inputs.val.is_empty() {
            return Ok(());
        }
        let scorer = Scorer::new(self.inputs.model, &self.params, self.inputs.classes, self.cfg.temperature)?;
        if let Some(acc) = base_accuracy(&scorer, self.inputs.classes, self.inputs.val, self.inputs.val_patches)? {
            info!("step {}: base validation accuracy {acc:.2}", self.step);
            if self.best.as_ref().is_none_or(|(b, _)| acc > *b) {
                self.best = Some((acc, self.params.clone()));
            }
        }
        Ok(())
    }

    /// Steps until `total_steps` or `stop_at`, streaming log lines to `sink`.
    pub fn run(&mut self, stop_at: Option<usize>, mut sink: Option<&mut dyn Write>) -> Result<()> {
        let end = stop_at.unwrap_or(self.total_steps).min(self.total_steps);
        while self.step < end {
            let rec = self.step_once()?;
            if let Some(w) = sink.as_mut() {
                serde_json::to_writer(&mut *w, &rec).expect("record serializes");
                w.write_all(b"\n").map_err(|e| Error::io("<training log>", e))?;
            }
        }
        if !crate::encoders::freeze_check(self.inputs.model, &self.backbone) {
            return Err(Error::Numeric("backbone weights changed during training".into()));
        }
        Ok(())
    }

    /// Final parameters, best-validation parameters and the log.
    pub fn finish(self) -> TrainOutcome<T> {
        let best = self.best.clone();
        let final_checkpoint = self.checkpoint();
        TrainOutcome {
            best_val: best.as_ref().map(|b| b.0),
            best: best.map(|b| b.1).unwrap_or_else(|| self.params.clone()),
            final_checkpoint,
            params: self.params,
            log: self.log,
        }
    }
}

pub struct TrainOutcome<T> {
    pub params: PromptParams<T>,
    pub best: PromptParams<T>,
    pub best_val: Option<f64>,
    pub final_checkpoint: Checkpoint<T>,
    pub log: Vec<StepRecord>,
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub log: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            log: dir.join("train_log.jsonl"),
            final_checkpoint: dir.join("final.ckpt"),
            best_checkpoint: dir.join("best.ckpt"),
        }
    }
}

/// Full run: trains, streams the log and writes final and best checkpoints.
pub fn train<T: Real>(
    inputs: TrainInputs<'_, T>,
    params: PromptParams<T>,
    cfg: TrainConfig,
    out: Option<&RunArtifacts>,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(inputs, params, cfg)?;
    match out {
        Some(paths) => {
            if let Some(dir) = paths.log.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let file = std::fs::File::create(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
            let mut w = std::io::BufWriter::new(file);
            trainer.run(None, Some(&mut w))?;
            w.flush().map_err(|e| Error::io(&paths.log, e))?;
        }
        None => trainer.run(None, None)?,
    }
    let outcome = trainer.finish();
    if let Some(paths) = out {
        save_checkpoint(&outcome.final_checkpoint, &paths.final_checkpoint)?;
        let mut best = outcome.final_checkpoint.clone();
        best.params = outcome.best.clone();
        save_checkpoint(&best, &paths.best_checkpoint)?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(cosine_annealed_lr(0.1, 0, 10).unwrap(), 0.1);
        assert!(cosine_annealed_lr(0.1, 10, 10).unwrap().abs() < 1e-18);
        assert!((cosine_annealed_lr(0.1, 5, 10).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_annealed_lr(0.1, 0, 0).is_err());
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut p = Matrix::from_vec(1, 2, vec![1.0, -2.0]);
        let g = Matrix::from_vec(1, 2, vec![0.5, 0.25]);
        let mut opt = Sgd::<f64>::new(0.9, 0.1, &[(1, 2)]);
        opt.step(&mut [&mut p], std::slice::from_ref(&g), 0.1);
        // g' = g + 0.1 p = (0.6, 0.05); buf = g'; p -= 0.1 buf
        assert!((p[(0, 0)] - 0.94).abs() < 1e-15);
        assert!((p[(0, 1)] + 2.005).abs() < 1e-15);
        opt.step(&mut [&mut p], std::slice::from_ref(&g), 0.1);
        let g2 = 0.5 + 0.1 * 0.94;
        let buf = 0.9 * 0.6 + g2;
        assert!((p[(0, 0)] - (0.94 - 0.1 * buf)).abs() < 1e-15);
    }

    #[test]
    fn config_violations_enumerated() {
        let cfg = TrainConfig {
            lr0: -1.0,
            epochs: 0,
            ratio: 0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.violations().len(), 3);
    }
}

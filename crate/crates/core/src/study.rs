//! Toy-scale ablation: the baseline, then the synthetic cross-entropy, then
//! the alignment term, all on one generated two-domain dataset.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{few_shot_sample, generate_toy, materialize, ToyData, ToySpec};
use crate::encoders::tokenizer::fill_template;
use crate::encoders::{
    freeze_check, BackboneChecksum, DualEncoder, EncoderSpec, TextBackbone, ToyTextEncoder, ToyVisualEncoder,
};
use crate::error::Result;
use crate::evaluation::{domain_diagnostics, evaluate_zsl_gzsl, EvalReport, Scorer};
use crate::model::{Baseline, PromptParams};
use crate::objectives::LossWeights;
use crate::prompts::PromptConfig;
use crate::tensor::Matrix;
use crate::training::{train, TrainConfig, TrainInputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub toy: ToySpec,
    pub visual: EncoderSpec,
    pub text: EncoderSpec,
    pub prompts: PromptConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    /// Real draws per base class used to fit the frozen heads before any prompt training.
    pub align_samples: usize,
    /// Draws per novel class in the head fit; zero keeps novel classes out of it.
    pub align_novel_samples: usize,
    /// Ridge penalty of the head fit.
    pub align_ridge: f64,
}

impl Default for StudySettings {
    fn default() -> Self {
        let visual = EncoderSpec::toy_visual();
        let text = EncoderSpec::toy_text();
        Self {
            toy: ToySpec {
                test_per_class: 50,
                synth_per_class: 32,
                ..ToySpec::default()
            },
            prompts: PromptConfig {
                m1: 2,
                m2: 2,
                n: 2,
                k: 4,
                depth: visual.n_layers,
                embed_dim_v: visual.embed_dim,
                embed_dim_t: text.embed_dim,
                init_scale: 0.02,
            },
            visual,
            text,
            train: TrainConfig {
                lr0: 0.003,
                epochs: 6,
                clip_norm: Some(1.0),
                precision: crate::training::Precision::F64,
                ..TrainConfig::default()
            },
            weights: LossWeights { alpha: 1.0, beta: 0.5 },
            align_samples: 32,
            align_novel_samples: 2,
            align_ridge: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub zsl: EvalReport,
    pub gzsl: EvalReport,
    pub gap_before: Option<f64>,
    pub gap_after: Option<f64>,
    pub backbone_frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutcome {
    pub seed: u64,
    /// GZSL report of the untrained baseline prompts.
    pub zero_shot: EvalReport,
    /// Domain-agnostic prompts only, real data only.
    pub baseline: ArmResult,
    /// Domain-split prompts with the synthetic cross-entropy.
    pub with_sce: ArmResult,
    /// As above plus the alignment term.
    pub with_fs: ArmResult,
}

struct Prepared {
    data: ToyData,
    model: DualEncoder<f64>,
    real: Vec<crate::data::LabeledExample>,
    real_p: Vec<Matrix<f64>>,
    synth_p: Vec<Matrix<f64>>,
    test_p: Vec<Matrix<f64>>,
}

fn arm(p: &Prepared, s: &StudySettings, seed: u64, baseline: Baseline, weights: LossWeights) -> Result<ArmResult> {
    let mut cfg = s.prompts.clone();
    if baseline == Baseline::Ivlp {
        cfg.m1 = 0;
        cfg.m2 = 0;
    }
    let init = PromptParams::init(baseline, &cfg, &p.model, seed)?;
    let classes = &p.data.dataset.classes;
    let diag = |params: &PromptParams<f64>| {
        domain_diagnostics(
            &p.model,
            params,
            (&p.data.dataset.test, &p.test_p),
            (&p.data.synthetic, &p.synth_p),
        )
        .map(|d| d.domain_centroid_gap)
    };
    let gap_before = diag(&init)?;
    let before = BackboneChecksum::capture(&p.model);
    let train_cfg = TrainConfig {
        weights,
        seed,
        ..s.train.clone()
    };
    let uses_synth = weights.alpha > 0.0 || weights.beta > 0.0;
    let inputs = TrainInputs {
        model: &p.model,
        classes,
        real: &p.real,
        real_patches: &p.real_p,
        synthetic: if uses_synth { &p.data.synthetic } else { &[] },
        synthetic_patches: if uses_synth { &p.synth_p } else { &[] },
        val: &[],
        val_patches: &[],
    };
    let out = train(inputs, init, train_cfg, None)?;
    let scorer = Scorer::new(&p.model, &out.params, classes, s.train.temperature)?;
    let (zsl, gzsl) = evaluate_zsl_gzsl(&scorer, classes, &p.data.dataset.test, &p.test_p)?;
    Ok(ArmResult {
        zsl,
        gzsl,
        gap_before,
        gap_after: diag(&out.params)?,
        backbone_frozen: freeze_check(&p.model, &before),
    })
}

fn ridge(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<Matrix<f64>> {
    let (n, d, k) = (x.len(), x[0].len(), y[0].len());
    let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let ym = DMatrix::from_fn(n, k, |i, j| y[i][j]);
    let gram = xm.transpose() * &xm + DMatrix::identity(d, d) * lambda;
    let h = gram
        .cholesky()
        .ok_or_else(|| crate::Error::Numeric("head fit is singular".into()))?
        .solve(&(xm.transpose() * ym));
    Ok(Matrix::from_vec(d, k, (0..d * k).map(|i| h[(i / k, i % k)]).collect()))
}

/// Random towers whose heads are refit by ridge regression so that real
/// images land near the text embedding of their class. This stands in for
/// contrastive pretraining: base classes are well covered, novel classes
/// only by `align_novel_samples` draws, and synthetic images never.
pub fn aligned_towers(s: &StudySettings, data: &ToyData, seed: u64) -> Result<DualEncoder<f64>> {
    let mut visual = ToyVisualEncoder::<f64>::random(s.visual.clone(), seed.wrapping_add(1000))?;
    let mut text = ToyTextEncoder::<f64>::random(s.text.clone(), seed.wrapping_add(1001))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11_9e);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let out = s.visual.output_dim;
    let classes = &data.dataset.classes;
    let anchors: Vec<Vec<f64>> = (0..classes.len())
        .map(|_| (0..out).map(|_| unit.sample(&mut rng)).collect())
        .collect();

    let draws = |c: usize| if classes.is_base(c) { s.align_samples } else { s.align_novel_samples };
    let (mut tx, mut ty) = (Vec::new(), Vec::new());
    for (c, name) in classes.names().iter().enumerate() {
        if draws(c) > 0 {
            let tokens = text.embed_text(&fill_template(classes.template(), name)?)?;
            tx.push(text.core.features(&tokens)?);
            ty.push(anchors[c].clone());
        }
    }
    text.core = text.core.clone().with_head(ridge(&tx, &ty, s.align_ridge)?)?;

    let (mut vx, mut vy) = (Vec::new(), Vec::new());
    for (c, mean) in data.means.iter().enumerate() {
        for _ in 0..draws(c) {
            let noise: Vec<f64> = (0..mean.len()).map(|_| unit.sample(&mut rng) * s.toy.noise).collect();
            let mut m = Matrix::from_vec(mean.rows(), mean.cols(), noise);
            m.add_assign(mean);
            vx.push(visual.core.features(&m)?);
            vy.push(anchors[c].clone());
        }
    }
    visual.core = visual.core.clone().with_head(ridge(&vx, &vy, s.align_ridge)?)?;
    DualEncoder::new(Arc::new(visual), Arc::new(text))
}

/// Generates data and frozen towers from `seed` and trains the three arms.
pub fn run_study(settings: &StudySettings, seed: u64) -> Result<StudyOutcome> {
    let toy = ToySpec {
        seed,
        ..settings.toy.clone()
    };
    let data = generate_toy(&toy)?;
    let model = aligned_towers(settings, &data, seed)?;
    let real = few_shot_sample(&data.dataset.train, &data.dataset.classes, settings.train.shots, seed);
    let vis = model.visual.as_ref();
    let p = Prepared {
        real_p: materialize(&real, vis)?,
        synth_p: materialize(&data.synthetic, vis)?,
        test_p: materialize(&data.dataset.test, vis)?,
        real,
        model,
        data,
    };
    let w = settings.weights;
    let untrained = PromptParams::init(
        Baseline::Ivlp,
        &PromptConfig {
            m1: 0,
            m2: 0,
            ..settings.prompts.clone()
        },
        &p.model,
        seed,
    )?;
    let scorer = Scorer::new(&p.model, &untrained, &p.data.dataset.classes, settings.train.temperature)?;
    let (_, zero_shot) = evaluate_zsl_gzsl(&scorer, &p.data.dataset.classes, &p.data.dataset.test, &p.test_p)?;
    Ok(StudyOutcome {
        seed,
        zero_shot,
        baseline: arm(&p, settings, seed, Baseline::Ivlp, LossWeights { alpha: 0.0, beta: 0.0 })?,
        with_sce: arm(&p, settings, seed, Baseline::SyncClip, LossWeights { alpha: w.alpha, beta: 0.0 })?,
        with_fs: arm(&p, settings, seed, Baseline::SyncClip, w)?,
    })
}

//! Fixtures shared by the integration test binaries.
#![allow(dead_code)]

use dualprompt::autodiff::Tape;
use dualprompt::data::{few_shot_sample, generate_toy, materialize, LabeledExample, MixedBatch, ToyData, ToySpec};
use dualprompt::encoders::DualEncoder;
use dualprompt::model::{class_tokens, Baseline, PromptParams};
use dualprompt::objectives::{
    cross_entropy_var, fs_loss, rce_loss, reduce_var, sce_loss, triplet_var, ClassEmbeddings, LossWeights, Reduction,
    Triplet,
};
use dualprompt::prompts::{DomainTag, PromptConfig};
use dualprompt::tensor::Matrix;
use dualprompt::training::{Precision, TrainConfig, TrainInputs};

pub struct Fixture {
    pub data: ToyData,
    pub model: DualEncoder<f64>,
    pub real: Vec<LabeledExample>,
    pub real_p: Vec<Matrix<f64>>,
    pub synth_p: Vec<Matrix<f64>>,
    pub test_p: Vec<Matrix<f64>>,
    pub tokens: Vec<Matrix<f64>>,
}

/// 4 base + 2 novel classes, 4 shots, small enough for finite differences.
pub fn small_spec(seed: u64) -> ToySpec {
    ToySpec {
        n_base: 4,
        n_novel: 2,
        train_per_class: 4,
        val_per_class: 2,
        test_per_class: 4,
        synth_per_class: 4,
        seed,
        ..ToySpec::default()
    }
}

pub fn fixture(spec: &ToySpec, shots: usize) -> Fixture {
    let data = generate_toy(spec).unwrap();
    let model = DualEncoder::<f64>::toy_default(spec.seed).unwrap();
    let real = few_shot_sample(&data.dataset.train, &data.dataset.classes, shots, spec.seed);
    let vis = model.visual.as_ref();
    let classes = &data.dataset.classes;
    let tokens = class_tokens(&model, &classes.names_of(&classes.all()), classes.template()).unwrap();
    Fixture {
        real_p: materialize(&real, vis).unwrap(),
        synth_p: materialize(&data.synthetic, vis).unwrap(),
        test_p: materialize(&data.dataset.test, vis).unwrap(),
        real,
        model,
        data,
        tokens,
    }
}

impl Fixture {
    pub fn inputs(&self) -> TrainInputs<'_, f64> {
        TrainInputs {
            model: &self.model,
            classes: &self.data.dataset.classes,
            real: &self.real,
            real_patches: &self.real_p,
            synthetic: &self.data.synthetic,
            synthetic_patches: &self.synth_p,
            val: &[],
            val_patches: &[],
        }
    }

    pub fn prompt_config(&self, init_scale: f64) -> PromptConfig {
        let v = self.model.visual.spec();
        let t = self.model.text.spec();
        PromptConfig {
            m1: 2,
            m2: 2,
            n: 2,
            k: 4,
            depth: v.n_layers.min(t.n_layers),
            embed_dim_v: v.embed_dim,
            embed_dim_t: t.embed_dim,
            init_scale,
        }
    }

    pub fn params(&self, baseline: Baseline, init_scale: f64, seed: u64) -> PromptParams<f64> {
        let mut cfg = self.prompt_config(init_scale);
        if baseline == Baseline::Ivlp {
            cfg.m1 = 0;
            cfg.m2 = 0;
        }
        PromptParams::init(baseline, &cfg, &self.model, seed).unwrap()
    }

    fn n_base(&self) -> usize {
        self.data.dataset.classes.base().len()
    }

    fn real_label(&self, i: usize) -> usize {
        self.real[i].class_id
    }

    fn synth_label(&self, i: usize) -> usize {
        self.data.synthetic[i].class_id
    }
}

pub fn train_config(seed: u64, weights: LossWeights) -> TrainConfig {
    TrainConfig {
        real_batch_size: 4,
        ratio: 2,
        epochs: 2,
        shots: 4,
        weights,
        seed,
        precision: Precision::F64,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Rce,
    Sce,
    Fs,
}

/// One loss component built on a fresh tape, with gradients aligned to
/// `params.named()`. Written against the public graph ops, independently of
/// the trainer's own loss assembly.
pub fn component_graph(
    fx: &Fixture,
    params: &PromptParams<f64>,
    batch: &MixedBatch,
    which: &[Component],
    temperature: f64,
) -> (f64, Vec<Matrix<f64>>) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let text = bound.text_matrix(&mut tape, &fx.model, &fx.tokens, None).unwrap();
    let base_text = tape.slice_rows(text, 0, fx.n_base());
    let real: Vec<_> = batch
        .real
        .iter()
        .map(|&i| bound.image(&mut tape, &fx.model, &fx.real_p[i], DomainTag::Real.into()).unwrap())
        .collect();
    let synth: Vec<_> = batch
        .synthetic
        .iter()
        .map(|&i| bound.image(&mut tape, &fx.model, &fx.synth_p[i], DomainTag::Synthetic.into()).unwrap())
        .collect();
    let mut parts = Vec::new();
    for c in which {
        let terms: Vec<_> = match c {
            Component::Rce => batch
                .real
                .iter()
                .zip(&real)
                .map(|(&i, &img)| cross_entropy_var(&mut tape, img, base_text, fx.real_label(i), temperature))
                .collect(),
            Component::Sce => batch
                .synthetic
                .iter()
                .zip(&synth)
                .map(|(&i, &img)| cross_entropy_var(&mut tape, img, text, fx.synth_label(i), temperature))
                .collect(),
            Component::Fs => batch
                .triplets
                .iter()
                .map(|t| triplet_var(&mut tape, synth[t.anchor], real[t.positive], real[t.negative]))
                .collect(),
        };
        parts.extend(reduce_var(&mut tape, &terms, Reduction::Mean));
    }
    let loss = tape.sum(&parts);
    let value = tape.scalar(loss);
    let grads = tape.backward(loss);
    let g = bound
        .leaves()
        .iter()
        .zip(params.named())
        .map(|(&v, (_, m))| grads.get_or_zeros(v, m.shape()))
        .collect();
    (value, g)
}

/// Forward-only evaluation through the scalar loss functions.
pub fn component_value(
    fx: &Fixture,
    params: &PromptParams<f64>,
    batch: &MixedBatch,
    which: Component,
    temperature: f64,
) -> f64 {
    let classes = &fx.data.dataset.classes;
    let all = classes.all();
    let embed = |patches: &Matrix<f64>, d: DomainTag| params.embed_image(&fx.model, patches, d.into()).unwrap();
    match which {
        Component::Rce => {
            let texts = params.embed_classes(&fx.model, &fx.tokens[..fx.n_base()], None).unwrap();
            let space = ClassEmbeddings::new(classes.base().to_vec(), texts).unwrap();
            let items: Vec<_> = batch
                .real
                .iter()
                .map(|&i| (embed(&fx.real_p[i], DomainTag::Real), fx.real_label(i)))
                .collect();
            rce_loss(&items, &space, temperature, Reduction::Mean).unwrap()
        }
        Component::Sce => {
            let texts = params.embed_classes(&fx.model, &fx.tokens, None).unwrap();
            let space = ClassEmbeddings::new(all, texts).unwrap();
            let items: Vec<_> = batch
                .synthetic
                .iter()
                .map(|&i| (embed(&fx.synth_p[i], DomainTag::Synthetic), fx.synth_label(i)))
                .collect();
            sce_loss(&items, &space, temperature, Reduction::Mean).unwrap()
        }
        Component::Fs => {
            let triplets: Vec<_> = batch
                .triplets
                .iter()
                .map(|t| Triplet {
                    anchor: embed(&fx.synth_p[batch.synthetic[t.anchor]], DomainTag::Synthetic),
                    positive: embed(&fx.real_p[batch.real[t.positive]], DomainTag::Real),
                    negative: embed(&fx.real_p[batch.real[t.negative]], DomainTag::Real),
                })
                .collect();
            fs_loss(&triplets, Reduction::Mean).unwrap().value
        }
    }
}

/// Central differences of `f` over every entry of every parameter matrix.
pub fn finite_differences(
    params: &PromptParams<f64>,
    step: f64,
    f: impl Fn(&PromptParams<f64>) -> f64,
) -> Vec<Matrix<f64>> {
    let shapes: Vec<_> = params.named().iter().map(|(_, m)| m.shape()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    let mut work = params.clone();
    for (slot, &(r, c)) in shapes.iter().enumerate() {
        let mut g = Matrix::zeros(r, c);
        for j in 0..r * c {
            let orig = work.named()[slot].1.as_slice()[j];
            let set = |w: &mut PromptParams<f64>, v: f64| {
                w.named_mut()[slot].1.as_mut_slice()[j] = v;
            };
            set(&mut work, orig + step);
            let up = f(&work);
            set(&mut work, orig - step);
            let down = f(&work);
            set(&mut work, orig);
            g.as_mut_slice()[j] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Worst violation of `|a - b| <= max(abs_floor, rel * max(|a|, |b|))`,
/// as (name, index, analytic, numeric), or `None` when all entries pass.
pub fn worst_mismatch(
    params: &PromptParams<f64>,
    analytic: &[Matrix<f64>],
    numeric: &[Matrix<f64>],
    rel: f64,
    abs_floor: f64,
) -> Option<(String, usize, f64, f64)> {
    let mut worst: Option<(f64, (String, usize, f64, f64))> = None;
    for (((name, _), a), n) in params.named().iter().zip(analytic).zip(numeric) {
        for (j, (&x, &y)) in a.as_slice().iter().zip(n.as_slice()).enumerate() {
            let tol = abs_floor.max(rel * x.abs().max(y.abs()));
            let excess = (x - y).abs() / tol;
            if excess > 1.0 && worst.as_ref().is_none_or(|w| excess > w.0) {
                worst = Some((excess, (name.clone(), j, x, y)));
            }
        }
    }
    worst.map(|w| w.1)
}

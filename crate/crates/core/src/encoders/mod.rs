//! Frozen dual-encoder contract with layerwise prompt injection.
//!
//! A backbone exposes its blocks one at a time so that [`prompted_forward`]
//! can discard the prompt positions after every prompted layer and splice in
//! that layer's fresh prompts. Prompt positions are never read out: the
//! embedding is the first content token's final state through the head.
//!
//! Pretrained towers plug in by implementing [`VisualBackbone`] and
//! [`TextBackbone`]; the toy transformer in [`toy`] is the in-tree binding.

pub mod tokenizer;
pub mod toy;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::prompts::{visual_groups, PromptBank, PromptGroup, VisualRoute};
use crate::tensor::{l2_norm, Matrix, Real};

pub use toy::{ToyTextEncoder, ToyTransformer, ToyVisualEncoder};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub n_layers: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    /// Patch count (visual) or context length including `<sot>` (text).
    pub max_tokens: usize,
    /// Joint-space width.
    pub output_dim: usize,
    #[serde(default = "default_mlp_width")]
    pub mlp_width: usize,
    #[serde(default = "yes")]
    pub layer_norm: bool,
    #[serde(default = "yes")]
    pub class_token: bool,
}

fn default_mlp_width() -> usize {
    64
}

fn yes() -> bool {
    true
}

impl EncoderSpec {
    pub fn toy_visual() -> Self {
        Self {
            n_layers: 2,
            embed_dim: 32,
            n_heads: 4,
            max_tokens: 9,
            output_dim: 16,
            mlp_width: 64,
            layer_norm: true,
            class_token: true,
        }
    }

    pub fn toy_text() -> Self {
        Self {
            max_tokens: 16,
            class_token: false,
            ..Self::toy_visual()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.embed_dim == 0 || self.output_dim == 0 || self.n_heads == 0 {
            return Err(Error::Config(format!("degenerate encoder spec {self:?}")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

pub trait Backbone<T: Real>: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// Turns raw content rows into layer-0 content (prefix tokens, positions).
    fn prepare(&self, tape: &mut Tape<T>, content: &Matrix<T>) -> Result<Var>;

    fn block(&self, tape: &mut Tape<T>, layer: usize, x: Var) -> Var;

    /// Projects the first content token's final state into the joint space.
    fn readout(&self, tape: &mut Tape<T>, first_content: Var) -> Var;

    fn export(&self, prefix: &str, archive: &mut Archive);
}

pub trait VisualBackbone<T: Real>: Backbone<T> {
    /// Decoded image → `patch_count × embed_dim` patch tokens.
    fn patchify(&self, image: &image::RgbImage) -> Matrix<T>;
}

pub trait TextBackbone<T: Real>: Backbone<T> {
    /// Text → `tokens × embed_dim` token embeddings.
    fn embed_text(&self, text: &str) -> Result<Matrix<T>>;

    fn token_ids(&self, text: &str) -> Result<Vec<usize>>;
}

/// A frozen visual tower and text tower sharing one joint space.
#[derive(Clone)]
pub struct DualEncoder<T: Real> {
    pub visual: Arc<dyn VisualBackbone<T>>,
    pub text: Arc<dyn TextBackbone<T>>,
}

impl<T: Real> DualEncoder<T> {
    pub fn new(visual: Arc<dyn VisualBackbone<T>>, text: Arc<dyn TextBackbone<T>>) -> Result<Self> {
        visual.spec().validate()?;
        text.spec().validate()?;
        if visual.spec().output_dim != text.spec().output_dim {
            return Err(Error::Config(format!(
                "joint-space widths differ: visual {} vs text {}",
                visual.spec().output_dim,
                text.spec().output_dim
            )));
        }
        Ok(Self { visual, text })
    }

    /// Randomly initialized toy towers, deterministic in `seed`.
    pub fn toy(visual: EncoderSpec, text: EncoderSpec, seed: u64) -> Result<Self> {
        Self::new(
            Arc::new(ToyVisualEncoder::random(visual, seed)?),
            Arc::new(ToyTextEncoder::random(text, seed.wrapping_add(1))?),
        )
    }

    pub fn toy_default(seed: u64) -> Result<Self> {
        Self::toy(EncoderSpec::toy_visual(), EncoderSpec::toy_text(), seed)
    }

    pub fn output_dim(&self) -> usize {
        self.visual.spec().output_dim
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        self.visual.export("visual", &mut a);
        self.text.export("text", &mut a);
        a.put_text(
            "manifest",
            format!(
                "[visual]\n{}\n[text]\n{}",
                toml::to_string(self.visual.spec()).expect("spec serializes"),
                toml::to_string(self.text.spec()).expect("spec serializes")
            ),
        );
        a
    }

    pub fn from_toy_archive(archive: &Archive) -> Result<Self> {
        Self::new(
            Arc::new(ToyVisualEncoder::import("visual", archive)?),
            Arc::new(ToyTextEncoder::import("text", archive)?),
        )
    }

    /// SHA-256 over every frozen weight.
    pub fn checksum(&self) -> String {
        self.to_archive().digest()
    }
}

/// Checksum of the frozen towers captured before training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneChecksum(pub String);

impl BackboneChecksum {
    pub fn capture<T: Real>(model: &DualEncoder<T>) -> Self {
        Self(model.checksum())
    }
}

/// True iff no backbone weight changed since `before` was captured.
pub fn freeze_check<T: Real>(model: &DualEncoder<T>, before: &BackboneChecksum) -> bool {
    model.checksum() == before.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    vector: Vec<T>,
    norm: T,
}

impl<T: Real> Embedding<T> {
    pub fn new(vector: Vec<T>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding has non-finite entries".into()));
        }
        let norm = l2_norm(&vector);
        Ok(Self { vector, norm })
    }

    pub fn vector(&self) -> &[T] {
        &self.vector
    }

    pub fn norm(&self) -> T {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Unit-norm copy; errors on the zero vector.
    pub fn normalized(&self) -> Result<Vec<T>> {
        if self.norm == T::zero() {
            return Err(Error::Numeric("cannot normalize a zero embedding".into()));
        }
        Ok(self.vector.iter().map(|&v| v / self.norm).collect())
    }

    pub fn scaled(&self, s: T) -> Result<Self> {
        Self::new(self.vector.iter().map(|&v| v * s).collect())
    }
}

/// Prompt matrices placed on a tape, one variable per group and layer.
#[derive(Debug, Clone)]
pub struct BoundPrompts {
    groups: [Vec<Var>; 4],
}

fn group_index(g: PromptGroup) -> usize {
    match g {
        PromptGroup::RealVisual => 0,
        PromptGroup::SynthVisual => 1,
        PromptGroup::SharedVisual => 2,
        PromptGroup::Textual => 3,
    }
}

impl BoundPrompts {
    /// Places every bank matrix on `tape`, as trainable leaves or constants.
    pub fn bind<T: Real>(tape: &mut Tape<T>, bank: &PromptBank<T>, trainable: bool) -> Self {
        let mut groups: [Vec<Var>; 4] = Default::default();
        for g in PromptGroup::ALL {
            groups[group_index(g)] = bank
                .layers(g)
                .iter()
                .map(|m| {
                    if trainable {
                        tape.param(m.clone())
                    } else {
                        tape.constant(m.clone())
                    }
                })
                .collect();
        }
        Self { groups }
    }

    pub fn group(&self, g: PromptGroup) -> &[Var] {
        &self.groups[group_index(g)]
    }

    /// Overrides one group, e.g. with projected or conditioned prompts.
    pub fn replace(&mut self, g: PromptGroup, vars: Vec<Var>) {
        self.groups[group_index(g)] = vars;
    }

    pub fn depth(&self) -> usize {
        self.groups[3].len()
    }

    pub fn visual_layers<T: Real>(&self, tape: &mut Tape<T>, route: VisualRoute) -> Vec<Var> {
        (0..self.depth())
            .map(|l| {
                let parts: Vec<Var> = visual_groups(route)
                    .iter()
                    .map(|&g| self.group(g)[l])
                    .collect();
                tape.concat_rows(&parts)
            })
            .collect()
    }
}

/// Runs `backbone` over `content`, re-injecting `layer_prompts[l]` before block `l`.
pub fn prompted_forward<T: Real>(
    tape: &mut Tape<T>,
    backbone: &(impl Backbone<T> + ?Sized),
    content: &Matrix<T>,
    layer_prompts: &[Var],
) -> Result<Var> {
    let spec = backbone.spec();
    if layer_prompts.len() > spec.n_layers {
        return Err(Error::Config(format!(
            "{} prompted layers exceed the encoder's {} layers",
            layer_prompts.len(),
            spec.n_layers
        )));
    }
    let mut x = backbone.prepare(tape, content)?;
    let content_len = tape.value(x).rows();
    let mut prompt_len = 0;
    for layer in 0..spec.n_layers {
        if let Some(&p) = layer_prompts.get(layer) {
            let p_rows = tape.value(p).rows();
            if p_rows > 0 && tape.value(p).cols() != spec.embed_dim {
                return Err(Error::shape("prompt width", spec.embed_dim, tape.value(p).cols()));
            }
            let body = if prompt_len == 0 {
                x
            } else {
                tape.slice_rows(x, prompt_len, content_len)
            };
            x = if p_rows == 0 {
                body
            } else {
                tape.concat_rows(&[p, body])
            };
            prompt_len = p_rows;
        }
        x = backbone.block(tape, layer, x);
    }
    let first = tape.slice_rows(x, prompt_len, 1);
    Ok(backbone.readout(tape, first))
}

pub fn encode_visual_var<T: Real>(
    tape: &mut Tape<T>,
    model: &DualEncoder<T>,
    prompts: &BoundPrompts,
    patches: &Matrix<T>,
    route: VisualRoute,
) -> Result<Var> {
    let layers = prompts.visual_layers(tape, route);
    prompted_forward(tape, model.visual.as_ref(), patches, &layers)
}

/// Text forward; `first_layer_shift` is added to every layer-0 textual prompt row.
pub fn encode_text_var<T: Real>(
    tape: &mut Tape<T>,
    model: &DualEncoder<T>,
    prompts: &BoundPrompts,
    tokens: &Matrix<T>,
    first_layer_shift: Option<Var>,
) -> Result<Var> {
    if tokens.rows() == 0 {
        return Err(Error::Input("class token sequence is empty".into()));
    }
    let mut layers = prompts.group(PromptGroup::Textual).to_vec();
    if let (Some(shift), Some(first)) = (first_layer_shift, layers.first_mut()) {
        *first = tape.add_row(*first, shift);
    }
    prompted_forward(tape, model.text.as_ref(), tokens, &layers)
}

fn finish<T: Real>(tape: &Tape<T>, v: Var) -> Result<Embedding<T>> {
    let m = tape.value(v);
    if !m.is_finite() {
        return Err(Error::Numeric("non-finite activation in encoder".into()));
    }
    Embedding::new(m.as_slice().to_vec())
}

fn check_bank<T: Real>(model: &DualEncoder<T>, bank: &PromptBank<T>) -> Result<()> {
    let c = bank.config();
    c.validate_against(
        model.visual.spec().n_layers,
        model.text.spec().n_layers,
        model.visual.spec().embed_dim,
        model.text.spec().embed_dim,
    )
}

/// Embeds patch tokens with the prompts selected by `route`.
pub fn encode_visual<T: Real>(
    model: &DualEncoder<T>,
    patches: &Matrix<T>,
    bank: &PromptBank<T>,
    route: VisualRoute,
) -> Result<Embedding<T>> {
    check_bank(model, bank)?;
    let mut tape = Tape::new();
    let prompts = BoundPrompts::bind(&mut tape, bank, false);
    let v = encode_visual_var(&mut tape, model, &prompts, patches, route)?;
    finish(&tape, v)
}

/// Embeds `template` with `[CLS]` replaced by `class_name`.
pub fn encode_text<T: Real>(
    model: &DualEncoder<T>,
    class_name: &str,
    template: &str,
    bank: &PromptBank<T>,
) -> Result<Embedding<T>> {
    check_bank(model, bank)?;
    let text = tokenizer::fill_template(template, class_name)?;
    let tokens = model.text.embed_text(&text)?;
    let mut tape = Tape::new();
    let prompts = BoundPrompts::bind(&mut tape, bank, false);
    let v = encode_text_var(&mut tape, model, &prompts, &tokens, None)?;
    finish(&tape, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{init_prompt_bank, DomainTag, PromptConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg(m1: usize, m2: usize) -> PromptConfig {
        PromptConfig {
            m1,
            m2,
            n: 2,
            k: 3,
            depth: 2,
            embed_dim_v: 32,
            embed_dim_t: 32,
            init_scale: 0.5,
        }
    }

    fn patches(seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(9, 32, (0..9 * 32).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn visual_encoding_is_pure() {
        let model = DualEncoder::<f64>::toy_default(1).unwrap();
        let bank = init_prompt_bank(&toy_cfg(2, 2), 3).unwrap();
        let x = patches(5);
        let a = encode_visual(&model, &x, &bank, DomainTag::Real.into()).unwrap();
        let b = encode_visual(&model, &x, &bank, DomainTag::Real.into()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 16);
    }

    #[test]
    fn domains_collapse_without_domain_prompts() {
        let model = DualEncoder::<f64>::toy_default(1).unwrap();
        let bank = init_prompt_bank(&toy_cfg(0, 0), 3).unwrap();
        let x = patches(5);
        let r = encode_visual(&model, &x, &bank, DomainTag::Real.into()).unwrap();
        let s = encode_visual(&model, &x, &bank, DomainTag::Synthetic.into()).unwrap();
        let i = encode_visual(&model, &x, &bank, VisualRoute::Ivlp).unwrap();
        assert_eq!(r, s);
        assert_eq!(r, i);
    }

    #[test]
    fn domain_outputs_depend_only_on_their_prompts() {
        let model = DualEncoder::<f64>::toy_default(1).unwrap();
        let bank = init_prompt_bank(&toy_cfg(2, 2), 3).unwrap();
        let x = patches(5);
        let enc = |b: &PromptBank<f64>, d: DomainTag| encode_visual(&model, &x, b, d.into()).unwrap();
        let perturb = |g: PromptGroup| {
            let mut b = bank.clone();
            for m in b.layers_mut(g) {
                *m = m.map(|v| v + 0.3);
            }
            b
        };
        let real0 = enc(&bank, DomainTag::Real);
        let synth0 = enc(&bank, DomainTag::Synthetic);

        let b = perturb(PromptGroup::RealVisual);
        assert_ne!(enc(&b, DomainTag::Real), real0);
        assert_eq!(enc(&b, DomainTag::Synthetic), synth0);

        let b = perturb(PromptGroup::SynthVisual);
        assert_eq!(enc(&b, DomainTag::Real), real0);
        assert_ne!(enc(&b, DomainTag::Synthetic), synth0);

        let b = perturb(PromptGroup::SharedVisual);
        assert_ne!(enc(&b, DomainTag::Real), real0);
        assert_ne!(enc(&b, DomainTag::Synthetic), synth0);
    }

    #[test]
    fn identity_block_hand_trace() {
        // one block, one patch, no prompts: attention over a single token is the
        // token itself, so x + x·W_v·W_o = (1 + s)·x, the zero MLP adds nothing,
        // and the head maps it into the joint space.
        let spec = EncoderSpec {
            n_layers: 1,
            embed_dim: 4,
            n_heads: 2,
            max_tokens: 1,
            output_dim: 2,
            mlp_width: 8,
            layer_norm: false,
            class_token: false,
        };
        let head = Matrix::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, -0.5]);
        let x = Matrix::from_vec(1, 4, vec![0.5, -1.0, 2.0, 3.0]);
        let projected = x.matmul(&head);

        let block = ToyTransformer::<f64>::identity(spec.clone(), head.clone(), 0.0).unwrap();
        let mut tape = Tape::new();
        let out = prompted_forward(&mut tape, &block, &x, &[]).unwrap();
        assert_eq!(tape.value(out), &projected);

        let block = ToyTransformer::<f64>::identity(spec, head, 1.0).unwrap();
        let mut tape = Tape::new();
        let out = prompted_forward(&mut tape, &block, &x, &[]).unwrap();
        assert_eq!(tape.value(out), &projected.scale(2.0));
    }

    #[test]
    fn text_encoding_consistency() {
        let model = DualEncoder::<f64>::toy_default(1).unwrap();
        let bank = init_prompt_bank(&toy_cfg(2, 2), 3).unwrap();
        let a = encode_text(&model, "dog", "a photo of a [CLS].", &bank).unwrap();
        let b = encode_text(&model, "dog", "a photo of a [CLS].", &bank).unwrap();
        assert_eq!(a, b);
        let c = encode_text(&model, "cat", "a photo of a [CLS].", &bank).unwrap();
        assert_ne!(a, c);
        assert_eq!(
            model.text.token_ids("a photo of a dog.").unwrap(),
            model
                .text
                .token_ids(&tokenizer::fill_template("a photo of a [CLS].", "dog").unwrap())
                .unwrap()
        );
        assert!(encode_text(&model, "dog", "a photo", &bank).is_err());
    }

    #[test]
    fn freeze_check_detects_tampering() {
        let v = ToyVisualEncoder::<f64>::random(EncoderSpec::toy_visual(), 1).unwrap();
        let t = ToyTextEncoder::<f64>::random(EncoderSpec::toy_text(), 2).unwrap();
        let model = DualEncoder::new(Arc::new(v.clone()), Arc::new(t.clone())).unwrap();
        let before = BackboneChecksum::capture(&model);
        assert!(freeze_check(&model, &before));

        let mut tampered = v;
        tampered.core.head_mut()[(0, 0)] += 1e-3;
        let model = DualEncoder::new(Arc::new(tampered), Arc::new(t)).unwrap();
        assert!(!freeze_check(&model, &before));
    }

    #[test]
    fn encoder_archive_round_trip() {
        let model = DualEncoder::<f64>::toy_default(4).unwrap();
        let back = DualEncoder::<f64>::from_toy_archive(&model.to_archive()).unwrap();
        assert_eq!(model.checksum(), back.checksum());
        let bank = init_prompt_bank(&toy_cfg(2, 2), 3).unwrap();
        let x = patches(1);
        assert_eq!(
            encode_visual(&model, &x, &bank, DomainTag::Real.into()).unwrap(),
            encode_visual(&back, &x, &bank, DomainTag::Real.into()).unwrap()
        );
    }

    #[test]
    fn shape_errors() {
        let model = DualEncoder::<f64>::toy_default(1).unwrap();
        let bank = init_prompt_bank(&toy_cfg(2, 2), 3).unwrap();
        let bad = Matrix::<f64>::zeros(9, 31);
        assert!(matches!(
            encode_visual(&model, &bad, &bank, DomainTag::Real.into()),
            Err(Error::Shape { .. })
        ));
        let mut deep = toy_cfg(2, 2);
        deep.depth = 3;
        let bank = init_prompt_bank(&deep, 3).unwrap();
        assert!(matches!(
            encode_visual(&model, &patches(0), &bank, DomainTag::Real.into()),
            Err(Error::Config(_))
        ));
    }
}

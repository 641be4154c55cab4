//! Learnable prompt parameters and prompted token-sequence assembly.
//!
//! A [`PromptBank`] holds, for every prompted layer, four groups: real-domain
//! visual prompts, synthetic-domain visual prompts, visual prompts shared by
//! both domains, and textual prompts. A visual sequence for a real image is
//! `[real, shared, content]`; for a synthetic image `[synthetic, shared,
//! content]`. The IVLP baseline is the same bank with no domain prompts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Real,
    Synthetic,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Real => "real",
            DomainTag::Synthetic => "synthetic",
        }
    }
}

/// Which visual prompt groups a forward pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualRoute {
    Domain(DomainTag),
    /// Single undivided group: the shared prompts only.
    Ivlp,
}

impl From<DomainTag> for VisualRoute {
    fn from(d: DomainTag) -> Self {
        VisualRoute::Domain(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Segment {
    PromptReal,
    PromptSynth,
    PromptShared,
    PromptText,
    Content,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptGroup {
    RealVisual,
    SynthVisual,
    SharedVisual,
    Textual,
}

impl PromptGroup {
    pub const ALL: [PromptGroup; 4] = [
        PromptGroup::RealVisual,
        PromptGroup::SynthVisual,
        PromptGroup::SharedVisual,
        PromptGroup::Textual,
    ];

    pub fn segment(self) -> Segment {
        match self {
            PromptGroup::RealVisual => Segment::PromptReal,
            PromptGroup::SynthVisual => Segment::PromptSynth,
            PromptGroup::SharedVisual => Segment::PromptShared,
            PromptGroup::Textual => Segment::PromptText,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            PromptGroup::RealVisual => "real_v",
            PromptGroup::SynthVisual => "synth_v",
            PromptGroup::SharedVisual => "shared_v",
            PromptGroup::Textual => "textual",
        }
    }
}

/// Visual prompt groups in concatenation order for `route`.
pub fn visual_groups(route: VisualRoute) -> &'static [PromptGroup] {
    match route {
        VisualRoute::Domain(DomainTag::Real) => &[PromptGroup::RealVisual, PromptGroup::SharedVisual],
        VisualRoute::Domain(DomainTag::Synthetic) => {
            &[PromptGroup::SynthVisual, PromptGroup::SharedVisual]
        }
        VisualRoute::Ivlp => &[PromptGroup::SharedVisual],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Real-domain visual prompts per layer.
    pub m1: usize,
    /// Synthetic-domain visual prompts per layer.
    pub m2: usize,
    /// Shared visual prompts per layer.
    pub n: usize,
    /// Textual prompts per layer.
    pub k: usize,
    /// Number of leading encoder layers that receive fresh prompts.
    pub depth: usize,
    pub embed_dim_v: usize,
    pub embed_dim_t: usize,
    pub init_scale: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            m1: 2,
            m2: 2,
            n: 2,
            k: 4,
            depth: 9,
            embed_dim_v: 768,
            embed_dim_t: 512,
            init_scale: 0.02,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n < 1 {
            problems.push("n (shared visual prompts) must be >= 1".to_string());
        }
        if self.k < 1 {
            problems.push("k (textual prompts) must be >= 1".to_string());
        }
        if self.depth < 1 {
            problems.push("depth must be >= 1".to_string());
        }
        if self.embed_dim_v == 0 || self.embed_dim_t == 0 {
            problems.push("embedding widths must be positive".to_string());
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            problems.push(format!("init_scale must be finite and >= 0, got {}", self.init_scale));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Checks depth and widths against the encoders the bank will be bound to.
    pub fn validate_against(
        &self,
        visual_layers: usize,
        text_layers: usize,
        visual_dim: usize,
        text_dim: usize,
    ) -> Result<()> {
        self.validate()?;
        if self.depth > visual_layers.min(text_layers) {
            return Err(Error::Config(format!(
                "prompt depth {} exceeds encoder layer count {}",
                self.depth,
                visual_layers.min(text_layers)
            )));
        }
        if self.embed_dim_v != visual_dim || self.embed_dim_t != text_dim {
            return Err(Error::Config(format!(
                "prompt widths ({}, {}) do not match encoder widths ({visual_dim}, {text_dim})",
                self.embed_dim_v, self.embed_dim_t
            )));
        }
        Ok(())
    }

    pub fn rows(&self, group: PromptGroup) -> usize {
        match group {
            PromptGroup::RealVisual => self.m1,
            PromptGroup::SynthVisual => self.m2,
            PromptGroup::SharedVisual => self.n,
            PromptGroup::Textual => self.k,
        }
    }

    pub fn width(&self, group: PromptGroup) -> usize {
        match group {
            PromptGroup::Textual => self.embed_dim_t,
            _ => self.embed_dim_v,
        }
    }

    /// Number of visual prompt tokens prepended for `route`.
    pub fn visual_prompt_len(&self, route: VisualRoute) -> usize {
        visual_groups(route).iter().map(|&g| self.rows(g)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank<T> {
    config: PromptConfig,
    real_v: Vec<Matrix<T>>,
    synth_v: Vec<Matrix<T>>,
    shared_v: Vec<Matrix<T>>,
    textual: Vec<Matrix<T>>,
}

/// Draws every prompt entry i.i.d. from `Normal(0, init_scale²)`.
pub fn init_prompt_bank<T: Real>(config: &PromptConfig, seed: u64) -> Result<PromptBank<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, config.init_scale)
        .map_err(|e| Error::Config(format!("init_scale: {e}")))?;
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| T::lit(normal.sample(&mut rng)))
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let mut groups: [Vec<Matrix<T>>; 4] = Default::default();
    for (slot, group) in groups.iter_mut().zip(PromptGroup::ALL) {
        *slot = (0..config.depth)
            .map(|_| draw(config.rows(group), config.width(group)))
            .collect();
    }
    let [real_v, synth_v, shared_v, textual] = groups;
    Ok(PromptBank {
        config: config.clone(),
        real_v,
        synth_v,
        shared_v,
        textual,
    })
}

impl<T: Real> PromptBank<T> {
    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn layers(&self, group: PromptGroup) -> &[Matrix<T>] {
        match group {
            PromptGroup::RealVisual => &self.real_v,
            PromptGroup::SynthVisual => &self.synth_v,
            PromptGroup::SharedVisual => &self.shared_v,
            PromptGroup::Textual => &self.textual,
        }
    }

    pub fn layers_mut(&mut self, group: PromptGroup) -> &mut [Matrix<T>] {
        match group {
            PromptGroup::RealVisual => &mut self.real_v,
            PromptGroup::SynthVisual => &mut self.synth_v,
            PromptGroup::SharedVisual => &mut self.shared_v,
            PromptGroup::Textual => &mut self.textual,
        }
    }

    pub fn get(&self, group: PromptGroup, layer: usize) -> Result<&Matrix<T>> {
        let layers = self.layers(group);
        layers.get(layer).ok_or(Error::Index {
            index: layer,
            len: layers.len(),
        })
    }

    pub fn is_finite(&self) -> bool {
        PromptGroup::ALL
            .iter()
            .all(|&g| self.layers(g).iter().all(Matrix::is_finite))
    }

    /// `(name, matrix)` for every group and layer, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for g in PromptGroup::ALL {
            for (l, m) in self.layers(g).iter().enumerate() {
                out.push((format!("prompts.{}.{l}", g.key()), m));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::new();
        let groups = [
            (PromptGroup::RealVisual, &mut self.real_v),
            (PromptGroup::SynthVisual, &mut self.synth_v),
            (PromptGroup::SharedVisual, &mut self.shared_v),
            (PromptGroup::Textual, &mut self.textual),
        ];
        for (g, layers) in groups {
            for (l, m) in layers.iter_mut().enumerate() {
                out.push((format!("prompts.{}.{l}", g.key()), m));
            }
        }
        out
    }

    /// Rebuilds a bank from named arrays, checking every shape.
    pub fn from_named(
        config: &PromptConfig,
        mut lookup: impl FnMut(&str) -> Result<Matrix<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut groups: [Vec<Matrix<T>>; 4] = Default::default();
        for (slot, g) in groups.iter_mut().zip(PromptGroup::ALL) {
            for l in 0..config.depth {
                let name = format!("prompts.{}.{l}", g.key());
                let m = lookup(&name)?;
                let expected = (config.rows(g), config.width(g));
                if m.shape() != expected {
                    return Err(Error::shape("prompt array", format!("{expected:?}"), format!("{:?}", m.shape())));
                }
                slot.push(m);
            }
        }
        let [real_v, synth_v, shared_v, textual] = groups;
        Ok(Self {
            config: config.clone(),
            real_v,
            synth_v,
            shared_v,
            textual,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Matrix<T>,
    pub segment_map: Vec<Segment>,
}

impl<T: Real> TokenSequence<T> {
    pub fn content(tokens: Matrix<T>) -> Self {
        let segment_map = vec![Segment::Content; tokens.rows()];
        Self {
            tokens,
            segment_map,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    /// Rows tagged as content, in order.
    pub fn content_tokens(&self) -> Matrix<T> {
        let first = self
            .segment_map
            .iter()
            .position(|&s| s == Segment::Content)
            .unwrap_or(self.len());
        self.tokens.slice_rows(first, self.len() - first)
    }
}

fn prepend<T: Real>(
    bank: &PromptBank<T>,
    groups: &[PromptGroup],
    content: &Matrix<T>,
    layer: usize,
    width: usize,
) -> Result<TokenSequence<T>> {
    if layer >= bank.depth() {
        return Err(Error::Index {
            index: layer,
            len: bank.depth(),
        });
    }
    if content.cols() != width {
        return Err(Error::shape("content token width", width, content.cols()));
    }
    let mut parts = Vec::with_capacity(groups.len() + 1);
    let mut segment_map = Vec::new();
    for &g in groups {
        let m = bank.get(g, layer)?;
        segment_map.extend(std::iter::repeat_n(g.segment(), m.rows()));
        parts.push(m);
    }
    parts.push(content);
    segment_map.extend(std::iter::repeat_n(Segment::Content, content.rows()));
    Ok(TokenSequence {
        tokens: Matrix::vstack(&parts),
        segment_map,
    })
}

/// `[domain prompts, shared prompts, content]` for one layer.
pub fn assemble_visual_input<T: Real>(
    patches: &Matrix<T>,
    bank: &PromptBank<T>,
    layer: usize,
    domain: DomainTag,
) -> Result<TokenSequence<T>> {
    prepend(
        bank,
        visual_groups(domain.into()),
        patches,
        layer,
        bank.config.embed_dim_v,
    )
}

pub fn assemble_ivlp_visual_input<T: Real>(
    patches: &Matrix<T>,
    bank: &PromptBank<T>,
    layer: usize,
) -> Result<TokenSequence<T>> {
    prepend(
        bank,
        visual_groups(VisualRoute::Ivlp),
        patches,
        layer,
        bank.config.embed_dim_v,
    )
}

/// Replaces the prompt rows of a previous layer's output with `layer`'s prompts.
pub fn reassemble_visual<T: Real>(
    previous: &TokenSequence<T>,
    bank: &PromptBank<T>,
    layer: usize,
    route: VisualRoute,
) -> Result<TokenSequence<T>> {
    prepend(
        bank,
        visual_groups(route),
        &previous.content_tokens(),
        layer,
        bank.config.embed_dim_v,
    )
}

/// `[textual prompts, class tokens]` for one layer.
pub fn assemble_text_input<T: Real>(
    class_tokens: &Matrix<T>,
    bank: &PromptBank<T>,
    layer: usize,
) -> Result<TokenSequence<T>> {
    if class_tokens.rows() == 0 {
        return Err(Error::Input("class token sequence is empty".into()));
    }
    prepend(
        bank,
        &[PromptGroup::Textual],
        class_tokens,
        layer,
        bank.config.embed_dim_t,
    )
}

/// Affine map `x·W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn random(input: usize, output: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = Matrix::from_vec(
            input,
            output,
            (0..input * output)
                .map(|_| T::lit(normal.sample(rng)))
                .collect(),
        );
        Self {
            weight,
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("linear input width", self.input_dim(), x.cols()));
        }
        let mut y = x.matmul(&self.weight);
        for i in 0..y.rows() {
            for (v, &b) in y.row_mut(i).iter_mut().zip(self.bias.as_slice()) {
                *v = *v + b;
            }
        }
        Ok(y)
    }
}

/// Two-layer image-to-prompt-shift network of the CoCoOp baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Real> MetaNet<T> {
    /// `hidden_width` defaults to `prompt_dim / 16` in [`MetaNet::init`].
    pub fn new(input: usize, hidden_width: usize, prompt_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = Linear::random(input, hidden_width, (1.0 / input as f64).sqrt(), &mut rng);
        let output = Linear::random(
            hidden_width,
            prompt_dim,
            (1.0 / hidden_width.max(1) as f64).sqrt() * 0.1,
            &mut rng,
        );
        Self { hidden, output }
    }

    pub fn init(input: usize, prompt_dim: usize, seed: u64) -> Self {
        Self::new(input, (prompt_dim / 16).max(1), prompt_dim, seed)
    }

    pub fn forward(&self, feature: &[T]) -> Result<Matrix<T>> {
        let x = Matrix::row_vector(feature.to_vec());
        let h = self.hidden.apply(&x)?.map(|v| v.max(T::zero()));
        self.output.apply(&h)
    }
}

/// Shifts every prompt row by the metanet's response to the image feature.
pub fn cocoop_condition<T: Real>(
    image_feature: &[T],
    base_prompts: &Matrix<T>,
    metanet: &MetaNet<T>,
) -> Result<Matrix<T>> {
    if metanet.output.output_dim() != base_prompts.cols() {
        return Err(Error::shape(
            "metanet output width",
            base_prompts.cols(),
            metanet.output.output_dim(),
        ));
    }
    let shift = metanet.forward(image_feature)?;
    let mut out = base_prompts.clone();
    for i in 0..out.rows() {
        for (v, &s) in out.row_mut(i).iter_mut().zip(shift.as_slice()) {
            *v = *v + s;
        }
    }
    Ok(out)
}

/// MaPLe coupling: visual prompts as a linear projection of textual prompts.
pub fn maple_project<T: Real>(textual_prompts: &Matrix<T>, projector: &Linear<T>) -> Result<Matrix<T>> {
    projector.apply(textual_prompts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Segment::*;

    fn cfg(m1: usize, m2: usize, n: usize, k: usize) -> PromptConfig {
        PromptConfig {
            m1,
            m2,
            n,
            k,
            depth: 3,
            embed_dim_v: 6,
            embed_dim_t: 5,
            init_scale: 0.02,
        }
    }

    fn patches(h: usize) -> Matrix<f64> {
        Matrix::from_vec(h, 6, (0..h * 6).map(|i| i as f64).collect())
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_prompt_bank::<f32>(&cfg(2, 2, 2, 4), 7).unwrap();
        let b = init_prompt_bank::<f32>(&cfg(2, 2, 2, 4), 7).unwrap();
        assert_eq!(a, b);
        let c = init_prompt_bank::<f32>(&cfg(2, 2, 2, 4), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_scale_gives_zero_prompts() {
        let mut c = cfg(2, 2, 2, 4);
        c.init_scale = 0.0;
        let bank = init_prompt_bank::<f64>(&c, 1).unwrap();
        for (_, m) in bank.named() {
            assert!(m.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn init_mean_within_three_sigma() {
        let mut c = cfg(2, 2, 2, 4);
        c.embed_dim_v = 64;
        c.embed_dim_t = 64;
        c.depth = 4;
        let bank = init_prompt_bank::<f64>(&c, 7).unwrap();
        let values: Vec<f64> = bank
            .named()
            .iter()
            .flat_map(|(_, m)| m.as_slice().to_vec())
            .collect();
        let count = values.len() as f64;
        let mean = values.iter().sum::<f64>() / count;
        assert!(mean.abs() <= 3.0 * c.init_scale / count.sqrt(), "mean {mean}");
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(
            init_prompt_bank::<f64>(&cfg(2, 2, 0, 4), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            init_prompt_bank::<f64>(&cfg(2, 2, 2, 0), 0),
            Err(Error::Config(_))
        ));
        let mut c = cfg(1, 1, 1, 1);
        c.depth = 0;
        assert!(c.validate().is_err());
        let c = cfg(1, 1, 1, 1);
        assert!(c.validate_against(2, 2, 6, 5).is_err());
        assert!(c.validate_against(3, 12, 6, 5).is_ok());
    }

    #[test]
    fn visual_assembly_layouts() {
        let bank = init_prompt_bank::<f64>(&cfg(2, 2, 2, 4), 7).unwrap();
        let x = patches(5);
        let real = assemble_visual_input(&x, &bank, 0, DomainTag::Real).unwrap();
        assert_eq!(real.len(), 9);
        assert_eq!(
            real.segment_map,
            vec![PromptReal, PromptReal, PromptShared, PromptShared, Content, Content, Content, Content, Content]
        );
        let synth = assemble_visual_input(&x, &bank, 0, DomainTag::Synthetic).unwrap();
        assert_eq!(synth.len(), 9);
        assert_eq!(&synth.segment_map[..2], &[PromptSynth, PromptSynth]);
        // shared rows are the same parameters in both domains
        assert_eq!(real.tokens.slice_rows(2, 2), synth.tokens.slice_rows(2, 2));
        assert_eq!(real.tokens.slice_rows(2, 2), *bank.get(PromptGroup::SharedVisual, 0).unwrap());
        assert_eq!(real.content_tokens(), x);

        let bank = init_prompt_bank::<f64>(&cfg(0, 2, 2, 4), 7).unwrap();
        let real = assemble_visual_input(&x, &bank, 0, DomainTag::Real).unwrap();
        assert_eq!(real.len(), 7);
        assert!(!real.segment_map.contains(&PromptReal));
    }

    #[test]
    fn layer_out_of_range() {
        let bank = init_prompt_bank::<f64>(&cfg(2, 2, 2, 4), 7).unwrap();
        assert!(matches!(
            assemble_visual_input(&patches(2), &bank, 3, DomainTag::Real),
            Err(Error::Index { index: 3, len: 3 })
        ));
    }

    #[test]
    fn ivlp_assembly() {
        let bank = init_prompt_bank::<f64>(&cfg(0, 0, 3, 4), 1).unwrap();
        let x = patches(4);
        let s = assemble_ivlp_visual_input(&x, &bank, 1).unwrap();
        assert_eq!(s.len(), 4 + 3);
        assert!(!s.segment_map.iter().any(|&g| g == PromptReal || g == PromptSynth));

        // deep prompting: layer-1 reassembly swaps in layer-1 prompts, keeps content
        let mut out0 = assemble_ivlp_visual_input(&x, &bank, 0).unwrap();
        out0.tokens = out0.tokens.map(|v| v * 2.0);
        let s1 = reassemble_visual(&out0, &bank, 1, VisualRoute::Ivlp).unwrap();
        assert_eq!(s1.tokens.slice_rows(0, 3), *bank.get(PromptGroup::SharedVisual, 1).unwrap());
        assert_eq!(s1.content_tokens(), x.map(|v| v * 2.0));
    }

    #[test]
    fn text_assembly() {
        let bank = init_prompt_bank::<f64>(&cfg(2, 2, 2, 4), 7).unwrap();
        let tokens = Matrix::from_vec(3, 5, (0..15).map(f64::from).collect());
        let s = assemble_text_input(&tokens, &bank, 0).unwrap();
        assert_eq!(s.len(), 7);
        assert_eq!(s, assemble_text_input(&tokens, &bank, 0).unwrap());

        let bank1 = init_prompt_bank::<f64>(&cfg(2, 2, 2, 1), 7).unwrap();
        let one = Matrix::from_vec(1, 5, vec![1.0; 5]);
        let s = assemble_text_input(&one, &bank1, 0).unwrap();
        assert_eq!(s.segment_map, vec![PromptText, Content]);

        assert!(matches!(
            assemble_text_input(&Matrix::<f64>::zeros(0, 5), &bank, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn cocoop_shift() {
        let base = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let zero = MetaNet {
            hidden: Linear::<f64>::zeros(2, 1),
            output: Linear::zeros(1, 2),
        };
        assert_eq!(cocoop_condition(&[0.3, -0.7], &base, &zero).unwrap(), base);

        // identity-like: hidden = I (relu passes positives), output = I
        let ident = MetaNet {
            hidden: Linear {
                weight: Matrix::identity(2),
                bias: Matrix::zeros(1, 2),
            },
            output: Linear {
                weight: Matrix::identity(2),
                bias: Matrix::zeros(1, 2),
            },
        };
        let out = cocoop_condition(&[0.5, 1.5], &base, &ident).unwrap();
        assert_eq!(out.as_slice(), &[1.5, 3.5, 3.5, 5.5]);
        let again = cocoop_condition(&[0.5, 1.5], &base, &ident).unwrap();
        assert_eq!(out, again);

        let wide = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(cocoop_condition(&[0.5, 1.5], &wide, &ident), Err(Error::Shape { .. })));
    }

    #[test]
    fn maple_projection() {
        let p = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let id = Linear {
            weight: Matrix::identity(2),
            bias: Matrix::zeros(1, 2),
        };
        assert_eq!(maple_project(&p, &id).unwrap(), p);
        assert!(maple_project(&p, &Linear::zeros(2, 3))
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        // [[1,2],[3,4]] · [[0,1],[2,-1]] = [[4,-1],[8,-1]]
        let w = Linear {
            weight: Matrix::from_vec(2, 2, vec![0.0, 1.0, 2.0, -1.0]),
            bias: Matrix::zeros(1, 2),
        };
        assert_eq!(maple_project(&p, &w).unwrap().as_slice(), &[4.0, -1.0, 8.0, -1.0]);
        assert!(maple_project(&Matrix::<f64>::zeros(2, 3), &w).is_err());
    }
}

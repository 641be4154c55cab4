//! The trainable parameter set for each method variant and its forward passes.

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{Tape, Var};
use crate::encoders::{
    encode_text_var, encode_visual_var, tokenizer, BoundPrompts, DualEncoder, Embedding,
};
use crate::error::{Error, Result};
use crate::prompts::{init_prompt_bank, Linear, MetaNet, PromptBank, PromptConfig, PromptGroup, VisualRoute};
use crate::tensor::{Matrix, Real};

/// Which prompt-learning variant is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Domain-split visual prompts plus shared prompts.
    #[default]
    SyncClip,
    /// One visual prompt group used for every image.
    Ivlp,
    /// Textual prompts shifted by a metanet applied to the image feature.
    Cocoop,
    /// Shared visual prompts projected from the textual prompts.
    Maple,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::SyncClip => "sync-clip",
            Baseline::Ivlp => "ivlp",
            Baseline::Cocoop => "cocoop",
            Baseline::Maple => "maple",
        }
    }

    /// Every violated constraint between this variant and `cfg`.
    pub fn violations(self, cfg: &PromptConfig) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Baseline::Ivlp if cfg.m1 != 0 || cfg.m2 != 0 => out.push(format!(
                "baseline ivlp requires m1 = 0 and m2 = 0 (got m1 = {}, m2 = {})",
                cfg.m1, cfg.m2
            )),
            Baseline::Maple if cfg.n != cfg.k => out.push(format!(
                "baseline maple projects textual prompts onto shared visual prompts and needs n = k (got n = {}, k = {})",
                cfg.n, cfg.k
            )),
            _ => {}
        }
        out
    }

    pub fn check(self, cfg: &PromptConfig) -> Result<()> {
        let v = self.violations(cfg);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync-clip" => Ok(Baseline::SyncClip),
            "ivlp" => Ok(Baseline::Ivlp),
            "cocoop" => Ok(Baseline::Cocoop),
            "maple" => Ok(Baseline::Maple),
            other => Err(Error::Config(format!(
                "unknown baseline {other:?} (expected sync-clip, ivlp, cocoop or maple)"
            ))),
        }
    }
}

/// Prompts plus the optional metanet or projectors of a variant.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams<T> {
    pub baseline: Baseline,
    pub bank: PromptBank<T>,
    pub metanet: Option<MetaNet<T>>,
    /// One projector per prompted layer (MaPLe only).
    pub projectors: Vec<Linear<T>>,
}

impl<T: Real> PromptParams<T> {
    pub fn init(baseline: Baseline, cfg: &PromptConfig, model: &DualEncoder<T>, seed: u64) -> Result<Self> {
        baseline.check(cfg)?;
        cfg.validate_against(
            model.visual.spec().n_layers,
            model.text.spec().n_layers,
            model.visual.spec().embed_dim,
            model.text.spec().embed_dim,
        )?;
        let bank = init_prompt_bank(cfg, seed)?;
        let metanet = (baseline == Baseline::Cocoop)
            .then(|| MetaNet::init(model.output_dim(), cfg.embed_dim_t, seed.wrapping_add(0x5eed)));
        let projectors = if baseline == Baseline::Maple {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed.wrapping_add(0x9a9e));
            let std = (1.0 / cfg.embed_dim_t as f64).sqrt();
            (0..cfg.depth)
                .map(|_| Linear::random(cfg.embed_dim_t, cfg.embed_dim_v, std, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            baseline,
            bank,
            metanet,
            projectors,
        })
    }

    pub fn config(&self) -> &PromptConfig {
        self.bank.config()
    }

    pub fn named(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = self.bank.named();
        if let Some(m) = &self.metanet {
            out.push(("metanet.hidden.weight".into(), &m.hidden.weight));
            out.push(("metanet.hidden.bias".into(), &m.hidden.bias));
            out.push(("metanet.output.weight".into(), &m.output.weight));
            out.push(("metanet.output.bias".into(), &m.output.bias));
        }
        for (l, p) in self.projectors.iter().enumerate() {
            out.push((format!("projector.{l}.weight"), &p.weight));
            out.push((format!("projector.{l}.bias"), &p.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = self.bank.named_mut();
        if let Some(m) = &mut self.metanet {
            out.push(("metanet.hidden.weight".into(), &mut m.hidden.weight));
            out.push(("metanet.hidden.bias".into(), &mut m.hidden.bias));
            out.push(("metanet.output.weight".into(), &mut m.output.weight));
            out.push(("metanet.output.bias".into(), &mut m.output.bias));
        }
        for (l, p) in self.projectors.iter_mut().enumerate() {
            out.push((format!("projector.{l}.weight"), &mut p.weight));
            out.push((format!("projector.{l}.bias"), &mut p.bias));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }

    pub fn export(&self, archive: &mut Archive) {
        self.export_with_prefix(archive, "");
    }

    /// Writes every entry under `prefix`, so several sets can share one archive.
    pub fn export_with_prefix(&self, archive: &mut Archive, prefix: &str) {
        archive.put_text(format!("{prefix}baseline"), self.baseline.as_str());
        archive.put_text(
            format!("{prefix}prompt_config"),
            toml::to_string(self.config()).expect("prompt config serializes"),
        );
        for (name, m) in self.named() {
            archive.put_matrix(format!("{prefix}{name}"), m);
        }
    }

    pub fn import(archive: &Archive) -> Result<Self> {
        Self::import_with_prefix(archive, "")
    }

    pub fn import_with_prefix(archive: &Archive, prefix: &str) -> Result<Self> {
        let key = |name: &str| format!("{prefix}{name}");
        let baseline: Baseline = archive.text(&key("baseline"))?.parse()?;
        let cfg: PromptConfig = toml::from_str(archive.text(&key("prompt_config"))?)
            .map_err(|e| Error::Config(format!("stored prompt config: {e}")))?;
        let bank = PromptBank::from_named(&cfg, |name| archive.matrix(&key(name)))?;
        let linear = |p: &str| -> Result<Linear<T>> {
            Ok(Linear {
                weight: archive.matrix(&key(&format!("{p}.weight")))?,
                bias: archive.matrix(&key(&format!("{p}.bias")))?,
            })
        };
        let metanet = if archive.contains(&key("metanet.hidden.weight")) {
            Some(MetaNet {
                hidden: linear("metanet.hidden")?,
                output: linear("metanet.output")?,
            })
        } else {
            None
        };
        let projectors = (0..cfg.depth)
            .take_while(|l| archive.contains(&key(&format!("projector.{l}.weight"))))
            .map(|l| linear(&format!("projector.{l}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            baseline,
            bank,
            metanet,
            projectors,
        })
    }

    /// Places every parameter on `tape` in [`named`](Self::named) order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let mut prompts = BoundPrompts::bind(tape, &self.bank, trainable);
        let mut leaves: Vec<Var> = PromptGroup::ALL
            .iter()
            .flat_map(|&g| prompts.group(g).to_vec())
            .collect();
        let mut leaf = |tape: &mut Tape<T>, m: &Matrix<T>| {
            let v = if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            };
            leaves.push(v);
            v
        };
        let metanet = self.metanet.as_ref().map(|m| {
            [
                leaf(tape, &m.hidden.weight),
                leaf(tape, &m.hidden.bias),
                leaf(tape, &m.output.weight),
                leaf(tape, &m.output.bias),
            ]
        });
        if !self.projectors.is_empty() {
            let textual = prompts.group(PromptGroup::Textual).to_vec();
            let mut projected = Vec::with_capacity(textual.len());
            for (p, &t) in self.projectors.iter().zip(&textual) {
                let w = leaf(tape, &p.weight);
                let b = leaf(tape, &p.bias);
                let y = tape.matmul(t, w);
                projected.push(tape.add_row(y, b));
            }
            prompts.replace(PromptGroup::SharedVisual, projected);
        }
        BoundParams {
            prompts,
            leaves,
            metanet,
        }
    }

    pub fn embed_image(&self, model: &DualEncoder<T>, patches: &Matrix<T>, route: VisualRoute) -> Result<Embedding<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let v = bound.image(&mut tape, model, patches, route)?;
        finish(&tape, v)
    }

    /// Class text embeddings; `image` conditions them for the CoCoOp variant.
    pub fn embed_classes(
        &self,
        model: &DualEncoder<T>,
        class_tokens: &[Matrix<T>],
        image: Option<&Embedding<T>>,
    ) -> Result<Vec<Embedding<T>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let feature = match (image, bound.metanet.is_some()) {
            (Some(e), true) => Some(tape.constant(Matrix::row_vector(e.vector().to_vec()))),
            (None, true) => {
                return Err(Error::Input("the cocoop variant needs an image to condition text prompts".into()))
            }
            _ => None,
        };
        let shift = bound.metanet_shift(&mut tape, feature);
        class_tokens
            .iter()
            .map(|tokens| {
                let v = encode_text_var(&mut tape, model, &bound.prompts, tokens, shift)?;
                finish(&tape, v)
            })
            .collect()
    }

    pub fn needs_image_for_text(&self) -> bool {
        self.metanet.is_some()
    }
}

/// Token embeddings of every class prompt, in the order of `names`.
pub fn class_tokens<T: Real>(model: &DualEncoder<T>, names: &[String], template: &str) -> Result<Vec<Matrix<T>>> {
    names
        .iter()
        .map(|n| model.text.embed_text(&tokenizer::fill_template(template, n)?))
        .collect()
}

fn finish<T: Real>(tape: &Tape<T>, v: Var) -> Result<Embedding<T>> {
    let m = tape.value(v);
    if !m.is_finite() {
        return Err(Error::Numeric("non-finite activation in encoder".into()));
    }
    Embedding::new(m.as_slice().to_vec())
}

/// Parameters of a [`PromptParams`] placed on one tape.
pub struct BoundParams {
    pub prompts: BoundPrompts,
    leaves: Vec<Var>,
    metanet: Option<[Var; 4]>,
}

impl BoundParams {
    /// Leaf variables aligned with [`PromptParams::named`].
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn image<T: Real>(
        &self,
        tape: &mut Tape<T>,
        model: &DualEncoder<T>,
        patches: &Matrix<T>,
        route: VisualRoute,
    ) -> Result<Var> {
        encode_visual_var(tape, model, &self.prompts, patches, route)
    }

    fn metanet_shift<T: Real>(&self, tape: &mut Tape<T>, feature: Option<Var>) -> Option<Var> {
        let [hw, hb, ow, ob] = self.metanet?;
        let x = feature?;
        let h = tape.matmul(x, hw);
        let h = tape.add_row(h, hb);
        let h = tape.relu(h);
        let y = tape.matmul(h, ow);
        Some(tape.add_row(y, ob))
    }

    /// Stacks one text embedding row per class. `image` is the `1 × d`
    /// image embedding used by the metanet when one is bound.
    pub fn text_matrix<T: Real>(
        &self,
        tape: &mut Tape<T>,
        model: &DualEncoder<T>,
        class_tokens: &[Matrix<T>],
        image: Option<Var>,
    ) -> Result<Var> {
        if self.metanet.is_some() && image.is_none() {
            return Err(Error::Input("the cocoop variant needs an image to condition text prompts".into()));
        }
        let shift = self.metanet_shift(tape, image);
        let rows = class_tokens
            .iter()
            .map(|t| encode_text_var(tape, model, &self.prompts, t, shift))
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_rows(&rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderSpec;
    use crate::prompts::DomainTag;

    fn cfg() -> PromptConfig {
        PromptConfig {
            m1: 0,
            m2: 0,
            n: 2,
            k: 2,
            depth: 2,
            embed_dim_v: 32,
            embed_dim_t: 32,
            init_scale: 0.02,
        }
    }

    #[test]
    fn baseline_constraints() {
        let mut c = cfg();
        c.m1 = 2;
        assert!(Baseline::Ivlp.check(&c).is_err());
        assert!(Baseline::SyncClip.check(&c).is_ok());
        c.k = 3;
        assert!(Baseline::Maple.check(&c).is_err());
        assert_eq!("sync-clip".parse::<Baseline>().unwrap(), Baseline::SyncClip);
    }

    #[test]
    fn variants_round_trip_and_embed() {
        let model = DualEncoder::<f64>::toy(EncoderSpec::toy_visual(), EncoderSpec::toy_text(), 3).unwrap();
        let names = vec!["dog".to_string(), "cat".to_string()];
        let tokens = class_tokens(&model, &names, "a photo of a [CLS].").unwrap();
        let patches = Matrix::filled(9, 32, 0.1);
        for b in [Baseline::SyncClip, Baseline::Ivlp, Baseline::Cocoop, Baseline::Maple] {
            let p = PromptParams::init(b, &cfg(), &model, 1).unwrap();
            let mut a = Archive::new();
            p.export(&mut a);
            let back = PromptParams::<f64>::import(&Archive::from_bytes(&a.to_bytes(), "x".as_ref()).unwrap()).unwrap();
            assert_eq!(back, p);
            let img = p.embed_image(&model, &patches, DomainTag::Real.into()).unwrap();
            let cls = p.embed_classes(&model, &tokens, Some(&img)).unwrap();
            assert_eq!(cls.len(), 2);
            assert_eq!(p.bind(&mut Tape::new(), true).leaves().len(), p.named().len());
        }
    }
}

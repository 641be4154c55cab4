//! Small pre-norm transformer used as the frozen desk-scale backbone.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tokenizer::{Tokenizer, SOT};
use super::{Backbone, EncoderSpec, TextBackbone, VisualBackbone};
use crate::archive::Archive;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

type W<T> = Arc<Matrix<T>>;

#[derive(Debug, Clone)]
struct Block<T> {
    ln1_g: W<T>,
    ln1_b: W<T>,
    wq: Vec<W<T>>,
    wk: Vec<W<T>>,
    wv: Vec<W<T>>,
    wo: W<T>,
    bo: W<T>,
    ln2_g: W<T>,
    ln2_b: W<T>,
    w1: W<T>,
    b1: W<T>,
    w2: W<T>,
    b2: W<T>,
}

/// Transformer stack with a class-token readout and a linear head.
#[derive(Debug, Clone)]
pub struct ToyTransformer<T> {
    spec: EncoderSpec,
    blocks: Vec<Block<T>>,
    /// Frozen token placed before the content; its final state is read out.
    prefix: Option<W<T>>,
    pos: W<T>,
    lnf_g: W<T>,
    lnf_b: W<T>,
    head: W<T>,
}

const LN_EPS: f64 = 1e-5;

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Real>(&mut self, rows: usize, cols: usize, std: f64) -> W<T> {
        let d = Normal::new(0.0, std).expect("finite std");
        Arc::new(Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| T::lit(d.sample(&mut self.rng)))
                .collect(),
        ))
    }
}

impl<T: Real> ToyTransformer<T> {
    /// Random frozen weights scaled to keep activations O(1).
    pub fn random(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let dh = d / spec.n_heads;
        let hidden = spec.mlp_width;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let ones = Arc::new(Matrix::filled(1, d, T::one()));
        let zeros = Arc::new(Matrix::zeros(1, d));
        let s = (1.0 / d as f64).sqrt();
        let blocks = (0..spec.n_layers)
            .map(|_| Block {
                ln1_g: ones.clone(),
                ln1_b: zeros.clone(),
                wq: (0..spec.n_heads).map(|_| init.normal(d, dh, s)).collect(),
                wk: (0..spec.n_heads).map(|_| init.normal(d, dh, s)).collect(),
                wv: (0..spec.n_heads).map(|_| init.normal(d, dh, s)).collect(),
                wo: init.normal(d, d, s),
                bo: zeros.clone(),
                ln2_g: ones.clone(),
                ln2_b: zeros.clone(),
                w1: init.normal(d, hidden, s),
                b1: Arc::new(Matrix::zeros(1, hidden)),
                w2: init.normal(hidden, d, (1.0 / hidden as f64).sqrt()),
                b2: zeros.clone(),
            })
            .collect();
        let prefix = spec.class_token.then(|| init.normal(1, d, 1.0));
        let pos = init.normal(spec.max_tokens + 1, d, 0.1);
        let head = init.normal(d, spec.output_dim, s);
        Ok(Self {
            spec,
            blocks,
            prefix,
            pos,
            lnf_g: ones,
            lnf_b: zeros,
            head,
        })
    }

    /// Blocks whose attention computes `softmax(x xᵀ/√dₕ)·x` per head with
    /// `W_q = W_k = W_v = W_o = I`, a zero MLP, no normalization, no
    /// positional embedding and no prefix token. `attention_out_scale`
    /// multiplies `W_o`.
    pub fn identity(spec: EncoderSpec, head: Matrix<T>, attention_out_scale: T) -> Result<Self> {
        let spec = EncoderSpec {
            layer_norm: false,
            class_token: false,
            ..spec
        };
        spec.validate()?;
        if head.shape() != (spec.embed_dim, spec.output_dim) {
            return Err(Error::shape(
                "identity head",
                format!("{:?}", (spec.embed_dim, spec.output_dim)),
                format!("{:?}", head.shape()),
            ));
        }
        let d = spec.embed_dim;
        let dh = d / spec.n_heads;
        let slice = |h: usize| {
            let mut m = Matrix::zeros(d, dh);
            for i in 0..dh {
                m[(h * dh + i, i)] = T::one();
            }
            Arc::new(m)
        };
        let zeros = Arc::new(Matrix::zeros(1, d));
        let ones = Arc::new(Matrix::filled(1, d, T::one()));
        let blocks = (0..spec.n_layers)
            .map(|_| Block {
                ln1_g: ones.clone(),
                ln1_b: zeros.clone(),
                wq: (0..spec.n_heads).map(slice).collect(),
                wk: (0..spec.n_heads).map(slice).collect(),
                wv: (0..spec.n_heads).map(slice).collect(),
                wo: Arc::new(Matrix::identity(d).scale(attention_out_scale)),
                bo: zeros.clone(),
                ln2_g: ones.clone(),
                ln2_b: zeros.clone(),
                w1: Arc::new(Matrix::zeros(d, spec.mlp_width)),
                b1: Arc::new(Matrix::zeros(1, spec.mlp_width)),
                w2: Arc::new(Matrix::zeros(spec.mlp_width, d)),
                b2: zeros.clone(),
            })
            .collect();
        Ok(Self {
            pos: Arc::new(Matrix::zeros(spec.max_tokens + 1, d)),
            spec,
            blocks,
            prefix: None,
            lnf_g: ones,
            lnf_b: zeros,
            head: Arc::new(head),
        })
    }

    /// Mutable access to the readout head; only used to tamper with a frozen model in checks.
    pub fn head_mut(&mut self) -> &mut Matrix<T> {
        Arc::make_mut(&mut self.head)
    }

    /// Replaces the readout head, keeping everything else.
    pub fn with_head(mut self, head: Matrix<T>) -> Result<Self> {
        let want = (self.spec.embed_dim, self.spec.output_dim);
        if head.shape() != want {
            return Err(Error::shape("head", format!("{want:?}"), format!("{:?}", head.shape())));
        }
        self.head = Arc::new(head);
        Ok(self)
    }

    /// Unprompted readout state before the head is applied.
    pub fn features(&self, content: &Matrix<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let mut x = self.prepare(&mut tape, content)?;
        for layer in 0..self.spec.n_layers {
            x = self.block(&mut tape, layer, x);
        }
        let first = tape.slice_rows(x, 0, 1);
        let h = self.norm(&mut tape, first, &self.lnf_g, &self.lnf_b);
        Ok(tape.value(h).as_slice().to_vec())
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, g: &W<T>, b: &W<T>) -> Var {
        if self.spec.layer_norm {
            tape.layer_norm(x, g, b, T::lit(LN_EPS))
        } else {
            x
        }
    }

    fn attention(&self, tape: &mut Tape<T>, blk: &Block<T>, x: Var) -> Var {
        let dh = self.spec.embed_dim / self.spec.n_heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.spec.n_heads)
            .map(|h| {
                let q = tape.matmul_const(x, &blk.wq[h]);
                let k = tape.matmul_const(x, &blk.wk[h]);
                let v = tape.matmul_const(x, &blk.wv[h]);
                let scores = tape.matmul_t(q, k);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                tape.matmul(attn, v)
            })
            .collect();
        let cat = tape.concat_cols(&heads);
        let out = tape.matmul_const(cat, &blk.wo);
        tape.add_row_const(out, &blk.bo)
    }

    /// Writes every frozen weight under `prefix.`.
    pub fn export(&self, prefix: &str, archive: &mut Archive) {
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.block{l}");
            archive.put_matrix(format!("{p}.ln1_g"), &b.ln1_g);
            archive.put_matrix(format!("{p}.ln1_b"), &b.ln1_b);
            for h in 0..b.wq.len() {
                archive.put_matrix(format!("{p}.wq{h}"), &b.wq[h]);
                archive.put_matrix(format!("{p}.wk{h}"), &b.wk[h]);
                archive.put_matrix(format!("{p}.wv{h}"), &b.wv[h]);
            }
            archive.put_matrix(format!("{p}.wo"), &b.wo);
            archive.put_matrix(format!("{p}.bo"), &b.bo);
            archive.put_matrix(format!("{p}.ln2_g"), &b.ln2_g);
            archive.put_matrix(format!("{p}.ln2_b"), &b.ln2_b);
            archive.put_matrix(format!("{p}.w1"), &b.w1);
            archive.put_matrix(format!("{p}.b1"), &b.b1);
            archive.put_matrix(format!("{p}.w2"), &b.w2);
            archive.put_matrix(format!("{p}.b2"), &b.b2);
        }
        if let Some(cls) = &self.prefix {
            archive.put_matrix(format!("{prefix}.class_token"), cls);
        }
        archive.put_matrix(format!("{prefix}.pos"), &self.pos);
        archive.put_matrix(format!("{prefix}.lnf_g"), &self.lnf_g);
        archive.put_matrix(format!("{prefix}.lnf_b"), &self.lnf_b);
        archive.put_matrix(format!("{prefix}.head"), &self.head);
        archive.put_text(
            format!("{prefix}.spec"),
            toml::to_string(&self.spec).expect("spec serializes"),
        );
    }

    pub fn import(prefix: &str, archive: &Archive) -> Result<Self> {
        let spec: EncoderSpec = toml::from_str(archive.text(&format!("{prefix}.spec"))?)
            .map_err(|e| Error::Config(format!("encoder spec: {e}")))?;
        spec.validate()?;
        let get = |name: String| archive.matrix::<T>(&name).map(Arc::new);
        let blocks = (0..spec.n_layers)
            .map(|l| {
                let p = format!("{prefix}.block{l}");
                Ok(Block {
                    ln1_g: get(format!("{p}.ln1_g"))?,
                    ln1_b: get(format!("{p}.ln1_b"))?,
                    wq: (0..spec.n_heads)
                        .map(|h| get(format!("{p}.wq{h}")))
                        .collect::<Result<_>>()?,
                    wk: (0..spec.n_heads)
                        .map(|h| get(format!("{p}.wk{h}")))
                        .collect::<Result<_>>()?,
                    wv: (0..spec.n_heads)
                        .map(|h| get(format!("{p}.wv{h}")))
                        .collect::<Result<_>>()?,
                    wo: get(format!("{p}.wo"))?,
                    bo: get(format!("{p}.bo"))?,
                    ln2_g: get(format!("{p}.ln2_g"))?,
                    ln2_b: get(format!("{p}.ln2_b"))?,
                    w1: get(format!("{p}.w1"))?,
                    b1: get(format!("{p}.b1"))?,
                    w2: get(format!("{p}.w2"))?,
                    b2: get(format!("{p}.b2"))?,
                })
            })
            .collect::<Result<_>>()?;
        let prefix_token = if spec.class_token {
            Some(get(format!("{prefix}.class_token"))?)
        } else {
            None
        };
        Ok(Self {
            blocks,
            prefix: prefix_token,
            pos: get(format!("{prefix}.pos"))?,
            lnf_g: get(format!("{prefix}.lnf_g"))?,
            lnf_b: get(format!("{prefix}.lnf_b"))?,
            head: get(format!("{prefix}.head"))?,
            spec,
        })
    }
}

impl<T: Real> Backbone<T> for ToyTransformer<T> {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn prepare(&self, tape: &mut Tape<T>, content: &Matrix<T>) -> Result<Var> {
        if content.cols() != self.spec.embed_dim {
            return Err(Error::shape("content width", self.spec.embed_dim, content.cols()));
        }
        if content.rows() > self.spec.max_tokens {
            return Err(Error::shape(
                "content length",
                format!("<= {}", self.spec.max_tokens),
                content.rows(),
            ));
        }
        let mut x = match &self.prefix {
            Some(cls) => Matrix::vstack(&[cls, content]),
            None => content.clone(),
        };
        for i in 0..x.rows() {
            for (v, &p) in x.row_mut(i).iter_mut().zip(self.pos.row(i)) {
                *v = *v + p;
            }
        }
        Ok(tape.constant(x))
    }

    fn block(&self, tape: &mut Tape<T>, layer: usize, x: Var) -> Var {
        let blk = &self.blocks[layer];
        let h = self.norm(tape, x, &blk.ln1_g, &blk.ln1_b);
        let a = self.attention(tape, blk, h);
        let x = tape.add(x, a);
        let h = self.norm(tape, x, &blk.ln2_g, &blk.ln2_b);
        let h = tape.matmul_const(h, &blk.w1);
        let h = tape.add_row_const(h, &blk.b1);
        let h = tape.gelu(h);
        let h = tape.matmul_const(h, &blk.w2);
        let h = tape.add_row_const(h, &blk.b2);
        tape.add(x, h)
    }

    fn readout(&self, tape: &mut Tape<T>, first_content: Var) -> Var {
        let h = self.norm(tape, first_content, &self.lnf_g, &self.lnf_b);
        tape.matmul_const(h, &self.head)
    }

    fn export(&self, prefix: &str, archive: &mut Archive) {
        ToyTransformer::export(self, prefix, archive)
    }
}

/// Toy image tower: pixels → frozen patch projection → transformer.
#[derive(Debug, Clone)]
pub struct ToyVisualEncoder<T> {
    pub core: ToyTransformer<T>,
    patch_proj: W<T>,
    patch_px: usize,
}

impl<T: Real> ToyVisualEncoder<T> {
    pub fn random(spec: EncoderSpec, seed: u64) -> Result<Self> {
        let grid = (spec.max_tokens as f64).sqrt().round() as usize;
        if grid * grid != spec.max_tokens {
            return Err(Error::Config(format!(
                "visual patch count {} is not a square grid",
                spec.max_tokens
            )));
        }
        let patch_px = 4;
        let core = ToyTransformer::random(spec, seed)?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9a7c),
        };
        let fan_in = 3 * patch_px * patch_px;
        let patch_proj = init.normal(fan_in, core.spec.embed_dim, (1.0 / fan_in as f64).sqrt() * 2.0);
        Ok(Self {
            core,
            patch_proj,
            patch_px,
        })
    }

    pub fn from_core(core: ToyTransformer<T>) -> Self {
        let patch_px = 4;
        let fan_in = 3 * patch_px * patch_px;
        let patch_proj = Arc::new(Matrix::zeros(fan_in, core.spec.embed_dim));
        Self {
            core,
            patch_proj,
            patch_px,
        }
    }

    pub fn import(prefix: &str, archive: &Archive) -> Result<Self> {
        let core = ToyTransformer::import(prefix, archive)?;
        let patch_proj = Arc::new(archive.matrix(&format!("{prefix}.patch_proj"))?);
        Ok(Self {
            core,
            patch_proj,
            patch_px: 4,
        })
    }
}

impl<T: Real> Backbone<T> for ToyVisualEncoder<T> {
    fn spec(&self) -> &EncoderSpec {
        self.core.spec()
    }
    fn prepare(&self, tape: &mut Tape<T>, content: &Matrix<T>) -> Result<Var> {
        self.core.prepare(tape, content)
    }
    fn block(&self, tape: &mut Tape<T>, layer: usize, x: Var) -> Var {
        self.core.block(tape, layer, x)
    }
    fn readout(&self, tape: &mut Tape<T>, first_content: Var) -> Var {
        self.core.readout(tape, first_content)
    }
    fn export(&self, prefix: &str, archive: &mut Archive) {
        self.core.export(prefix, archive);
        archive.put_matrix(format!("{prefix}.patch_proj"), &self.patch_proj);
    }
}

impl<T: Real> VisualBackbone<T> for ToyVisualEncoder<T> {
    fn patchify(&self, image: &image::RgbImage) -> Matrix<T> {
        let grid = (self.core.spec.max_tokens as f64).sqrt().round() as u32;
        let px = self.patch_px as u32;
        let side = grid * px;
        let resized =
            image::imageops::resize(image, side, side, image::imageops::FilterType::Triangle);
        let fan_in = 3 * self.patch_px * self.patch_px;
        let mut raw = Matrix::zeros((grid * grid) as usize, fan_in);
        for gy in 0..grid {
            for gx in 0..grid {
                let row = raw.row_mut((gy * grid + gx) as usize);
                let mut k = 0;
                for y in 0..px {
                    for x in 0..px {
                        let p = resized.get_pixel(gx * px + x, gy * px + y);
                        for c in 0..3 {
                            row[k] = T::lit(f64::from(p[c]) / 127.5 - 1.0);
                            k += 1;
                        }
                    }
                }
            }
        }
        raw.matmul(&self.patch_proj)
    }
}

/// Toy text tower: tokenizer → frozen token table → transformer with an
/// `<sot>` prefix that is read out.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder<T> {
    pub core: ToyTransformer<T>,
    tokenizer: Tokenizer,
    table: W<T>,
}

impl<T: Real> ToyTextEncoder<T> {
    pub fn random(spec: EncoderSpec, seed: u64) -> Result<Self> {
        let spec = EncoderSpec {
            class_token: false,
            ..spec
        };
        let core = ToyTransformer::random(spec, seed)?;
        let tokenizer = Tokenizer::default();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_0001),
        };
        let table = init.normal(tokenizer.vocab_size(), core.spec.embed_dim, 1.0);
        Ok(Self {
            core,
            tokenizer,
            table,
        })
    }

    pub fn import(prefix: &str, archive: &Archive) -> Result<Self> {
        let core = ToyTransformer::import(prefix, archive)?;
        let table: Matrix<T> = archive.matrix(&format!("{prefix}.token_table"))?;
        let tokenizer = Tokenizer::with_vocab_size(table.rows());
        Ok(Self {
            core,
            tokenizer,
            table: Arc::new(table),
        })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }
}

impl<T: Real> Backbone<T> for ToyTextEncoder<T> {
    fn spec(&self) -> &EncoderSpec {
        self.core.spec()
    }
    fn prepare(&self, tape: &mut Tape<T>, content: &Matrix<T>) -> Result<Var> {
        self.core.prepare(tape, content)
    }
    fn block(&self, tape: &mut Tape<T>, layer: usize, x: Var) -> Var {
        self.core.block(tape, layer, x)
    }
    fn readout(&self, tape: &mut Tape<T>, first_content: Var) -> Var {
        self.core.readout(tape, first_content)
    }
    fn export(&self, prefix: &str, archive: &mut Archive) {
        self.core.export(prefix, archive);
        archive.put_matrix(format!("{prefix}.token_table"), &self.table);
    }
}

impl<T: Real> TextBackbone<T> for ToyTextEncoder<T> {
    fn embed_text(&self, text: &str) -> Result<Matrix<T>> {
        let mut ids = vec![SOT];
        ids.extend(self.tokenizer.encode(text)?);
        if ids.len() > self.core.spec.max_tokens {
            return Err(Error::Tokenizer(format!(
                "{} tokens exceed the text context of {}",
                ids.len(),
                self.core.spec.max_tokens
            )));
        }
        let rows: Vec<&[T]> = ids.iter().map(|&i| self.table.row(i)).collect();
        let mut m = Matrix::zeros(rows.len(), self.core.spec.embed_dim);
        for (i, r) in rows.into_iter().enumerate() {
            m.row_mut(i).copy_from_slice(r);
        }
        Ok(m)
    }

    fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![SOT];
        ids.extend(self.tokenizer.encode(text)?);
        Ok(ids)
    }
}

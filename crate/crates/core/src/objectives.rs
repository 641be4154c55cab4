//! Classification probabilities and the three training losses.
//!
//! Two parallel implementations live here. The value-level functions take
//! finished [`Embedding`]s and are used for reporting and as test oracles.
//! The `*_var` functions build the same quantities on a [`Tape`] so the
//! trainer can differentiate them with respect to prompts.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::tensor::{dot, Real};

/// Logit scale used when none is configured.
pub const DEFAULT_TEMPERATURE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the synthetic-domain cross-entropy.
    pub alpha: f64,
    /// Weight of the cross-domain alignment term.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// How per-sample terms are combined within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn apply<T: Real>(self, total: T, count: usize) -> T {
        match self {
            Reduction::Mean if count > 0 => total / T::lit(count as f64),
            _ => total,
        }
    }
}

/// Text embeddings for an ordered label space, keyed by class id.
#[derive(Debug, Clone)]
pub struct ClassEmbeddings<T> {
    ids: Vec<usize>,
    embs: Vec<Embedding<T>>,
}

impl<T: Real> ClassEmbeddings<T> {
    pub fn new(ids: Vec<usize>, embs: Vec<Embedding<T>>) -> Result<Self> {
        if ids.len() != embs.len() {
            return Err(Error::shape("class embedding count", ids.len(), embs.len()));
        }
        Ok(Self { ids, embs })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[Embedding<T>] {
        &self.embs
    }

    pub fn position(&self, class_id: usize) -> Option<usize> {
        self.ids.iter().position(|&c| c == class_id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Restriction to `subset`, in the order given.
    pub fn restrict(&self, subset: &[usize]) -> Result<Self> {
        let mut ids = Vec::with_capacity(subset.len());
        let mut embs = Vec::with_capacity(subset.len());
        for &c in subset {
            let i = self.position(c).ok_or(Error::Label {
                label: c,
                space: "embedded",
            })?;
            ids.push(c);
            embs.push(self.embs[i].clone());
        }
        Ok(Self { ids, embs })
    }
}

/// A synthetic anchor, a real same-class positive and a real other-class negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet<T> {
    pub anchor: Embedding<T>,
    pub positive: Embedding<T>,
    pub negative: Embedding<T>,
}

pub fn cosine_sim<T: Real>(u: &Embedding<T>, v: &Embedding<T>) -> Result<T> {
    if u.dim() != v.dim() {
        return Err(Error::shape("cosine operands", u.dim(), v.dim()));
    }
    if u.norm() == T::zero() || v.norm() == T::zero() {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    let c = dot(u.vector(), v.vector()) / (u.norm() * v.norm());
    Ok(c.max(-T::one()).min(T::one()))
}

/// Softmax over `temperature · cos(f_img, class)` for every class.
pub fn class_probabilities<T: Real>(
    f_img: &Embedding<T>,
    class_embs: &[Embedding<T>],
    temperature: T,
) -> Result<Vec<T>> {
    if class_embs.is_empty() {
        return Err(Error::Input("no candidate classes".into()));
    }
    if !(temperature > T::zero()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let logits = class_embs
        .iter()
        .map(|c| cosine_sim(f_img, c).map(|s| s * temperature))
        .collect::<Result<Vec<T>>>()?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn log_prob_of<T: Real>(
    f_img: &Embedding<T>,
    class_embs: &[Embedding<T>],
    target: usize,
    temperature: T,
) -> Result<T> {
    let logits = class_embs
        .iter()
        .map(|c| cosine_sim(f_img, c).map(|s| s * temperature))
        .collect::<Result<Vec<T>>>()?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    Ok(logits[target] - lse)
}

fn cross_entropy<T: Real>(
    batch: &[(Embedding<T>, usize)],
    space: &ClassEmbeddings<T>,
    space_name: &'static str,
    temperature: T,
    reduction: Reduction,
) -> Result<T> {
    let mut total = T::zero();
    for (emb, label) in batch {
        let pos = space.position(*label).ok_or(Error::Label {
            label: *label,
            space: space_name,
        })?;
        total = total - log_prob_of(emb, &space.embs, pos, temperature)?;
    }
    Ok(reduction.apply(total, batch.len()))
}

/// Cross-entropy of real samples over the base label space.
pub fn rce_loss<T: Real>(
    real_batch: &[(Embedding<T>, usize)],
    base_class_embs: &ClassEmbeddings<T>,
    temperature: T,
    reduction: Reduction,
) -> Result<T> {
    cross_entropy(real_batch, base_class_embs, "base", temperature, reduction)
}

/// Cross-entropy of synthetic samples over the base ∪ novel label space.
pub fn sce_loss<T: Real>(
    synth_batch: &[(Embedding<T>, usize)],
    all_class_embs: &ClassEmbeddings<T>,
    temperature: T,
    reduction: Reduction,
) -> Result<T> {
    cross_entropy(synth_batch, all_class_embs, "base+novel", temperature, reduction)
}

pub fn l1_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum()
}

/// One alignment term on features that are already normalized.
pub fn triplet_term<T: Real>(anchor: &[T], positive: &[T], negative: &[T]) -> T {
    let d_pos = l1_distance(anchor, positive);
    let d_neg = l1_distance(anchor, negative);
    (d_pos - d_neg).max(T::zero()) + d_pos
}

/// Alignment loss plus a flag set when there was nothing to align.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsLoss<T> {
    pub value: T,
    pub skipped: bool,
}

pub fn fs_loss<T: Real>(triplets: &[Triplet<T>], reduction: Reduction) -> Result<FsLoss<T>> {
    if triplets.is_empty() {
        return Ok(FsLoss {
            value: T::zero(),
            skipped: true,
        });
    }
    let mut total = T::zero();
    for t in triplets {
        let a = t.anchor.normalized()?;
        let p = t.positive.normalized()?;
        let n = t.negative.normalized()?;
        total = total + triplet_term(&a, &p, &n);
    }
    Ok(FsLoss {
        value: reduction.apply(total, triplets.len()),
        skipped: false,
    })
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub rce: f64,
    pub sce: f64,
    pub fs: f64,
}

impl LossComponents {
    pub fn total(&self, weights: &LossWeights) -> f64 {
        total_loss(self.rce, self.sce, self.fs, weights)
    }
}

pub fn total_loss(rce: f64, sce: f64, fs: f64, weights: &LossWeights) -> f64 {
    rce + weights.alpha * sce + weights.beta * fs
}

/// `-log p(target)` for one image row against the rows of `classes`.
pub fn cross_entropy_var<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    classes: Var,
    target: usize,
    temperature: T,
) -> Var {
    let logits = logits_var(tape, image, classes, temperature);
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.pick(logp, 0, target);
    tape.scale(picked, -T::one())
}

/// `temperature · cos` between every image row and every class row.
pub fn logits_var<T: Real>(tape: &mut Tape<T>, images: Var, classes: Var, temperature: T) -> Var {
    let i = tape.normalize_rows(images);
    let c = tape.normalize_rows(classes);
    let cos = tape.matmul_t(i, c);
    tape.scale(cos, temperature)
}

/// Alignment term on raw joint-space rows; normalization happens on the tape.
pub fn triplet_var<T: Real>(tape: &mut Tape<T>, anchor: Var, positive: Var, negative: Var) -> Var {
    let a = tape.normalize_rows(anchor);
    let p = tape.normalize_rows(positive);
    let n = tape.normalize_rows(negative);
    let dp = tape.sub(a, p);
    let dp = tape.abs(dp);
    let d_pos = tape.sum_all(dp);
    let dn = tape.sub(a, n);
    let dn = tape.abs(dn);
    let d_neg = tape.sum_all(dn);
    let gap = tape.sub(d_pos, d_neg);
    let hinge = tape.relu(gap);
    tape.add(hinge, d_pos)
}

/// Reduces scalar terms; `None` for an empty list.
pub fn reduce_var<T: Real>(tape: &mut Tape<T>, terms: &[Var], reduction: Reduction) -> Option<Var> {
    if terms.is_empty() {
        return None;
    }
    let s = tape.sum(terms);
    Some(match reduction {
        Reduction::Mean => tape.scale(s, T::one() / T::lit(terms.len() as f64)),
        Reduction::Sum => s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding<f64> {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let u = emb(&[0.3, -1.2, 2.0]);
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_sim(&emb(&[1.0, 2.0]), &emb(&[3.0, 4.0])).unwrap();
        assert!((c - 11.0 / (5f64.sqrt() * 5.0)).abs() < 1e-12);
        assert!((c - 0.98387).abs() < 1e-5);
        assert!(matches!(
            cosine_sim(&emb(&[0.0, 0.0]), &emb(&[1.0, 0.0])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn probability_examples() {
        let img = emb(&[1.0, 0.0]);
        let p = class_probabilities(&img, &[emb(&[1.0, 1.0]), emb(&[1.0, -1.0])], 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);

        let p = class_probabilities(&img, &[emb(&[2.0, 0.0]), emb(&[0.0, 3.0])], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.7311).abs() < 1e-4);

        assert!(matches!(class_probabilities(&img, &[], 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        // With temperature 1 and orthogonal classes, target probabilities are controlled directly.
        let space = ClassEmbeddings::new(
            vec![0, 1, 2, 3],
            (0..4)
                .map(|i| {
                    let mut v = vec![0.0; 4];
                    v[i] = 1.0;
                    emb(&v)
                })
                .collect(),
        )
        .unwrap();
        let diag = emb(&[1.0, 1.0, 1.0, 1.0]);
        let l = rce_loss(&[(diag.clone(), 2)], &space, 1.0, Reduction::Mean).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let err = rce_loss(&[(diag, 9)], &space, 1.0, Reduction::Mean).unwrap_err();
        assert!(matches!(err, Error::Label { label: 9, .. }));
    }

    #[test]
    fn alignment_term_examples() {
        assert_eq!(triplet_term(&[0.0], &[1.0], &[3.0]), 1.0);
        assert_eq!(triplet_term(&[0.0], &[2.0], &[1.0]), 3.0);
        let a = emb(&[0.2, 0.9]);
        let t = Triplet {
            anchor: a.clone(),
            positive: a.clone(),
            negative: emb(&[-1.0, 0.1]),
        };
        assert_eq!(fs_loss(&[t], Reduction::Mean).unwrap().value, 0.0);
        let empty = fs_loss::<f64>(&[], Reduction::Mean).unwrap();
        assert!(empty.skipped && empty.value == 0.0);
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights { alpha: 0.1, beta: 0.5 };
        assert!((total_loss(1.0, 2.0, 3.0, &w) - 2.7).abs() < 1e-12);
        assert_eq!(total_loss(1.5, 2.0, 3.0, &LossWeights { alpha: 0.0, beta: 0.0 }), 1.5);
        assert!(LossWeights { alpha: -0.1, beta: 0.0 }.validate().is_err());
    }
}

//! Zero-shot scoring, B/N/HM reports, Fréchet distance, domain-gap
//! diagnostics and embedding export.
//!
//! All test images are real photographs, so scoring always encodes them
//! with the real-domain route (`[real, shared]` prompts).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{ClassSpace, LabeledExample};
use crate::encoders::{DualEncoder, Embedding};
use crate::error::{Error, Result};
use crate::model::{class_tokens, PromptParams};
use crate::objectives::{class_probabilities, ClassEmbeddings};
use crate::prompts::{DomainTag, VisualRoute};
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Zsl,
    Gzsl,
    CrossDataset,
    DomainGeneralization,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Zsl => "zsl",
            Protocol::Gzsl => "gzsl",
            Protocol::CrossDataset => "cross-dataset",
            Protocol::DomainGeneralization => "domain-generalization",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zsl" => Ok(Protocol::Zsl),
            "gzsl" => Ok(Protocol::Gzsl),
            "cross-dataset" => Ok(Protocol::CrossDataset),
            "domain-generalization" | "dg" => Ok(Protocol::DomainGeneralization),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub fid: Option<f64>,
    pub domain_centroid_gap: Option<f64>,
    pub skipped_triplets: Option<usize>,
}

/// Accuracies are percentages in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    #[serde(default)]
    pub method: String,
    pub b_acc: Option<f64>,
    pub n_acc: Option<f64>,
    pub hm: Option<f64>,
    /// Accuracy over every scored example.
    pub accuracy: Option<f64>,
    pub per_class: BTreeMap<String, f64>,
    pub diagnostics: Diagnostics,
    pub examples: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Input(format!("report: {e}")))
    }
}

/// `2bn / (b + n)`, defined as 0 when both are 0.
pub fn harmonic_mean(b: f64, n: f64) -> f64 {
    if b + n == 0.0 {
        0.0
    } else {
        2.0 * b * n / (b + n)
    }
}

/// Argmax of the class probabilities over `subset` (ids into `classes`).
/// Ties go to the earliest entry of `subset`.
pub fn predict_embedded<T: Real>(
    image: &Embedding<T>,
    classes: &ClassEmbeddings<T>,
    subset: &[usize],
    temperature: T,
) -> Result<usize> {
    if subset.is_empty() {
        return Err(Error::Input("empty candidate class set".into()));
    }
    let restricted = classes.restrict(subset)?;
    let probs = class_probabilities(image, restricted.embeddings(), temperature)?;
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(subset[best])
}

/// Encodes images and class prompts for one trained parameter set.
pub struct Scorer<'a, T: Real> {
    pub model: &'a DualEncoder<T>,
    pub params: &'a PromptParams<T>,
    classes: &'a ClassSpace,
    tokens: Vec<Matrix<T>>,
    fixed: Option<ClassEmbeddings<T>>,
    pub temperature: T,
}

impl<'a, T: Real> Scorer<'a, T> {
    pub fn new(model: &'a DualEncoder<T>, params: &'a PromptParams<T>, classes: &'a ClassSpace, temperature: f64) -> Result<Self> {
        let tokens = class_tokens(model, classes.names(), classes.template())?;
        let fixed = if params.needs_image_for_text() {
            None
        } else {
            let embs = params.embed_classes(model, &tokens, None)?;
            Some(ClassEmbeddings::new((0..classes.len()).collect(), embs)?)
        };
        Ok(Self {
            model,
            params,
            classes,
            tokens,
            fixed,
            temperature: T::lit(temperature),
        })
    }

    pub fn image(&self, patches: &Matrix<T>, route: VisualRoute) -> Result<Embedding<T>> {
        self.params.embed_image(self.model, patches, route)
    }

    /// Class embeddings indexed by class id, conditioned on `image` if needed.
    pub fn class_embeddings(&self, image: &Embedding<T>) -> Result<ClassEmbeddings<T>> {
        match &self.fixed {
            Some(c) => Ok(c.clone()),
            None => ClassEmbeddings::new(
                (0..self.classes.len()).collect(),
                self.params.embed_classes(self.model, &self.tokens, Some(image))?,
            ),
        }
    }

    pub fn predict(&self, patches: &Matrix<T>, subset: &[usize]) -> Result<usize> {
        let img = self.image(patches, DomainTag::Real.into())?;
        predict_embedded(&img, &self.class_embeddings(&img)?, subset, self.temperature)
    }

    /// Predictions of every example under the restricted and the unified
    /// candidate sets, from one encoding pass.
    pub fn predictions(&self, examples: &[LabeledExample], patches: &[Matrix<T>]) -> Result<Vec<Prediction>> {
        let base = self.classes.base();
        let novel = self.classes.novel();
        let all = self.classes.all();
        examples
            .iter()
            .zip(patches)
            .map(|(e, p)| {
                let img = self.image(p, DomainTag::Real.into())?;
                let cls = self.class_embeddings(&img)?;
                let own = if self.classes.is_base(e.class_id) { base } else { novel };
                Ok(Prediction {
                    truth: e.class_id,
                    restricted: if own.is_empty() {
                        None
                    } else {
                        Some(predict_embedded(&img, &cls, own, self.temperature)?)
                    },
                    unified: predict_embedded(&img, &cls, &all, self.temperature)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub truth: usize,
    /// Argmax within the example's own half (base or novel).
    pub restricted: Option<usize>,
    /// Argmax over base ∪ novel.
    pub unified: usize,
}

fn pct(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * correct as f64 / total as f64)
}

/// Builds the ZSL or GZSL report from predictions.
pub fn report_from_predictions(preds: &[Prediction], classes: &ClassSpace, protocol: Protocol) -> Result<EvalReport> {
    let pick = |p: &Prediction| match protocol {
        Protocol::Zsl => p.restricted,
        _ => Some(p.unified),
    };
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut bc, mut bt, mut nc, mut nt) = (0, 0, 0, 0);
    for p in preds {
        let ok = pick(p) == Some(p.truth);
        let e = per.entry(p.truth).or_default();
        e.0 += ok as usize;
        e.1 += 1;
        if classes.is_base(p.truth) {
            bc += ok as usize;
            bt += 1;
        } else {
            nc += ok as usize;
            nt += 1;
        }
    }
    let b_acc = pct(bc, bt);
    let n_acc = pct(nc, nt);
    let hm = match (b_acc, n_acc) {
        (Some(b), Some(n)) => Some(harmonic_mean(b, n)),
        _ => None,
    };
    Ok(EvalReport {
        protocol,
        method: String::new(),
        b_acc,
        n_acc,
        hm,
        accuracy: pct(bc + nc, bt + nt),
        per_class: per
            .into_iter()
            .map(|(c, (ok, n))| (classes.name(c).to_string(), 100.0 * ok as f64 / n as f64))
            .collect(),
        diagnostics: Diagnostics::default(),
        examples: preds.len(),
    })
}

/// Scores `test` under `protocol`. Cross-dataset and domain-generalization
/// runs score every example against the target's full label space.
pub fn evaluate<T: Real>(
    scorer: &Scorer<'_, T>,
    classes: &ClassSpace,
    test: &[LabeledExample],
    patches: &[Matrix<T>],
    protocol: Protocol,
) -> Result<EvalReport> {
    if test.len() != patches.len() {
        return Err(Error::shape("test patches", test.len(), patches.len()));
    }
    let preds = scorer.predictions(test, patches)?;
    let mut report = report_from_predictions(&preds, classes, protocol)?;
    if matches!(protocol, Protocol::CrossDataset | Protocol::DomainGeneralization) {
        report.b_acc = None;
        report.n_acc = None;
        report.hm = None;
    }
    report.method = scorer.params.baseline.as_str().to_string();
    Ok(report)
}

/// ZSL and GZSL reports sharing one encoding pass.
pub fn evaluate_zsl_gzsl<T: Real>(
    scorer: &Scorer<'_, T>,
    classes: &ClassSpace,
    test: &[LabeledExample],
    patches: &[Matrix<T>],
) -> Result<(EvalReport, EvalReport)> {
    let preds = scorer.predictions(test, patches)?;
    let mut zsl = report_from_predictions(&preds, classes, Protocol::Zsl)?;
    let mut gzsl = report_from_predictions(&preds, classes, Protocol::Gzsl)?;
    zsl.method = scorer.params.baseline.as_str().to_string();
    gzsl.method = zsl.method.clone();
    Ok((zsl, gzsl))
}

/// Accuracy (percent) over base classes only; used for model selection.
pub fn base_accuracy<T: Real>(scorer: &Scorer<'_, T>, classes: &ClassSpace, val: &[LabeledExample], patches: &[Matrix<T>]) -> Result<Option<f64>> {
    let mut correct = 0;
    let mut total = 0;
    for (e, p) in val.iter().zip(patches) {
        if !classes.is_base(e.class_id) {
            continue;
        }
        total += 1;
        correct += (scorer.predict(p, classes.base())? == e.class_id) as usize;
    }
    Ok(pct(correct, total))
}

fn stats(set: &[Embedding<impl Real>], eps: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(Error::Input(format!("need at least 2 features, got {}", set.len())));
    }
    let d = set[0].dim();
    if set.iter().any(|e| e.dim() != d) {
        return Err(Error::Input("feature widths differ".into()));
    }
    let n = set.len();
    let x = DMatrix::from_fn(n, d, |i, j| set[i].vector()[j].f64());
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Regularization added to both covariances before the matrix square root.
pub const FID_EPS: f64 = 1e-6;

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid<T: Real>(features_a: &[Embedding<T>], features_b: &[Embedding<T>]) -> Result<f64> {
    let (mu_a, cov_a) = stats(features_a, FID_EPS)?;
    let (mu_b, cov_b) = stats(features_b, FID_EPS)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Input("feature widths differ between sets".into()));
    }
    // Tr((Σa Σb)^½) = Tr((Σa^½ Σb Σa^½)^½), and the inner matrix is symmetric PSD.
    let sa = sym_sqrt(&cov_a);
    let inner = &sa * &cov_b * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = mu_a - mu_b;
    Ok(diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

/// Mean over shared classes of the distance between real and synthetic
/// class centroids. With `normalize`, embeddings are scaled to unit length first.
pub fn domain_centroid_gap<T: Real>(
    real: &BTreeMap<usize, Vec<Embedding<T>>>,
    synthetic: &BTreeMap<usize, Vec<Embedding<T>>>,
    normalize: bool,
) -> Result<f64> {
    let centroid = |set: &[Embedding<T>]| -> Result<Vec<f64>> {
        let d = set[0].dim();
        let mut c = vec![0.0; d];
        for e in set {
            let v: Vec<f64> = if normalize {
                e.normalized()?.iter().map(|x| x.f64()).collect()
            } else {
                e.vector().iter().map(|x| x.f64()).collect()
            };
            for (a, b) in c.iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(c.into_iter().map(|x| x / set.len() as f64).collect())
    };
    let mut total = 0.0;
    let mut shared = 0;
    for (class, r) in real {
        let Some(s) = synthetic.get(class) else { continue };
        if r.is_empty() || s.is_empty() {
            continue;
        }
        let (cr, cs) = (centroid(r)?, centroid(s)?);
        total += cr.iter().zip(&cs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        shared += 1;
    }
    if shared == 0 {
        return Err(Error::Input("no class has both real and synthetic features".into()));
    }
    Ok(total / shared as f64)
}

/// Embeds each example with the route of its own domain.
pub fn embed_examples<T: Real>(
    model: &DualEncoder<T>,
    params: &PromptParams<T>,
    examples: &[LabeledExample],
    patches: &[Matrix<T>],
) -> Result<Vec<Embedding<T>>> {
    examples
        .iter()
        .zip(patches)
        .map(|(e, p)| params.embed_image(model, p, e.domain.into()))
        .collect()
}

pub fn group_by_class<T: Real>(examples: &[LabeledExample], embs: Vec<Embedding<T>>) -> BTreeMap<usize, Vec<Embedding<T>>> {
    let mut out: BTreeMap<usize, Vec<Embedding<T>>> = BTreeMap::new();
    for (e, v) in examples.iter().zip(embs) {
        out.entry(e.class_id).or_default().push(v);
    }
    out
}

/// Centroid gap and FID between the real and synthetic embeddings.
pub fn domain_diagnostics<T: Real>(
    model: &DualEncoder<T>,
    params: &PromptParams<T>,
    real: (&[LabeledExample], &[Matrix<T>]),
    synthetic: (&[LabeledExample], &[Matrix<T>]),
) -> Result<Diagnostics> {
    let r = embed_examples(model, params, real.0, real.1)?;
    let s = embed_examples(model, params, synthetic.0, synthetic.1)?;
    let fid_value = if r.len() >= 2 && s.len() >= 2 { Some(fid(&r, &s)?) } else { None };
    let gap = domain_centroid_gap(&group_by_class(real.0, r), &group_by_class(synthetic.0, s), true).ok();
    Ok(Diagnostics {
        fid: fid_value,
        domain_centroid_gap: gap,
        skipped_triplets: None,
    })
}

#[derive(Serialize)]
struct ExportRecord<'a> {
    id: &'a str,
    class_name: &'a str,
    domain: &'a str,
    vector: Vec<f64>,
}

/// One JSON line per example: `{id, class_name, domain, vector}`.
pub fn export_embeddings<T: Real>(
    model: &DualEncoder<T>,
    params: &PromptParams<T>,
    classes: &ClassSpace,
    examples: &[LabeledExample],
    patches: &[Matrix<T>],
    path: &Path,
) -> Result<usize> {
    let embs = embed_examples(model, params, examples, patches)?;
    let mut out = Vec::new();
    for (e, v) in examples.iter().zip(&embs) {
        let rec = ExportRecord {
            id: &e.id,
            class_name: classes.name(e.class_id),
            domain: e.domain.as_str(),
            vector: v.vector().iter().map(|x| x.f64()).collect(),
        };
        serde_json::to_writer(&mut out, &rec).expect("record serializes");
        out.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(embs.len())
}

/// Text table with one row per method and `GZSL (ZSL)` cells for B, N and HM.
pub fn render_table(rows: &[(String, Option<&EvalReport>, Option<&EvalReport>)]) -> String {
    let cell = |g: Option<f64>, z: Option<f64>| match (g, z) {
        (Some(g), Some(z)) => format!("{g:.2} ({z:.2})"),
        (Some(g), None) => format!("{g:.2}"),
        (None, Some(z)) => format!("- ({z:.2})"),
        (None, None) => "-".into(),
    };
    let field = |r: Option<&EvalReport>, f: fn(&EvalReport) -> Option<f64>| r.and_then(f);
    let mut lines = vec![["Method".to_string(), "B".into(), "N".into(), "HM".into()]];
    for (name, g, z) in rows {
        lines.push([
            name.clone(),
            cell(field(*g, |r| r.b_acc), field(*z, |r| r.b_acc)),
            cell(field(*g, |r| r.n_acc), field(*z, |r| r.n_acc)),
            cell(field(*g, |r| r.hm), field(*z, |r| r.hm)),
        ]);
    }
    let widths: Vec<usize> = (0..4).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cols: Vec<String> = l.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(out, "| {} |", cols.join(" | "));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "| {} |", rule.join(" | "));
        }
    }
    out
}

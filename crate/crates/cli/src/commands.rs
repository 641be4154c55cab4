use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dualprompt::archive::Archive;
use dualprompt::data::{generate_toy, ingest_synthetic, load_dataset, materialize, ClassSpace, LabeledExample};
use dualprompt::encoders::{DualEncoder, Embedding};
use dualprompt::evaluation::{
    domain_diagnostics, evaluate, evaluate_zsl_gzsl, export_embeddings, fid, render_table, EvalReport, Protocol,
    Scorer,
};
use dualprompt::model::PromptParams;
use dualprompt::prompts::{DomainTag, VisualRoute};
use dualprompt::tensor::Real;
use dualprompt::training::{load_checkpoint, train, Precision, RunArtifacts, TrainInputs};
use dualprompt::{Error, Result};
use log::info;

use crate::config::RunConfig;
use crate::pipeline::{build_model, cast_model, directory_examples, load_data, RunData};

pub const CONFIG_ECHO: &str = "config.toml";
pub const ENCODER_ARCHIVE: &str = "encoder.dpa";

/// Which reports `eval` produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalProtocol {
    One(Protocol),
    Both,
}

impl std::str::FromStr for EvalProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("both") {
            Ok(EvalProtocol::Both)
        } else {
            s.parse().map(EvalProtocol::One)
        }
    }
}

macro_rules! with_precision {
    ($precision:expr, $f:ident ( $($arg:expr),* )) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn load_validated(config: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config, overrides)?;
    cfg.apply_env();
    cfg.validate(&cfg.registry()?)?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

/// Trained parameters from `checkpoint`, or freshly initialized prompts.
fn prompt_params<T: Real>(cfg: &RunConfig, model: &DualEncoder<T>, checkpoint: Option<&Path>) -> Result<PromptParams<T>> {
    match checkpoint {
        Some(path) => Ok(load_checkpoint(path, model)?.params),
        None => PromptParams::init(cfg.baseline, &cfg.prompts, model, cfg.train.seed),
    }
}

/// Resolves the config for a command bound to an existing run directory and
/// pins the encoder to the archive written by `train`.
fn run_config(checkpoint: &Path, config: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    require_file(checkpoint)?;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let echoed = dir.join(CONFIG_ECHO);
    let config = config.map(Path::to_path_buf).or_else(|| echoed.is_file().then_some(echoed));
    let mut cfg = RunConfig::load(config.as_deref(), overrides)?;
    cfg.apply_env();
    let archive = dir.join(ENCODER_ARCHIVE);
    if cfg.encoder.archive.is_none() && archive.is_file() {
        cfg.encoder.archive = Some(archive);
        cfg.encoder.align = Some(false);
    }
    cfg.validate(&cfg.registry()?)?;
    Ok(cfg)
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub overrides: Vec<String>,
}

pub fn train_cmd(args: TrainArgs<'_>) -> Result<()> {
    let mut cfg = load_validated(args.config, &args.overrides)?;
    let registry = cfg.registry()?;
    let weights = cfg.resolved_weights(&registry);
    cfg.weights.alpha = Some(weights.alpha);
    cfg.weights.beta = Some(weights.beta);
    let out = cfg.paths.output_dir.clone();
    write_file(&out.join(CONFIG_ECHO), cfg.to_toml())?;
    println!("effective config written to {}", out.join(CONFIG_ECHO).display());

    let data = load_data(&cfg, &registry)?;
    info!(
        "{} classes, {} real few-shot, {} synthetic",
        data.classes.len(),
        data.real.len(),
        data.synthetic.len()
    );
    let model = build_model(&cfg, &data)?;
    model.to_archive().save(&out.join(ENCODER_ARCHIVE))?;
    with_precision!(cfg.train.precision, train_typed(&cfg, &registry, &data, &model, &out))
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    registry: &dualprompt::data::Registry,
    data: &RunData,
    model64: &DualEncoder<f64>,
    out: &Path,
) -> Result<()> {
    let model: DualEncoder<T> = cast_model(model64)?;
    let visual = &*model.visual;
    let (real_p, synth_p, val_p) = (
        materialize(&data.real, visual)?,
        materialize(&data.synthetic, visual)?,
        materialize(&data.val, visual)?,
    );
    let inputs = TrainInputs {
        model: &model,
        classes: &data.classes,
        real: &data.real,
        real_patches: &real_p,
        synthetic: &data.synthetic,
        synthetic_patches: &synth_p,
        val: &data.val,
        val_patches: &val_p,
    };
    let params = PromptParams::init(cfg.baseline, &cfg.prompts, &model, cfg.train.seed)?;
    let artifacts = RunArtifacts::in_dir(out);
    let outcome = train(inputs, params, cfg.effective_train(registry), Some(&artifacts))?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    if let Some(last) = outcome.log.last() {
        println!(
            "step {}: l_rce={:.6} l_sce={} l_fs={} total={:.6}",
            last.step + 1,
            last.l_rce,
            fmt(last.l_sce),
            fmt(last.l_fs),
            last.total
        );
    }
    if let Some(v) = outcome.best_val {
        println!("best validation base accuracy: {v:.2}");
    }
    let digest = Archive::load(&artifacts.final_checkpoint)?.digest();
    println!("checkpoint {} sha256={digest}", artifacts.final_checkpoint.display());
    println!("backbone sha256={}", outcome.final_checkpoint.backbone_checksum);
    Ok(())
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub config: Option<&'a Path>,
    pub overrides: Vec<String>,
    pub protocol: Option<EvalProtocol>,
    pub split: String,
    pub out: Option<&'a Path>,
}

pub fn eval_cmd(args: EvalArgs<'_>) -> Result<()> {
    let cfg = run_config(args.checkpoint, args.config, &args.overrides)?;
    let data = load_data(&cfg, &cfg.registry()?)?;
    let model = build_model(&cfg, &data)?;
    let protocol = args.protocol.unwrap_or(EvalProtocol::One(cfg.protocol));
    let reports = with_precision!(
        cfg.train.precision,
        eval_typed(&cfg, &data, &model, args.checkpoint, protocol, &args.split)
    )?;
    let (mut gzsl, mut zsl) = (None, None);
    for r in &reports {
        match r.protocol {
            Protocol::Zsl => zsl = Some(r),
            _ => gzsl = Some(r),
        }
    }
    let method = reports.first().map(|r| r.method.clone()).unwrap_or_default();
    print!("{}", render_table(&[(method, gzsl, zsl)]));
    for r in &reports {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        println!(
            "{}: B={} N={} HM={} acc={} examples={}",
            r.protocol.as_str(),
            pct(r.b_acc),
            pct(r.n_acc),
            pct(r.hm),
            pct(r.accuracy),
            r.examples
        );
        let d = &r.diagnostics;
        if let (Some(f), Some(g)) = (d.fid, d.domain_centroid_gap) {
            println!("  real/synthetic fid={f:.6} centroid_gap={g:.6}");
        }
    }
    if let Some(path) = args.out {
        let json = if reports.len() == 1 {
            reports[0].to_json()
        } else {
            serde_json::to_string_pretty(&reports).expect("reports serialize")
        };
        write_file(path, json)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn eval_typed<T: Real>(
    cfg: &RunConfig,
    data: &RunData,
    model64: &DualEncoder<f64>,
    checkpoint: &Path,
    protocol: EvalProtocol,
    split: &str,
) -> Result<Vec<EvalReport>> {
    let model: DualEncoder<T> = cast_model(model64)?;
    let params = load_checkpoint(checkpoint, &model)?.params;
    let scorer = Scorer::new(&model, &params, &data.classes, cfg.train.temperature)?;
    let examples = data.split(split)?;
    let patches = materialize(examples, &*model.visual)?;
    let mut reports = match protocol {
        EvalProtocol::Both => {
            let (zsl, gzsl) = evaluate_zsl_gzsl(&scorer, &data.classes, examples, &patches)?;
            vec![gzsl, zsl]
        }
        EvalProtocol::One(p) => vec![evaluate(&scorer, &data.classes, examples, &patches, p)?],
    };
    if !data.synthetic.is_empty() {
        let synth_p = materialize(&data.synthetic, &*model.visual)?;
        let real_p = materialize(&data.real, &*model.visual)?;
        let diag = domain_diagnostics(&model, &params, (&data.real, &real_p), (&data.synthetic, &synth_p))?;
        for r in &mut reports {
            r.diagnostics.fid = diag.fid;
            r.diagnostics.domain_centroid_gap = diag.domain_centroid_gap;
        }
    }
    Ok(reports)
}

pub struct IngestArgs<'a> {
    pub config: Option<&'a Path>,
    pub overrides: Vec<String>,
    pub synth: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

fn class_space(cfg: &RunConfig) -> Result<ClassSpace> {
    if cfg.is_toy() {
        return Ok(generate_toy(&cfg.toy)?.dataset.classes);
    }
    let registry = cfg.registry()?;
    let root = cfg
        .paths
        .real_root
        .as_deref()
        .ok_or_else(|| Error::Config("paths.real_root is not set".into()))?;
    Ok(load_dataset(root, registry.get(&cfg.dataset)?)?.classes)
}

pub fn ingest_cmd(args: IngestArgs<'_>) -> Result<()> {
    let cfg = load_validated(args.config, &args.overrides)?;
    let dir = args
        .synth
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.synthetic_root.clone())
        .ok_or_else(|| Error::Config("no synthetic directory given (--synth or paths.synthetic_root)".into()))?;
    let classes = class_space(&cfg)?;
    let examples = ingest_synthetic(&dir, &classes)?;
    let mut counts: BTreeMap<&str, usize> = classes.names().iter().map(|n| (n.as_str(), 0)).collect();
    let mut manifest = String::new();
    for e in &examples {
        *counts.entry(classes.name(e.class_id)).or_default() += 1;
        let _ = writeln!(manifest, "{}\t{}", e.id, classes.name(e.class_id));
    }
    for (name, n) in &counts {
        println!("{name}\t{n}");
    }
    println!("total\t{}", examples.len());
    let out = args
        .out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output_dir.join("synthetic_manifest.tsv"));
    write_file(&out, manifest)?;
    println!("manifest written to {}", out.display());
    Ok(())
}

pub struct FidArgs<'a> {
    pub config: Option<&'a Path>,
    pub overrides: Vec<String>,
    pub checkpoint: Option<&'a Path>,
    pub real: &'a Path,
    pub synth: &'a Path,
    /// Embed the synthetic set through its own domain route.
    pub own_routes: bool,
}

pub fn fid_cmd(args: FidArgs<'_>) -> Result<()> {
    let cfg = match args.checkpoint {
        Some(ckpt) => run_config(ckpt, args.config, &args.overrides)?,
        None => load_validated(args.config, &args.overrides)?,
    };
    let real = directory_examples(args.real, DomainTag::Real)?;
    let synth = directory_examples(args.synth, DomainTag::Synthetic)?;
    let model = match &cfg.encoder.archive {
        Some(path) => DualEncoder::from_toy_archive(&Archive::load(path)?)?,
        None => DualEncoder::toy(cfg.encoder.visual.clone(), cfg.encoder.text.clone(), cfg.encoder.seed)?,
    };
    let value = with_precision!(
        cfg.train.precision,
        fid_typed(&cfg, &model, args.checkpoint, &real, &synth, args.own_routes)
    )?;
    println!("{:.6}", value.max(0.0));
    Ok(())
}

fn fid_typed<T: Real>(
    cfg: &RunConfig,
    model64: &DualEncoder<f64>,
    checkpoint: Option<&Path>,
    real: &[LabeledExample],
    synth: &[LabeledExample],
    own_routes: bool,
) -> Result<f64> {
    let model: DualEncoder<T> = cast_model(model64)?;
    let params = prompt_params(cfg, &model, checkpoint)?;
    let embed = |set: &[LabeledExample], route: VisualRoute| -> Result<Vec<Embedding<T>>> {
        materialize(set, &*model.visual)?
            .iter()
            .map(|p| params.embed_image(&model, p, route))
            .collect()
    };
    let real_route = VisualRoute::from(DomainTag::Real);
    let synth_route = if own_routes { DomainTag::Synthetic.into() } else { real_route };
    fid(&embed(real, real_route)?, &embed(synth, synth_route)?)
}

pub struct ExportArgs<'a> {
    pub config: Option<&'a Path>,
    pub overrides: Vec<String>,
    pub checkpoint: Option<&'a Path>,
    pub split: String,
    pub out: &'a Path,
}

pub fn export_cmd(args: ExportArgs<'_>) -> Result<()> {
    let cfg = match args.checkpoint {
        Some(ckpt) => run_config(ckpt, args.config, &args.overrides)?,
        None => load_validated(args.config, &args.overrides)?,
    };
    let data = load_data(&cfg, &cfg.registry()?)?;
    let model = build_model(&cfg, &data)?;
    let n = with_precision!(
        cfg.train.precision,
        export_typed(&cfg, &data, &model, args.checkpoint, &args.split, args.out)
    )?;
    println!("{n} embeddings written to {}", args.out.display());
    Ok(())
}

fn export_typed<T: Real>(
    cfg: &RunConfig,
    data: &RunData,
    model64: &DualEncoder<f64>,
    checkpoint: Option<&Path>,
    split: &str,
    out: &Path,
) -> Result<usize> {
    let model: DualEncoder<T> = cast_model(model64)?;
    let params = prompt_params(cfg, &model, checkpoint)?;
    let examples = data.split(split)?;
    let patches = materialize(examples, &*model.visual)?;
    export_embeddings(&model, &params, &data.classes, examples, &patches, out)
}

/// Reads single reports or arrays of reports.
fn read_reports(path: &PathBuf) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = match serde_json::from_str::<Vec<EvalReport>>(&text) {
        Ok(many) => Ok(many),
        Err(_) => EvalReport::from_json(&text).map(|r| vec![r]),
    };
    parsed.map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })
}

pub fn report_cmd(files: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut order: Vec<String> = Vec::new();
    let mut by_method: BTreeMap<String, (Option<EvalReport>, Option<EvalReport>)> = BTreeMap::new();
    for f in files {
        for r in read_reports(f)? {
            if !by_method.contains_key(&r.method) {
                order.push(r.method.clone());
            }
            let slot = by_method.entry(r.method.clone()).or_default();
            match r.protocol {
                Protocol::Zsl => slot.1 = Some(r),
                _ => slot.0 = Some(r),
            }
        }
    }
    let rows: Vec<_> = order
        .iter()
        .map(|m| {
            let (g, z) = &by_method[m];
            (m.clone(), g.as_ref(), z.as_ref())
        })
        .collect();
    let table = render_table(&rows);
    print!("{table}");
    if let Some(path) = out {
        write_file(path, table)?;
    }
    Ok(())
}

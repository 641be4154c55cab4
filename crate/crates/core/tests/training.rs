mod common;

use common::{fixture, small_spec, train_config};
use dualprompt::data::ToySpec;
use dualprompt::encoders::{DualEncoder, EncoderSpec};
use dualprompt::model::{Baseline, PromptParams};
use dualprompt::objectives::LossWeights;
use dualprompt::training::{load_checkpoint, save_checkpoint, train, StepRecord, TrainConfig, Trainer};
use dualprompt::Error;

fn rce_trace(log: &[StepRecord]) -> Vec<f64> {
    log.iter().map(|r| r.l_rce).collect()
}

#[test]
fn resume_replays_the_same_trajectory() {
    let fx = fixture(&small_spec(21), 4);
    let cfg = TrainConfig {
        epochs: 4,
        ..train_config(21, LossWeights { alpha: 0.3, beta: 0.5 })
    };
    let params = fx.params(Baseline::SyncClip, 0.02, 21);
    let straight = train(fx.inputs(), params.clone(), cfg.clone(), None).unwrap();

    let mut first = Trainer::new(fx.inputs(), params, cfg).unwrap();
    let half = first.total_steps() / 2;
    first.run(Some(half), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    let head: Vec<StepRecord> = first.log().to_vec();

    let ckpt = load_checkpoint(&path, &fx.model).unwrap();
    assert_eq!(ckpt.to_archive().to_bytes(), first.checkpoint().to_archive().to_bytes());
    let mut second = Trainer::resume(fx.inputs(), ckpt).unwrap();
    second.run(None, None).unwrap();
    let resumed = second.finish();

    let mut joined = head;
    joined.extend(resumed.log.iter().cloned());
    assert_eq!(joined, straight.log);
    assert_eq!(resumed.params, straight.params);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let fx = fixture(&small_spec(22), 4);
    let cfg = TrainConfig {
        lr0: 0.0,
        ..train_config(22, LossWeights { alpha: 0.5, beta: 0.5 })
    };
    let params = fx.params(Baseline::SyncClip, 0.05, 22);
    let out = train(fx.inputs(), params.clone(), cfg, None).unwrap();
    assert!(!out.log.is_empty());
    assert_eq!(out.params, params);
}

#[test]
fn two_class_loss_decreases() {
    let spec = ToySpec {
        n_base: 2,
        n_novel: 0,
        train_per_class: 16,
        synth_per_class: 0,
        cluster_scale: 2.0,
        noise: 0.2,
        seed: 23,
        ..ToySpec::default()
    };
    let fx = fixture(&spec, 16);
    let window = 40; // five passes over the 32 real examples
    let cfg = TrainConfig {
        total_steps: Some(200),
        lr0: 0.01,
        ..train_config(23, LossWeights { alpha: 0.0, beta: 0.0 })
    };
    let inputs = dualprompt::training::TrainInputs {
        synthetic: &[],
        synthetic_patches: &[],
        ..fx.inputs()
    };
    let out = train(inputs, fx.params(Baseline::Ivlp, 0.02, 23), cfg, None).unwrap();
    let rce = rce_trace(&out.log);
    assert_eq!(rce.len(), 200);
    let means: Vec<f64> = rce.chunks(window).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(
        means.windows(2).all(|p| p[1] < p[0]),
        "window means are not strictly decreasing: {means:?}"
    );
}

#[test]
fn beta_zero_ignores_the_mining_seed() {
    let fx = fixture(&small_spec(24), 4);
    let run = |beta: f64, mining: u64| {
        let cfg = TrainConfig {
            mining_seed: Some(mining),
            ..train_config(24, LossWeights { alpha: 0.5, beta })
        };
        train(fx.inputs(), fx.params(Baseline::SyncClip, 0.02, 24), cfg, None).unwrap().log
    };
    assert_eq!(run(0.0, 1), run(0.0, 2));
    assert_ne!(run(0.5, 1), run(0.5, 2));
}

#[test]
fn ivlp_configuration_of_the_full_method() {
    let fx = fixture(&small_spec(25), 4);
    let cfg = train_config(25, LossWeights { alpha: 0.0, beta: 0.0 });
    let mut prompt_cfg = fx.prompt_config(0.02);
    prompt_cfg.m1 = 0;
    prompt_cfg.m2 = 0;
    let full = PromptParams::init(Baseline::SyncClip, &prompt_cfg, &fx.model, 25).unwrap();
    let ivlp = PromptParams::init(Baseline::Ivlp, &prompt_cfg, &fx.model, 25).unwrap();
    let a = train(fx.inputs(), full, cfg.clone(), None).unwrap();
    let b = train(fx.inputs(), ivlp, cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params.bank, b.params.bank);
}

#[test]
fn identical_runs_give_identical_logs_and_frozen_backbone() {
    let fx = fixture(&small_spec(26), 4);
    let cfg = train_config(26, LossWeights { alpha: 0.5, beta: 0.5 });
    let a = train(fx.inputs(), fx.params(Baseline::SyncClip, 0.02, 26), cfg.clone(), None).unwrap();
    let b = train(fx.inputs(), fx.params(Baseline::SyncClip, 0.02, 26), cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_checkpoint.backbone_checksum, b.final_checkpoint.backbone_checksum);
    assert_eq!(a.final_checkpoint.backbone_checksum, fx.model.checksum());
}

#[test]
fn mismatched_encoder_is_refused() {
    let fx = fixture(&small_spec(27), 4);
    let cfg = TrainConfig {
        total_steps: Some(2),
        ..train_config(27, LossWeights { alpha: 0.5, beta: 0.5 })
    };
    let out = train(fx.inputs(), fx.params(Baseline::SyncClip, 0.02, 27), cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    save_checkpoint(&out.final_checkpoint, &path).unwrap();

    let wider = EncoderSpec {
        n_layers: 3,
        ..EncoderSpec::toy_visual()
    };
    let other = DualEncoder::<f64>::toy(wider, EncoderSpec::toy_text(), 27).unwrap();
    let err = load_checkpoint::<f64>(&path, &other).unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)), "{err:?}");
    assert!(!err.to_string().is_empty());

    let reseeded = DualEncoder::<f64>::toy_default(28).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path, &reseeded), Err(Error::Incompatible(_))));
    assert!(load_checkpoint::<f64>(&path, &fx.model).is_ok());
}

#[test]
fn logs_stream_as_json_lines() {
    let fx = fixture(&small_spec(29), 4);
    let cfg = TrainConfig {
        total_steps: Some(3),
        ..train_config(29, LossWeights { alpha: 0.0, beta: 0.0 })
    };
    let mut t = Trainer::new(
        dualprompt::training::TrainInputs {
            synthetic: &[],
            synthetic_patches: &[],
            ..fx.inputs()
        },
        fx.params(Baseline::Ivlp, 0.02, 29),
        cfg,
    )
    .unwrap();
    let mut sink = Vec::new();
    t.run(None, Some(&mut sink)).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(sink)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|v| v["l_sce"].is_null() && v["l_fs"].is_null() && v["l_rce"].is_f64()));
}

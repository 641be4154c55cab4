use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualprompt::data::{generate_toy, write_toy, ToySpec};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dualprompt"));
    c.env_remove("DUALPROMPT_DATA_ROOT");
    c
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().expect("binary runs");
    (
        status.code().unwrap_or(-1),
        String::from_utf8(stdout).unwrap(),
        String::from_utf8(stderr).unwrap(),
    )
}

fn ok(cmd: &mut Command) -> String {
    let (code, out, err) = run(cmd);
    assert_eq!(code, 0, "stdout:\n{out}\nstderr:\n{err}");
    out
}

/// Toy dataset written to disk in the real-data layout.
fn on_disk(tmp: &TempDir) -> (PathBuf, PathBuf) {
    let spec = ToySpec {
        n_base: 3,
        n_novel: 2,
        train_per_class: 4,
        val_per_class: 2,
        test_per_class: 3,
        synth_per_class: 4,
        seed: 5,
        ..ToySpec::default()
    };
    let data = generate_toy(&spec).unwrap();
    let (real, synth) = (tmp.path().join("real"), tmp.path().join("synth"));
    write_toy(&data, &real, &synth).unwrap();
    (real, synth)
}

const QUICK: [&str; 4] = ["--set", "train.epochs=1", "--set", "train.shots=4"];

fn quick_toy_train(out: &Path) -> String {
    ok(bin()
        .arg("train")
        .args(QUICK)
        .args(["--set", "toy.n_base=4", "--set", "toy.n_novel=2"])
        .arg("--output")
        .arg(out))
}

fn digest(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("checkpoint ").and_then(|r| r.split("sha256=").nth(1)))
        .expect("digest line")
        .to_string()
}

#[test]
fn overrides_env_root_and_registry_weights() {
    let tmp = TempDir::new().unwrap();
    let (real, synth) = on_disk(&tmp);
    let out = tmp.path().join("run");
    let stdout = ok(bin()
        .env("DUALPROMPT_DATA_ROOT", &real)
        .arg("train")
        .args(QUICK)
        .args(["--set", "dataset=EuroSAT", "--set", "weights.alpha=0.1", "--set", "weights.beta=0.5"])
        .arg("--set")
        .arg(format!("paths.synthetic_root={:?}", synth.to_string_lossy()))
        .arg("-o")
        .arg(&out));
    assert!(stdout.contains("l_fs="), "{stdout}");

    let echoed: toml::Table = std::fs::read_to_string(out.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(echoed["weights"]["alpha"].as_float(), Some(0.1));
    assert_eq!(echoed["weights"]["beta"].as_float(), Some(0.5));
    assert_eq!(echoed["paths"]["real_root"].as_str(), Some(real.to_str().unwrap()));

    // Without the explicit beta, the dataset's registry entry applies.
    let out2 = tmp.path().join("run2");
    ok(bin()
        .env("DUALPROMPT_DATA_ROOT", &real)
        .arg("train")
        .args(QUICK)
        .args(["--set", "dataset=eurosat", "--set", "train.total_steps=1"])
        .arg("--set")
        .arg(format!("paths.synthetic_root={:?}", synth.to_string_lossy()))
        .arg("-o")
        .arg(&out2));
    let echoed: toml::Table = std::fs::read_to_string(out2.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(echoed["weights"]["beta"].as_float(), Some(2.0));

    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["l_sce"].is_f64() && first["l_fs"].is_f64());
}

fn workspace_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn config_file_and_overrides_compose() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let stdout = ok(bin()
        .arg("train")
        .arg("--config")
        .arg(workspace_config("toy.toml"))
        .args(["--set", "train.total_steps=2", "--set", "weights.alpha=0.3", "--set", "weights.alpha=0.1"])
        .arg("-o")
        .arg(&out));
    assert!(stdout.contains("l_rce=") && stdout.contains("l_sce=") && stdout.contains("l_fs="), "{stdout}");
    let echoed: toml::Table = std::fs::read_to_string(out.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(echoed["weights"]["alpha"].as_float(), Some(0.1));
    assert_eq!(echoed["weights"]["beta"].as_float(), Some(0.5));
    assert_eq!(echoed["train"]["total_steps"].as_integer(), Some(2));
    assert_eq!(std::fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 2);
}

fn listing(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn commands_leave_dataset_directories_untouched() {
    let tmp = TempDir::new().unwrap();
    let (real, synth) = on_disk(&tmp);
    let before = (listing(&real), listing(&synth));
    let run_dir = tmp.path().join("run");
    let with_root = |c: &mut Command| {
        c.env("DUALPROMPT_DATA_ROOT", &real)
            .args(["--set", "dataset=EuroSAT", "--set", "train.total_steps=2", "--set", "train.shots=2"])
            .arg("--set")
            .arg(format!("paths.synthetic_root={:?}", synth.to_string_lossy()));
    };
    let mut c = bin();
    c.arg("train");
    with_root(&mut c);
    ok(c.arg("-o").arg(&run_dir));
    let ckpt = run_dir.join("final.ckpt");
    ok(bin().env("DUALPROMPT_DATA_ROOT", &real).arg("eval").arg("--checkpoint").arg(&ckpt));
    let mut c = bin();
    c.arg("ingest");
    with_root(&mut c);
    ok(c.arg("--out").arg(tmp.path().join("m.tsv")));
    ok(bin().arg("fid").arg("--real").arg(real.join("images")).arg("--synth").arg(&synth));
    ok(bin()
        .env("DUALPROMPT_DATA_ROOT", &real)
        .arg("export")
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--split", "synthetic", "--out"])
        .arg(tmp.path().join("s.jsonl")));
    assert!(before == (listing(&real), listing(&synth)));
}

#[test]
fn invalid_configurations_exit_1_listing_every_problem() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("never");
    let (code, _, err) = run(bin()
        .args(["train", "--baseline", "ivlp", "--set", "prompts.m1=2", "--set", "train.lr0=-1"])
        .arg("-o")
        .arg(&out));
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("m1 = 0") && err.contains("lr0"), "{err}");
    assert!(err.contains("2 problem(s)"), "{err}");
    assert!(!out.exists(), "nothing is written before validation passes");

    let (code, _, err) = run(bin().args(["train", "--set", "train.no_such_knob=1"]));
    assert_eq!(code, 1, "{err}");

    let (code, _, err) = run(bin().args(["train", "--set", "dataset=EuroSAT"]));
    assert_eq!(code, 1);
    assert!(err.contains("real_root"), "{err}");
}

#[test]
fn identical_configs_give_identical_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let a = quick_toy_train(&tmp.path().join("a"));
    let b = quick_toy_train(&tmp.path().join("b"));
    assert_eq!(digest(&a), digest(&b));
    for file in ["final.ckpt", "best.ckpt", "train_log.jsonl", "encoder.dpa"] {
        let read = |d: &str| std::fs::read(tmp.path().join(d).join(file)).unwrap();
        assert_eq!(read("a"), read("b"), "{file} differs");
    }
}

#[test]
fn eval_report_and_missing_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let run_dir = tmp.path().join("run");
    quick_toy_train(&run_dir);
    let ckpt = run_dir.join("final.ckpt");
    let json = tmp.path().join("both.json");
    let stdout = ok(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--protocol", "both", "--out"])
        .arg(&json));
    assert!(stdout.contains("| sync-clip"), "{stdout}");
    let reports: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let get = |p: &str, k: &str| {
        reports.iter().find(|r| r["protocol"] == p).unwrap()[k].as_f64().unwrap()
    };
    assert!(get("zsl", "b_acc") >= get("gzsl", "b_acc"));
    assert!(get("zsl", "n_acc") >= get("gzsl", "n_acc"));
    assert_eq!(reports[0]["examples"].as_u64(), Some(6 * 10));

    let table = ok(bin().arg("report").arg(&json));
    assert!(table.contains("sync-clip") && table.contains(" (") && table.contains("HM"), "{table}");

    let missing = tmp.path().join("absent/final.ckpt");
    let (code, _, err) = run(bin().arg("eval").arg("--checkpoint").arg(&missing));
    assert_ne!(code, 0);
    assert_eq!(code, 3);
    assert!(err.contains(missing.to_str().unwrap()), "{err}");
}

#[test]
fn fid_of_a_folder_with_itself_is_zero() {
    let tmp = TempDir::new().unwrap();
    let (real, synth) = on_disk(&tmp);
    let images = real.join("images");
    let same = ok(bin().arg("fid").arg("--real").arg(&images).arg("--synth").arg(&images));
    assert_eq!(same.trim(), "0.000000");
    let apart = ok(bin().arg("fid").arg("--real").arg(&images).arg("--synth").arg(&synth));
    assert!(apart.trim().parse::<f64>().unwrap() > 0.0, "{apart}");

    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let (code, _, _) = run(bin().arg("fid").arg("--real").arg(&images).arg("--synth").arg(&empty));
    assert_eq!(code, 1);
}

#[test]
fn ingest_reports_counts_and_rejects_unknown_folders() {
    let tmp = TempDir::new().unwrap();
    let (real, synth) = on_disk(&tmp);
    let manifest = tmp.path().join("manifest.tsv");
    let stdout = ok(bin()
        .env("DUALPROMPT_DATA_ROOT", &real)
        .args(["ingest", "--set", "dataset=EuroSAT", "--set", "weights.alpha=0", "--set", "weights.beta=0"])
        .arg("--synth")
        .arg(&synth)
        .arg("--out")
        .arg(&manifest));
    assert!(stdout.contains("total\t20"), "{stdout}");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 20);

    std::fs::create_dir(synth.join("zebra")).unwrap();
    let (code, _, err) = run(bin()
        .env("DUALPROMPT_DATA_ROOT", &real)
        .args(["ingest", "--set", "dataset=EuroSAT", "--set", "weights.alpha=0", "--set", "weights.beta=0"])
        .arg("--synth")
        .arg(&synth));
    assert_eq!(code, 1);
    assert!(err.contains("zebra"), "{err}");
}

#[test]
fn export_writes_one_record_per_example() {
    let tmp = TempDir::new().unwrap();
    let run_dir = tmp.path().join("run");
    quick_toy_train(&run_dir);
    let out = tmp.path().join("emb/test.jsonl");
    let stdout = ok(bin()
        .arg("export")
        .arg("--checkpoint")
        .arg(run_dir.join("final.ckpt"))
        .args(["--split", "test", "--out"])
        .arg(&out));
    assert!(stdout.starts_with("60 embeddings"), "{stdout}");
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 60);
    let rec: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(rec["vector"].as_array().unwrap().len(), 16);

    let (code, _, _) = run(bin()
        .arg("export")
        .args(["--split", "holdout", "--out"])
        .arg(tmp.path().join("x.jsonl")));
    assert_eq!(code, 1);
}

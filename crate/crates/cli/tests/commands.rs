use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latent_steer::evaluation::EvalReport;
use latent_steer::persist::Checkpoint;
use latent_steer::{EditSession, Image, ModelBundle, SeededRng, ToyConfig, TransformKind, TransformModule};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latent-steer"));
    c.env_remove("LATENT_STEER_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A small training config rooted in `dir`.
fn write_config(dir: &Path, iterations: u64, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "seed": 5,
  "transform": "global-linear",
  "train": {{"iterations": {iterations}, "batch_size": 4, "checkpoint_interval": 10,
             "optimizer": {{"learning_rate": 0.05, "grad_clip": 0.1}}{extra}}},
  "paths": {{"checkpoint_dir": "{ck}", "report_dir": "{rep}"}}
}}"#,
        ck = dir.join("ckpt").display(),
        rep = dir.join("reports").display(),
    );
    let path = dir.join("run.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn oracle_checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("oracle.json");
    Checkpoint::toy_oracle().save(&path).unwrap();
    path
}

#[test]
fn train_writes_checkpoints_log_and_progress() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 25, "");
    let out = run(bin().arg("train").arg(&cfg).args(["--progress-every", "5"]));
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["ckpt/final.json", "ckpt/iter_000010.json", "ckpt/iter_000020.json", "reports/train_log.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let progress: Vec<String> = stdout(&out).lines().filter(|l| l.starts_with("iter=")).map(String::from).collect();
    assert_eq!(progress.len(), 5);
    let fields: Vec<&str> = progress[0].split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
    assert_eq!(fields, ["iter", "reg", "disc", "content", "total"]);
    let ckpt = Checkpoint::load(&dir.path().join("ckpt/final.json")).unwrap();
    assert_eq!(ckpt.iteration, 25);
    assert!(ckpt.optimizer_state().unwrap().is_some());
    assert_eq!(ckpt.config.unwrap().seed, 5);
}

#[test]
fn same_seed_gives_byte_identical_logs_and_env_overrides_seed() {
    let logs: Vec<Vec<u8>> = [None, None, Some("9"), Some("9")]
        .iter()
        .map(|seed| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = write_config(dir.path(), 15, "");
            let mut cmd = bin();
            cmd.arg("train").arg(&cfg);
            if let Some(s) = seed {
                cmd.env("LATENT_STEER_SEED", s);
            }
            let out = run(&mut cmd);
            assert!(out.status.success(), "{}", stderr(&out));
            let ckpt = Checkpoint::load(&dir.path().join("ckpt/final.json")).unwrap();
            assert_eq!(ckpt.config.unwrap().seed, seed.map_or(5, |s| s.parse().unwrap()));
            std::fs::read(dir.path().join("reports/train_log.csv")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[2], logs[3]);
    assert_ne!(logs[0], logs[2]);
}

#[test]
fn bad_configs_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 10, "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("0.05", "-0.05");
    std::fs::write(&cfg, text).unwrap();
    let out = run(bin().arg("train").arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.optimizer.learning_rate"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), 10, r#", "momentum": 0.9"#);
    let out = run(bin().arg("train").arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("momentum"), "{}", stderr(&out));

    let out = run(bin().arg("train").arg(dir.path().join("absent.json")));
    assert_eq!(out.status.code(), Some(2));

    let out = run(bin().arg("train").arg(write_config(dir.path(), 10, "")).env("LATENT_STEER_SEED", "abc"));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("LATENT_STEER_SEED"));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 30, "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("0.05", "1e300").replace("0.1}", "null}");
    std::fs::write(&cfg, text).unwrap();
    let out = run(bin().arg("train").arg(&cfg));
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn zero_delta_edit_writes_identical_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = oracle_checkpoint(dir.path());
    let out = run(bin()
        .args(["edit", "--z-seed", "4", "--delta", "background=0"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success(), "{}", stderr(&out));
    let a = std::fs::read(dir.path().join("original.png")).unwrap();
    let b = std::fs::read(dir.path().join("edited.png")).unwrap();
    assert_eq!(a, b);
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["identity"].as_f64().unwrap(), 1.0);
}

#[test]
fn edit_moves_the_requested_attribute() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = oracle_checkpoint(dir.path());
    let out = run(bin()
        .args(["edit", "--z-seed", "4", "--delta", "size=+0.2,disk=-0.1"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success(), "{}", stderr(&out));
    let s: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let applied: Vec<f64> = serde_json::from_value(s["applied"].clone()).unwrap();
    assert_eq!(applied[0], 0.0);
    assert!((applied[1] - 0.2).abs() < 1e-12 || s["clip_adjustments"][1].as_f64().unwrap() != 0.0);
    let before = Image::from_png(&std::fs::read(dir.path().join("original.png")).unwrap()).unwrap();
    let after = Image::from_png(&std::fs::read(dir.path().join("edited.png")).unwrap()).unwrap();
    assert_ne!(before, after);
}

#[test]
fn edit_from_image_inverts_first() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = oracle_checkpoint(dir.path());
    let b = ModelBundle::toy(ToyConfig::default()).unwrap();
    let target = dir.path().join("target.png");
    std::fs::write(&target, EditSession::from_seed(&b, 2).unwrap().original().to_png().unwrap()).unwrap();
    let out = run(bin()
        .args(["edit", "--delta", "disk=0.1", "--inversion-steps", "200"])
        .arg("--image")
        .arg(&target)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success(), "{}", stderr(&out));
    let s: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(s["inversion_mse"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn edit_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = oracle_checkpoint(dir.path());
    let edit = |args: &[&str], ckpt: &Path| {
        run(bin().arg("edit").args(args).arg("--checkpoint").arg(ckpt).arg("--out").arg(dir.path()))
    };
    let out = edit(&["--z-seed", "1", "--delta", "smile=0.2"], &ckpt);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("smile"));
    let out = edit(&["--z-seed", "1", "--delta", "size=0.2"], &dir.path().join("missing.json"));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("not found"));

    let narrow = TransformModule::init(TransformKind::GlobalLinear, 5, 3, &mut SeededRng::new(1)).unwrap();
    let bad = dir.path().join("narrow.json");
    Checkpoint::for_transform(&narrow).save(&bad).unwrap();
    let out = edit(&["--z-seed", "1", "--delta", "size=0.2"], &bad);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dimension mismatch"), "{}", stderr(&out));

    std::fs::write(dir.path().join("garbage.json"), "{").unwrap();
    let out = edit(&["--z-seed", "1", "--delta", "size=0.2"], &dir.path().join("garbage.json"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_on_oracle_checkpoint_keeps_leakage_small() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = oracle_checkpoint(dir.path());
    let out = run(bin()
        .args(["eval", "--images", "200", "--repeats", "2", "--pair-study", "size", "--pairs", "3"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("leakage"));
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval_report.json")).unwrap()).unwrap();
    let max = report.max_leakage().unwrap();
    assert!(max <= 0.02, "{max}");
    let csv = std::fs::read_to_string(dir.path().join("eval_report.csv")).unwrap();
    assert!(csv.starts_with("targets,bin,"));
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("pairs_size/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["pairs"].as_array().unwrap().len(), 3);
}

#[test]
fn invert_with_one_step_has_trace_of_length_one() {
    let dir = tempfile::tempdir().unwrap();
    let b = ModelBundle::toy(ToyConfig::default()).unwrap();
    let target = dir.path().join("target.png");
    std::fs::write(&target, EditSession::from_seed(&b, 3).unwrap().original().to_png().unwrap()).unwrap();
    let json = dir.path().join("inv.json");
    let recon = dir.path().join("recon.png");
    let out = run(bin()
        .args(["invert", "--steps", "1"])
        .arg("--image")
        .arg(&target)
        .arg("--out")
        .arg(&json)
        .arg("--reconstruction")
        .arg(&recon));
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let trace = v["trace"].as_array().unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace[0].as_f64(), v["final_mse"].as_f64());
    assert!(recon.exists());

    let small = dir.path().join("small.png");
    std::fs::write(&small, Image::filled(4, 4, 0.5).to_png().unwrap()).unwrap();
    let out = run(bin().arg("invert").arg("--image").arg(&small).arg("--out").arg(&json));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_prints_a_passing_report() {
    let out = run(bin().args(["gradcheck", "--points", "3", "--kind", "local-mlp", "--by-term"]));
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    for name in ["reg_loss", "generate", "end_to_end_reg", "end_to_end_total"] {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
    assert!(text.lines().last().unwrap().ends_with("PASS"));
    let out = run(bin().args(["gradcheck", "--kind", "quadratic"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn serve_rejects_missing_checkpoint() {
    let out = run(bin().args(["serve", "--checkpoint", "/nonexistent/ckpt.json"]));
    assert_eq!(out.status.code(), Some(2));
}

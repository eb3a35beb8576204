use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
output_dir = "run"

[[datasets]]
name = "scene"
kind = "binary_attributes"
labels = ["bright_background", "border"]
root = "scene"
holdout = 4

[datasets.synthetic]
per_domain = 4
labels = "scene"

[[datasets]]
name = "hue"
kind = "categorical"
labels = ["red", "green", "blue"]
root = "hue"
holdout = 6

[datasets.synthetic]
per_domain = 5
labels = "hue"
vary_background = true

[net]
image_size = 16
g_width = 0.125
n_res = 1
d_width = 0.125

[train]
alternation = "round_robin"
batch_size = 4
n_critic = 2
warm_epochs = 1
decay_epochs = 1
checkpoint_every = 5

[eval]
grid_inputs = 2
"#;

/// Runs the binary inside `cwd`, where relative output directories land.
fn stargan(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stargan"))
        .current_dir(cwd)
        .args(args)
        .env_remove("STARGAN_OUTPUT_ROOT")
        .output()
        .expect("run stargan")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates the corpora and trains the tiny joint run once.
fn trained(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, TINY);
    let o = stargan(dir, &["make-synthetic", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", text(&o));
    let o = stargan(dir, &["train", "--config", s(&cfg), "--print-every", "0"]);
    assert!(o.status.success(), "{}", text(&o));
    cfg
}

#[test]
fn make_synthetic_writes_corpus_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = stargan(dir.path(), &["make-synthetic", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("hue: 15 images"));
    let hue = dir.path().join("hue");
    assert_eq!(fs::read_dir(hue.join("images")).unwrap().count(), 15);
    assert!(hue.join("annotations.txt").exists() && hue.join("oracle.json").exists());

    let again = stargan(dir.path(), &["make-synthetic", "--config", s(&cfg)]);
    assert!(!again.status.success());
    assert!(text(&again).contains("non-empty"), "{}", text(&again));
}

#[test]
fn make_synthetic_rejects_zero_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = stargan(dir.path(), &["make-synthetic", "--config", s(&cfg), "--set", "datasets.1.synthetic.per_domain=0"]);
    assert!(!o.status.success());
    assert!(!dir.path().join("hue").exists());
}

#[test]
fn train_translate_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let run = dir.path().join("run");
    let ckpt = run.join("latest.ckpt");
    assert!(ckpt.exists() && run.join("step_00000005.ckpt").exists());
    assert!(run.join("config.toml").exists());

    // The joint schedule alternates origins step by step.
    let log = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    let origins: Vec<&str> = log.lines().skip(1).filter(|l| l.contains(",D,")).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert!(origins.len() >= 4);
    assert!(origins.windows(2).all(|w| w[0] != w[1]), "{origins:?}");

    let input = dir.path().join("hue/images").read_dir().unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("translated");
    let o = stargan(dir.path(), &[
        "translate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&out),
        "--target", "hue.blue", "--target", "scene.bright_background+scene.border", s(&input),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 2);
    let written = fs::read_dir(&out).unwrap().next().unwrap().unwrap().path();
    assert_eq!(image::open(written).unwrap().to_rgb8().dimensions(), (16, 16));

    let o = stargan(dir.path(), &[
        "translate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&out),
        "--target", "hue.red", "--mask", "scene", s(&input),
    ]);
    assert!(o.status.success(), "{}", text(&o));

    let o = stargan(dir.path(), &["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", text(&o));
    let eval = run.join("eval");
    for f in ["report.json", "report.md", "grid_hue.png", "grid_scene.png", "mask_probe.png"] {
        assert!(eval.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert!(report["mask_probe"]["chance"].as_f64().unwrap() > 0.66);
}

#[test]
fn translate_lists_valid_names_for_unknown_targets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let ckpt = dir.path().join("run/latest.ckpt");
    let input = dir.path().join("hue/images").read_dir().unwrap().next().unwrap().unwrap().path();
    let o = stargan(dir.path(), &[
        "translate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(dir.path()),
        "--target", "purple", s(&input),
    ]);
    assert!(!o.status.success());
    let msg = text(&o);
    assert!(msg.contains("unknown domain `purple`") && msg.contains("hue.green") && msg.contains("scene.border"), "{msg}");

    let o = stargan(dir.path(), &[
        "translate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(dir.path()),
        "--target", "hue.red", "--mask", "faces", s(&input),
    ]);
    assert!(!o.status.success());
    assert!(text(&o).contains("valid datasets: scene, hue"));
}

#[test]
fn checkpoint_from_another_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let ckpt = dir.path().join("run/latest.ckpt");
    let o = stargan(dir.path(), &["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--set", "train.seed=9"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("was written by configuration"));
}

#[test]
fn evaluate_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = stargan(dir.path(), &["evaluate", "--config", s(&cfg), "--checkpoint", s(&dir.path().join("missing.ckpt"))]);
    assert!(!o.status.success());
    assert!(text(&o).contains("missing.ckpt"));
}

#[test]
fn invalid_config_exits_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = stargan(dir.path(), &["train", "--config", s(&cfg), "--set", "train.n_critic=0"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("n_critic"), "{}", text(&o));
}

#[test]
fn output_root_variable_relocates_relative_output_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert!(stargan(dir.path(), &["make-synthetic", "--config", s(&cfg)]).status.success());
    let root = dir.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_stargan"))
        .current_dir(dir.path())
        .args(["train", "--config", s(&cfg), "--max-steps", "2", "--print-every", "0"])
        .env("STARGAN_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(root.join("run/latest.ckpt").exists());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn count_params_prints_exact_totals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = stargan(dir.path(), &["count-params", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", text(&o));
    let out = text(&o);
    let total: u64 = out.lines().find_map(|l| l.strip_prefix("total parameters: ")).and_then(|v| v.parse().ok()).unwrap();
    let per_net: Vec<u64> = out
        .lines()
        .filter_map(|l| l.strip_prefix("total parameters: "))
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(per_net.len(), 3);
    assert_eq!(per_net[0] + per_net[1], per_net[2]);
    assert_eq!(total, per_net[0]);
    assert!(out.lines().next().unwrap().starts_with("config "));
}

#[test]
fn count_params_reads_architecture_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let arch = dir.path().join("nets.arch");
    let o = stargan(dir.path(), &["count-params", "--config", s(&cfg), "--emit-arch", s(&arch)]);
    assert!(o.status.success(), "{}", text(&o));
    let from_cfg = text(&o);
    let o = stargan(dir.path(), &["count-params", "--arch", s(&arch), "--size", "16"]);
    assert!(o.status.success(), "{}", text(&o));
    let last = |t: &str| t.lines().rev().find(|l| l.starts_with("total parameters: ")).unwrap().to_owned();
    assert_eq!(last(&from_cfg), last(&text(&o)));

    let mut broken = fs::read_to_string(&arch).unwrap();
    broken = broken.replacen("CONV-(N8, K4x4", "CONV-(N8, Q4x4", 1);
    fs::write(&arch, &broken).unwrap();
    let line = broken.lines().position(|l| l.contains("Q4x4")).unwrap() + 1;
    let o = stargan(dir.path(), &["count-params", "--arch", s(&arch)]);
    assert!(!o.status.success());
    assert!(text(&o).contains(&format!("line {line}")), "{}", text(&o));
}

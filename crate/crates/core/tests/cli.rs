//! End-to-end runs of the command-line tool on small synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ganomaly::datasets::synthetic::render_scene;
use ganomaly::datasets::SceneConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ganomaly"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &Path, name: &str, epochs: usize, extra: &str) -> PathBuf {
    let text = format!(
        r#"
output_dir = "runs"

[dataset]
kind = "synthetic"
seed = 7

[dataset.synthetic]
count = 40
image_size = 32
abnormal_ratio = 0.3

[arch]
input_size = 32
channels = 3
latent_dim = 8
base_width = 4

[train]
epochs = {epochs}
batch_size = 8
seed = 11
checkpoint_every = 2
{extra}
"#
    );
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train(cfg: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "train failed: {}", stderr(&o));
    PathBuf::from(stdout(&o).trim())
}

fn run_dir_of(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap().parent().unwrap().to_path_buf()
}

fn telemetry(run_dir: &Path) -> String {
    fs::read_to_string(run_dir.join("telemetry.csv")).unwrap()
}

#[test]
fn train_writes_one_telemetry_row_per_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = train(&config(tmp.path(), "a.toml", 3, ""), &[]);
    let dir = run_dir_of(&ck);

    let name = dir.file_name().unwrap().to_str().unwrap().to_string();
    let parts: Vec<&str> = name.split('-').collect();
    assert_eq!(parts[0], "train");
    assert_eq!(parts[1].len(), 12);
    assert!(parts[1].chars().all(|c| c.is_ascii_hexdigit()));
    assert!(parts[2].parse::<u64>().is_ok());

    let t = telemetry(&dir);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines[0], "epoch,l_adv,l_con,l_enc,l_g,l_d");
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[0] as usize, i + 1);
        assert!(cols.iter().all(|v| v.is_finite()));
    }
    for f in ["config.toml", "split.json", "run_log.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert!(dir.join("checkpoints/epoch-0002/manifest.json").is_file());
    assert_eq!(ck, dir.join("checkpoints/epoch-0003"));
}

#[test]
fn resumed_run_reproduces_uninterrupted_telemetry() {
    let tmp = tempfile::tempdir().unwrap();
    let full = config(tmp.path(), "full.toml", 4, "");
    let a = telemetry(&run_dir_of(&train(&full, &[])));
    let again = telemetry(&run_dir_of(&train(&full, &[])));
    assert_eq!(a, again, "same seed, same telemetry");

    let half = config(tmp.path(), "half.toml", 2, "");
    let dir = run_dir_of(&train(&half, &[]));
    assert_eq!(telemetry(&dir).lines().count(), 3);
    let ck = train(&full, &["--resume", dir.to_str().unwrap()]);
    assert_eq!(run_dir_of(&ck), dir);
    assert_eq!(telemetry(&dir), a);
}

#[test]
fn evaluation_reports_and_flags_partitioned_scaling() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "e.toml", 2, "");
    let ck = train(&cfg, &[]);
    let ck = ck.to_str().unwrap();

    let out = tmp.path().join("global");
    let o = run(&["evaluate", "--config", cfg.to_str().unwrap(), "--checkpoint", ck, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["label_dependent"], false);
    assert!(r.get("warning").is_none());
    assert_eq!(r["scaling"], "global");
    for key in ["confusion", "metrics", "auc", "threshold", "sweep"] {
        assert!(r.get(key).is_some(), "{key}");
    }
    for f in ["scores.csv", "scores.json", "scatter.svg"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let rows = fs::read_to_string(out.join("scores.csv")).unwrap().lines().count();
    assert_eq!(rows as u64, 1 + r["samples"].as_u64().unwrap());

    let out = tmp.path().join("partitioned");
    let o = run(&[
        "evaluate", "--config", cfg.to_str().unwrap(), "--checkpoint", ck,
        "--scaling", "partitioned", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("WARNING"));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["label_dependent"], true);
    assert!(r["warning"].as_str().unwrap().contains("ground-truth labels"));
}

#[test]
fn config_problems_are_all_reported_with_exit_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "bad.toml", 0, "learning_rat = 0.1\nbatch_size_typo = 2");
    let o = run(&["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("learning_rat"), "{err}");
    assert!(err.contains("batch_size_typo"), "{err}");
    assert!(err.contains("epochs"), "{err}");

    let o = run(&["train", "--config", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    let o = run(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "missing --checkpoint is a usage error");
}

#[test]
fn missing_manifest_images_are_listed_with_exit_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("img");
    fs::create_dir_all(&images).unwrap();
    let scene = SceneConfig {
        image_size: 32,
        ..SceneConfig::default()
    };
    let mut entries = Vec::new();
    for i in 0..6 {
        let s = render_scene(&scene, i, i == 0).unwrap();
        let file = format!("{i}.png");
        if i != 3 {
            image::save_buffer(images.join(&file), &s.image.pixels, 32, 32, image::ExtendedColorType::Rgb8).unwrap();
        }
        entries.push(serde_json::json!({ "id": format!("img{i}"), "file": file, "labels": s.classes }));
    }
    fs::write(tmp.path().join("m.json"), serde_json::json!({ "images": entries }).to_string()).unwrap();
    let cfg = tmp.path().join("m.toml");
    fs::write(
        &cfg,
        r#"
[dataset]
kind = "manifest"
manifest = "m.json"
image_root = "img"
novel_classes = ["triangle"]
[arch]
channels = 3
"#,
    )
    .unwrap();
    let o = run(&["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("img3"), "{}", stderr(&o));
}

#[test]
fn score_command_decides_with_a_reference_range() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = train(&config(tmp.path(), "s.toml", 1, ""), &[]);
    let scene = SceneConfig {
        image_size: 32,
        ..SceneConfig::default()
    };
    let png = tmp.path().join("one.png");
    let s = render_scene(&scene, 0, false).unwrap();
    image::save_buffer(&png, &s.image.pixels, 32, 32, image::ExtendedColorType::Rgb8).unwrap();
    let ck = ck.to_str().unwrap();

    let o = run(&["score", "--checkpoint", ck, png.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cols: Vec<String> = stdout(&o).trim().split('\t').map(String::from).collect();
    assert_eq!(cols.len(), 2);
    assert!(cols[1].parse::<f64>().unwrap() >= 0.0);

    let o = run(&["score", "--checkpoint", ck, "--reference-range", "0,1e9", png.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).trim().ends_with("normal"));

    let o = run(&["score", "--checkpoint", ck, tmp.path().join("nope.png").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsrnet::Image;

fn dsrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsrnet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dsrnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn texture(seed: u64, h: usize, w: usize) -> Image {
    let f = seed as f64;
    Image::from_fn(h, w, |y, x, c| {
        let (y, x, c) = (y as f64, x as f64, c as f64);
        (0.5 + 0.3 * (0.21 * x + 0.13 * y * (1.0 + 0.1 * f) + c + f).sin() + 0.15 * (0.05 * x * y / (1.0 + f) + 0.7 * c).cos())
            .clamp(0.0, 1.0)
    })
}

fn sources(root: &Path) -> PathBuf {
    let dir = root.join("sources");
    fs::create_dir_all(&dir).unwrap();
    for i in 0..4 {
        texture(i, 40, 40).save_png(dir.join(format!("s{i}.png"))).unwrap();
    }
    dir
}

fn synthesize(root: &Path, name: &str, count: &str) -> PathBuf {
    let out = root.join(name);
    ok(&["synthesize", "--source-dir", s(&sources(root)), "--out", s(&out), "--count", count, "--crop-size", "32", "--seed", "7"]);
    out
}

const TINY: &[&str] = &[
    "--base-width",
    "8",
    "--dsd-levels",
    "2",
    "--blocks-per-level",
    "1",
    "--backbone-narrow",
    "16",
    "--image-size",
    "16",
];

fn train(root: &Path, data: &Path, ckpt: &str, extra: &[&str]) -> (Output, PathBuf) {
    let dir = root.join(ckpt);
    let manifest = data.join("manifest.jsonl");
    let mut args = vec!["train", "--manifest", s(&manifest), "--checkpoint-dir", s(&dir), "--epochs", "1"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    (dsrnet(&args), dir)
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn synthesize_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synthesize(tmp.path(), "a", "4");
    let b = synthesize(tmp.path(), "b", "4");
    assert_eq!(files(&a), files(&b));
    for f in files(&a) {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f}");
    }
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("synthesis_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["gammas"]["gamma2"], serde_json::json!([0.4, 1.0]));
    assert_eq!(fs::read_to_string(a.join("manifest.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn missing_source_dir_is_a_resource_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = dsrnet(&["synthesize", "--source-dir", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(dsrnet(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(dsrnet(&["frobnicate"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "learning_rate = 3\n").unwrap();
    assert_eq!(dsrnet(&["train", "--config", s(&cfg)]).status.code(), Some(1));
    assert_eq!(dsrnet(&["train", "--ablate", "depth=2"]).status.code(), Some(1));
    assert!(dsrnet(&["--help"]).status.success());
}

#[test]
fn train_infer_evaluate_montage() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = synthesize(root, "data", "4");

    let (out, ckpt_dir) = train(root, &data, "ckpt", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpts: Vec<String> = files(&ckpt_dir).into_iter().filter(|f| f.ends_with(".ckpt")).collect();
    assert_eq!(ckpts, vec!["epoch_001.ckpt"]);
    let log = fs::read_to_string(ckpt_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch", "pixel", "perceptual", "exclusion", "reconstruction", "total", "wall_ms"] {
        assert!(first.get(key).is_some(), "log lacks {key}");
    }
    let ckpt = ckpt_dir.join("epoch_001.ckpt");

    // resume continues the same trajectory in the same log
    ok(&["train", "--resume", s(&ckpt), "--epochs", "2"]);
    let log = fs::read_to_string(ckpt_dir.join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, (1..=8).collect::<Vec<_>>());

    // inference with and without the residue
    let inputs = root.join("inputs");
    fs::create_dir_all(&inputs).unwrap();
    for name in ["syn_00000", "syn_00001", "syn_00002"] {
        fs::copy(data.join(format!("{name}_I.png")), inputs.join(format!("{name}_I.png"))).unwrap();
    }
    let plain = root.join("plain");
    let full = root.join("full");
    ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&inputs.join("syn_00000_I.png")), "--out", s(&plain)]);
    assert_eq!(files(&plain), vec!["syn_00000_I_R.png", "syn_00000_I_T.png"]);
    ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&inputs), "--out", s(&full), "--with-residue"]);
    assert_eq!(files(&full).len(), 9);
    assert_eq!(fs::read(plain.join("syn_00000_I_T.png")).unwrap(), fs::read(full.join("syn_00000_I_T.png")).unwrap());
    assert!(!dsrnet(&["infer", "--checkpoint", s(&root.join("missing.ckpt")), "--input", s(&inputs), "--out", s(&plain)]).status.success());

    // evaluation: model, ground truth as predictions, and published summaries
    let report = root.join("reports/model");
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--manifest", &format!("toy={}", s(&data)), "--out", s(&report)]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["aggregate"]["image_count"], 4);
    assert_eq!(fs::read_to_string(report.with_extension("csv")).unwrap().lines().count(), 5);

    let gt_preds = root.join("gt_preds");
    fs::create_dir_all(&gt_preds).unwrap();
    for i in 0..4 {
        fs::copy(data.join(format!("syn_{i:05}_T.png")), gt_preds.join(format!("syn_{i:05}_I_T.png"))).unwrap();
    }
    let gt_report = root.join("reports/gt");
    ok(&["evaluate", "--predictions", s(&gt_preds), "--manifest", s(&data.join("manifest.jsonl")), "--out", s(&gt_report)]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(gt_report.with_extension("json")).unwrap()).unwrap();
    for row in json["rows"].as_array().unwrap() {
        assert_eq!(row["psnr"], 100.0);
        assert!((row["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }

    // montage of the three inferred inputs, ground truth taken from the data directory
    let grid = root.join("grid.png");
    let mut args = vec!["montage".to_string()];
    for name in ["syn_00000", "syn_00001", "syn_00002"] {
        args.push("--input".into());
        args.push(s(&inputs.join(format!("{name}_I.png"))).into());
    }
    args.extend(["--pred-dir".into(), s(&full).into(), "--gt-dir".into(), s(&data).into(), "--out".into(), s(&grid).into()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&argv);
    let img = Image::load(&grid).unwrap();
    // 3 rows of 32 px and 5 panels of 32 px, with 4 px gaps
    assert_eq!(img.dims(), (3 * 32 + 4 * 4, 5 * 32 + 6 * 4));
    let again = root.join("grid2.png");
    let mut argv2 = argv.clone();
    let last = argv2.len() - 1;
    argv2[last] = s(&again);
    ok(&argv2);
    assert_eq!(fs::read(&grid).unwrap(), fs::read(&again).unwrap());

    // without ground truth the panel is dropped and the layout noted
    let bare = root.join("bare.png");
    let out = ok(&["montage", "--input", s(&inputs.join("syn_00000_I.png")), "--pred-dir", s(&plain), "--out", s(&bare)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ground truth panel omitted"));
    assert_eq!(Image::load(&bare).unwrap().dims(), (32 + 2 * 4, 3 * 32 + 4 * 4));
}

#[test]
fn evaluate_aggregates_published_means() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = tmp.path().join("table.json");
    fs::write(
        &summary,
        r#"[{"name":"a","image_count":20,"mean_psnr":24.23,"mean_ssim":0.0},
            {"name":"b","image_count":200,"mean_psnr":26.28,"mean_ssim":0.0},
            {"name":"c","image_count":199,"mean_psnr":24.56,"mean_ssim":0.0},
            {"name":"d","image_count":55,"mean_psnr":25.68,"mean_ssim":0.0}]"#,
    )
    .unwrap();
    let out = ok(&["evaluate", "--summary", s(&summary), "--out", s(&tmp.path().join("avg"))]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("average") && l.contains("psnr 25.40")), "{stdout}");
}

#[test]
fn config_file_and_ablation_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = synthesize(root, "data", "2");
    let cfg = root.join("run.toml");
    fs::write(&cfg, "epochs = 5\nlr = 0.0005\nseed = 3\n").unwrap();
    let (out, dir) = train(root, &data, "abl", &["--config", s(&cfg), "--ablate", "reconstruction=linear", "--ablate", "encoder=hypercolumn"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run_config.json")).unwrap()).unwrap();
    // the command line's --epochs 1 beats the file's 5
    assert_eq!(run["epochs"], 1);
    assert_eq!(run["lr"], 0.0005);
    assert_eq!(run["reconstruction"], "linear");
    assert_eq!(run["model"]["encoder"], "hypercolumn");
    let log = fs::read_to_string(dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["reconstruction"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = synthesize(root, "data", "2");
    let (out, _) = train(root, &data, "boom", &["--lr", "1e30"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

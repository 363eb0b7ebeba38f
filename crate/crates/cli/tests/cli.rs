use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lcs_core::volume::io::{load_labels, load_mask, load_volume, save_mask};
use lcs_core::volume::{binarize, ClassSet};
use serde_json::{json, Value};

fn lcs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("RUST_BACKTRACE")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lcs(args);
    assert!(
        out.status.success(),
        "lcs {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, value: Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn phantom() -> Value {
    json!({
        "grid": [16, 16, 16],
        "n_coarse": 3,
        "fine_split": {"2": 2},
        "radius_short": [1.5, 2.0],
        "radius_long": [2.0, 2.5],
        "position_jitter": 0.5
    })
}

fn ratios() -> Value {
    json!({"train": 3, "atlas": 1, "val": 1, "test": 2})
}

fn train_config(head: &str) -> Value {
    json!({"head": head, "epochs": 2, "batch_size": 2, "base_channels": 2, "mask_gain": 1000.0, "val_every": 1})
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

/// generate, train, infer and eval into `root`.
fn pipeline(root: &Path, cfg_dir: &Path) -> PathBuf {
    let gen_cfg = write_config(
        cfg_dir,
        "gen.json",
        json!({"phantom": phantom(), "ratios": ratios(), "repeats": 1}),
    );
    let data = root.join("data");
    ok(&[
        "generate",
        "--config",
        &gen_cfg,
        "--seed",
        "4",
        "--out",
        s(&data),
    ]);
    assert!(data.join("dataset.json").exists());

    let lcs_cfg = write_config(cfg_dir, "lcs.json", train_config("lcs"));
    let model = root.join("model");
    let stdout = ok(&[
        "train",
        "--config",
        &lcs_cfg,
        "--data",
        s(&data),
        "--out",
        s(&model),
    ]);
    assert!(stdout.contains("best epoch"));
    let run: Value = serde_json::from_slice(&fs::read(model.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["classes"], json!([1, 2, 3]));
    let atlas = run["atlas"].as_str().unwrap().to_string();

    let image = data.join("case_000.f32raw");
    let seg = root.join("seg");
    let ck = model.join("model.lcs");
    ok(&[
        "infer",
        "--checkpoint",
        s(&ck),
        "--image",
        s(&image),
        "--out",
        s(&seg),
        "--workers",
        "2",
        "--probs",
    ]);
    let labels = load_labels(&seg.join("segmentation")).unwrap();
    assert_eq!(labels.dims(), [16, 16, 16]);
    assert!(labels.grid.data().iter().all(|v| *v <= 3));
    for name in ["prob_background", "prob_1", "prob_2", "prob_3"] {
        assert_eq!(load_volume(&seg.join(name)).unwrap().dims(), [16, 16, 16]);
    }
    let rec: Value = serde_json::from_slice(&fs::read(seg.join("infer.json")).unwrap()).unwrap();
    assert_eq!(rec["forward_passes"], json!(3));

    // A fine label the model never trained on, drawn on the atlas.
    let atlas_labels = load_labels(&data.join(format!("{atlas}_seg"))).unwrap();
    let mask = binarize(&atlas_labels, &ClassSet::from([4])).unwrap();
    let mask_path = root.join("child");
    save_mask(&mask_path, &atlas, &mask, [1.0; 3]).unwrap();
    assert_eq!(load_mask(&mask_path).unwrap(), mask);
    let novel = root.join("novel");
    let spec = format!("@{}", mask_path.display());
    ok(&[
        "infer",
        "--checkpoint",
        s(&ck),
        "--image",
        s(&image),
        "--labels",
        &spec,
        "--out",
        s(&novel),
    ]);
    let rec: Value = serde_json::from_slice(&fs::read(novel.join("infer.json")).unwrap()).unwrap();
    assert_eq!(rec["ids"], json!([4]));

    let eval = root.join("eval");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&eval),
    ]);
    assert!(stdout.contains("mean Dice"));
    assert!(eval.join("eval.csv").exists() && eval.join("eval.json").exists());
    data
}

#[test]
fn pipeline_runs_and_reruns_identically() {
    let cfg = tempfile::tempdir().unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), cfg.path());
    pipeline(b.path(), cfg.path());
    for sub in ["data", "seg", "novel", "eval"] {
        assert_eq!(
            files(&a.path().join(sub)),
            files(&b.path().join(sub)),
            "{sub} differs"
        );
    }
    assert_eq!(
        fs::read(a.path().join("model/model.lcs")).unwrap(),
        fs::read(b.path().join("model/model.lcs")).unwrap()
    );
}

#[test]
fn resume_continues_a_run() {
    let cfg = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let data = pipeline(root.path(), cfg.path());
    let more = write_config(
        cfg.path(),
        "more.json",
        json!({"head": "lcs", "epochs": 4, "batch_size": 2, "base_channels": 2, "mask_gain": 1000.0, "val_every": 1}),
    );
    let resumed = root.path().join("resumed");
    let straight = root.path().join("straight");
    let ck = root.path().join("model/model.lcs");
    ok(&[
        "train",
        "--config",
        &more,
        "--data",
        s(&data),
        "--resume",
        s(&ck),
        "--out",
        s(&resumed),
    ]);
    ok(&[
        "train",
        "--config",
        &more,
        "--data",
        s(&data),
        "--out",
        s(&straight),
    ]);
    assert_eq!(
        fs::read(resumed.join("model.lcs")).unwrap(),
        fs::read(straight.join("model.lcs")).unwrap()
    );
}

#[test]
fn experiments_and_report() {
    let cfg = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let flat = json!({"grid": [16, 16, 16], "n_coarse": 3, "fine_split": {}, "radius_short": [1.5, 2.0], "radius_long": [2.0, 2.5], "position_jitter": 0.5});
    let sweep = write_config(
        cfg.path(),
        "sweep.json",
        json!({"phantom": flat, "ratios": ratios(), "repeats": 1, "counts": [2], "train": train_config("baseline")}),
    );
    let stdout = ok(&[
        "sweep",
        "--config",
        &sweep,
        "--seed",
        "1",
        "--out",
        s(out.path()),
    ]);
    assert!(stdout.contains("count  2"));
    let many = write_config(
        cfg.path(),
        "many.json",
        json!({"phantom": flat, "ratios": ratios(), "k": 3, "c_max": 2, "train": train_config("baseline")}),
    );
    ok(&["manyclass", "--config", &many, "--out", s(out.path())]);
    let c2f = write_config(
        cfg.path(),
        "c2f.json",
        json!({"phantom": phantom(), "ratios": ratios(), "train": train_config("lcs")}),
    );
    let stdout = ok(&["coarse2fine", "--config", &c2f, "--out", s(out.path())]);
    assert!(stdout.contains("fine above naive for"));

    let before = files(out.path());
    let names: Vec<&str> = before.iter().map(|(n, _)| n.as_str()).collect();
    for n in [
        "sweep.csv",
        "sweep.json",
        "manyclass_plot.svg",
        "memory.json",
        "coarse2fine_plot.csv",
    ] {
        assert!(names.contains(&n), "missing {n}");
    }
    for (name, _) in &before {
        if name.contains("_plot") {
            fs::remove_file(out.path().join(name)).unwrap();
        }
    }
    let stdout = ok(&["report", "--out", s(out.path())]);
    assert_eq!(stdout.lines().count(), 3);
    assert_eq!(files(out.path()), before);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = lcs(&["train", "--data", s(&missing), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    let bad = write_config(dir.path(), "bad.json", json!({"epochs": "many"}));
    let out = lcs(&[
        "train",
        "--config",
        &bad,
        "--data",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert!(!out.status.success());
    let out = lcs(&["report", "--out", s(dir.path())]);
    assert!(!out.status.success());
    let out = lcs(&["generate"]);
    assert!(!out.status.success());
}

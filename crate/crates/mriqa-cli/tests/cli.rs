//! End-to-end tests of the command-line surface.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mriqa::imaging::{load_png, save_png};
use mriqa::rng::Rng;
use mriqa::trainer::distort::procedural_reference;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mriqa"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("bad JSON line '{l}': {e}")))
        .collect()
}

fn write_pair(dir: &Path) -> (PathBuf, PathBuf) {
    let reference = procedural_reference(320, 288, 7);
    let mut rng = Rng::new(3);
    let distorted =
        mriqa::trainer::distort::synth_distort(&reference, "noise".parse().unwrap(), 4, &mut rng)
            .unwrap();
    let dpath = dir.join("dist.png");
    let rpath = dir.join("ref.png");
    save_png(&distorted, &dpath).unwrap();
    save_png(&reference, &rpath).unwrap();
    (dpath, rpath)
}

#[test]
fn unknown_subcommand_exits_1_with_usage() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn help_exits_0() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn mask_writes_image_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let (dpath, rpath) = write_pair(dir.path());
    let out_path = dir.path().join("masked.png");
    let out = run(&[
        "--seed",
        "11",
        "mask",
        "--dist",
        dpath.to_str().unwrap(),
        "--ref",
        rpath.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let masked = load_png(&out_path).unwrap();
    assert_eq!((masked.width, masked.height), (256, 256));
    let mask_a = load_png(dir.path().join("masked.mask_a.png")).unwrap();
    assert_eq!((mask_a.width, mask_a.height), (32, 32));
    let ones_a = mask_a.data.chunks(3).filter(|p| p[0] == 255).count();
    assert_eq!(ones_a, 512);
    let mask_b = load_png(dir.path().join("masked.mask_b.png")).unwrap();
    assert_eq!((mask_b.width, mask_b.height), (64, 64));
    let ones_b = mask_b.data.chunks(3).filter(|p| p[0] == 255).count();
    assert_eq!(ones_b, 1024);
}

// zero-diff case: identical inputs reduce the masked image to the plain
// grid-sampled input, and the selection mask is pure tie-break
#[test]
fn mask_of_identical_pair_is_the_sampled_input() {
    let dir = tempfile::tempdir().unwrap();
    let img = procedural_reference(320, 320, 9);
    let path = dir.path().join("same.png");
    save_png(&img, &path).unwrap();
    let out_path = dir.path().join("masked.png");
    let out = run(&[
        "--seed",
        "5",
        "mask",
        "--dist",
        path.to_str().unwrap(),
        "--ref",
        path.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));

    // reproduce the sampling with the library: same seed, same stream order
    let cfg = mriqa::trainer::TrainConfig {
        seed: 5,
        ..Default::default()
    };
    let mut rng = Rng::new(5);
    let (gdst, _) = mriqa::trainer::sample_pair(&img, &img, 64, &cfg, &mut rng).unwrap();
    assert_eq!(load_png(&out_path).unwrap(), gdst.image);

    let mask_a = load_png(dir.path().join("masked.mask_a.png")).unwrap();
    assert_eq!(mask_a.data.chunks(3).filter(|p| p[0] == 255).count(), 512);
}

#[test]
fn mask_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (dpath, rpath) = write_pair(dir.path());
    let mut blobs = Vec::new();
    for run_dir in ["a", "b"] {
        let sub = dir.path().join(run_dir);
        std::fs::create_dir(&sub).unwrap();
        let out_path = sub.join("m.png");
        let out = run(&[
            "--seed",
            "42",
            "mask",
            "--dist",
            dpath.to_str().unwrap(),
            "--ref",
            rpath.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
        let mut blob = std::fs::read(&out_path).unwrap();
        blob.extend(std::fs::read(sub.join("m.mask_a.png")).unwrap());
        blob.extend(std::fs::read(sub.join("m.mask_b.png")).unwrap());
        blobs.push(blob);
    }
    assert_eq!(blobs[0], blobs[1]);
}

#[test]
fn mask_failure_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (dpath, _) = write_pair(dir.path());
    let out_path = dir.path().join("nope.png");
    let out = run(&[
        "mask",
        "--dist",
        dpath.to_str().unwrap(),
        "--ref",
        dir.path().join("missing.png").to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // one-line JSON error on stderr
    let err = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(parsed["kind"], "io");
    assert!(!out_path.exists());
    // no stray temp files either
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(".mriqa."))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn mismatched_pair_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (dpath, _) = write_pair(dir.path());
    let small = procedural_reference(128, 128, 1);
    let spath = dir.path().join("small.png");
    save_png(&small, &spath).unwrap();
    let out = run(&[
        "mask",
        "--dist",
        dpath.to_str().unwrap(),
        "--ref",
        spath.to_str().unwrap(),
        "--out",
        dir.path().join("m.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"train": {"lr": 0.001, "warp_drive": 9}}"#).unwrap();
    let (dpath, rpath) = write_pair(dir.path());
    let out = run(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "mask",
        "--dist",
        dpath.to_str().unwrap(),
        "--ref",
        rpath.to_str().unwrap(),
        "--out",
        dir.path().join("m.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warp_drive"), "{err}");
}

/// Small config keeping the smoke runs fast.
fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(
        &p,
        r#"{
  "backbone": {"patch_size": 4, "embed_dim": 8, "depths": [1, 1, 1, 1],
               "heads": [1, 2, 4, 4], "window": 4, "mlp_ratio": 2},
  "head": {"pool_size": 2, "mix_dim": 4, "hidden_dim": 6},
  "train": {"input_size": 64, "crop_menu": [64, 128], "batch": 4,
            "epochs": 3, "tta": 2}
}"#,
    )
    .unwrap();
    p
}

fn make_refs(dir: &Path, n: usize) -> PathBuf {
    let refs = dir.join("refs");
    std::fs::create_dir_all(&refs).unwrap();
    for r in 0..n {
        let img = procedural_reference(160, 128, r as u64);
        save_png(&img, refs.join(format!("ref{r}.png"))).unwrap();
    }
    refs
}

// full smoke: synth -> train -> eval on the same manifest
#[test]
fn synth_train_eval_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let refs = make_refs(dir.path(), 3);
    let data = dir.path().join("data");

    let out = run(&[
        "--seed",
        "1",
        "synth",
        "--refs",
        refs.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--kinds",
        "noise,blur",
        "--levels",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data.join("manifest.csv");
    assert!(manifest.exists());
    // 3 refs copied + 3 refs x 3 levels distorted
    let pngs = std::fs::read_dir(&data)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count();
    assert_eq!(pngs, 12);

    let ckpt = dir.path().join("model.ckpt");
    let out = run(&[
        "--seed",
        "1",
        "--config",
        cfg.to_str().unwrap(),
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let logs = stdout_lines(&out);
    assert_eq!(logs.len(), 3);
    for (e, log) in logs.iter().enumerate() {
        assert_eq!(log["epoch"].as_u64().unwrap() as usize, e);
        assert!(log["loss"].as_f64().unwrap().is_finite());
        assert!(log["lr"].as_f64().unwrap() > 0.0);
    }
    assert!(ckpt.exists());

    let out = run(&[
        "--seed",
        "2",
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--cross",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let reports = stdout_lines(&out);
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r["dataset"], "manifest");
        assert!(r["srcc"].as_f64().unwrap().is_finite());
        assert!(r["plcc"].as_f64().unwrap().is_finite());
        assert!(r["n"].as_u64().unwrap() >= 2);
    }

    // score one pair
    let dist = data.join("ref0_noise_l3.png");
    let reference = data.join("ref0.png");
    let out = run(&[
        "score",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--dist",
        dist.to_str().unwrap(),
        "--ref",
        reference.to_str().unwrap(),
        "--tta",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let score = &stdout_lines(&out)[0];
    assert!(score["score"].as_f64().unwrap().is_finite());

    // info dumps the header
    let out = run(&["info", "--ckpt", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let header: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(header["version"], 1);
    assert_eq!(header["backbone"]["embed_dim"], 8);
    assert!(header["params"].as_array().unwrap().len() > 10);

    // config mismatch against the checkpoint is a data error naming the field
    let other_cfg = dir.path().join("other.json");
    std::fs::write(
        &other_cfg,
        r#"{"backbone": {"patch_size": 4, "embed_dim": 16, "depths": [1,1,1,1],
                         "heads": [1,2,4,4], "window": 4, "mlp_ratio": 2}}"#,
    )
    .unwrap();
    let out = run(&[
        "--config",
        other_cfg.to_str().unwrap(),
        "info",
        "--ckpt",
        ckpt.to_str().unwrap(),
    ]);
    // info ignores configs; score checks them
    assert_eq!(out.status.code(), Some(0));
    let out = run(&[
        "--config",
        other_cfg.to_str().unwrap(),
        "score",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--dist",
        dist.to_str().unwrap(),
        "--ref",
        reference.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("embed_dim"), "{err}");
}

#[test]
fn truncated_checkpoint_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    std::fs::write(&p, b"MRI").unwrap();
    let out = run(&["info", "--ckpt", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

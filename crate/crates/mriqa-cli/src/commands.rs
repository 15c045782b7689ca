//! Subcommand implementations. Every command stages its outputs (temp file
//! in the destination directory, then rename) so a failure leaves nothing
//! behind.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use mriqa::backbone::BackboneConfig;
use mriqa::error::{Error, Result};
use mriqa::head::HeadConfig;
use mriqa::imaging::{load_png, save_gray_png, save_png, Image};
use mriqa::maskgen::generate_masked;
use mriqa::model::QualityModel;
use mriqa::rng::Rng;
use mriqa::trainer::checkpoint::{load_checkpoint, read_header, save_checkpoint, verify_config};
use mriqa::trainer::distort::{synth_distort, DistortKind};
use mriqa::trainer::manifest::{load_manifest, write_manifest, ManifestEntry, Split};
use mriqa::trainer::{
    cross_eval, evaluate, predict_tta, sample_pair, train, MaskModeKind, TrainConfig,
};

use crate::args;

/// Optional config file mirroring the three config structs; unknown keys are
/// rejected at every level.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    backbone: Option<BackboneConfig>,
    head: Option<HeadConfig>,
    train: Option<TrainConfig>,
}

pub struct Ctx {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    /// Set when --config carried an explicit backbone/head section (checked
    /// against checkpoints on load).
    pub explicit_model_cfg: bool,
}

pub fn build_ctx(cli: &crate::args::Cli) -> Result<Ctx> {
    let file: FileConfig = match &cli.config {
        None => FileConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
    };
    let explicit_model_cfg = file.backbone.is_some() || file.head.is_some();
    let backbone = file.backbone.unwrap_or_default();
    let head = file.head.unwrap_or_default();
    let mut train = file.train.unwrap_or_default();
    if let Some(seed) = cli.seed {
        train.seed = seed;
    }
    if cli.deterministic {
        train.deterministic = true;
    }
    train.validate()?;
    Ok(Ctx {
        backbone,
        head,
        train,
        explicit_model_cfg,
    })
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Write through a temp file in the target directory and rename into place.
fn stage_file(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = parent_dir(path);
    let tmp = tempfile::Builder::new()
        .prefix(".mriqa.")
        .tempfile_in(&dir)
        .map_err(|e| Error::io(&dir, e))?;
    write(tmp.path())?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn parse_mask_mode(mode: &str, ratio: Option<f64>) -> Result<(MaskModeKind, f64)> {
    match mode {
        "diff" => Ok((MaskModeKind::Diff, ratio.unwrap_or(0.25))),
        "random" => Ok((MaskModeKind::Random, ratio.unwrap_or(0.25))),
        other => Err(Error::Config(format!(
            "mask mode '{other}' is neither diff nor random"
        ))),
    }
}

/// Sidecar path: `out.png` -> `out.mask_a.png` / `out.mask_b.png`.
fn sidecar(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{tag}.png"))
}

pub fn run_mask(ctx: &Ctx, a: &args::MaskArgs) -> Result<()> {
    let (kind, ratio) = parse_mask_mode(&a.mode, a.ratio)?;
    let mut cfg = ctx.train.clone();
    cfg.mask_mode = kind;
    cfg.mask_ratio = ratio;

    let dist = load_png(&a.dist)?;
    let reference = load_png(&a.reference)?;
    let lattice = cfg.input_size / ctx.backbone.patch_size;
    let mut rng = Rng::new(cfg.seed);
    let (gdst, gref) = sample_pair(&dist, &reference, lattice, &cfg, &mut rng)?;
    let masked = generate_masked(&gdst, &gref, cfg.mode(), &mut rng)?;

    stage_file(&a.out, |p| save_png(&masked.image, p))?;
    let a_bytes = masked.mask_a.to_gray_bytes();
    stage_file(&sidecar(&a.out, "mask_a"), |p| {
        save_gray_png(&a_bytes, masked.mask_a.gw, masked.mask_a.gh, p)
    })?;
    let b_bytes = masked.mask_b.to_gray_bytes();
    stage_file(&sidecar(&a.out, "mask_b"), |p| {
        save_gray_png(&b_bytes, masked.mask_b.gw, masked.mask_b.gh, p)
    })?;
    Ok(())
}

pub fn run_synth(ctx: &Ctx, a: &args::SynthArgs) -> Result<()> {
    if a.levels == 0 || a.levels > 5 {
        return Err(Error::Range(format!("levels {} outside 1..=5", a.levels)));
    }
    let kinds: Vec<DistortKind> = a
        .kinds
        .split(',')
        .map(|s| DistortKind::from_str(s.trim()))
        .collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(Error::Config("no distortion kinds given".into()));
    }

    let mut ref_files: Vec<PathBuf> = std::fs::read_dir(&a.refs)
        .map_err(|e| Error::io(&a.refs, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    ref_files.sort();
    if ref_files.is_empty() {
        return Err(Error::Config(format!(
            "no PNG references in {}",
            a.refs.display()
        )));
    }

    // generate everything in memory before touching the output directory
    let root = Rng::new(ctx.train.seed);
    let mut outputs: Vec<(String, Image)> = Vec::new();
    let mut rows: Vec<(String, String, f64, String)> = Vec::new();
    for (ri, ref_path) in ref_files.iter().enumerate() {
        let reference = load_png(ref_path)?;
        let stem = ref_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("ref")
            .to_string();
        let ref_name = format!("{stem}.png");
        outputs.push((ref_name.clone(), reference.clone()));
        let kind = kinds[ri % kinds.len()];
        for level in 1..=a.levels {
            let mut rng = root.split(ri as u64).split(level as u64);
            let distorted = synth_distort(&reference, kind, level, &mut rng)?;
            let name = format!("{stem}_{}_l{level}.png", kind.name());
            outputs.push((name.clone(), distorted));
            rows.push((
                name,
                ref_name.clone(),
                (a.levels - level) as f64,
                stem.clone(),
            ));
        }
    }

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (name, img) in &outputs {
        stage_file(&a.out.join(name), |p| save_png(img, p))?;
    }
    stage_file(&a.out.join("manifest.csv"), |p| write_manifest(p, &rows))?;
    println!(
        "{}",
        serde_json::json!({
            "references": ref_files.len(),
            "images": outputs.len(),
            "manifest": a.out.join("manifest.csv"),
        })
    );
    Ok(())
}

pub fn run_train(ctx: &Ctx, a: &args::TrainArgs) -> Result<()> {
    let mut cfg = ctx.train.clone();
    if let Some(epochs) = a.epochs {
        cfg.epochs = epochs;
    }
    if let Some(ablate) = &a.ablate {
        for stage in ablate.split(',') {
            match stage.trim() {
                "agcs" => cfg.use_agcs = false,
                "mg" => cfg.use_mg = false,
                "fmm" => cfg.use_fmm = false,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation stage '{other}' (expected agcs, mg or fmm)"
                    )))
                }
            }
        }
    }
    if let Some(mode) = &a.mask_mode {
        let (kind, ratio) = parse_mask_mode(mode, a.ratio)?;
        cfg.mask_mode = kind;
        cfg.mask_ratio = ratio;
    } else if let Some(ratio) = a.ratio {
        cfg.mask_ratio = ratio;
    }
    cfg.val = cfg.val || a.val;
    cfg.validate()?;

    let entries = load_manifest(&a.manifest, cfg.seed)?;
    let outcome = train(&entries, ctx.backbone.clone(), ctx.head.clone(), &cfg, |log| {
        println!("{}", serde_json::to_string(log).expect("serializable log"));
    })?;
    stage_file(&a.out, |p| {
        save_checkpoint(&outcome.model, &outcome.resolved, p)
    })?;
    Ok(())
}

fn load_model(ctx: &Ctx, path: &Path) -> Result<(QualityModel<f32>, TrainConfig)> {
    if ctx.explicit_model_cfg {
        let header = read_header(path)?;
        verify_config(&header, &ctx.backbone, &ctx.head)?;
    }
    load_checkpoint(path)
}

/// Evaluation-time knobs that may override what the checkpoint stored.
fn eval_cfg(ctx: &Ctx, stored: TrainConfig, cli_seed: Option<u64>) -> TrainConfig {
    let mut cfg = stored;
    if let Some(seed) = cli_seed {
        cfg.seed = seed;
    }
    cfg.deterministic = cfg.deterministic || ctx.train.deterministic;
    cfg
}

pub fn run_score(ctx: &Ctx, a: &args::ScoreArgs, cli_seed: Option<u64>) -> Result<()> {
    let (model, stored) = load_model(ctx, &a.ckpt)?;
    let cfg = eval_cfg(ctx, stored, cli_seed);
    let dist = load_png(&a.dist)?;
    let reference = load_png(&a.reference)?;
    let n = a.tta.unwrap_or(cfg.tta);
    let rng = Rng::new(cfg.seed);
    let score = predict_tta(&model, &cfg, &dist, &reference, n, &rng)?;
    println!("{}", serde_json::json!({ "score": score }));
    Ok(())
}

pub fn run_eval(ctx: &Ctx, a: &args::EvalArgs, cli_seed: Option<u64>) -> Result<()> {
    let (model, stored) = load_model(ctx, &a.ckpt)?;
    let cfg = eval_cfg(ctx, stored, cli_seed);

    let label = |p: &Path| {
        p.file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string()
    };
    // in-dataset: the held-out split of the training manifest
    let entries = load_manifest(&a.manifest, cfg.seed)?;
    let test: Vec<ManifestEntry> = entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .cloned()
        .collect();
    let report = evaluate(&model, &cfg, &test, &label(&a.manifest))?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));

    // cross-dataset: every entry of each extra manifest
    let mut cross = Vec::new();
    for path in &a.cross {
        cross.push((label(path), load_manifest(path, cfg.seed)?));
    }
    for report in cross_eval(&model, &cfg, &cross)? {
        println!("{}", serde_json::to_string(&report).expect("serializable"));
    }
    Ok(())
}

pub fn run_info(a: &args::InfoArgs) -> Result<()> {
    let header = read_header(&a.ckpt)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&header).expect("serializable header")
    );
    Ok(())
}

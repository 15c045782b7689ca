//! Training and evaluation: dataset ingestion, the per-sample preprocessing
//! chain (pad, crop, grid-sample, mask, flip), the MAE/Adam training loop
//! with step decay, test-time multi-patch aggregation, and SRCC/PLCC
//! reporting.

pub mod adam;
pub mod checkpoint;
pub mod distort;
pub mod manifest;
pub mod metrics;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agcs::{sample_grids, GridSpec, SampledGrid};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::imaging::{load_png, random_crop_pair, reflect_pad_to, resize_bilinear, FlipAxis, Image};
use crate::maskgen::{generate_masked, MaskMode, MaskedImage};
use crate::model::{LossKind, QualityModel};
use crate::rng::Rng;
use adam::Adam;
use manifest::{ManifestEntry, Split};
use metrics::{plcc, srcc};

/// Mask-selection strategy named in configs; the random variant takes its
/// ratio from [`TrainConfig::mask_ratio`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskModeKind {
    #[default]
    Diff,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub batch: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub input_size: usize,
    /// Candidate crop side lengths; entries larger than the image are
    /// skipped, width and height are drawn independently.
    pub crop_menu: Vec<usize>,
    /// Pipeline toggles: grid crop/sample, mask generation, feature masking.
    pub use_agcs: bool,
    pub use_mg: bool,
    pub use_fmm: bool,
    pub mask_mode: MaskModeKind,
    pub mask_ratio: f64,
    /// Score normalization bounds; resolved from the training split when
    /// absent.
    pub score_min: Option<f64>,
    pub score_max: Option<f64>,
    /// False for inverted scales where larger raw scores mean worse quality.
    pub higher_is_better: bool,
    /// Patches aggregated per prediction at test time.
    pub tta: usize,
    /// Emit a validation SRCC per epoch (needs a test split).
    pub val: bool,
    /// Force single-threaded batches.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            decay: 0.5,
            decay_every: 20,
            batch: 16,
            epochs: 100,
            loss: LossKind::Mae,
            seed: 0,
            input_size: 256,
            crop_menu: vec![256, 320, 384, 448, 512],
            use_agcs: true,
            use_mg: true,
            use_fmm: true,
            mask_mode: MaskModeKind::Diff,
            mask_ratio: 0.25,
            score_min: None,
            score_max: None,
            higher_is_better: true,
            tta: 8,
            val: false,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.decay) || self.decay == 0.0 {
            return Err(Error::Config(format!("decay {} outside (0, 1]", self.decay)));
        }
        if self.decay_every == 0 || self.batch == 0 || self.tta == 0 {
            return Err(Error::Config(
                "decay_every, batch and tta must be positive".into(),
            ));
        }
        if self.crop_menu.is_empty() {
            return Err(Error::Config("empty crop menu".into()));
        }
        for &s in &self.crop_menu {
            if s % 64 != 0 || s < self.input_size {
                return Err(Error::Config(format!(
                    "crop size {s} must be a multiple of 64 and at least the input size {}",
                    self.input_size
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask ratio {} outside [0, 1]",
                self.mask_ratio
            )));
        }
        if let (Some(lo), Some(hi)) = (self.score_min, self.score_max) {
            if hi <= lo {
                return Err(Error::Config(format!(
                    "score_max {hi} must exceed score_min {lo}"
                )));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> MaskMode {
        match self.mask_mode {
            MaskModeKind::Diff => MaskMode::Diff,
            MaskModeKind::Random => MaskMode::Random {
                ratio: self.mask_ratio,
            },
        }
    }

    /// Exact step-decay schedule: lr * decay^(epoch / decay_every) with
    /// 0-based epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Map a raw subjective score into the [0, 1] training target.
pub fn normalize_score(score: f64, min: f64, max: f64, higher_is_better: bool) -> f64 {
    let t = if max > min {
        (score - min) / (max - min)
    } else {
        0.5
    };
    if higher_is_better {
        t
    } else {
        1.0 - t
    }
}

/// Resolve normalization bounds: configured values win, otherwise the
/// min/max over the given entries.
pub fn resolve_bounds(cfg: &TrainConfig, entries: &[ManifestEntry]) -> (f64, f64) {
    let lo = cfg.score_min.unwrap_or_else(|| {
        entries
            .iter()
            .map(|e| e.score)
            .fold(f64::INFINITY, f64::min)
    });
    let hi = cfg.score_max.unwrap_or_else(|| {
        entries
            .iter()
            .map(|e| e.score)
            .fold(f64::NEG_INFINITY, f64::max)
    });
    (lo, hi)
}

// Stream indices for deriving independent generators from the run seed.
const STREAM_SHUFFLE: u64 = 0;
const STREAM_SAMPLE: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// Crop-and-sample stage shared by training, aggregation and the mask
/// command: pad to the minimum crop size, draw a crop from the menu (width
/// and height independently), and grid-sample both members at a shared
/// offset. With grid sampling toggled off, both images are plainly resized
/// to the input size instead (no draws consumed).
///
/// Draw order on `rng`: crop width, crop height, crop origin (x, y), grid
/// offsets (x, y).
pub fn sample_pair(
    dist: &Image,
    reference: &Image,
    lattice: usize,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(SampledGrid, SampledGrid)> {
    if dist.width != reference.width || dist.height != reference.height {
        return Err(Error::DimensionMismatch(format!(
            "distorted {}x{} vs reference {}x{}",
            dist.width, dist.height, reference.width, reference.height
        )));
    }
    let input = cfg.input_size;
    if cfg.use_agcs {
        let min_side = *cfg.crop_menu.iter().min().expect("validated menu");
        let dist = reflect_pad_to(dist, min_side, min_side);
        let reference = reflect_pad_to(reference, min_side, min_side);
        let widths: Vec<usize> = cfg
            .crop_menu
            .iter()
            .copied()
            .filter(|&s| s <= dist.width)
            .collect();
        let heights: Vec<usize> = cfg
            .crop_menu
            .iter()
            .copied()
            .filter(|&s| s <= dist.height)
            .collect();
        let wp = widths[rng.gen_range(widths.len() as u64) as usize];
        let hp = heights[rng.gen_range(heights.len() as u64) as usize];
        let (pd, pr) = random_crop_pair(&dist, &reference, wp, hp, rng)?;
        let spec = GridSpec::with_grid_counts(lattice, lattice, wp, hp, input, input, rng)?;
        Ok((sample_grids(&pd, &spec)?, sample_grids(&pr, &spec)?))
    } else {
        let d = resize_bilinear(dist, input, input);
        let r = resize_bilinear(reference, input, input);
        Ok((
            SampledGrid::from_image(d, lattice, lattice)?,
            SampledGrid::from_image(r, lattice, lattice)?,
        ))
    }
}

/// Full per-sample preprocessing: [`sample_pair`], then masking, then a flip
/// of image and masks together per axis with probability 1/2.
///
/// Draw order on `rng`: the [`sample_pair`] draws, mask draws, horizontal
/// flip, vertical flip.
pub fn prepare_sample(
    dist: &Image,
    reference: &Image,
    lattice: usize,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<MaskedImage> {
    let (gdst, gref) = sample_pair(dist, reference, lattice, cfg, rng)?;
    let mut masked = if cfg.use_mg {
        generate_masked(&gdst, &gref, cfg.mode(), rng)?
    } else {
        MaskedImage::unmasked(&gdst, cfg.mode())
    };
    if rng.next_bool() {
        masked.flip(FlipAxis::Horizontal);
    }
    if rng.next_bool() {
        masked.flip(FlipAxis::Vertical);
    }
    Ok(masked)
}

type ImageCache = HashMap<PathBuf, Arc<Image>>;

fn load_image_cache(entries: &[ManifestEntry]) -> Result<ImageCache> {
    let mut cache = ImageCache::new();
    for e in entries {
        for p in [&e.dist_path, &e.ref_path] {
            if !cache.contains_key(p) {
                cache.insert(p.clone(), Arc::new(load_png(p)?));
            }
        }
    }
    Ok(cache)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_srcc: Option<f64>,
}

pub struct TrainOutcome {
    pub model: QualityModel<f32>,
    /// The input config with normalization bounds resolved.
    pub resolved: TrainConfig,
    pub logs: Vec<EpochLog>,
}

/// Train a fresh model on the manifest's train split.
///
/// Per sample: preprocessing chain -> forward -> feature masking -> score ->
/// loss against the normalized subjective score; gradients are averaged over
/// the batch and applied with bias-corrected Adam under the step-decay
/// schedule. Deterministic for a fixed seed: sample generators are derived
/// from (seed, epoch, position), and batches are reduced in order even when
/// computed on a thread pool.
pub fn train(
    entries: &[ManifestEntry],
    bb_cfg: BackboneConfig,
    head_cfg: HeadConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    bb_cfg.validate(cfg.input_size)?;
    let train_set: Vec<&ManifestEntry> =
        entries.iter().filter(|e| e.split == Split::Train).collect();
    if train_set.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let test_set: Vec<&ManifestEntry> =
        entries.iter().filter(|e| e.split == Split::Test).collect();

    let cache = load_image_cache(entries)?;
    let (score_min, score_max) = {
        let owned: Vec<ManifestEntry> = train_set.iter().map(|&e| e.clone()).collect();
        resolve_bounds(cfg, &owned)
    };
    let mut resolved = cfg.clone();
    resolved.score_min = Some(score_min);
    resolved.score_max = Some(score_max);

    let mut model = QualityModel::<f32>::new(bb_cfg, head_cfg, cfg.input_size)?;
    let lattice = model.lattice();
    let mut optimizer = Adam::new(&model.params);
    let root = Rng::new(cfg.seed);

    let targets: Vec<f64> = train_set
        .iter()
        .map(|e| normalize_score(e.score, score_min, score_max, cfg.higher_is_better))
        .collect();

    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = root.split(STREAM_SHUFFLE).split(epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range((i + 1) as u64) as usize;
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for (chunk_idx, chunk) in order.chunks(cfg.batch).enumerate() {
            let base_pos = chunk_idx * cfg.batch;
            let worker = |(offset, &sample_idx): (usize, &usize)| -> Result<(f64, Vec<Vec<f32>>)> {
                let entry = train_set[sample_idx];
                let dist = &cache[&entry.dist_path];
                let reference = &cache[&entry.ref_path];
                let mut rng = root
                    .split(STREAM_SAMPLE)
                    .split(epoch as u64)
                    .split((base_pos + offset) as u64);
                let masked = prepare_sample(dist, reference, lattice, cfg, &mut rng)?;
                let mut g = crate::autodiff::Graph::new();
                let (loss_node, _) =
                    model.loss_node(&mut g, &masked, targets[sample_idx], cfg.loss, cfg.use_fmm)?;
                let grads = g.backward(loss_node);
                let mut slots: Vec<Vec<f32>> = model
                    .params
                    .entries()
                    .iter()
                    .map(|e| vec![0.0; e.value.numel()])
                    .collect();
                for &(pid, node) in g.registered_params() {
                    if let Some(gr) = grads.wrt(node) {
                        slots[pid].copy_from_slice(gr);
                    }
                }
                Ok((g.value(loss_node).data[0] as f64, slots))
            };
            let results: Vec<Result<(f64, Vec<Vec<f32>>)>> = if cfg.deterministic {
                chunk.iter().enumerate().map(worker).collect()
            } else {
                chunk.par_iter().enumerate().map(worker).collect()
            };

            let mut acc: Vec<Vec<f32>> = model
                .params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.value.numel()])
                .collect();
            let scale = 1.0 / chunk.len() as f32;
            for r in results {
                let (loss, slots) = r?;
                epoch_loss += loss;
                for (a, s) in acc.iter_mut().zip(slots) {
                    for (av, sv) in a.iter_mut().zip(s) {
                        *av += sv * scale;
                    }
                }
            }
            optimizer.step(&mut model.params, &acc, lr);
        }

        let val_srcc = if cfg.val && test_set.len() >= 2 {
            let val_rng = root.split(STREAM_VAL).split(epoch as u64);
            validation_srcc(&model, &resolved, &test_set, &cache, &val_rng).ok()
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            loss: epoch_loss / train_set.len() as f64,
            lr,
            val_srcc,
        };
        on_epoch(&log);
        logs.push(log);
    }

    Ok(TrainOutcome {
        model,
        resolved,
        logs,
    })
}

fn validation_srcc(
    model: &QualityModel<f32>,
    cfg: &TrainConfig,
    entries: &[&ManifestEntry],
    cache: &ImageCache,
    rng: &Rng,
) -> Result<f64> {
    let mut preds = Vec::with_capacity(entries.len());
    let mut targets = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let mut entry_rng = rng.split(i as u64);
        let masked = prepare_sample(
            &cache[&e.dist_path],
            &cache[&e.ref_path],
            model.lattice(),
            cfg,
            &mut entry_rng,
        )?;
        preds.push(model.predict(&masked, cfg.use_fmm)?);
        targets.push(e.score);
    }
    srcc(&preds, &targets)
}

/// Test-time aggregation: mean score over `n` independently drawn patches
/// (crop size, grid offset, mask and flips all re-drawn per patch).
pub fn predict_tta(
    model: &QualityModel<f32>,
    cfg: &TrainConfig,
    dist: &Image,
    reference: &Image,
    n: usize,
    rng: &Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Range("tta count must be positive".into()));
    }
    let mut acc = 0.0;
    for i in 0..n {
        let mut patch_rng = rng.split(i as u64);
        let masked = prepare_sample(dist, reference, model.lattice(), cfg, &mut patch_rng)?;
        acc += model.predict(&masked, cfg.use_fmm)?;
    }
    Ok(acc / n as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub n: usize,
    pub srcc: f64,
    pub plcc: f64,
    pub seed: u64,
}

/// Score every entry with test-time aggregation and correlate against the
/// min-max normalized subjective scores. Normalization is a positive affine
/// map (or a flip for inverted scales), so the SRCC it yields is asserted to
/// match the raw-score SRCC.
pub fn evaluate(
    model: &QualityModel<f32>,
    cfg: &TrainConfig,
    entries: &[ManifestEntry],
    dataset: &str,
) -> Result<MetricsReport> {
    if entries.len() < 2 {
        return Err(Error::Length(format!(
            "dataset {dataset} has {} entries, need at least 2",
            entries.len()
        )));
    }
    let cache = load_image_cache(entries)?;
    let root = Rng::new(cfg.seed).split(STREAM_EVAL);
    let worker = |(i, e): (usize, &ManifestEntry)| -> Result<f64> {
        let entry_rng = root.split(i as u64);
        predict_tta(
            model,
            cfg,
            &cache[&e.dist_path],
            &cache[&e.ref_path],
            cfg.tta,
            &entry_rng,
        )
    };
    let preds: Vec<Result<f64>> = if cfg.deterministic {
        entries.iter().enumerate().map(worker).collect()
    } else {
        entries.par_iter().enumerate().map(worker).collect()
    };
    let preds: Vec<f64> = preds.into_iter().collect::<Result<_>>()?;

    let raw: Vec<f64> = entries.iter().map(|e| e.score).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let targets: Vec<f64> = raw
        .iter()
        .map(|&s| normalize_score(s, lo, hi, cfg.higher_is_better))
        .collect();

    let s = srcc(&preds, &targets)?;
    let p = plcc(&preds, &targets)?;
    // rank invariance under the normalization (sign-flipped when the raw
    // scale is inverted)
    let s_raw = srcc(&preds, &raw)?;
    let expected = if cfg.higher_is_better { s_raw } else { -s_raw };
    debug_assert!(
        (s - expected).abs() < 1e-12,
        "normalization changed SRCC: {s} vs {expected}"
    );
    Ok(MetricsReport {
        dataset: dataset.to_string(),
        n: entries.len(),
        srcc: s,
        plcc: p,
        seed: cfg.seed,
    })
}

/// Evaluate one model across several manifests (the cross-dataset harness).
pub fn cross_eval(
    model: &QualityModel<f32>,
    cfg: &TrainConfig,
    manifests: &[(String, Vec<ManifestEntry>)],
) -> Result<Vec<MetricsReport>> {
    manifests
        .iter()
        .map(|(name, entries)| evaluate(model, cfg, entries, name))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_png;
    use distort::{procedural_reference, synth_distort, DistortKind};
    use std::path::Path;

    fn mini_bb(seed: u64) -> BackboneConfig {
        BackboneConfig {
            patch_size: 4,
            embed_dim: 8,
            depths: vec![1, 1, 1, 1],
            heads: vec![1, 2, 4, 4],
            window: 4,
            mlp_ratio: 2,
            shifted: true,
            seed,
        }
    }

    fn mini_head(seed: u64) -> HeadConfig {
        HeadConfig {
            pool_size: 2,
            mix_dim: 4,
            hidden_dim: 6,
            terminal_sigmoid: false,
            seed,
        }
    }

    fn mini_cfg() -> TrainConfig {
        TrainConfig {
            input_size: 32,
            crop_menu: vec![64],
            batch: 4,
            epochs: 1,
            deterministic: true,
            ..Default::default()
        }
    }

    /// Tiny synthetic dataset on disk: `refs` references, one distortion kind
    /// each, 3 levels.
    fn write_mini_dataset(dir: &Path, refs: usize) -> Vec<ManifestEntry> {
        let mut entries = Vec::new();
        for r in 0..refs {
            let reference = procedural_reference(96, 80, r as u64);
            let ref_path = dir.join(format!("ref{r}.png"));
            save_png(&reference, &ref_path).unwrap();
            let kind = DistortKind::ALL[r % 4];
            for level in [1usize, 3, 5] {
                let mut rng = Rng::new((r * 10 + level) as u64);
                let distorted = synth_distort(&reference, kind, level, &mut rng).unwrap();
                let dist_path = dir.join(format!("d{r}_{level}.png"));
                save_png(&distorted, &dist_path).unwrap();
                entries.push(ManifestEntry {
                    dist_path,
                    ref_path: ref_path.clone(),
                    score: 5.0 - level as f64,
                    ref_id: format!("ref{r}"),
                    split: Split::Train,
                });
            }
        }
        entries
    }

    #[test]
    fn lr_schedule_is_exact() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(19), 1e-3);
        assert_eq!(cfg.lr_at(20), 5e-4);
        assert_eq!(cfg.lr_at(39), 5e-4);
        assert_eq!(cfg.lr_at(40), 2.5e-4);
        for e in 0..100 {
            assert_eq!(cfg.lr_at(e), 1e-3 * 0.5f64.powi((e / 20) as i32));
        }
    }

    #[test]
    fn score_normalization_and_bounds() {
        assert_eq!(normalize_score(3.0, 1.0, 5.0, true), 0.5);
        assert_eq!(normalize_score(5.0, 1.0, 5.0, true), 1.0);
        assert_eq!(normalize_score(5.0, 1.0, 5.0, false), 0.0);
        assert_eq!(normalize_score(7.0, 7.0, 7.0, true), 0.5);
        let entries = vec![
            ManifestEntry {
                dist_path: "a".into(),
                ref_path: "r".into(),
                score: 2.0,
                ref_id: "r".into(),
                split: Split::Train,
            },
            ManifestEntry {
                dist_path: "b".into(),
                ref_path: "r".into(),
                score: 9.0,
                ref_id: "r".into(),
                split: Split::Train,
            },
        ];
        assert_eq!(resolve_bounds(&TrainConfig::default(), &entries), (2.0, 9.0));
        let cfg = TrainConfig {
            score_min: Some(0.0),
            score_max: Some(10.0),
            ..Default::default()
        };
        assert_eq!(resolve_bounds(&cfg, &entries), (0.0, 10.0));
    }

    #[test]
    fn config_validation_errors() {
        let bad_lr = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad_lr.validate(), Err(Error::Config(_))));
        let bad_menu = TrainConfig {
            crop_menu: vec![200],
            ..Default::default()
        };
        assert!(matches!(bad_menu.validate(), Err(Error::Config(_))));
        let bad_bounds = TrainConfig {
            score_min: Some(3.0),
            score_max: Some(3.0),
            ..Default::default()
        };
        assert!(matches!(bad_bounds.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn prepare_sample_is_deterministic_and_shaped() {
        let dist = procedural_reference(200, 300, 1);
        let reference = procedural_reference(200, 300, 1);
        let cfg = TrainConfig {
            input_size: 32,
            crop_menu: vec![64, 128],
            ..Default::default()
        };
        let a = prepare_sample(&dist, &reference, 8, &cfg, &mut Rng::new(5)).unwrap();
        let b = prepare_sample(&dist, &reference, 8, &cfg, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.image.width, a.image.height), (32, 32));
        assert_eq!(a.mask_b.gw, 8);
        assert_eq!(a.mask_a.gw, 4);
    }

    #[test]
    fn prepare_sample_pads_small_images() {
        // smaller than every menu entry: padding must make it croppable
        let dist = procedural_reference(48, 40, 2);
        let reference = dist.clone();
        let cfg = TrainConfig {
            input_size: 32,
            crop_menu: vec![64],
            ..Default::default()
        };
        let m = prepare_sample(&dist, &reference, 8, &cfg, &mut Rng::new(1)).unwrap();
        assert_eq!((m.image.width, m.image.height), (32, 32));
    }

    #[test]
    fn prepare_sample_without_agcs_resizes() {
        let dist = procedural_reference(100, 60, 3);
        let reference = procedural_reference(100, 60, 3);
        let cfg = TrainConfig {
            input_size: 32,
            crop_menu: vec![64],
            use_agcs: false,
            ..Default::default()
        };
        let m = prepare_sample(&dist, &reference, 8, &cfg, &mut Rng::new(2)).unwrap();
        assert_eq!((m.image.width, m.image.height), (32, 32));
    }

    #[test]
    fn mg_toggle_produces_zero_masks() {
        let dist = procedural_reference(96, 96, 4);
        let reference = procedural_reference(96, 96, 5);
        let cfg = TrainConfig {
            input_size: 32,
            crop_menu: vec![64],
            use_mg: false,
            ..Default::default()
        };
        let m = prepare_sample(&dist, &reference, 8, &cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(m.mask_a.count_ones(), 0);
        assert_eq!(m.mask_b.count_ones(), 0);
    }

    // lr = 0: parameters unchanged and the logged loss equals the absolute
    // error of the untouched model on the prepared sample
    #[test]
    fn zero_lr_keeps_parameters_and_reports_plain_loss() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = write_mini_dataset(dir.path(), 1);
        entries.truncate(1);
        let cfg = TrainConfig {
            lr: 1e-30, // effectively zero while satisfying lr > 0
            epochs: 1,
            batch: 1,
            score_min: Some(0.0),
            score_max: Some(4.0),
            ..mini_cfg()
        };
        let outcome = train(&entries, mini_bb(7), mini_head(7), &cfg, |_| {}).unwrap();

        // fresh model with the same seeds: prediction on the same stream
        let model = QualityModel::<f32>::new(mini_bb(7), mini_head(7), 32).unwrap();
        let dist = load_png(&entries[0].dist_path).unwrap();
        let reference = load_png(&entries[0].ref_path).unwrap();
        let mut rng = Rng::new(cfg.seed)
            .split(STREAM_SAMPLE)
            .split(0)
            .split(0);
        let masked = prepare_sample(&dist, &reference, 8, &cfg, &mut rng).unwrap();
        let pred = model.predict(&masked, cfg.use_fmm).unwrap();
        let target = normalize_score(entries[0].score, 0.0, 4.0, true);
        assert!((outcome.logs[0].loss - (pred - target).abs()).abs() < 1e-6);

        // parameters moved by at most lr-scale noise
        for i in 0..model.params.len() {
            let a = model.params.entry(i).value.data.clone();
            let b = outcome.model.params.entry(i).value.data.clone();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-20);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_decreases_loss() {
        let dir = tempfile::tempdir().unwrap();
        let entries = write_mini_dataset(dir.path(), 2);
        let cfg = TrainConfig {
            epochs: 12,
            lr: 2e-3,
            ..mini_cfg()
        };
        let run = || {
            let outcome = train(&entries, mini_bb(1), mini_head(1), &cfg, |_| {}).unwrap();
            let first = outcome.logs.first().unwrap().loss;
            let last = outcome.logs.last().unwrap().loss;
            let blob: Vec<f32> = outcome
                .model
                .params
                .entries()
                .iter()
                .flat_map(|e| e.value.data.iter().copied())
                .collect();
            (first, last, blob)
        };
        let (first_a, last_a, blob_a) = run();
        let (_, _, blob_b) = run();
        assert_eq!(blob_a, blob_b, "same seed must give identical parameters");
        assert!(
            last_a < first_a,
            "loss should decrease: {first_a} -> {last_a}"
        );
    }

    #[test]
    fn parallel_and_sequential_training_agree() {
        let dir = tempfile::tempdir().unwrap();
        let entries = write_mini_dataset(dir.path(), 2);
        let cfg_seq = TrainConfig {
            epochs: 2,
            ..mini_cfg()
        };
        let cfg_par = TrainConfig {
            deterministic: false,
            ..cfg_seq.clone()
        };
        let blob = |cfg: &TrainConfig| {
            let outcome = train(&entries, mini_bb(2), mini_head(2), cfg, |_| {}).unwrap();
            outcome
                .model
                .params
                .entries()
                .iter()
                .flat_map(|e| e.value.data.iter().copied())
                .collect::<Vec<f32>>()
        };
        assert_eq!(blob(&cfg_seq), blob(&cfg_par));
    }

    #[test]
    fn empty_train_split_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = write_mini_dataset(dir.path(), 1);
        for e in &mut entries {
            e.split = Split::Test;
        }
        assert!(matches!(
            train(&entries, mini_bb(0), mini_head(0), &mini_cfg(), |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tta_single_patch_equals_single_forward() {
        let model = QualityModel::<f32>::new(mini_bb(4), mini_head(4), 32).unwrap();
        let dist = procedural_reference(96, 96, 6);
        let reference = procedural_reference(96, 96, 7);
        let cfg = mini_cfg();
        let rng = Rng::new(33);
        let tta = predict_tta(&model, &cfg, &dist, &reference, 1, &rng).unwrap();
        let mut single_rng = rng.split(0);
        let masked = prepare_sample(&dist, &reference, 8, &cfg, &mut single_rng).unwrap();
        let single = model.predict(&masked, cfg.use_fmm).unwrap();
        assert_eq!(tta, single);
    }

    #[test]
    fn tta_of_constant_model_is_that_constant() {
        let mut model = QualityModel::<f32>::new(mini_bb(5), mini_head(5), 32).unwrap();
        // zero every parameter: the head output collapses to a constant
        for i in 0..model.params.len() {
            let n = model.params.entry(i).value.numel();
            model.params.set_values(i, vec![0.0; n]);
        }
        let dist = procedural_reference(96, 96, 8);
        let reference = procedural_reference(96, 96, 9);
        let cfg = mini_cfg();
        for n in [1usize, 4, 8] {
            let got = predict_tta(&model, &cfg, &dist, &reference, n, &Rng::new(n as u64)).unwrap();
            assert_eq!(got, 0.0, "n = {n}");
        }
    }

    // variance-reduction oracle: averaging 8 independent patches cuts the
    // prediction variance well below a quarter of the single-patch variance
    #[test]
    fn tta_reduces_variance() {
        let model = QualityModel::<f32>::new(mini_bb(6), mini_head(6), 32).unwrap();
        let reference = procedural_reference(128, 128, 10);
        let mut rng = Rng::new(11);
        let dist = synth_distort(&reference, DistortKind::Noise, 4, &mut rng).unwrap();
        let cfg = mini_cfg();
        let variance = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
        };
        let singles: Vec<f64> = (0..50)
            .map(|s| predict_tta(&model, &cfg, &dist, &reference, 1, &Rng::new(s)).unwrap())
            .collect();
        let eights: Vec<f64> = (0..50)
            .map(|s| predict_tta(&model, &cfg, &dist, &reference, 8, &Rng::new(s)).unwrap())
            .collect();
        let v1 = variance(&singles);
        let v8 = variance(&eights);
        assert!(v1 > 0.0, "single-patch predictions should vary");
        assert!(v8 <= v1 / 4.0, "v8 {v8} vs v1/4 {}", v1 / 4.0);
    }

    #[test]
    fn evaluation_is_affine_invariant_and_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let entries = write_mini_dataset(dir.path(), 2);
        let cfg = TrainConfig {
            epochs: 2,
            tta: 2,
            ..mini_cfg()
        };
        let outcome = train(&entries, mini_bb(8), mini_head(8), &cfg, |_| {}).unwrap();
        let report = evaluate(&outcome.model, &outcome.resolved, &entries, "mini").unwrap();
        assert!(report.srcc.is_finite() && report.plcc.is_finite());
        assert_eq!(report.n, entries.len());

        // positive affine rescale of the subjective scores: identical SRCC
        let mut rescaled = entries.clone();
        for e in &mut rescaled {
            e.score = e.score * 17.0 + 3.0;
        }
        let report2 = evaluate(&outcome.model, &outcome.resolved, &rescaled, "mini2").unwrap();
        assert!((report.srcc - report2.srcc).abs() < 1e-12);

        // cross_eval on the same manifest reproduces the in-dataset numbers
        let cross = cross_eval(
            &outcome.model,
            &outcome.resolved,
            &[("mini".to_string(), entries.clone())],
        )
        .unwrap();
        assert_eq!(cross.len(), 1);
        assert_eq!(cross[0].srcc, report.srcc);
        assert_eq!(cross[0].plcc, report.plcc);
    }
}

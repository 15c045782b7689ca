//! Mask generation: per-cell difference map between the sampled distorted and
//! reference grids, median-thresholded coarse selection mask, random fine
//! replacement mask, and the spliced masked image.

use crate::agcs::SampledGrid;
use crate::error::{Error, Result};
use crate::imaging::{block_mae, FlipAxis, FloatBlock, Image, CHANNELS};
use crate::rng::Rng;

/// Per-cell mean absolute error between two sampled grids; values in [0, 1],
/// larger means more distorted. Generic over lattice size; `gw x gh` is
/// 64 x 64 in the default pipeline and the coarsened map is half that.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffMap {
    pub gw: usize,
    pub gh: usize,
    /// Row-major: `values[j * gw + i]` is cell `(i, j)`.
    pub values: Vec<f64>,
}

impl DiffMap {
    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.gw + i]
    }
}

/// Coarse selection mask: 1 marks the cells with the largest difference,
/// exactly half of them by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskA {
    pub gw: usize,
    pub gh: usize,
    /// Row-major bits, `bits[j * gw + i]`.
    pub bits: Vec<bool>,
    /// Median the threshold was taken at (mean of the two middle order
    /// statistics).
    pub mid: f64,
}

/// Fine replacement mask at twice the coarse resolution; 1 marks cells
/// replaced by reference content.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskB {
    pub gw: usize,
    pub gh: usize,
    pub bits: Vec<bool>,
}

impl MaskA {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[j * self.gw + i]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn all_zeros(gw: usize, gh: usize) -> Self {
        MaskA {
            gw,
            gh,
            bits: vec![false; gw * gh],
            mid: 0.0,
        }
    }

    pub fn flipped(&self, axis: FlipAxis) -> Self {
        let mut out = self.clone();
        for j in 0..self.gh {
            for i in 0..self.gw {
                let (si, sj) = match axis {
                    FlipAxis::Horizontal => (self.gw - 1 - i, j),
                    FlipAxis::Vertical => (i, self.gh - 1 - j),
                };
                out.bits[j * self.gw + i] = self.bits[sj * self.gw + si];
            }
        }
        out
    }

    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }
}

impl MaskB {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[j * self.gw + i]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn all_zeros(gw: usize, gh: usize) -> Self {
        MaskB {
            gw,
            gh,
            bits: vec![false; gw * gh],
        }
    }

    pub fn flipped(&self, axis: FlipAxis) -> Self {
        let mut out = self.clone();
        for j in 0..self.gh {
            for i in 0..self.gw {
                let (si, sj) = match axis {
                    FlipAxis::Horizontal => (self.gw - 1 - i, j),
                    FlipAxis::Vertical => (i, self.gh - 1 - j),
                };
                out.bits[j * self.gw + i] = self.bits[sj * self.gw + si];
            }
        }
        out
    }

    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }
}

/// How replacement cells are chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// Median-thresholded difference selection (the default pipeline).
    Diff,
    /// Uniformly random cells at the given replacement ratio.
    Random { ratio: f64 },
}

/// Masked image plus the masks that produced it, kept together so feature
/// masking and flips stay aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    pub image: Image,
    pub mask_a: MaskA,
    pub mask_b: MaskB,
    pub mode: MaskMode,
}

impl MaskedImage {
    /// Distorted sample passed through untouched with all-zero masks (the
    /// pipeline variant with mask generation disabled).
    pub fn unmasked(gdst: &SampledGrid, mode: MaskMode) -> Self {
        MaskedImage {
            image: gdst.image.clone(),
            mask_a: MaskA::all_zeros(gdst.gw / 2, gdst.gh / 2),
            mask_b: MaskB::all_zeros(gdst.gw, gdst.gh),
            mode,
        }
    }

    /// Flip image and both masks identically.
    pub fn flip(&mut self, axis: FlipAxis) {
        self.image = crate::imaging::flip(&self.image, axis);
        self.mask_a = self.mask_a.flipped(axis);
        self.mask_b = self.mask_b.flipped(axis);
    }
}

fn check_same_geometry(a: &SampledGrid, b: &SampledGrid) -> Result<()> {
    if a.gw != b.gw || a.gh != b.gh || a.cell_w != b.cell_w || a.cell_h != b.cell_h {
        return Err(Error::DimensionMismatch(format!(
            "grids {}x{} cells {}x{} vs {}x{} cells {}x{}",
            a.gw, a.gh, a.cell_w, a.cell_h, b.gw, b.gh, b.cell_w, b.cell_h
        )));
    }
    Ok(())
}

fn cell_float(g: &SampledGrid, i: usize, j: usize) -> FloatBlock {
    FloatBlock {
        width: g.cell_w,
        height: g.cell_h,
        data: g
            .cell_bytes(i, j)
            .iter()
            .map(|&v| v as f64 / 255.0)
            .collect(),
    }
}

/// Per-cell MAE between the sampled distorted and reference grids.
pub fn compute_diff(gdst: &SampledGrid, gref: &SampledGrid) -> Result<DiffMap> {
    check_same_geometry(gdst, gref)?;
    let mut values = Vec::with_capacity(gdst.gw * gdst.gh);
    for j in 0..gdst.gh {
        for i in 0..gdst.gw {
            let a = cell_float(gdst, i, j);
            let b = cell_float(gref, i, j);
            values.push(block_mae(&a, &b)?);
        }
    }
    Ok(DiffMap {
        gw: gdst.gw,
        gh: gdst.gh,
        values,
    })
}

/// Average 2x2 blocks of the fine difference map down to the coarse lattice
/// the selection mask lives on.
pub fn coarsen_diff(d: &DiffMap) -> Result<DiffMap> {
    if d.gw % 2 != 0 || d.gh % 2 != 0 {
        return Err(Error::Size(format!(
            "cannot coarsen an odd {}x{} lattice",
            d.gw, d.gh
        )));
    }
    let (cw, ch) = (d.gw / 2, d.gh / 2);
    let mut values = Vec::with_capacity(cw * ch);
    for j in 0..ch {
        for i in 0..cw {
            let s = d.value(2 * i, 2 * j)
                + d.value(2 * i + 1, 2 * j)
                + d.value(2 * i, 2 * j + 1)
                + d.value(2 * i + 1, 2 * j + 1);
            values.push(s / 4.0);
        }
    }
    Ok(DiffMap {
        gw: cw,
        gh: ch,
        values,
    })
}

/// Select exactly the top half of the coarse cells by difference. Ties are
/// broken by ascending row-major index so the selected count is always exact;
/// `mid` records the conventional median of all values.
pub fn threshold_median(coarse: &DiffMap) -> MaskA {
    let n = coarse.values.len();
    let k = n / 2;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        coarse.values[b]
            .partial_cmp(&coarse.values[a])
            .expect("diff values are finite")
            .then(a.cmp(&b))
    });
    let mut bits = vec![false; n];
    for &i in &order[..k] {
        bits[i] = true;
    }
    let mut sorted = coarse.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("diff values are finite"));
    let mid = 0.5 * (sorted[k - 1] + sorted[k]);
    MaskA {
        gw: coarse.gw,
        gh: coarse.gh,
        bits,
        mid,
    }
}

/// The six unordered pairs of positions within a 2x2 block; position p maps
/// to offset (p % 2, p / 2).
const FINE_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// For every selected coarse cell, replace exactly 2 of its 4 fine cells,
/// the pair drawn uniformly. Coarse cells are visited in row-major order.
pub fn draw_mask_b(a: &MaskA, rng: &mut Rng) -> MaskB {
    let (gw, gh) = (a.gw * 2, a.gh * 2);
    let mut bits = vec![false; gw * gh];
    for cj in 0..a.gh {
        for ci in 0..a.gw {
            if !a.get(ci, cj) {
                continue;
            }
            let (p, q) = FINE_PAIRS[rng.gen_range(6) as usize];
            for pos in [p, q] {
                let fi = 2 * ci + pos % 2;
                let fj = 2 * cj + pos / 2;
                bits[fj * gw + fi] = true;
            }
        }
    }
    MaskB { gw, gh, bits }
}

/// Copy one cell rectangle between equally shaped grid images.
fn copy_cell(dst: &mut Image, src: &Image, i: usize, j: usize, cw: usize, ch: usize) {
    let x0 = i * cw;
    for dy in 0..ch {
        let y = j * ch + dy;
        let o = (y * dst.width + x0) * CHANNELS;
        dst.data[o..o + cw * CHANNELS].copy_from_slice(&src.data[o..o + cw * CHANNELS]);
    }
}

/// Merge reference cells into the distorted sample where the fine mask is 1
/// and splice everything into one contiguous image.
pub fn merge_and_splice(gdst: &SampledGrid, gref: &SampledGrid, b: &MaskB) -> Result<Image> {
    check_same_geometry(gdst, gref)?;
    if b.gw != gdst.gw || b.gh != gdst.gh {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs lattice {}x{}",
            b.gw, b.gh, gdst.gw, gdst.gh
        )));
    }
    let mut out = gdst.image.clone();
    for j in 0..b.gh {
        for i in 0..b.gw {
            if b.get(i, j) {
                copy_cell(&mut out, &gref.image, i, j, gdst.cell_w, gdst.cell_h);
            }
        }
    }
    Ok(out)
}

/// Replace a uniformly random set of `round(ratio * cells)` fine cells with
/// reference content. The coarse mask is the OR over each selected cell's
/// 2x2 block so feature masking stays applicable.
pub fn random_ratio_mask(
    gdst: &SampledGrid,
    gref: &SampledGrid,
    ratio: f64,
    rng: &mut Rng,
) -> Result<MaskedImage> {
    if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(Error::Range(format!("mask ratio {ratio} outside [0, 1]")));
    }
    check_same_geometry(gdst, gref)?;
    if gdst.gw % 2 != 0 || gdst.gh % 2 != 0 {
        return Err(Error::Size(format!(
            "random masking needs an even lattice, got {}x{}",
            gdst.gw, gdst.gh
        )));
    }
    let n = gdst.gw * gdst.gh;
    let k = (ratio * n as f64).round() as usize;
    // partial Fisher-Yates: the first k entries are a uniform k-subset
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.gen_range((n - i) as u64) as usize;
        indices.swap(i, j);
    }
    let mut b = MaskB::all_zeros(gdst.gw, gdst.gh);
    for &idx in &indices[..k] {
        b.bits[idx] = true;
    }
    let mut a = MaskA::all_zeros(gdst.gw / 2, gdst.gh / 2);
    for cj in 0..a.gh {
        for ci in 0..a.gw {
            let hit = (0..4).any(|p| b.get(2 * ci + p % 2, 2 * cj + p / 2));
            a.bits[cj * a.gw + ci] = hit;
        }
    }
    let image = merge_and_splice(gdst, gref, &b)?;
    Ok(MaskedImage {
        image,
        mask_a: a,
        mask_b: b,
        mode: MaskMode::Random { ratio },
    })
}

/// Full mask-generation pass for one sampled pair.
pub fn generate_masked(
    gdst: &SampledGrid,
    gref: &SampledGrid,
    mode: MaskMode,
    rng: &mut Rng,
) -> Result<MaskedImage> {
    match mode {
        MaskMode::Diff => {
            let diff = compute_diff(gdst, gref)?;
            let coarse = coarsen_diff(&diff)?;
            let mask_a = threshold_median(&coarse);
            let mask_b = draw_mask_b(&mask_a, rng);
            let image = merge_and_splice(gdst, gref, &mask_b)?;
            Ok(MaskedImage {
                image,
                mask_a,
                mask_b,
                mode,
            })
        }
        MaskMode::Random { ratio } => random_ratio_mask(gdst, gref, ratio, rng),
    }
}

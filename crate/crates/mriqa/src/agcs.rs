//! Adaptive grid cropping and sampling: divide a crop into a uniform lattice
//! of grids and take a fixed-size sub-block from every grid at one shared
//! random offset, producing a fixed-size output without resizing.

use crate::error::{Error, Result};
use crate::imaging::{Image, Patch, CHANNELS};
use crate::rng::Rng;

/// Default lattice: 64 x 64 grids.
pub const DEFAULT_GRID: usize = 64;

/// Geometry of one sampling pass: lattice counts, per-grid sizes for the
/// source patch and the output, and the shared random offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    /// Lattice counts (columns, rows).
    pub gw: usize,
    pub gh: usize,
    /// Source grid size in pixels: patch side / lattice count.
    pub wg: usize,
    pub hg: usize,
    /// Sampled cell size in pixels: input side / lattice count.
    pub wgp: usize,
    pub hgp: usize,
    /// Shared offset inside every grid, drawn once per pass.
    pub mran: usize,
    pub nran: usize,
}

impl GridSpec {
    /// Build the spec for a `wp x hp` patch sampled down to
    /// `w_input x h_input` on the default 64 x 64 lattice. The offset pair is
    /// drawn uniformly from `0..=(wg - wgp)` x `0..=(hg - hgp)` and reused for
    /// every grid.
    pub fn new(wp: usize, hp: usize, w_input: usize, h_input: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_grid_counts(DEFAULT_GRID, DEFAULT_GRID, wp, hp, w_input, h_input, rng)
    }

    /// Same, on an explicit lattice (miniature configurations).
    pub fn with_grid_counts(
        gw: usize,
        gh: usize,
        wp: usize,
        hp: usize,
        w_input: usize,
        h_input: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (wg, hg, wgp, hgp) = Self::check_geometry(gw, gh, wp, hp, w_input, h_input)?;
        // x offset first, then y
        let mran = rng.gen_range((wg - wgp + 1) as u64) as usize;
        let nran = rng.gen_range((hg - hgp + 1) as u64) as usize;
        Ok(GridSpec {
            gw,
            gh,
            wg,
            hg,
            wgp,
            hgp,
            mran,
            nran,
        })
    }

    /// Deterministic construction with explicit offsets (tests, replays).
    pub fn with_offsets(
        gw: usize,
        gh: usize,
        wp: usize,
        hp: usize,
        w_input: usize,
        h_input: usize,
        mran: usize,
        nran: usize,
    ) -> Result<Self> {
        let (wg, hg, wgp, hgp) = Self::check_geometry(gw, gh, wp, hp, w_input, h_input)?;
        if mran > wg - wgp || nran > hg - hgp {
            return Err(Error::Size(format!(
                "offset ({mran},{nran}) outside 0..=({},{})",
                wg - wgp,
                hg - hgp
            )));
        }
        Ok(GridSpec {
            gw,
            gh,
            wg,
            hg,
            wgp,
            hgp,
            mran,
            nran,
        })
    }

    fn check_geometry(
        gw: usize,
        gh: usize,
        wp: usize,
        hp: usize,
        w_input: usize,
        h_input: usize,
    ) -> Result<(usize, usize, usize, usize)> {
        if gw == 0 || gh == 0 {
            return Err(Error::Size("grid counts must be positive".into()));
        }
        if wp % gw != 0 || hp % gh != 0 {
            return Err(Error::Size(format!(
                "patch {wp}x{hp} is not a multiple of the {gw}x{gh} lattice"
            )));
        }
        if w_input % gw != 0 || h_input % gh != 0 {
            return Err(Error::Size(format!(
                "input {w_input}x{h_input} is not a multiple of the {gw}x{gh} lattice"
            )));
        }
        if wp < w_input || hp < h_input {
            return Err(Error::Size(format!(
                "patch {wp}x{hp} smaller than input {w_input}x{h_input}"
            )));
        }
        Ok((wp / gw, hp / gh, w_input / gw, h_input / gh))
    }

    /// Assembled output dimensions.
    pub fn output_size(&self) -> (usize, usize) {
        (self.gw * self.wgp, self.gh * self.hgp)
    }

    /// Source patch dimensions this spec expects.
    pub fn patch_size(&self) -> (usize, usize) {
        (self.gw * self.wg, self.gh * self.hg)
    }
}

/// Fixed-size result of sampling: the cells spliced into their lattice
/// positions. Cell `(i, j)` occupies the `wgp x hgp` rectangle at
/// `(i * wgp, j * hgp)` of `image`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledGrid {
    pub gw: usize,
    pub gh: usize,
    /// Cell size in pixels.
    pub cell_w: usize,
    pub cell_h: usize,
    pub image: Image,
}

impl SampledGrid {
    /// Wrap an already input-sized image as an identity-sampled grid
    /// (cell size = image side / lattice count).
    pub fn from_image(image: Image, gw: usize, gh: usize) -> Result<Self> {
        if image.width % gw != 0 || image.height % gh != 0 {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} does not tile into {gw}x{gh} grids",
                image.width, image.height
            )));
        }
        let cell_w = image.width / gw;
        let cell_h = image.height / gh;
        Ok(SampledGrid {
            gw,
            gh,
            cell_w,
            cell_h,
            image,
        })
    }

    /// Raw bytes of cell `(i, j)` as a `cell_w x cell_h` block.
    pub fn cell_bytes(&self, i: usize, j: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.cell_w * self.cell_h * CHANNELS);
        let x0 = i * self.cell_w;
        for dy in 0..self.cell_h {
            let y = j * self.cell_h + dy;
            let start = (y * self.image.width + x0) * CHANNELS;
            out.extend_from_slice(&self.image.data[start..start + self.cell_w * CHANNELS]);
        }
        out
    }
}

/// Extract the sub-block at the shared offset from every grid of `patch` and
/// splice the cells into a contiguous fixed-size image.
pub fn sample_grids(patch: &Patch, spec: &GridSpec) -> Result<SampledGrid> {
    let (pw, ph) = spec.patch_size();
    if patch.width() != pw || patch.height() != ph {
        return Err(Error::DimensionMismatch(format!(
            "patch {}x{} does not match spec {pw}x{ph}",
            patch.width(),
            patch.height()
        )));
    }
    let (ow, oh) = spec.output_size();
    let src = &patch.image;
    let mut data = vec![0u8; ow * oh * CHANNELS];
    for j in 0..spec.gh {
        for dy in 0..spec.hgp {
            let sy = j * spec.hg + spec.nran + dy;
            let oy = j * spec.hgp + dy;
            for i in 0..spec.gw {
                let sx = i * spec.wg + spec.mran;
                let ox = i * spec.wgp;
                let s = (sy * src.width + sx) * CHANNELS;
                let d = (oy * ow + ox) * CHANNELS;
                data[d..d + spec.wgp * CHANNELS]
                    .copy_from_slice(&src.data[s..s + spec.wgp * CHANNELS]);
            }
        }
    }
    Ok(SampledGrid {
        gw: spec.gw,
        gh: spec.gh,
        cell_w: spec.wgp,
        cell_h: spec.hgp,
        image: Image::new(ow, oh, data)?,
    })
}

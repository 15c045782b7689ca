//! Feature masking and the scoring head: zero reference-derived positions in
//! the shallow stage outputs, then pool, mix, concatenate and regress the
//! pyramid to one quality score.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, PoolBins, Scalar, TensorData};
use crate::backbone::{FeaturePyramid, ParamSet};
use crate::error::{Error, Result};
use crate::maskgen::{MaskA, MaskB};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Common spatial size the four scales are pooled to.
    pub pool_size: usize,
    /// Channels per scale after 1x1 mixing.
    pub mix_dim: usize,
    /// Hidden width of the two-layer regression MLP.
    pub hidden_dim: usize,
    /// Squash the output through a sigmoid as well (off: linear output).
    pub terminal_sigmoid: bool,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            pool_size: 8,
            mix_dim: 64,
            hidden_dim: 128,
            terminal_sigmoid: false,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || self.mix_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Zero the feature vectors at reference-replaced positions: stage-1 tokens
/// under the fine mask, stage-2 tokens under the coarse mask. Deeper stages
/// pass through untouched. Gradients flow only through kept positions.
pub fn apply_fmm<T: Scalar>(
    g: &mut Graph<T>,
    pyramid: &FeaturePyramid,
    mask_a: &MaskA,
    mask_b: &MaskB,
) -> Result<FeaturePyramid> {
    if mask_b.gw != pyramid.sides[0] || mask_b.gh != pyramid.sides[0] {
        return Err(Error::DimensionMismatch(format!(
            "fine mask {}x{} vs stage-1 side {}",
            mask_b.gw, mask_b.gh, pyramid.sides[0]
        )));
    }
    if mask_a.gw != pyramid.sides[1] || mask_a.gh != pyramid.sides[1] {
        return Err(Error::DimensionMismatch(format!(
            "coarse mask {}x{} vs stage-2 side {}",
            mask_a.gw, mask_a.gh, pyramid.sides[1]
        )));
    }
    let keep_b: Arc<Vec<T>> = Arc::new(
        mask_b
            .bits
            .iter()
            .map(|&m| if m { T::ZERO } else { T::ONE })
            .collect(),
    );
    let keep_a: Arc<Vec<T>> = Arc::new(
        mask_a
            .bits
            .iter()
            .map(|&m| if m { T::ZERO } else { T::ONE })
            .collect(),
    );
    let mut out = *pyramid;
    out.features[0] = g.scale_rows(pyramid.features[0], keep_b);
    out.features[1] = g.scale_rows(pyramid.features[1], keep_a);
    Ok(out)
}

/// The scoring head. Geometry (pooling bins) is precomputed for the pyramid
/// sides it is built against.
pub struct Head<T: Scalar> {
    pub cfg: HeadConfig,
    sides: [usize; 4],
    dims: [usize; 4],
    mix_w: [usize; 4],
    mix_b: [usize; 4],
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    scale_bins: [Arc<PoolBins>; 4],
    gap_bins: Arc<PoolBins>,
    _marker: std::marker::PhantomData<T>,
}

/// Adaptive-average-pool bins from a `side x side` grid to `pool x pool`:
/// output cell (oy, ox) averages rows floor(o*S/P)..ceil((o+1)*S/P) in both
/// axes, which partitions exactly when P divides S and repeats rows when the
/// grid is smaller than the pool.
fn adaptive_bins(side: usize, pool: usize) -> PoolBins {
    let lo = |o: usize| (o * side) / pool;
    let hi = |o: usize| ((o + 1) * side).div_ceil(pool).max((o * side) / pool + 1);
    let mut offsets = Vec::with_capacity(pool * pool + 1);
    let mut rows = Vec::new();
    offsets.push(0u32);
    for oy in 0..pool {
        for ox in 0..pool {
            for y in lo(oy)..hi(oy) {
                for x in lo(ox)..hi(ox) {
                    rows.push((y * side + x) as u32);
                }
            }
            offsets.push(rows.len() as u32);
        }
    }
    PoolBins { offsets, rows }
}

impl<T: Scalar> Head<T> {
    pub fn new(
        cfg: HeadConfig,
        sides: [usize; 4],
        dims: [usize; 4],
        params: &mut ParamSet<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut mix_w = [0usize; 4];
        let mut mix_b = [0usize; 4];
        for k in 0..4 {
            let n: usize = dims[k] * cfg.mix_dim;
            let data = (0..n)
                .map(|_| T::from_f64(rng.next_trunc_normal(0.02)))
                .collect();
            mix_w[k] = params.add(
                format!("head.mix.{k}.weight"),
                TensorData::new(vec![dims[k], cfg.mix_dim], data),
            );
            mix_b[k] = params.add(
                format!("head.mix.{k}.bias"),
                TensorData::zeros(vec![cfg.mix_dim]),
            );
        }
        let cat = 4 * cfg.mix_dim;
        let fc1 = (0..cat * cfg.hidden_dim)
            .map(|_| T::from_f64(rng.next_trunc_normal(0.02)))
            .collect();
        let fc1_w = params.add(
            "head.fc1.weight",
            TensorData::new(vec![cat, cfg.hidden_dim], fc1),
        );
        let fc1_b = params.add("head.fc1.bias", TensorData::zeros(vec![cfg.hidden_dim]));
        let fc2 = (0..cfg.hidden_dim)
            .map(|_| T::from_f64(rng.next_trunc_normal(0.02)))
            .collect();
        let fc2_w = params.add(
            "head.fc2.weight",
            TensorData::new(vec![cfg.hidden_dim, 1], fc2),
        );
        let fc2_b = params.add("head.fc2.bias", TensorData::zeros(vec![1]));

        let scale_bins = [
            Arc::new(adaptive_bins(sides[0], cfg.pool_size)),
            Arc::new(adaptive_bins(sides[1], cfg.pool_size)),
            Arc::new(adaptive_bins(sides[2], cfg.pool_size)),
            Arc::new(adaptive_bins(sides[3], cfg.pool_size)),
        ];
        // global average over the pooled grid: one bin with every row
        let p2 = cfg.pool_size * cfg.pool_size;
        let gap_bins = Arc::new(PoolBins {
            offsets: vec![0, p2 as u32],
            rows: (0..p2 as u32).collect(),
        });

        Ok(Head {
            cfg,
            sides,
            dims,
            mix_w,
            mix_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            scale_bins,
            gap_bins,
            _marker: std::marker::PhantomData,
        })
    }

    /// Pool each scale to a common grid, mix channels per scale, concatenate,
    /// globally average, and regress through the two-layer MLP (sigmoid
    /// hidden activation). Returns a scalar node.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        pyramid: &FeaturePyramid,
    ) -> Result<NodeId> {
        for k in 0..4 {
            if pyramid.sides[k] != self.sides[k] || pyramid.dims[k] != self.dims[k] {
                return Err(Error::DimensionMismatch(format!(
                    "scale {k}: pyramid {}x{} ch {} vs head {}x{} ch {}",
                    pyramid.sides[k],
                    pyramid.sides[k],
                    pyramid.dims[k],
                    self.sides[k],
                    self.sides[k],
                    self.dims[k]
                )));
            }
        }
        let p2 = self.cfg.pool_size * self.cfg.pool_size;
        let mut mixed = Vec::with_capacity(4);
        for k in 0..4 {
            let pooled = g.pool_rows(pyramid.features[k], self.scale_bins[k].clone(), vec![p2]);
            let w = params.leaf(g, self.mix_w[k]);
            let b = params.leaf(g, self.mix_b[k]);
            let m = g.matmul(pooled, w);
            mixed.push(g.add_bias(m, b));
        }
        let cat = g.concat_last(&mixed);
        let pooled = g.pool_rows(cat, self.gap_bins.clone(), vec![1]);
        let w1 = params.leaf(g, self.fc1_w);
        let b1 = params.leaf(g, self.fc1_b);
        let h = g.matmul(pooled, w1);
        let h = g.add_bias(h, b1);
        let h = g.sigmoid(h);
        let w2 = params.leaf(g, self.fc2_w);
        let b2 = params.leaf(g, self.fc2_b);
        let out = g.matmul(h, w2);
        let out = g.add_bias(out, b2);
        Ok(if self.cfg.terminal_sigmoid {
            g.sigmoid(out)
        } else {
            out
        })
    }
}

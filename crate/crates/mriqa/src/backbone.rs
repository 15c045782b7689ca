//! Hierarchical windowed-attention backbone: patch embedding, window
//! multi-head self-attention blocks with optional cyclic shift, patch
//! merging, and the four-stage feature pyramid.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar, TensorData};
use crate::error::{Error, Result};
use crate::imaging::FloatBlock;
use crate::rng::Rng;

/// Named parameter registry shared by the backbone and the scoring head.
/// Registration order is deterministic and defines the checkpoint layout.
pub struct ParamSet<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: TensorData<T>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: TensorData<T>) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn entry(&self, id: usize) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Overwrite the values of parameter `id` (optimizer updates, loading).
    pub fn set_values(&mut self, id: usize, values: Vec<T>) {
        assert_eq!(values.len(), self.entries[id].value.numel());
        self.entries[id].value.data = Arc::new(values);
    }

    pub fn values_mut(&mut self, id: usize) -> &mut [T] {
        self.entries[id].value.make_mut()
    }

    /// Register parameter `id` as a differentiable leaf on `g`.
    pub fn leaf(&self, g: &mut Graph<T>, id: usize) -> NodeId {
        g.leaf_param(id, self.entries[id].value.clone())
    }
}

/// Backbone hyperparameters. The default is the desk-scale configuration;
/// [`BackboneConfig::tiny`] is the full-scale variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Cyclically shift windows on odd blocks of each stage.
    pub shifted: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_size: 4,
            embed_dim: 24,
            depths: vec![1, 1, 2, 1],
            heads: vec![2, 2, 4, 4],
            window: 8,
            mlp_ratio: 4,
            shifted: true,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Full-scale configuration (window 8 rather than 7 so it divides the
    /// 64-token stage-1 grid without padding).
    pub fn tiny() -> Self {
        BackboneConfig {
            patch_size: 4,
            embed_dim: 96,
            depths: vec![2, 2, 6, 2],
            heads: vec![3, 6, 12, 24],
            window: 8,
            mlp_ratio: 4,
            shifted: true,
            seed: 0,
        }
    }

    pub fn validate(&self, input_size: usize) -> Result<()> {
        if self.depths.len() != 4 || self.heads.len() != 4 {
            return Err(Error::Config(format!(
                "expected 4 stages, got {} depths / {} heads",
                self.depths.len(),
                self.heads.len()
            )));
        }
        if self.patch_size == 0 || input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input {input_size} not divisible by patch size {}",
                self.patch_size
            )));
        }
        let grid0 = input_size / self.patch_size;
        if grid0 % 8 != 0 {
            return Err(Error::Config(format!(
                "token grid {grid0} must be divisible by 8 for three mergings"
            )));
        }
        if self.window == 0 || self.mlp_ratio == 0 || self.embed_dim == 0 {
            return Err(Error::Config("zero-sized dimension in config".into()));
        }
        for s in 0..4 {
            let dim = self.embed_dim << s;
            if self.depths[s] == 0 {
                return Err(Error::Config(format!("stage {s} has zero blocks")));
            }
            if self.heads[s] == 0 || dim % self.heads[s] != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: {} heads do not divide dim {dim}",
                    self.heads[s]
                )));
            }
            let grid = grid0 >> s;
            if grid == 0 {
                return Err(Error::Config(format!("stage {s} grid collapsed to zero")));
            }
            let win = self.window.min(grid);
            if grid % win != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: window {win} does not divide grid {grid}"
                )));
            }
        }
        Ok(())
    }
}

/// Stage outputs: `features[k]` holds `sides[k]^2` tokens of width `dims[k]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub features: [NodeId; 4],
    pub sides: [usize; 4],
    pub dims: [usize; 4],
}

struct Block<T: Scalar> {
    heads: usize,
    head_dim: usize,
    windows: usize,
    win_tokens: usize,
    tokens: usize,
    dim: usize,
    norm1_g: usize,
    norm1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    rel_table: usize,
    proj_w: usize,
    proj_b: usize,
    norm2_g: usize,
    norm2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    q_map: Arc<Vec<u32>>,
    k_map: Arc<Vec<u32>>,
    v_map: Arc<Vec<u32>>,
    merge_map: Arc<Vec<u32>>,
    rel_index: Arc<Vec<u32>>,
    attn_mask: Option<Arc<Vec<T>>>,
}

struct Merge {
    norm_g: usize,
    norm_b: usize,
    weight: usize,
    regroup: Arc<Vec<u32>>,
    tokens_out: usize,
    dim_in: usize,
}

struct Stage<T: Scalar> {
    side: usize,
    dim: usize,
    blocks: Vec<Block<T>>,
    merge: Option<Merge>,
}

/// The backbone: owns layer geometry and parameter handles; the parameter
/// values themselves live in a [`ParamSet`].
pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    pub input_size: usize,
    grid0: usize,
    patch_map: Arc<Vec<u32>>,
    patch_w: usize,
    patch_b: usize,
    patch_norm_g: usize,
    patch_norm_b: usize,
    stages: Vec<Stage<T>>,
}

fn init_weight<T: Scalar>(shape: Vec<usize>, rng: &mut Rng) -> TensorData<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.next_trunc_normal(0.02)))
        .collect();
    TensorData::new(shape, data)
}

fn init_zeros<T: Scalar>(shape: Vec<usize>) -> TensorData<T> {
    TensorData::zeros(shape)
}

fn init_ones<T: Scalar>(shape: Vec<usize>) -> TensorData<T> {
    let n: usize = shape.iter().product();
    TensorData::new(shape, vec![T::ONE; n])
}

impl<T: Scalar> Backbone<T> {
    /// Build layer geometry and register freshly initialized parameters
    /// (truncated-normal weights, zero biases, unit norm gains), drawing from
    /// `rng` in registration order.
    pub fn new(
        cfg: BackboneConfig,
        input_size: usize,
        params: &mut ParamSet<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate(input_size)?;
        let grid0 = input_size / cfg.patch_size;
        let patch_vec = cfg.patch_size * cfg.patch_size * 3;

        let patch_w = params.add(
            "backbone.patch_embed.proj.weight",
            init_weight(vec![patch_vec, cfg.embed_dim], rng),
        );
        let patch_b = params.add(
            "backbone.patch_embed.proj.bias",
            init_zeros(vec![cfg.embed_dim]),
        );
        let patch_norm_g = params.add(
            "backbone.patch_embed.norm.gain",
            init_ones(vec![cfg.embed_dim]),
        );
        let patch_norm_b = params.add(
            "backbone.patch_embed.norm.bias",
            init_zeros(vec![cfg.embed_dim]),
        );
        let patch_map = Arc::new(build_patch_map(input_size, cfg.patch_size, grid0));

        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let dim = cfg.embed_dim << s;
            let side = grid0 >> s;
            let heads = cfg.heads[s];
            let win = cfg.window.min(side);
            let mut blocks = Vec::with_capacity(cfg.depths[s]);
            for b in 0..cfg.depths[s] {
                let shift = if cfg.shifted && b % 2 == 1 && win < side {
                    win / 2
                } else {
                    0
                };
                blocks.push(build_block(
                    s, b, dim, side, win, shift, heads, &cfg, params, rng,
                ));
            }
            let merge = if s < 3 {
                let regroup = Arc::new(build_merge_map(side, dim));
                let norm_g = params.add(
                    format!("backbone.stages.{s}.merge.norm.gain"),
                    init_ones(vec![4 * dim]),
                );
                let norm_b = params.add(
                    format!("backbone.stages.{s}.merge.norm.bias"),
                    init_zeros(vec![4 * dim]),
                );
                let weight = params.add(
                    format!("backbone.stages.{s}.merge.weight"),
                    init_weight(vec![4 * dim, 2 * dim], rng),
                );
                Some(Merge {
                    norm_g,
                    norm_b,
                    weight,
                    regroup,
                    tokens_out: (side / 2) * (side / 2),
                    dim_in: dim,
                })
            } else {
                None
            };
            stages.push(Stage {
                side,
                dim,
                blocks,
                merge,
            });
        }

        Ok(Backbone {
            cfg,
            input_size,
            grid0,
            patch_map,
            patch_w,
            patch_b,
            patch_norm_g,
            patch_norm_b,
            stages,
        })
    }

    /// Patch embedding: non-overlapping patch flattening, linear projection
    /// and layer normalization. Output is (grid0^2, embed_dim).
    pub fn patch_embed(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        img: &FloatBlock,
    ) -> Result<NodeId> {
        if img.width != self.input_size || img.height != self.input_size {
            return Err(Error::Size(format!(
                "input {}x{} does not match configured size {}",
                img.width, img.height, self.input_size
            )));
        }
        let flat: Vec<T> = img.data.iter().map(|&v| T::from_f64(v)).collect();
        let pixels = g.constant(TensorData::new(vec![flat.len()], flat));
        let tokens = self.grid0 * self.grid0;
        let patch_vec = self.cfg.patch_size * self.cfg.patch_size * 3;
        let cols = g.reindex(pixels, vec![tokens, patch_vec], self.patch_map.clone());
        let w = params.leaf(g, self.patch_w);
        let b = params.leaf(g, self.patch_b);
        let proj = g.matmul(cols, w);
        let proj = g.add_bias(proj, b);
        let gain = params.leaf(g, self.patch_norm_g);
        let bias = params.leaf(g, self.patch_norm_b);
        Ok(g.layer_norm(proj, gain, bias))
    }

    /// Windowed multi-head attention with relative-position bias and optional
    /// cyclic shift, on already-normalized tokens (pre-residual).
    pub(crate) fn attention_core(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        stage: usize,
        block: usize,
        x: NodeId,
    ) -> NodeId {
        let blk = &self.stages[stage].blocks[block];
        let (nw, t, h, d) = (blk.windows, blk.win_tokens, blk.heads, blk.head_dim);
        let qkv_w = params.leaf(g, blk.qkv_w);
        let qkv_b = params.leaf(g, blk.qkv_b);
        let qkv = g.matmul(x, qkv_w);
        let qkv = g.add_bias(qkv, qkv_b);
        let q = g.reindex(qkv, vec![nw * h, t, d], blk.q_map.clone());
        let k = g.reindex(qkv, vec![nw * h, t, d], blk.k_map.clone());
        let v = g.reindex(qkv, vec![nw * h, t, d], blk.v_map.clone());
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()));
        let scores = g.reshape(scores, vec![nw, h, t, t]);
        let table = params.leaf(g, blk.rel_table);
        let scores = g.add_rel_bias(scores, table, blk.rel_index.clone());
        let scores = match &blk.attn_mask {
            Some(mask) => g.add_attn_mask(scores, mask.clone()),
            None => scores,
        };
        let scores = g.reshape(scores, vec![nw * h, t, t]);
        let attn = g.softmax_last(scores);
        let out = g.bmm(attn, v, false);
        let merged = g.reindex(out, vec![blk.tokens, blk.dim], blk.merge_map.clone());
        let proj_w = params.leaf(g, blk.proj_w);
        let proj_b = params.leaf(g, blk.proj_b);
        let out = g.matmul(merged, proj_w);
        g.add_bias(out, proj_b)
    }

    /// One pre-norm transformer block: attention and MLP sublayers with
    /// residual connections.
    pub fn block_forward(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        stage: usize,
        block: usize,
        x: NodeId,
    ) -> NodeId {
        let blk = &self.stages[stage].blocks[block];
        let n1g = params.leaf(g, blk.norm1_g);
        let n1b = params.leaf(g, blk.norm1_b);
        let normed = g.layer_norm(x, n1g, n1b);
        let attn = self.attention_core(g, params, stage, block, normed);
        let x = g.add(x, attn);

        let n2g = params.leaf(g, blk.norm2_g);
        let n2b = params.leaf(g, blk.norm2_b);
        let normed = g.layer_norm(x, n2g, n2b);
        let fc1_w = params.leaf(g, blk.fc1_w);
        let fc1_b = params.leaf(g, blk.fc1_b);
        let hidden = g.matmul(normed, fc1_w);
        let hidden = g.add_bias(hidden, fc1_b);
        let hidden = g.gelu(hidden);
        let fc2_w = params.leaf(g, blk.fc2_w);
        let fc2_b = params.leaf(g, blk.fc2_b);
        let out = g.matmul(hidden, fc2_w);
        let out = g.add_bias(out, fc2_b);
        g.add(x, out)
    }

    /// 2x2 token regrouping + layer norm + linear reduction: halves the
    /// spatial side, doubles the channel width.
    pub fn merge_forward(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        stage: usize,
        x: NodeId,
    ) -> NodeId {
        let m = self.stages[stage].merge.as_ref().expect("stage has a merge");
        let gathered = g.reindex(x, vec![m.tokens_out * 4, m.dim_in], m.regroup.clone());
        let grouped = g.reshape(gathered, vec![m.tokens_out, 4 * m.dim_in]);
        let gain = params.leaf(g, m.norm_g);
        let bias = params.leaf(g, m.norm_b);
        let normed = g.layer_norm(grouped, gain, bias);
        let w = params.leaf(g, m.weight);
        g.matmul(normed, w)
    }

    /// Full forward pass producing the four stage outputs.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        img: &FloatBlock,
    ) -> Result<FeaturePyramid> {
        let mut x = self.patch_embed(g, params, img)?;
        let mut features = [NodeId(0); 4];
        let mut sides = [0usize; 4];
        let mut dims = [0usize; 4];
        for (s, stage) in self.stages.iter().enumerate() {
            for b in 0..stage.blocks.len() {
                x = self.block_forward(g, params, s, b, x);
            }
            features[s] = x;
            sides[s] = stage.side;
            dims[s] = stage.dim;
            if stage.merge.is_some() {
                x = self.merge_forward(g, params, s, x);
            }
        }
        Ok(FeaturePyramid {
            features,
            sides,
            dims,
        })
    }

    pub fn stage_side(&self, stage: usize) -> usize {
        self.stages[stage].side
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.stages[stage].dim
    }
}

/// im2col map: token-major rows of flattened patch pixels.
fn build_patch_map(input_size: usize, patch: usize, grid0: usize) -> Vec<u32> {
    let mut map = Vec::with_capacity(grid0 * grid0 * patch * patch * 3);
    for ty in 0..grid0 {
        for tx in 0..grid0 {
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..3 {
                        let y = ty * patch + py;
                        let x = tx * patch + px;
                        map.push(((y * input_size + x) * 3 + c) as u32);
                    }
                }
            }
        }
    }
    map
}

/// Gather map for patch merging: output token (y, x) pulls its 2x2 source
/// neighborhood in row-major order.
fn build_merge_map(side: usize, dim: usize) -> Vec<u32> {
    let half = side / 2;
    let mut map = Vec::with_capacity(half * half * 4 * dim);
    for y in 0..half {
        for x in 0..half {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = (2 * y + dy) * side + (2 * x + dx);
                for c in 0..dim {
                    map.push((src * dim + c) as u32);
                }
            }
        }
    }
    map
}

#[allow(clippy::too_many_arguments)]
fn build_block<T: Scalar>(
    stage: usize,
    index: usize,
    dim: usize,
    side: usize,
    win: usize,
    shift: usize,
    heads: usize,
    cfg: &BackboneConfig,
    params: &mut ParamSet<T>,
    rng: &mut Rng,
) -> Block<T> {
    let prefix = format!("backbone.stages.{stage}.blocks.{index}");
    let norm1_g = params.add(format!("{prefix}.norm1.gain"), init_ones(vec![dim]));
    let norm1_b = params.add(format!("{prefix}.norm1.bias"), init_zeros(vec![dim]));
    let qkv_w = params.add(
        format!("{prefix}.attn.qkv.weight"),
        init_weight(vec![dim, 3 * dim], rng),
    );
    let qkv_b = params.add(format!("{prefix}.attn.qkv.bias"), init_zeros(vec![3 * dim]));
    let rel_table = params.add(
        format!("{prefix}.attn.rel_bias"),
        init_weight(vec![(2 * win - 1) * (2 * win - 1), heads], rng),
    );
    let proj_w = params.add(
        format!("{prefix}.attn.proj.weight"),
        init_weight(vec![dim, dim], rng),
    );
    let proj_b = params.add(format!("{prefix}.attn.proj.bias"), init_zeros(vec![dim]));
    let norm2_g = params.add(format!("{prefix}.norm2.gain"), init_ones(vec![dim]));
    let norm2_b = params.add(format!("{prefix}.norm2.bias"), init_zeros(vec![dim]));
    let hidden = dim * cfg.mlp_ratio;
    let fc1_w = params.add(
        format!("{prefix}.mlp.fc1.weight"),
        init_weight(vec![dim, hidden], rng),
    );
    let fc1_b = params.add(format!("{prefix}.mlp.fc1.bias"), init_zeros(vec![hidden]));
    let fc2_w = params.add(
        format!("{prefix}.mlp.fc2.weight"),
        init_weight(vec![hidden, dim], rng),
    );
    let fc2_b = params.add(format!("{prefix}.mlp.fc2.bias"), init_zeros(vec![dim]));

    let head_dim = dim / heads;
    let per_side = side / win;
    let windows = per_side * per_side;
    let win_tokens = win * win;
    let tokens = side * side;

    let (q_map, k_map, v_map) = build_qkv_maps(side, win, shift, heads, head_dim, dim);
    let merge_map = build_head_merge_map(side, win, shift, heads, head_dim, dim);
    let rel_index = build_rel_index(win);
    let attn_mask = if shift > 0 {
        Some(Arc::new(build_shift_mask::<T>(side, win, shift)))
    } else {
        None
    };

    Block {
        heads,
        head_dim,
        windows,
        win_tokens,
        tokens,
        dim,
        norm1_g,
        norm1_b,
        qkv_w,
        qkv_b,
        rel_table,
        proj_w,
        proj_b,
        norm2_g,
        norm2_b,
        fc1_w,
        fc1_b,
        fc2_w,
        fc2_b,
        q_map: Arc::new(q_map),
        k_map: Arc::new(k_map),
        v_map: Arc::new(v_map),
        merge_map: Arc::new(merge_map),
        rel_index: Arc::new(rel_index),
        attn_mask,
    }
}

/// Maps from the fused qkv tensor (tokens, 3*dim) to per-head window tensors
/// (windows*heads, win_tokens, head_dim), applying the cyclic shift.
fn build_qkv_maps(
    side: usize,
    win: usize,
    shift: usize,
    heads: usize,
    head_dim: usize,
    dim: usize,
) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
    let per_side = side / win;
    let total = per_side * per_side * heads * win * win * head_dim;
    let mut q = Vec::with_capacity(total);
    let mut k = Vec::with_capacity(total);
    let mut v = Vec::with_capacity(total);
    for wy in 0..per_side {
        for wx in 0..per_side {
            for h in 0..heads {
                for iy in 0..win {
                    for ix in 0..win {
                        let sy = (wy * win + iy + shift) % side;
                        let sx = (wx * win + ix + shift) % side;
                        let token = sy * side + sx;
                        for c in 0..head_dim {
                            let base = token * 3 * dim + h * head_dim + c;
                            q.push(base as u32);
                            k.push((base + dim) as u32);
                            v.push((base + 2 * dim) as u32);
                        }
                    }
                }
            }
        }
    }
    (q, k, v)
}

/// Inverse map: scatter per-head window outputs back to (tokens, dim),
/// undoing the cyclic shift.
fn build_head_merge_map(
    side: usize,
    win: usize,
    shift: usize,
    heads: usize,
    head_dim: usize,
    dim: usize,
) -> Vec<u32> {
    let per_side = side / win;
    let win_tokens = win * win;
    let mut map = Vec::with_capacity(side * side * dim);
    for y in 0..side {
        for x in 0..side {
            // window slot that holds original token (y, x) after the shift
            let py = (y + side - shift) % side;
            let px = (x + side - shift) % side;
            let w = (py / win) * per_side + px / win;
            let t = (py % win) * win + (px % win);
            for h in 0..heads {
                for c in 0..head_dim {
                    map.push((((w * heads + h) * win_tokens + t) * head_dim + c) as u32);
                }
            }
        }
    }
    map
}

/// Relative-position index for all in-window token pairs.
fn build_rel_index(win: usize) -> Vec<u32> {
    let t = win * win;
    let span = 2 * win - 1;
    let mut index = Vec::with_capacity(t * t);
    for i in 0..t {
        let (iy, ix) = (i / win, i % win);
        for j in 0..t {
            let (jy, jx) = (j / win, j % win);
            let dy = iy + win - 1 - jy;
            let dx = ix + win - 1 - jx;
            index.push((dy * span + dx) as u32);
        }
    }
    index
}

const MASKED: f64 = -1e9;

/// Additive attention mask for shifted windows: token pairs that wrapped in
/// from different image regions must not attend to each other.
fn build_shift_mask<T: Scalar>(side: usize, win: usize, shift: usize) -> Vec<T> {
    let group = |p: usize| -> usize {
        if p < side - win {
            0
        } else if p < side - shift {
            1
        } else {
            2
        }
    };
    let per_side = side / win;
    let t = win * win;
    let mut mask = vec![T::ZERO; per_side * per_side * t * t];
    for wy in 0..per_side {
        for wx in 0..per_side {
            let w = wy * per_side + wx;
            let labels: Vec<usize> = (0..t)
                .map(|i| {
                    let gy = wy * win + i / win;
                    let gx = wx * win + i % win;
                    group(gy) * 3 + group(gx)
                })
                .collect();
            for i in 0..t {
                for j in 0..t {
                    if labels[i] != labels[j] {
                        mask[(w * t + i) * t + j] = T::from_f64(MASKED);
                    }
                }
            }
        }
    }
    mask
}

//! Full scoring model: backbone + feature masking + head over one masked
//! image, with loss construction for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::backbone::{Backbone, BackboneConfig, ParamSet};
use crate::error::Result;
use crate::head::{apply_fmm, Head, HeadConfig};
use crate::maskgen::MaskedImage;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

/// Backbone, head and their shared parameter set, built for one input size.
pub struct QualityModel<T: Scalar> {
    pub backbone: Backbone<T>,
    pub head: Head<T>,
    pub params: ParamSet<T>,
    pub input_size: usize,
}

impl<T: Scalar> QualityModel<T> {
    pub fn new(bb_cfg: BackboneConfig, head_cfg: HeadConfig, input_size: usize) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = Rng::new(bb_cfg.seed);
        let backbone = Backbone::new(bb_cfg, input_size, &mut params, &mut rng)?;
        let sides = [
            backbone.stage_side(0),
            backbone.stage_side(1),
            backbone.stage_side(2),
            backbone.stage_side(3),
        ];
        let dims = [
            backbone.stage_dim(0),
            backbone.stage_dim(1),
            backbone.stage_dim(2),
            backbone.stage_dim(3),
        ];
        let mut head_rng = Rng::new(head_cfg.seed ^ 0x68_65_61_64);
        let head = Head::new(head_cfg, sides, dims, &mut params, &mut head_rng)?;
        Ok(QualityModel {
            backbone,
            head,
            params,
            input_size,
        })
    }

    /// The sampling lattice this model expects: fine masks are one bit per
    /// stage-1 token, so the grid count equals input_size / patch_size.
    pub fn lattice(&self) -> usize {
        self.backbone.stage_side(0)
    }

    /// Build the score node for one masked image.
    pub fn score_node(
        &self,
        g: &mut Graph<T>,
        masked: &MaskedImage,
        use_fmm: bool,
    ) -> Result<NodeId> {
        let img = masked.image.to_float();
        let pyramid = self.backbone.forward(g, &self.params, &img)?;
        let pyramid = if use_fmm {
            apply_fmm(g, &pyramid, &masked.mask_a, &masked.mask_b)?
        } else {
            pyramid
        };
        self.head.forward(g, &self.params, &pyramid)
    }

    /// Inference: score one masked image.
    pub fn predict(&self, masked: &MaskedImage, use_fmm: bool) -> Result<f64> {
        let mut g = Graph::new();
        let score = self.score_node(&mut g, masked, use_fmm)?;
        Ok(g.value(score).data[0].to_f64())
    }

    /// Loss node against a normalized target; returns (loss, score).
    pub fn loss_node(
        &self,
        g: &mut Graph<T>,
        masked: &MaskedImage,
        target: f64,
        loss: LossKind,
        use_fmm: bool,
    ) -> Result<(NodeId, NodeId)> {
        let score = self.score_node(g, masked, use_fmm)?;
        let diff = g.add_scalar(score, T::from_f64(-target));
        let loss = match loss {
            LossKind::Mae => g.abs(diff),
            LossKind::Mse => g.square(diff),
        };
        Ok((loss, score))
    }
}

//! Shared mask branch: P3 features -> F_mask.
//!
//! A stack of 3x3 convs at the branch width, then a 1x1 reduction to the
//! compact C_mask channels every generated head consumes. Output keeps P3's
//! stride-8 resolution.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::nn::{ConvLayer, Init};
use crate::tensor::Tensor;

pub struct MaskBranch {
    convs: Vec<ConvLayer>,
    reduce: ConvLayer,
}

impl MaskBranch {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let width = cfg.mask_branch_width;
        let mut convs = Vec::with_capacity(cfg.mask_branch_depth);
        let mut in_ch = cfg.fpn_channels;
        for _ in 0..cfg.mask_branch_depth {
            convs.push(ConvLayer::new(rng, in_ch, width, 3, 1, 1, Init::Kaiming));
            in_ch = width;
        }
        let reduce = ConvLayer::new(rng, width, cfg.c_mask.max(1), 1, 1, 0, Init::Kaiming);
        MaskBranch { convs, reduce }
    }

    /// `[N, fpn_ch, H/8, W/8]` -> `[N, C_mask, H/8, W/8]`.
    pub fn forward(&self, p3: &Tensor<f32>) -> Tensor<f32> {
        let mut x = p3.clone();
        for conv in &self.convs {
            x = conv.forward(&x).relu();
        }
        self.reduce.forward(&x)
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor<f32>)>) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.collect_params(&format!("mask_branch.conv{i}"), out);
        }
        self.reduce.collect_params("mask_branch.reduce", out);
    }
}

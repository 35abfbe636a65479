//! Network and run configuration.
//!
//! Every architectural knob lives in [`NetConfig`], serialized as versioned
//! TOML. `load` validates every field and rejects unknown keys, so a stale
//! or hand-edited config fails loudly instead of silently training the
//! wrong model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// What the per-instance mask head sees: shared mask features, coordinate
/// channels relative to the generating location, or ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordMode {
    /// Mask features + coordinates relative to the generating location.
    Relative,
    /// Mask features + absolute (image-anchored) coordinates.
    Absolute,
    /// Mask features only.
    FeaturesOnly,
    /// Coordinate channels only, no appearance features.
    CoordsOnly,
}

impl CoordMode {
    pub fn uses_features(self) -> bool {
        !matches!(self, CoordMode::CoordsOnly)
    }
    pub fn uses_coords(self) -> bool {
        !matches!(self, CoordMode::FeaturesOnly)
    }
    pub fn in_channels(self, c_mask: usize) -> usize {
        match self {
            CoordMode::Relative | CoordMode::Absolute => c_mask + 2,
            CoordMode::FeaturesOnly => c_mask,
            CoordMode::CoordsOnly => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsMode {
    Box,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads for internal op parallelism; 0 means all cores.
    #[serde(default)]
    pub threads: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub assign: AssignConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input size; must be divisible by the largest FPN stride.
    pub image_size: usize,
    pub num_classes: usize,
    /// Enabled pyramid levels; P_l has stride 2^l.
    pub fpn_levels: Vec<u8>,
    pub fpn_channels: usize,
    /// Stem + four stage widths of the backbone.
    pub backbone_channels: Vec<usize>,
    /// 3x3 conv-relu blocks in each prediction tower.
    pub tower_depth: usize,
    /// Dynamic mask head: number of 1x1 conv layers.
    pub mask_head_depth: usize,
    /// Dynamic mask head: channels of the hidden layers.
    pub mask_head_width: usize,
    /// Channels of the shared mask feature map F_mask.
    pub c_mask: usize,
    pub mask_branch_width: usize,
    pub mask_branch_depth: usize,
    pub coord_mode: CoordMode,
    /// Bilinear upsampling applied to mask logits before thresholding.
    pub upsample_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 256,
            num_classes: 3,
            fpn_levels: vec![3, 4, 5],
            fpn_channels: 64,
            backbone_channels: vec![8, 16, 32, 64, 64],
            tower_depth: 1,
            mask_head_depth: 3,
            mask_head_width: 8,
            c_mask: 8,
            mask_branch_width: 32,
            mask_branch_depth: 4,
            coord_mode: CoordMode::Relative,
            upsample_factor: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    /// Center-region half-width in units of the level stride.
    pub center_radius: f32,
    /// First size-of-interest boundary; each level doubles it.
    pub size_range_base: f32,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            center_radius: 1.5,
            size_range_base: 48.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub nms_mode: NmsMode,
    pub score_thresh: f32,
    pub nms_iou: f32,
    pub mask_nms_iou: f32,
    pub pre_nms_top: usize,
    pub max_detections: usize,
    pub mask_threshold: f32,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            nms_mode: NmsMode::Box,
            score_thresh: 0.05,
            nms_iou: 0.6,
            mask_nms_iou: 0.6,
            pre_nms_top: 1000,
            max_detections: 100,
            mask_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Mask-loss weight in the overall loss.
    pub lambda: f32,
    /// Fractions of the run at which the learning rate drops by 10x.
    pub decay_milestones: Vec<f32>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: 1.0,
            decay_milestones: vec![0.6, 0.8],
            checkpoint_every: 500,
        }
    }
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_seed() -> u64 {
    42
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            version: CONFIG_VERSION,
            seed: default_seed(),
            threads: 0,
            model: ModelConfig::default(),
            assign: AssignConfig::default(),
            inference: InferenceConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        fn cfg_err<T>(msg: String) -> Result<T> {
            Err(Error::Config(msg))
        }
        let m = &self.model;
        if self.version != CONFIG_VERSION {
            return cfg_err(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if m.fpn_levels.is_empty() {
            return cfg_err("fpn_levels must not be empty".into());
        }
        let mut sorted = m.fpn_levels.clone();
        sorted.sort_unstable();
        if sorted != m.fpn_levels || sorted.first() != Some(&3) {
            return cfg_err(format!(
                "fpn_levels must be ascending and start at 3 (mask branch taps P3), got {:?}",
                m.fpn_levels
            ));
        }
        for w in m.fpn_levels.windows(2) {
            if w[1] != w[0] + 1 {
                return cfg_err(format!("fpn_levels must be contiguous, got {:?}", m.fpn_levels));
            }
        }
        if *sorted.last().unwrap() > 7 {
            return cfg_err("fpn_levels beyond P7 are not supported".into());
        }
        let max_stride = 1usize << *m.fpn_levels.last().unwrap();
        if m.image_size == 0 || m.image_size % max_stride.max(32) != 0 {
            return cfg_err(format!(
                "image_size {} must be divisible by {} (backbone stride and largest FPN stride)",
                m.image_size,
                max_stride.max(32)
            ));
        }
        if m.num_classes == 0 {
            return cfg_err("num_classes must be >= 1".into());
        }
        if m.backbone_channels.len() != 5 || m.backbone_channels.iter().any(|&c| c == 0) {
            return cfg_err("backbone_channels needs 5 positive widths (stem + 4 stages)".into());
        }
        if m.fpn_channels == 0 || m.tower_depth == 0 {
            return cfg_err("fpn_channels and tower_depth must be >= 1".into());
        }
        if m.mask_head_depth == 0 || m.mask_head_width == 0 {
            return cfg_err("mask head depth and width must be >= 1".into());
        }
        if m.c_mask == 0 && m.coord_mode.uses_features() {
            return cfg_err("c_mask must be >= 1 when the mask head consumes features".into());
        }
        if m.mask_branch_width == 0 || m.mask_branch_depth == 0 {
            return cfg_err("mask branch width/depth must be >= 1".into());
        }
        if !matches!(m.upsample_factor, 1 | 2 | 4) {
            return cfg_err(format!("upsample_factor must be 1, 2 or 4, got {}", m.upsample_factor));
        }
        let a = &self.assign;
        if a.center_radius <= 0.0 || a.size_range_base <= 0.0 {
            return cfg_err("center_radius and size_range_base must be positive".into());
        }
        let inf = &self.inference;
        if !(0.0..1.0).contains(&inf.score_thresh)
            || !(0.0..1.0).contains(&inf.nms_iou)
            || !(0.0..1.0).contains(&inf.mask_nms_iou)
            || !(0.0..1.0).contains(&inf.mask_threshold)
        {
            return cfg_err("inference thresholds must lie in (0,1)".into());
        }
        if inf.pre_nms_top == 0 || inf.max_detections == 0 {
            return cfg_err("pre_nms_top and max_detections must be >= 1".into());
        }
        let t = &self.train;
        if t.iterations == 0 || t.batch_size == 0 {
            return cfg_err("iterations and batch_size must be >= 1".into());
        }
        if t.learning_rate <= 0.0 {
            return cfg_err("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return cfg_err("momentum must be in [0,1)".into());
        }
        if t.weight_decay < 0.0 || t.lambda < 0.0 {
            return cfg_err("weight_decay and lambda must be nonnegative".into());
        }
        let mut last = 0.0f32;
        for &ms in &t.decay_milestones {
            if ms <= last || ms >= 1.0 {
                return cfg_err(format!("decay_milestones must be ascending in (0,1), got {:?}", t.decay_milestones));
            }
            last = ms;
        }
        Ok(())
    }

    /// Strides of the enabled pyramid levels.
    pub fn strides(&self) -> Vec<usize> {
        self.model.fpn_levels.iter().map(|&l| 1usize << l).collect()
    }

    /// Per-level size-of-interest upper bounds; the last level is unbounded.
    pub fn size_bounds(&self) -> Vec<f32> {
        let n = self.model.fpn_levels.len();
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    f32::INFINITY
                } else {
                    self.assign.size_range_base * (1 << i) as f32
                }
            })
            .collect()
    }

    /// Coordinate normalizer for heads generated at each level: the level's
    /// size-of-interest, with the open-ended last level doubling the
    /// previous bound. Keeps coordinate magnitudes roughly within [-1, 1].
    pub fn coord_normalizers(&self) -> Vec<f32> {
        let n = self.model.fpn_levels.len();
        (0..n)
            .map(|i| self.assign.size_range_base * (1 << i) as f32)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NetConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: NetConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

//! Backbone and feature pyramid.
//!
//! The backbone is a plain conv-relu CNN: a stride-2 stem plus four stages
//! of (stride-2 conv, stride-1 conv), yielding C3/C4/C5 at strides 8/16/32.
//! The pyramid merges them top-down through 1x1 laterals and bilinear
//! upsampling; P6/P7 come from extra stride-2 convs when enabled.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Init};
use crate::tensor::Tensor;

/// FPN output: `(level, features)` pairs in ascending level order;
/// P_l has stride 2^l and all levels share one channel count.
pub struct PyramidFeatures {
    pub levels: Vec<(u8, Tensor<f32>)>,
}

impl PyramidFeatures {
    pub fn stride(level: u8) -> usize {
        1usize << level
    }

    pub fn get(&self, level: u8) -> Option<&Tensor<f32>> {
        self.levels.iter().find(|(l, _)| *l == level).map(|(_, t)| t)
    }
}

pub struct Backbone {
    stem: ConvLayer,
    stages: Vec<(ConvLayer, ConvLayer)>,
}

impl Backbone {
    pub fn new(rng: &mut ChaCha8Rng, channels: &[usize]) -> Self {
        assert_eq!(channels.len(), 5, "stem + 4 stage widths");
        let stem = ConvLayer::new(rng, 3, channels[0], 3, 2, 1, Init::Kaiming);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = channels[0];
        for &out_ch in &channels[1..] {
            let down = ConvLayer::new(rng, in_ch, out_ch, 3, 2, 1, Init::Kaiming);
            let refine = ConvLayer::new(rng, out_ch, out_ch, 3, 1, 1, Init::Kaiming);
            stages.push((down, refine));
            in_ch = out_ch;
        }
        Backbone { stem, stages }
    }

    /// C3, C4, C5 at strides 8, 16, 32. The input must be NCHW RGB with
    /// spatial size divisible by 32.
    pub fn forward(&self, image: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::ShapeMismatch {
                op: "backbone (expects [N,3,H,W])",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        if s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::InvalidArgument(format!(
                "backbone input {}x{} must be divisible by 32",
                s[2], s[3]
            )));
        }
        let mut x = self.stem.forward(image).relu();
        let mut outputs = Vec::with_capacity(3);
        for (i, (down, refine)) in self.stages.iter().enumerate() {
            x = down.forward(&x).relu();
            x = refine.forward(&x).relu();
            if i >= 1 {
                outputs.push(x.clone());
            }
        }
        let c5 = outputs.pop().expect("stage 4 output");
        let c4 = outputs.pop().expect("stage 3 output");
        let c3 = outputs.pop().expect("stage 2 output");
        Ok((c3, c4, c5))
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor<f32>)>) {
        self.stem.collect_params("backbone.stem", out);
        for (i, (down, refine)) in self.stages.iter().enumerate() {
            down.collect_params(&format!("backbone.stage{}.down", i + 1), out);
            refine.collect_params(&format!("backbone.stage{}.refine", i + 1), out);
        }
    }
}

pub struct Fpn {
    lateral3: ConvLayer,
    lateral4: ConvLayer,
    lateral5: ConvLayer,
    p6: Option<ConvLayer>,
    p7: Option<ConvLayer>,
    levels: Vec<u8>,
}

impl Fpn {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let ch = cfg.fpn_channels;
        let c3 = cfg.backbone_channels[2];
        let c4 = cfg.backbone_channels[3];
        let c5 = cfg.backbone_channels[4];
        let lateral3 = ConvLayer::new(rng, c3, ch, 1, 1, 0, Init::Kaiming);
        let lateral4 = ConvLayer::new(rng, c4, ch, 1, 1, 0, Init::Kaiming);
        let lateral5 = ConvLayer::new(rng, c5, ch, 1, 1, 0, Init::Kaiming);
        let p6 = cfg
            .fpn_levels
            .contains(&6)
            .then(|| ConvLayer::new(rng, ch, ch, 3, 2, 1, Init::Kaiming));
        let p7 = cfg
            .fpn_levels
            .contains(&7)
            .then(|| ConvLayer::new(rng, ch, ch, 3, 2, 1, Init::Kaiming));
        Fpn {
            lateral3,
            lateral4,
            lateral5,
            p6,
            p7,
            levels: cfg.fpn_levels.clone(),
        }
    }

    pub fn forward(
        &self,
        c3: &Tensor<f32>,
        c4: &Tensor<f32>,
        c5: &Tensor<f32>,
    ) -> Result<PyramidFeatures> {
        let p5 = self.lateral5.forward(c5);
        let p4 = self.lateral4.forward(c4).add(&p5.bilinear_resize(2, 1)?);
        let p3 = self.lateral3.forward(c3).add(&p4.bilinear_resize(2, 1)?);
        let mut levels = vec![(3u8, p3), (4u8, p4), (5u8, p5.clone())];
        if let Some(conv6) = &self.p6 {
            let p6 = conv6.forward(&p5);
            if let Some(conv7) = &self.p7 {
                levels.push((7u8, conv7.forward(&p6.relu())));
            }
            levels.insert(3, (6u8, p6));
        }
        levels.retain(|(l, _)| self.levels.contains(l));
        levels.sort_by_key(|(l, _)| *l);
        Ok(PyramidFeatures { levels })
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor<f32>)>) {
        self.lateral3.collect_params("fpn.lateral3", out);
        self.lateral4.collect_params("fpn.lateral4", out);
        self.lateral5.collect_params("fpn.lateral5", out);
        if let Some(p6) = &self.p6 {
            p6.collect_params("fpn.p6", out);
        }
        if let Some(p7) = &self.p7 {
            p7.collect_params("fpn.p7", out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetConfig;
    use rand::SeedableRng;

    fn build(levels: Vec<u8>) -> (Backbone, Fpn, NetConfig) {
        let mut cfg = NetConfig::default();
        cfg.model.fpn_levels = levels;
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = Backbone::new(&mut rng, &cfg.model.backbone_channels);
        let fpn = Fpn::new(&mut rng, &cfg.model);
        (backbone, fpn, cfg)
    }

    #[test]
    fn stride_arithmetic_at_256() {
        let (backbone, _, _) = build(vec![3, 4, 5]);
        let img = Tensor::zeros(&[1, 3, 256, 256]);
        let (c3, c4, c5) = backbone.forward(&img).unwrap();
        assert_eq!(&c3.shape()[2..], &[32, 32]);
        assert_eq!(&c4.shape()[2..], &[16, 16]);
        assert_eq!(&c5.shape()[2..], &[8, 8]);
    }

    #[test]
    fn doubling_input_doubles_feature_maps() {
        let (backbone, _, _) = build(vec![3, 4, 5]);
        let (c3a, ..) = backbone.forward(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        let (c3b, ..) = backbone.forward(&Tensor::zeros(&[1, 3, 128, 128])).unwrap();
        assert_eq!(c3a.shape()[2] * 2, c3b.shape()[2]);
        assert_eq!(c3a.shape()[3] * 2, c3b.shape()[3]);
    }

    #[test]
    fn zero_image_stays_finite() {
        let (backbone, fpn, _) = build(vec![3, 4, 5]);
        let (c3, c4, c5) = backbone.forward(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        let pyr = fpn.forward(&c3, &c4, &c5).unwrap();
        for (_, t) in &pyr.levels {
            assert!(t.to_vec().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let (backbone, _, _) = build(vec![3, 4, 5]);
        assert!(backbone.forward(&Tensor::zeros(&[1, 3, 100, 100])).is_err());
    }

    #[test]
    fn three_levels_by_default() {
        let (backbone, fpn, _) = build(vec![3, 4, 5]);
        let (c3, c4, c5) = backbone.forward(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        let pyr = fpn.forward(&c3, &c4, &c5).unwrap();
        assert_eq!(pyr.levels.len(), 3);
        assert_eq!(pyr.get(3).unwrap().shape()[2..], c3.shape()[2..]);
        // channel uniformity
        for (_, t) in &pyr.levels {
            assert_eq!(t.shape()[1], 64);
        }
    }

    #[test]
    fn five_levels_when_enabled() {
        let (backbone, fpn, _) = build(vec![3, 4, 5, 6, 7]);
        let img = Tensor::zeros(&[1, 3, 256, 256]);
        let (c3, c4, c5) = backbone.forward(&img).unwrap();
        let pyr = fpn.forward(&c3, &c4, &c5).unwrap();
        assert_eq!(pyr.levels.len(), 5);
        let p5 = pyr.get(5).unwrap().shape()[2];
        let p6 = pyr.get(6).unwrap().shape()[2];
        let p7 = pyr.get(7).unwrap().shape()[2];
        assert_eq!(p6, p5.div_ceil(2));
        assert_eq!(p7, p6.div_ceil(2));
    }

    #[test]
    fn gradient_reaches_first_backbone_conv() {
        let (backbone, fpn, _) = build(vec![3, 4, 5]);
        let img = Tensor::from_vec(&[1, 3, 64, 64], (0..3 * 64 * 64).map(|i| (i % 7) as f32 * 0.1).collect());
        let (c3, c4, c5) = backbone.forward(&img).unwrap();
        let pyr = fpn.forward(&c3, &c4, &c5).unwrap();
        let loss = pyr.get(3).unwrap().sigmoid().sum();
        loss.backward().unwrap();
        let mut params = Vec::new();
        backbone.collect_params(&mut params);
        let stem_grad = params[0].1.grad();
        assert!(stem_grad.iter().any(|&g| g != 0.0), "no gradient at the stem conv");
    }
}

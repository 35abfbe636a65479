//! Small building blocks shared by the network modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub(crate) fn gaussian64(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// He-style fan-in scaling for conv-relu stacks.
    Kaiming,
    /// Prediction layers: small random weights, fixed bias (e.g. the
    /// negative classification prior).
    Pred { std: f64, bias: f64 },
}

pub(crate) struct ConvLayer {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let (std, bias_val) = match init {
            Init::Kaiming => ((2.0 / fan_in).sqrt(), 0.0),
            Init::Pred { std, bias } => (std, bias),
        };
        let weight: Vec<f32> = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| (gaussian64(rng) * std) as f32)
            .collect();
        ConvLayer {
            weight: Tensor::param(&[out_ch, in_ch, kernel, kernel], weight),
            bias: Tensor::param(&[out_ch], vec![bias_val as f32; out_ch]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Tensor<f32> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding)
            .expect("layer shapes are fixed at construction")
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<f32>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

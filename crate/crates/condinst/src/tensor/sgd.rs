//! SGD with momentum and weight decay.

use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Per-parameter velocity buffers keyed by parameter name, so optimizer
/// state can round-trip through checkpoints for resume.
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
        assert!(weight_decay >= 0.0, "weight decay must be nonnegative");
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// v <- m*v + g + wd*p;  p <- p - lr*v
    ///
    /// Consumes and clears each parameter's gradient; an unreached parameter
    /// counts as zero gradient. A non-finite gradient aborts the step.
    pub fn step(&mut self, params: &[(String, Tensor<f32>)]) -> Result<()> {
        for (name, p) in params {
            let grad = p.take_grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient(name.clone()));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.numel()]);
            assert_eq!(v.len(), p.numel(), "velocity shape drifted for '{name}'");
            let mut data = p.to_vec();
            for i in 0..data.len() {
                v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * data[i];
                data[i] -= self.lr * v[i];
            }
            p.set_data(&data);
        }
        Ok(())
    }

    /// Velocity buffers in sorted-name order (checkpointing).
    pub fn velocity_entries(&self) -> Vec<(String, Vec<f32>)> {
        let mut out: Vec<_> = self
            .velocity
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn set_velocity(&mut self, name: &str, values: Vec<f32>) {
        self.velocity.insert(name.to_string(), values);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32) -> (String, Tensor<f32>) {
        ("p".to_string(), Tensor::param(&[1], vec![v]))
    }

    fn set_grad(p: &Tensor<f32>, g: f32) {
        p.accum_grad(|buf| buf[0] += g);
    }

    #[test]
    fn vanilla_step() {
        let ps = vec![param(1.0)];
        set_grad(&ps[0].1, 1.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        opt.step(&ps).unwrap();
        assert!((ps[0].1.item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_recurrence() {
        // two steps, m = 0.9, g = 1 each: v1 = 1, v2 = 1.9
        let ps = vec![param(0.0)];
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        set_grad(&ps[0].1, 1.0);
        opt.step(&ps).unwrap();
        let after1 = ps[0].1.item();
        assert!((after1 - (-0.1)).abs() < 1e-7);
        set_grad(&ps[0].1, 1.0);
        opt.step(&ps).unwrap();
        let delta2 = ps[0].1.item() - after1;
        assert!((delta2 - (-0.1 * 1.9)).abs() < 1e-7, "second step used v2 = 1.9");
    }

    #[test]
    fn pure_weight_decay() {
        let ps = vec![param(1.0)];
        let mut opt = Sgd::new(1.0, 0.0, 0.1);
        opt.step(&ps).unwrap(); // no gradient set: g = 0
        assert!((ps[0].1.item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_aborts() {
        let ps = vec![param(1.0)];
        set_grad(&ps[0].1, f32::NAN);
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        let err = opt.step(&ps).unwrap_err();
        assert!(err.to_string().contains("non-finite gradient"));
    }
}

//! Full network assembly: backbone + FPN + prediction heads + mask branch.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Fpn, PyramidFeatures};
use crate::config::NetConfig;
use crate::dynamic_head::HeadArch;
use crate::error::{Error, Result};
use crate::heads::{FcosHeads, HeadOutputs};
use crate::mask_branch::MaskBranch;
use crate::scenes::Scene;
use crate::tensor::{load_checkpoint, save_checkpoint, CheckpointEntry, Tensor};

pub struct NetworkOutputs {
    pub pyramid: PyramidFeatures,
    pub heads: HeadOutputs,
    /// `[N, C_mask, H/8, W/8]` shared mask features.
    pub f_mask: Tensor<f32>,
}

pub struct CondInstModel {
    pub config: NetConfig,
    pub arch: HeadArch,
    backbone: Backbone,
    fpn: Fpn,
    heads: FcosHeads,
    mask_branch: MaskBranch,
}

impl CondInstModel {
    /// Builds a freshly initialized model; all randomness comes from the
    /// config seed, so construction is reproducible bit for bit.
    pub fn new(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let arch = HeadArch::from_model_config(&config.model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = Backbone::new(&mut rng, &config.model.backbone_channels);
        let fpn = Fpn::new(&mut rng, &config.model);
        let heads = FcosHeads::new(&mut rng, config)?;
        let mask_branch = MaskBranch::new(&mut rng, &config.model);
        Ok(CondInstModel {
            config: config.clone(),
            arch,
            backbone,
            fpn,
            heads,
            mask_branch,
        })
    }

    pub fn forward(&self, images: &Tensor<f32>) -> Result<NetworkOutputs> {
        let (c3, c4, c5) = self.backbone.forward(images)?;
        let pyramid = self.fpn.forward(&c3, &c4, &c5)?;
        let heads = self.heads.forward(&pyramid);
        let p3 = pyramid.get(3).ok_or_else(|| {
            Error::InvalidArgument("pyramid lacks P3; mask branch has no input".into())
        })?;
        let f_mask = self.mask_branch.forward(p3);
        Ok(NetworkOutputs {
            pyramid,
            heads,
            f_mask,
        })
    }

    /// Stacks scene images into the `[N,3,H,W]` network input.
    pub fn batch_input(&self, scenes: &[&Scene]) -> Tensor<f32> {
        let size = self.config.model.image_size;
        let mut data = vec![0f32; scenes.len() * 3 * size * size];
        for (n, scene) in scenes.iter().enumerate() {
            assert_eq!(
                (scene.width, scene.height),
                (size, size),
                "scene size differs from config image_size"
            );
            let base = n * 3 * size * size;
            for y in 0..size {
                for x in 0..size {
                    let pix = y * size + x;
                    for c in 0..3 {
                        data[base + c * size * size + pix] = scene.image[pix * 3 + c];
                    }
                }
            }
        }
        Tensor::from_vec(&[scenes.len(), 3, size, size], data)
    }

    /// Named parameters in a fixed, deterministic order.
    pub fn params(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        self.backbone.collect_params(&mut out);
        self.fpn.collect_params(&mut out);
        self.heads.collect_params(&mut out);
        self.mask_branch.collect_params(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }

    /// Errors if any weight is non-finite (a poisoned checkpoint or a
    /// diverged training run must not silently produce garbage).
    pub fn check_finite(&self) -> Result<()> {
        for (name, p) in self.params() {
            if p.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NanWeights(name));
            }
        }
        Ok(())
    }

    /// Writes model weights (plus any extra entries, e.g. optimizer state)
    /// to a checkpoint file.
    pub fn save(&self, path: &Path, extra: &[CheckpointEntry]) -> Result<()> {
        let mut entries: Vec<CheckpointEntry> = self
            .params()
            .iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect();
        entries.extend(extra.iter().cloned());
        save_checkpoint(path, &entries)
    }

    /// Loads model weights by name; every model parameter must be present
    /// with a matching shape. Returns the non-model entries.
    pub fn load(&self, path: &Path) -> Result<Vec<CheckpointEntry>> {
        let entries = load_checkpoint(path)?;
        let mut by_name: std::collections::HashMap<&str, &CheckpointEntry> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        for (name, p) in self.params() {
            let entry = by_name.remove(name.as_str()).ok_or_else(|| Error::Checkpoint {
                file: path.display().to_string(),
                reason: format!("missing parameter '{name}'"),
            })?;
            if entry.shape != p.shape() {
                return Err(Error::Checkpoint {
                    file: path.display().to_string(),
                    reason: format!(
                        "parameter '{name}' has shape {:?}, model expects {:?}",
                        entry.shape,
                        p.shape()
                    ),
                });
            }
            p.set_data(&entry.data);
        }
        let leftover_names: Vec<String> = by_name.keys().map(|s| s.to_string()).collect();
        Ok(entries
            .into_iter()
            .filter(|e| leftover_names.iter().any(|n| n == &e.name))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> NetConfig {
        let mut cfg = NetConfig::default();
        cfg.model.image_size = 64;
        cfg
    }

    #[test]
    fn forward_shapes_line_up() {
        let cfg = tiny_config();
        let model = CondInstModel::new(&cfg).unwrap();
        let images = Tensor::zeros(&[2, 3, 64, 64]);
        let out = model.forward(&images).unwrap();
        assert_eq!(out.f_mask.shape(), &[2, 8, 8, 8]);
        assert_eq!(out.heads.levels.len(), 3);
        assert_eq!(out.heads.levels[0].controller.shape(), &[2, 169, 8, 8]);
        assert_eq!(out.heads.levels[0].cls.shape(), &[2, 3, 8, 8]);
        assert_eq!(out.heads.levels[1].box_reg.shape(), &[2, 4, 4, 4]);
        assert_eq!(out.heads.levels[2].centerness.shape(), &[2, 1, 2, 2]);
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = tiny_config();
        let a = CondInstModel::new(&cfg).unwrap();
        let b = CondInstModel::new(&cfg).unwrap();
        for ((na, pa), (nb, pb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.to_vec(), pb.to_vec());
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_every_weight() {
        let cfg = tiny_config();
        let model = CondInstModel::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path, &[]).unwrap();

        let mut cfg2 = cfg.clone();
        cfg2.seed = 999; // different init, then overwritten by load
        let model2 = CondInstModel::new(&cfg2).unwrap();
        model2.load(&path).unwrap();
        for ((_, pa), (_, pb)) in model.params().iter().zip(model2.params().iter()) {
            assert_eq!(
                pa.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                pb.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn load_rejects_missing_params() {
        let cfg = tiny_config();
        let model = CondInstModel::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        save_checkpoint(
            &path,
            &[CheckpointEntry {
                name: "nope".into(),
                shape: vec![1],
                data: vec![0.0],
            }],
        )
        .unwrap();
        assert!(model.load(&path).is_err());
    }

    #[test]
    fn nan_weights_detected() {
        let cfg = tiny_config();
        let model = CondInstModel::new(&cfg).unwrap();
        model.check_finite().unwrap();
        let params = model.params();
        let (_, p) = &params[3];
        let mut data = p.to_vec();
        data[0] = f32::NAN;
        p.set_data(&data);
        assert!(model.check_finite().is_err());
    }
}

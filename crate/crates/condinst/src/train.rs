//! Training loop: SGD with momentum, step-decayed learning rate, periodic
//! checkpoints, deterministic batch order from the config seed.
//!
//! A non-finite loss or gradient aborts the run with the last periodic
//! checkpoint still on disk.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::heads::{assign_targets, compute_locations, AssignmentResult};
use crate::inference::segment;
use crate::losses::{compute_losses, downsample_mask, LossReport};
use crate::metrics::{evaluate, EvalGroundTruth, EvalPrediction, EvalSummary};
use crate::model::CondInstModel;
use crate::scenes::Scene;
use crate::tensor::{CheckpointEntry, Sgd, Tensor};

pub const LOG_HEADER: &str = "iteration,lr,loss_cls,loss_box,loss_ctr,loss_mask,loss_overall,n_pos";

pub fn log_row(iteration: usize, lr: f32, r: &LossReport) -> String {
    format!(
        "{iteration},{lr},{},{},{},{},{},{}",
        r.cls, r.box_reg, r.centerness, r.mask, r.overall, r.n_pos
    )
}

pub struct Trainer {
    pub model: CondInstModel,
    pub optimizer: Sgd,
    pub start_iteration: usize,
    cfg: NetConfig,
}

impl Trainer {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        let model = CondInstModel::new(cfg)?;
        let optimizer = Sgd::new(
            cfg.train.learning_rate,
            cfg.train.momentum,
            cfg.train.weight_decay,
        );
        Ok(Trainer {
            model,
            optimizer,
            start_iteration: 0,
            cfg: cfg.clone(),
        })
    }

    /// Restores model weights, optimizer velocities and the iteration
    /// counter from a training checkpoint.
    pub fn resume_from(cfg: &NetConfig, path: &Path) -> Result<Self> {
        let mut trainer = Self::new(cfg)?;
        let extra = trainer.model.load(path)?;
        for entry in extra {
            if let Some(name) = entry.name.strip_prefix("opt/velocity/") {
                trainer.optimizer.set_velocity(name, entry.data);
            } else if entry.name == "meta/iteration" {
                trainer.start_iteration = entry.data[0] as usize;
            }
        }
        Ok(trainer)
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f32 {
        let total = self.cfg.train.iterations;
        let drops = self
            .cfg
            .train
            .decay_milestones
            .iter()
            .filter(|&&m| iteration >= ((m as f64) * total as f64).round() as usize)
            .count();
        self.cfg.train.learning_rate * 0.1f32.powi(drops as i32)
    }

    pub fn save_checkpoint(&self, path: &Path, iteration: usize) -> Result<()> {
        let mut extra: Vec<CheckpointEntry> = self
            .optimizer
            .velocity_entries()
            .into_iter()
            .map(|(name, data)| CheckpointEntry {
                shape: vec![data.len()],
                name: format!("opt/velocity/{name}"),
                data,
            })
            .collect();
        extra.push(CheckpointEntry {
            name: "meta/iteration".into(),
            shape: vec![1],
            data: vec![iteration as f32],
        });
        self.model.save(path, &extra)
    }

    /// Runs the configured number of iterations over `scenes`, invoking
    /// `on_iteration(iter, lr, report)` after every step. Writes periodic
    /// checkpoints (and the final one) to `checkpoint_path` when given.
    pub fn train(
        &mut self,
        scenes: &[Scene],
        checkpoint_path: Option<&Path>,
        mut on_iteration: impl FnMut(usize, f32, &LossReport),
    ) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one scene".into()));
        }
        let cfg = self.cfg.clone();
        let batch_size = cfg.train.batch_size;

        // Assignment depends only on scene + config: compute once.
        let locations = {
            let probe = self.model.batch_input(&[&scenes[0]]);
            let outputs = crate::tensor::no_grad(|| self.model.forward(&probe))?;
            compute_locations(&outputs.pyramid)
        };
        let assignments: Vec<AssignmentResult> = scenes
            .iter()
            .map(|s| assign_targets(s, &locations, &cfg))
            .collect();

        // Deterministic epoch streams: iteration i consumes batch i of a
        // shuffled index sequence regenerated per epoch from the seed.
        let batches_per_epoch = scenes.len().div_ceil(batch_size);
        let epoch_order = |epoch: usize| -> Vec<usize> {
            let mut order: Vec<usize> = (0..scenes.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
            order
        };

        let mut current_epoch = usize::MAX;
        let mut order: Vec<usize> = Vec::new();
        for iteration in self.start_iteration..cfg.train.iterations {
            let epoch = iteration / batches_per_epoch;
            if epoch != current_epoch {
                order = epoch_order(epoch);
                current_epoch = epoch;
            }
            let slot = iteration % batches_per_epoch;
            let batch_indices: Vec<usize> = (0..batch_size)
                .map(|k| order[(slot * batch_size + k) % scenes.len()])
                .collect();
            let batch_scenes: Vec<&Scene> = batch_indices.iter().map(|&i| &scenes[i]).collect();
            let batch_assignments: Vec<AssignmentResult> = batch_indices
                .iter()
                .map(|&i| reuse_assignment(&assignments[i]))
                .collect();

            let lr = self.learning_rate_at(iteration);
            self.optimizer.lr = lr;

            let input = self.model.batch_input(&batch_scenes);
            let outputs = self.model.forward(&input)?;
            let (loss, report) = compute_losses(&outputs, &batch_assignments, &batch_scenes, &cfg)?;
            loss.backward()?;
            drop(loss);
            drop(outputs);
            self.optimizer.step(&self.model.params())?;

            on_iteration(iteration, lr, &report);

            if let Some(path) = checkpoint_path {
                let due = (iteration + 1) % cfg.train.checkpoint_every == 0;
                if due || iteration + 1 == cfg.train.iterations {
                    self.save_checkpoint(path, iteration + 1)?;
                }
            }
        }
        Ok(())
    }
}

// AssignmentResult is all owned data; batches borrow scenes repeatedly, so
// clone the per-scene result into the batch list.
fn reuse_assignment(a: &AssignmentResult) -> AssignmentResult {
    AssignmentResult {
        levels: a
            .levels
            .iter()
            .map(|l| crate::heads::LevelAssignment {
                level: l.level,
                stride: l.stride,
                h: l.h,
                w: l.w,
                labels: l.labels.clone(),
                matched: l.matched.clone(),
                box_targets: l.box_targets.clone(),
                ctr_targets: l.ctr_targets.clone(),
            })
            .collect(),
        n_pos: a.n_pos,
        geometry: a.geometry.clone(),
    }
}

/// Runs inference over a scene list and scores it COCO-style. Predictions
/// live at input/2 resolution; ground truth is max-pool downsampled by 2 to
/// match (the same rule training uses).
pub fn evaluate_on_scenes(
    model: &CondInstModel,
    scenes: &[Scene],
    cfg: &NetConfig,
) -> Result<EvalSummary> {
    let mut predictions: Vec<EvalPrediction> = Vec::new();
    let mut ground_truth: Vec<EvalGroundTruth> = Vec::new();
    for (image, scene) in scenes.iter().enumerate() {
        for inst in &scene.instances {
            let down = downsample_mask(&inst.mask, scene.width, scene.height, 2);
            ground_truth.push(EvalGroundTruth {
                image,
                class_id: inst.class_id,
                mask: down.iter().map(|&v| u8::from(v > 0.5)).collect(),
                full_res_area: inst.visible_pixels,
            });
        }
        let results = segment(model, &scene.image, scene.width, scene.height)?;
        for r in results {
            predictions.push(EvalPrediction {
                image,
                class_id: r.class_id,
                score: r.score,
                mask: r.mask,
            });
        }
    }
    let classes: Vec<u32> = (1..=cfg.model.num_classes as u32).collect();
    evaluate(&predictions, &ground_truth, &classes, scenes.len())
}

/// Convenience wrapper for the common train-then-keep-checkpoint flow.
/// Returns per-iteration reports. On a NaN abort the error propagates and
/// the last periodic checkpoint, if any, stays on disk.
pub fn train_to_checkpoint(
    cfg: &NetConfig,
    scenes: &[Scene],
    checkpoint: &Path,
    mut log_sink: Option<&mut dyn std::io::Write>,
) -> Result<(Trainer, Vec<LossReport>)> {
    let mut trainer = Trainer::new(cfg)?;
    let mut reports = Vec::with_capacity(cfg.train.iterations);
    if let Some(w) = log_sink.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let mut log_error: Option<std::io::Error> = None;
    trainer.train(scenes, Some(checkpoint), |iteration, lr, report| {
        if let Some(w) = log_sink.as_deref_mut() {
            if let Err(e) = writeln!(w, "{}", log_row(iteration, lr, report)) {
                log_error.get_or_insert(e);
            }
        }
        reports.push(*report);
    })?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    Ok((trainer, reports))
}

/// The training artifacts a run leaves behind.
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn batch_input_for_test(model: &CondInstModel, scene: &Scene) -> Tensor<f32> {
    model.batch_input(&[scene])
}

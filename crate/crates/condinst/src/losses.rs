//! Training losses: detection terms (focal classification, IoU box,
//! center-ness BCE) plus the dice-based mask loss over positive locations.
//!
//! The overall loss is `cls + box + ctr + lambda * mask` with lambda = 1 by
//! default. The mask term averages, over all positive locations, the dice
//! loss between each location's dynamically-headed mask prediction and its
//! instance's ground truth; with no positives it contributes exactly zero.

use std::collections::HashMap;

use crate::config::NetConfig;
use crate::dynamic_head::{apply_mask_heads, build_coord_tensor, upsample_prediction, HeadArch};
use crate::error::{Error, Result};
use crate::heads::AssignmentResult;
use crate::model::NetworkOutputs;
use crate::scenes::Scene;
use crate::tensor::{sigmoid_stable, softplus, Scalar, Tensor};

pub const DICE_EPS: f64 = 1e-6;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Per-iteration loss breakdown. `overall = cls + box + ctr + lambda*mask`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub cls: f32,
    pub box_reg: f32,
    pub centerness: f32,
    pub mask: f32,
    pub overall: f32,
    pub n_pos: usize,
    pub lambda: f32,
}

/// Dice loss `1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps)`, differentiable
/// in the predictions. Expects probabilities in [0,1] and a binary target.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let overlap = pred.mul(gt).sum();
    let denom = pred
        .mul(pred)
        .sum()
        .add(&gt.mul(gt).sum())
        .add_scalar(T::from_f64(DICE_EPS));
    Ok(overlap
        .mul_scalar(T::from_f64(2.0))
        .div(&denom)
        .mul_scalar(-T::one())
        .add_scalar(T::one()))
}

/// Sum of binary focal-loss terms over an `[N,C,H,W]` logit map.
/// `labels[n*H*W + pix]` holds 0 for background or the 1-based class id.
pub fn focal_loss_sum<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
    gamma: f64,
    alpha: f64,
) -> Tensor<T> {
    let shape = logits.shape().to_vec();
    assert_eq!(shape.len(), 4, "focal loss expects NCHW logits");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(labels.len(), n * h * w, "label map size mismatch");
    let pix = h * w;
    let (gamma_t, alpha_t) = (T::from_f64(gamma), T::from_f64(alpha));

    let mut total = T::zero();
    {
        let zd = logits.data();
        for ni in 0..n {
            for ci in 0..c {
                let plane = &zd[(ni * c + ci) * pix..(ni * c + ci + 1) * pix];
                for (pi, &z) in plane.iter().enumerate() {
                    let target_pos = labels[ni * pix + pi] == (ci + 1) as u32;
                    let p = sigmoid_stable(z);
                    let u = T::one() - p;
                    total += if target_pos {
                        // -alpha * (1-p)^gamma * ln(p)
                        alpha_t * u.powf(gamma_t) * softplus(-z)
                    } else {
                        (T::one() - alpha_t) * p.powf(gamma_t) * softplus(z)
                    };
                }
            }
        }
    }

    let parent = logits.clone();
    let labels_owned = labels.to_vec();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![logits.clone()],
        Box::new(move |ctx| {
            let go = ctx.out_grad[0];
            parent.accum_grad(|g| {
                let zd = parent.data();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * pix;
                        for pi in 0..pix {
                            let z = zd[base + pi];
                            let p = sigmoid_stable(z);
                            let u = T::one() - p;
                            let target_pos = labels_owned[ni * pix + pi] == (ci + 1) as u32;
                            let d = if target_pos {
                                // d/dz of -alpha*(1-p)^g*ln(p)
                                let ln_p = -softplus(-z);
                                alpha_t * gamma_t * p * u.powf(gamma_t) * ln_p
                                    - alpha_t * u.powf(gamma_t) * u
                            } else {
                                let ln_u = -softplus(z);
                                -(T::one() - alpha_t) * gamma_t * p.powf(gamma_t) * u * ln_u
                                    + (T::one() - alpha_t) * p.powf(gamma_t) * p
                            };
                            g[base + pi] += go * d;
                        }
                    }
                }
            });
        }),
    )
}

/// Sum over rows of `-ln(IoU)` between predicted and target (l,t,r,b)
/// distance boxes. All distances must be positive, which the exp-decoding
/// of box outputs guarantees for predictions.
pub fn iou_loss_sum<T: Scalar>(pred: &Tensor<T>, targets: &[T]) -> Tensor<T> {
    let shape = pred.shape().to_vec();
    assert_eq!(shape.len(), 2, "iou loss expects [K,4]");
    assert_eq!(shape[1], 4);
    let k = shape[0];
    assert_eq!(targets.len(), 4 * k);

    let row_loss = |pd: &[T], tg: &[T]| -> (T, [T; 4]) {
        let (l, t, r, b) = (pd[0], pd[1], pd[2], pd[3]);
        let (lt, tt, rt, bt) = (tg[0], tg[1], tg[2], tg[3]);
        let iw = l.min(lt) + r.min(rt);
        let ih = t.min(tt) + b.min(bt);
        let inter = iw * ih;
        let area_p = (l + r) * (t + b);
        let area_t = (lt + rt) * (tt + bt);
        let union = area_p + area_t - inter;
        let loss = union.ln() - inter.ln();
        let d = |d_area: T, d_inter: T| d_area / union - d_inter * (T::one() / inter + T::one() / union);
        // d(union)/dx = d(area_p)/dx - d(inter)/dx
        let grads = [
            d(t + b, if l < lt { ih } else { T::zero() }),
            d(l + r, if t < tt { iw } else { T::zero() }),
            d(t + b, if r < rt { ih } else { T::zero() }),
            d(l + r, if b < bt { iw } else { T::zero() }),
        ];
        (loss, grads)
    };

    let mut total = T::zero();
    {
        let pd = pred.data();
        for ki in 0..k {
            let (loss, _) = row_loss(&pd[ki * 4..ki * 4 + 4], &targets[ki * 4..ki * 4 + 4]);
            total += loss;
        }
    }
    let parent = pred.clone();
    let targets_owned = targets.to_vec();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![pred.clone()],
        Box::new(move |ctx| {
            let go = ctx.out_grad[0];
            parent.accum_grad(|g| {
                let pd = parent.data();
                for ki in 0..k {
                    let (_, grads) = row_loss(&pd[ki * 4..ki * 4 + 4], &targets_owned[ki * 4..ki * 4 + 4]);
                    for (gi, dv) in g[ki * 4..ki * 4 + 4].iter_mut().zip(grads) {
                        *gi += go * dv;
                    }
                }
            });
        }),
    )
}

/// Sum of binary cross-entropy terms `softplus(z) - t*z` over all elements.
pub fn bce_logits_sum<T: Scalar>(logits: &Tensor<T>, targets: &[T]) -> Tensor<T> {
    assert_eq!(logits.numel(), targets.len(), "bce target length mismatch");
    let mut total = T::zero();
    {
        let zd = logits.data();
        for (&z, &t) in zd.iter().zip(targets) {
            total += softplus(z) - t * z;
        }
    }
    let parent = logits.clone();
    let targets_owned = targets.to_vec();
    Tensor::from_op(
        vec![1],
        vec![total],
        vec![logits.clone()],
        Box::new(move |ctx| {
            let go = ctx.out_grad[0];
            parent.accum_grad(|g| {
                let zd = parent.data();
                for i in 0..g.len() {
                    g[i] += go * (sigmoid_stable(zd[i]) - targets_owned[i]);
                }
            });
        }),
    )
}

/// Any-foreground max-pool downsampling of a binary mask by an integer
/// ratio; preserves thin structures that plain striding would drop.
pub fn downsample_mask(mask: &[u8], width: usize, height: usize, ratio: usize) -> Vec<f32> {
    assert!(ratio >= 1 && width % ratio == 0 && height % ratio == 0);
    let (ow, oh) = (width / ratio, height / ratio);
    let mut out = vec![0f32; ow * oh];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] != 0 {
                out[(y / ratio) * ow + (x / ratio)] = 1.0;
            }
        }
    }
    out
}

/// One positive location: which image, level grid cell, instance, and the
/// image-space coordinate that generated the head.
struct Positive {
    batch: usize,
    y: usize,
    x: usize,
    instance: usize,
    loc: (f32, f32),
}

/// Mask loss of Eq-style form: for every positive location, run that
/// location's generated head over the shared features + its coordinate
/// map, upsample, and compare with the (downsampled) instance mask by dice;
/// average over positives. Gradients flow into the controller outputs and
/// the mask branch.
pub fn mask_loss(
    outputs: &NetworkOutputs,
    assignments: &[AssignmentResult],
    scenes: &[&Scene],
    cfg: &NetConfig,
    n_pos: usize,
) -> Result<Tensor<f32>> {
    if n_pos == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let arch = HeadArch::from_model_config(&cfg.model)?;
    let factor = cfg.model.upsample_factor;
    let image_size = cfg.model.image_size;
    let pred_size = image_size / 8 * factor;
    let gt_ratio = image_size / pred_size; // 8 / factor
    let normalizers = cfg.coord_normalizers();
    let f_shape = outputs.f_mask.shape().to_vec();
    let grid = (f_shape[2], f_shape[3]);

    // Downsampled GT tensors are shared between positives of one instance.
    let mut gt_cache: HashMap<(usize, usize), Tensor<f32>> = HashMap::new();
    let mut dice_terms: Vec<Tensor<f32>> = Vec::new();

    for (level_idx, level_out) in outputs.heads.levels.iter().enumerate() {
        let mut positives: Vec<Positive> = Vec::new();
        for (batch, assignment) in assignments.iter().enumerate() {
            let la = &assignment.levels[level_idx];
            debug_assert_eq!(la.level, level_out.level);
            let half = (la.stride / 2) as f32;
            for (loc_i, matched) in la.matched.iter().enumerate() {
                if let Some(inst) = matched {
                    let (y, x) = (loc_i / la.w, loc_i % la.w);
                    positives.push(Positive {
                        batch,
                        y,
                        x,
                        instance: *inst,
                        loc: (
                            half + (x * la.stride) as f32,
                            half + (y * la.stride) as f32,
                        ),
                    });
                }
            }
        }
        if positives.is_empty() {
            continue;
        }

        let gather_idx: Vec<(usize, usize, usize)> =
            positives.iter().map(|p| (p.batch, p.y, p.x)).collect();
        let thetas = level_out.controller.gather_spatial(&gather_idx);
        let locs: Vec<(f32, f32)> = positives.iter().map(|p| p.loc).collect();
        let norms = vec![normalizers[level_idx]; positives.len()];
        let coords = build_coord_tensor(cfg.model.coord_mode, grid, 8, &locs, &norms);
        let batch_index: Vec<usize> = positives.iter().map(|p| p.batch).collect();
        let features = cfg
            .model
            .coord_mode
            .uses_features()
            .then_some(&outputs.f_mask);
        let logits = apply_mask_heads(features, coords.as_ref(), &thetas, &batch_index, arch)?;
        let probs = upsample_prediction(&logits, factor)?.sigmoid();

        for (ki, pos) in positives.iter().enumerate() {
            let gt = gt_cache
                .entry((pos.batch, pos.instance))
                .or_insert_with(|| {
                    let scene = scenes[pos.batch];
                    let data = downsample_mask(
                        &scene.instances[pos.instance].mask,
                        scene.width,
                        scene.height,
                        gt_ratio,
                    );
                    Tensor::from_vec(&[1, 1, pred_size, pred_size], data)
                })
                .clone();
            dice_terms.push(dice_loss(&probs.index0(ki), &gt)?);
        }
    }

    if dice_terms.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    Ok(Tensor::add_n(&dice_terms).mul_scalar(1.0 / n_pos as f32))
}

/// Full detection + mask loss for a batch.
pub fn compute_losses(
    outputs: &NetworkOutputs,
    assignments: &[AssignmentResult],
    scenes: &[&Scene],
    cfg: &NetConfig,
) -> Result<(Tensor<f32>, LossReport)> {
    assert_eq!(assignments.len(), scenes.len());
    let n_pos: usize = assignments.iter().map(|a| a.n_pos).sum();
    let norm = 1.0 / n_pos.max(1) as f32;

    // Classification: focal loss over every location of every level.
    let mut cls_terms: Vec<Tensor<f32>> = Vec::new();
    for (level_idx, level_out) in outputs.heads.levels.iter().enumerate() {
        let shape = level_out.cls.shape();
        let (h, w) = (shape[2], shape[3]);
        let mut labels = Vec::with_capacity(assignments.len() * h * w);
        for assignment in assignments {
            labels.extend_from_slice(&assignment.levels[level_idx].labels);
        }
        cls_terms.push(focal_loss_sum(&level_out.cls, &labels, FOCAL_GAMMA, FOCAL_ALPHA));
    }
    let cls = Tensor::add_n(&cls_terms).mul_scalar(norm);

    // Box + center-ness over positives.
    let mut box_terms: Vec<Tensor<f32>> = Vec::new();
    let mut ctr_terms: Vec<Tensor<f32>> = Vec::new();
    for (level_idx, level_out) in outputs.heads.levels.iter().enumerate() {
        let mut gather_idx: Vec<(usize, usize, usize)> = Vec::new();
        let mut box_targets: Vec<f32> = Vec::new();
        let mut ctr_targets: Vec<f32> = Vec::new();
        let mut stride = 8usize;
        for (batch, assignment) in assignments.iter().enumerate() {
            let la = &assignment.levels[level_idx];
            stride = la.stride;
            for (loc_i, matched) in la.matched.iter().enumerate() {
                if matched.is_some() {
                    gather_idx.push((batch, loc_i / la.w, loc_i % la.w));
                    box_targets.extend_from_slice(&la.box_targets[loc_i]);
                    ctr_targets.push(la.ctr_targets[loc_i]);
                }
            }
        }
        if gather_idx.is_empty() {
            continue;
        }
        // Regression outputs decode to distances via exp, scaled by the
        // level stride so raw predictions stay O(1).
        let pred_dist = level_out
            .box_reg
            .gather_spatial(&gather_idx)
            .exp()
            .mul_scalar(stride as f32);
        box_terms.push(iou_loss_sum(&pred_dist, &box_targets));
        let ctr_logits = level_out.centerness.gather_spatial(&gather_idx);
        ctr_terms.push(bce_logits_sum(&ctr_logits, &ctr_targets));
    }
    let box_loss = if box_terms.is_empty() {
        Tensor::scalar(0.0)
    } else {
        Tensor::add_n(&box_terms).mul_scalar(norm)
    };
    let ctr_loss = if ctr_terms.is_empty() {
        Tensor::scalar(0.0)
    } else {
        Tensor::add_n(&ctr_terms).mul_scalar(norm)
    };

    let lambda = cfg.train.lambda;
    let mask = if lambda > 0.0 {
        mask_loss(outputs, assignments, scenes, cfg, n_pos)?
    } else {
        Tensor::scalar(0.0)
    };

    let overall = cls
        .add(&box_loss)
        .add(&ctr_loss)
        .add(&mask.mul_scalar(lambda));
    let report = LossReport {
        cls: cls.item(),
        box_reg: box_loss.item(),
        centerness: ctr_loss.item(),
        mask: mask.item(),
        overall: overall.item(),
        n_pos,
        lambda,
    };
    if !report.overall.is_finite() {
        return Err(Error::NanLoss(format!(
            "loss diverged: cls={} box={} ctr={} mask={}",
            report.cls, report.box_reg, report.centerness, report.mask
        )));
    }
    Ok((overall, report))
}

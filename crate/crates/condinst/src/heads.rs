//! Per-level prediction heads and training-target assignment.
//!
//! Three towers run on every pyramid level with shared weights across
//! levels: classification, box regression (which also carries center-ness),
//! and the controller. The controller mirrors the classification tower's
//! topology with its own weights and emits one packed mask-head parameter
//! vector per location.
//!
//! Target assignment uses center sampling: a location is positive for an
//! instance when its image-space coordinate falls inside the box of
//! half-width `r*s` around the instance's mass center, lies inside the
//! instance's bounding box, and the instance's scale matches the level's
//! size range. Ambiguities resolve to the smallest mask area.

use rand_chacha::ChaCha8Rng;

use crate::backbone::PyramidFeatures;
use crate::config::NetConfig;
use crate::dynamic_head::HeadArch;
use crate::error::Result;
use crate::nn::{ConvLayer, Init};
use crate::scenes::{mask_geometry, MaskGeometry, Scene};
use crate::tensor::Tensor;

/// Image-space coordinates of every feature cell, per level:
/// `(floor(s/2) + x*s, floor(s/2) + y*s)` in row-major cell order.
pub struct LocationGrid {
    pub levels: Vec<LevelGrid>,
}

pub struct LevelGrid {
    pub level: u8,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub coords: Vec<(f32, f32)>,
}

pub fn compute_locations(pyramid: &PyramidFeatures) -> LocationGrid {
    let levels = pyramid
        .levels
        .iter()
        .map(|(level, t)| {
            let stride = PyramidFeatures::stride(*level);
            let (h, w) = (t.shape()[2], t.shape()[3]);
            LevelGrid {
                level: *level,
                stride,
                h,
                w,
                coords: grid_coords(h, w, stride),
            }
        })
        .collect();
    LocationGrid { levels }
}

pub fn grid_coords(h: usize, w: usize, stride: usize) -> Vec<(f32, f32)> {
    let half = (stride / 2) as f32;
    let mut coords = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            coords.push((half + (x * stride) as f32, half + (y * stride) as f32));
        }
    }
    coords
}

/// FCOS center-ness: `sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b)))`,
/// in (0,1] for positive distances.
pub fn centerness_target(l: f32, t: f32, r: f32, b: f32) -> f32 {
    debug_assert!(l > 0.0 && t > 0.0 && r > 0.0 && b > 0.0);
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

pub struct HeadOutputs {
    pub levels: Vec<LevelOutputs>,
}

pub struct LevelOutputs {
    pub level: u8,
    /// `[N, C, H, W]` class logits.
    pub cls: Tensor<f32>,
    /// `[N, 4, H, W]` box regression (distances come out via exp * stride).
    pub box_reg: Tensor<f32>,
    /// `[N, 1, H, W]` center-ness logits.
    pub centerness: Tensor<f32>,
    /// `[N, P, H, W]` packed mask-head parameters per location.
    pub controller: Tensor<f32>,
}

pub struct FcosHeads {
    cls_tower: Vec<ConvLayer>,
    reg_tower: Vec<ConvLayer>,
    ctrl_tower: Vec<ConvLayer>,
    cls_pred: ConvLayer,
    box_pred: ConvLayer,
    ctr_pred: ConvLayer,
    ctrl_pred: ConvLayer,
}

/// Initial classification bias puts every sigmoid score near this prior, so
/// focal loss starts from a calm, mostly-background state.
const CLS_PRIOR: f64 = 0.01;

impl FcosHeads {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Result<Self> {
        let m = &cfg.model;
        let ch = m.fpn_channels;
        let arch = HeadArch::from_model_config(m)?;
        let tower = |rng: &mut ChaCha8Rng| -> Vec<ConvLayer> {
            (0..m.tower_depth)
                .map(|_| ConvLayer::new(rng, ch, ch, 3, 1, 1, Init::Kaiming))
                .collect()
        };
        let cls_tower = tower(rng);
        let reg_tower = tower(rng);
        let ctrl_tower = tower(rng);
        let cls_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        let cls_pred = ConvLayer::new(
            rng,
            ch,
            m.num_classes,
            1,
            1,
            0,
            Init::Pred { std: 0.01, bias: cls_bias },
        );
        let box_pred = ConvLayer::new(rng, ch, 4, 1, 1, 0, Init::Pred { std: 0.01, bias: 0.0 });
        let ctr_pred = ConvLayer::new(rng, ch, 1, 1, 1, 0, Init::Pred { std: 0.01, bias: 0.0 });
        let ctrl_pred = ConvLayer::new(
            rng,
            ch,
            arch.total_len(),
            1,
            1,
            0,
            Init::Pred { std: 0.01, bias: 0.0 },
        );
        // The controller's output channel count is the packed length by
        // construction; keep the cross-check close to where it matters.
        assert_eq!(ctrl_pred.weight.shape()[0], arch.total_len());
        Ok(FcosHeads {
            cls_tower,
            reg_tower,
            ctrl_tower,
            cls_pred,
            box_pred,
            ctr_pred,
            ctrl_pred,
        })
    }

    /// Applies the shared towers to every pyramid level.
    pub fn forward(&self, pyramid: &PyramidFeatures) -> HeadOutputs {
        let levels = pyramid
            .levels
            .iter()
            .map(|(level, feat)| {
                let mut cls_x = feat.clone();
                for conv in &self.cls_tower {
                    cls_x = conv.forward(&cls_x).relu();
                }
                let mut reg_x = feat.clone();
                for conv in &self.reg_tower {
                    reg_x = conv.forward(&reg_x).relu();
                }
                let mut ctrl_x = feat.clone();
                for conv in &self.ctrl_tower {
                    ctrl_x = conv.forward(&ctrl_x).relu();
                }
                LevelOutputs {
                    level: *level,
                    cls: self.cls_pred.forward(&cls_x),
                    box_reg: self.box_pred.forward(&reg_x),
                    centerness: self.ctr_pred.forward(&reg_x),
                    controller: self.ctrl_pred.forward(&ctrl_x),
                }
            })
            .collect();
        HeadOutputs { levels }
    }

    pub fn collect_params(&self, out: &mut Vec<(String, Tensor<f32>)>) {
        for (i, c) in self.cls_tower.iter().enumerate() {
            c.collect_params(&format!("heads.cls_tower{i}"), out);
        }
        for (i, c) in self.reg_tower.iter().enumerate() {
            c.collect_params(&format!("heads.reg_tower{i}"), out);
        }
        for (i, c) in self.ctrl_tower.iter().enumerate() {
            c.collect_params(&format!("heads.ctrl_tower{i}"), out);
        }
        self.cls_pred.collect_params("heads.cls_pred", out);
        self.box_pred.collect_params("heads.box_pred", out);
        self.ctr_pred.collect_params("heads.ctr_pred", out);
        self.ctrl_pred.collect_params("heads.ctrl_pred", out);
    }
}

/// Per-location training targets for one scene.
pub struct AssignmentResult {
    pub levels: Vec<LevelAssignment>,
    pub n_pos: usize,
    /// Geometry of each instance (None when fully occluded; such instances
    /// never match).
    pub geometry: Vec<Option<MaskGeometry>>,
}

pub struct LevelAssignment {
    pub level: u8,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// 0 = background, else the matched instance's class.
    pub labels: Vec<u32>,
    pub matched: Vec<Option<usize>>,
    /// (l, t, r, b) distances to the matched box; only valid at positives.
    pub box_targets: Vec<[f32; 4]>,
    pub ctr_targets: Vec<f32>,
}

/// Center-sampling assignment. `size_bounds[i]` is the upper scale bound of
/// level i (`max(l,t,r,b)`), the lower bound being the previous level's.
pub fn assign_targets(scene: &Scene, grid: &LocationGrid, cfg: &NetConfig) -> AssignmentResult {
    let radius = cfg.assign.center_radius;
    let bounds = cfg.size_bounds();
    let geometry: Vec<Option<MaskGeometry>> = scene
        .instances
        .iter()
        .map(|inst| mask_geometry(&inst.mask, scene.width, scene.height))
        .collect();

    let mut n_pos = 0usize;
    let levels = grid
        .levels
        .iter()
        .enumerate()
        .map(|(li, lg)| {
            let lo = if li == 0 { 0.0 } else { bounds[li - 1] };
            let hi = bounds[li];
            let s = lg.stride as f32;
            let mut labels = vec![0u32; lg.coords.len()];
            let mut matched = vec![None; lg.coords.len()];
            let mut box_targets = vec![[0f32; 4]; lg.coords.len()];
            let mut ctr_targets = vec![0f32; lg.coords.len()];
            for (loc_i, &(ix, iy)) in lg.coords.iter().enumerate() {
                let mut best: Option<(usize, usize, [f32; 4])> = None; // (area, instance, distances)
                for (inst_i, geo) in geometry.iter().enumerate() {
                    let Some(geo) = geo else { continue };
                    let (cx, cy) = geo.center;
                    if ix < cx - radius * s
                        || ix > cx + radius * s
                        || iy < cy - radius * s
                        || iy > cy + radius * s
                    {
                        continue;
                    }
                    let [x1, y1, x2, y2] = geo.bbox;
                    let (l, t, r, b) = (ix - x1, iy - y1, x2 - ix, y2 - iy);
                    if l <= 0.0 || t <= 0.0 || r <= 0.0 || b <= 0.0 {
                        // Inside the center region but outside the box;
                        // no valid regression target exists here.
                        continue;
                    }
                    let scale = l.max(t).max(r).max(b);
                    if scale <= lo || scale > hi {
                        continue;
                    }
                    let better = match &best {
                        None => true,
                        Some((best_area, best_i, _)) => {
                            let a = geo.area;
                            a < *best_area
                                || (a == *best_area
                                    && tie_break_key(geo, scene.instances[inst_i].class_id)
                                        < tie_break_key(
                                            geometry[*best_i].as_ref().unwrap(),
                                            scene.instances[*best_i].class_id,
                                        ))
                        }
                    };
                    if better {
                        best = Some((geo.area, inst_i, [l, t, r, b]));
                    }
                }
                if let Some((_, inst_i, d)) = best {
                    labels[loc_i] = scene.instances[inst_i].class_id;
                    matched[loc_i] = Some(inst_i);
                    box_targets[loc_i] = d;
                    ctr_targets[loc_i] = centerness_target(d[0], d[1], d[2], d[3]);
                    n_pos += 1;
                }
            }
            LevelAssignment {
                level: lg.level,
                stride: lg.stride,
                h: lg.h,
                w: lg.w,
                labels,
                matched,
                box_targets,
                ctr_targets,
            }
        })
        .collect();

    AssignmentResult {
        levels,
        n_pos,
        geometry,
    }
}

/// Order-independent tie-break for equal-area matches.
fn tie_break_key(geo: &MaskGeometry, class_id: u32) -> (u32, u32, u32) {
    (
        (geo.center.1 * 16.0) as u32,
        (geo.center.0 * 16.0) as u32,
        class_id,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CoordMode;
    use crate::scenes::InstanceGt;
    use rand::SeedableRng;

    #[test]
    fn location_mapping_examples() {
        let coords = grid_coords(4, 4, 8);
        assert_eq!(coords[0], (4.0, 4.0));
        assert_eq!(coords[2 * 4 + 3], (28.0, 20.0));
        let coords16 = grid_coords(2, 2, 16);
        assert_eq!(coords16[1 * 2 + 1], (24.0, 24.0));
    }

    #[test]
    fn centerness_examples() {
        assert_eq!(centerness_target(3.0, 5.0, 3.0, 5.0), 1.0);
        assert!((centerness_target(1.0, 1.0, 4.0, 4.0) - 0.25).abs() < 1e-6);
        // min/max symmetry
        assert_eq!(
            centerness_target(2.0, 7.0, 5.0, 3.0),
            centerness_target(5.0, 3.0, 2.0, 7.0)
        );
    }

    fn rect_scene(x1: usize, y1: usize, x2: usize, y2: usize, size: usize) -> Scene {
        let mut mask = vec![0u8; size * size];
        for y in y1..y2 {
            for x in x1..x2 {
                mask[y * size + x] = 1;
            }
        }
        let visible = mask.iter().filter(|&&v| v != 0).count();
        Scene {
            width: size,
            height: size,
            image: vec![0.0; size * size * 3],
            instances: vec![InstanceGt {
                mask,
                class_id: 2,
                visible_pixels: visible,
            }],
            seed: 0,
        }
    }

    fn grids_for(cfg: &NetConfig) -> LocationGrid {
        let size = cfg.model.image_size;
        LocationGrid {
            levels: cfg
                .model
                .fpn_levels
                .iter()
                .map(|&level| {
                    let stride = 1usize << level;
                    let (h, w) = (size / stride, size / stride);
                    LevelGrid {
                        level,
                        stride,
                        h,
                        w,
                        coords: grid_coords(h, w, stride),
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn center_region_membership_is_exact() {
        let mut cfg = NetConfig::default();
        cfg.model.image_size = 64;
        let scene = rect_scene(8, 8, 40, 40, 64);
        let grid = grids_for(&cfg);
        let result = assign_targets(&scene, &grid, &cfg);
        assert!(result.n_pos > 0);
        let geo = result.geometry[0].unwrap();
        for (la, lg) in result.levels.iter().zip(&grid.levels) {
            for (i, &(ix, iy)) in lg.coords.iter().enumerate() {
                if la.labels[i] > 0 {
                    let r = cfg.assign.center_radius * la.stride as f32;
                    assert!(
                        ix >= geo.center.0 - r
                            && ix <= geo.center.0 + r
                            && iy >= geo.center.1 - r
                            && iy <= geo.center.1 + r,
                        "positive location ({ix},{iy}) outside center region"
                    );
                    assert_eq!(la.labels[i], 2);
                }
            }
        }
    }

    #[test]
    fn wide_instance_lands_on_p5_only() {
        let cfg = NetConfig::default();
        // 240px-wide, 80px-tall rectangle centered on a 256 image
        let scene = rect_scene(8, 88, 248, 168, 256);
        let grid = grids_for(&cfg);
        let result = assign_targets(&scene, &grid, &cfg);
        assert!(result.n_pos > 0);
        for la in &result.levels {
            let positives = la.labels.iter().filter(|&&l| l > 0).count();
            if la.level == 5 {
                assert!(positives > 0, "P5 should own the large instance");
            } else {
                assert_eq!(positives, 0, "P{} stole a large instance", la.level);
            }
        }
    }

    #[test]
    fn assignment_invariant_under_instance_reordering() {
        let mut cfg = NetConfig::default();
        cfg.model.image_size = 96;
        let mut scene = rect_scene(8, 8, 40, 40, 96);
        // second, smaller instance overlapping the first's center region
        let mut mask2 = vec![0u8; 96 * 96];
        for y in 16..36 {
            for x in 16..36 {
                mask2[y * 96 + x] = 1;
            }
        }
        // occlusion: remove overlap from the first mask
        for (a, &b) in scene.instances[0].mask.iter_mut().zip(&mask2) {
            if b != 0 {
                *a = 0;
            }
        }
        scene.instances[0].visible_pixels =
            scene.instances[0].mask.iter().filter(|&&v| v != 0).count();
        scene.instances.push(InstanceGt {
            mask: mask2.clone(),
            class_id: 1,
            visible_pixels: mask2.iter().filter(|&&v| v != 0).count(),
        });

        let grid = grids_for(&cfg);
        let fwd = assign_targets(&scene, &grid, &cfg);
        let mut reversed = scene.clone();
        reversed.instances.reverse();
        let rev = assign_targets(&reversed, &grid, &cfg);
        assert_eq!(fwd.n_pos, rev.n_pos);
        for (a, b) in fwd.levels.iter().zip(&rev.levels) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.box_targets, b.box_targets);
            // matched indices flip with the ordering
            for (ma, mb) in a.matched.iter().zip(&b.matched) {
                assert_eq!(ma.is_some(), mb.is_some());
                if let (Some(ia), Some(ib)) = (ma, mb) {
                    assert_eq!(*ia, scene.instances.len() - 1 - *ib);
                }
            }
        }
    }

    #[test]
    fn empty_scene_all_negative() {
        let mut cfg = NetConfig::default();
        cfg.model.image_size = 64;
        let scene = Scene {
            width: 64,
            height: 64,
            image: vec![0.0; 64 * 64 * 3],
            instances: vec![],
            seed: 0,
        };
        let grid = grids_for(&cfg);
        let result = assign_targets(&scene, &grid, &cfg);
        assert_eq!(result.n_pos, 0);
        assert!(result.levels.iter().all(|l| l.labels.iter().all(|&v| v == 0)));
    }

    #[test]
    fn controller_channels_match_total_len_across_ablation_configs() {
        // depth sweep, width sweep, and C_mask sweep all construct heads
        // whose controller emits exactly total_len channels
        let sweeps: Vec<(usize, usize, usize, CoordMode)> = vec![
            (1, 8, 8, CoordMode::Relative),
            (2, 8, 8, CoordMode::Relative),
            (3, 8, 8, CoordMode::Relative),
            (4, 8, 8, CoordMode::Relative),
            (3, 2, 8, CoordMode::Relative),
            (3, 4, 8, CoordMode::Relative),
            (3, 16, 8, CoordMode::Relative),
            (3, 8, 1, CoordMode::Relative),
            (3, 8, 2, CoordMode::Relative),
            (3, 8, 4, CoordMode::Relative),
            (3, 8, 16, CoordMode::Relative),
            (3, 8, 8, CoordMode::FeaturesOnly),
            (3, 8, 8, CoordMode::CoordsOnly),
            (3, 8, 8, CoordMode::Absolute),
        ];
        for (depth, width, c_mask, mode) in sweeps {
            let mut cfg = NetConfig::default();
            cfg.model.mask_head_depth = depth;
            cfg.model.mask_head_width = width;
            cfg.model.c_mask = c_mask;
            cfg.model.coord_mode = mode;
            cfg.validate().unwrap();
            let arch = HeadArch::from_model_config(&cfg.model).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let heads = FcosHeads::new(&mut rng, &cfg).unwrap();
            assert_eq!(heads.ctrl_pred.weight.shape()[0], arch.total_len());
        }
    }

    #[test]
    fn default_controller_emits_169_channels() {
        let cfg = NetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let heads = FcosHeads::new(&mut rng, &cfg).unwrap();
        assert_eq!(heads.ctrl_pred.weight.shape()[0], 169);
    }

    #[test]
    fn initial_scores_below_two_percent() {
        let cfg = NetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let heads = FcosHeads::new(&mut rng, &cfg).unwrap();
        let feat = Tensor::from_vec(
            &[1, 64, 8, 8],
            (0..64 * 64).map(|i| ((i % 13) as f32 - 6.0) * 0.1).collect(),
        );
        let pyramid = PyramidFeatures {
            levels: vec![(3, feat)],
        };
        let out = heads.forward(&pyramid);
        let scores = out.levels[0].cls.sigmoid();
        assert!(scores.to_vec().iter().all(|&s| s < 0.02));
    }

    #[test]
    fn shared_towers_give_identical_outputs_on_identical_features() {
        let cfg = NetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let heads = FcosHeads::new(&mut rng, &cfg).unwrap();
        let data: Vec<f32> = (0..64 * 36).map(|i| ((i % 11) as f32 - 5.0) * 0.2).collect();
        let pyramid = PyramidFeatures {
            levels: vec![
                (3, Tensor::from_vec(&[1, 64, 6, 6], data.clone())),
                (4, Tensor::from_vec(&[1, 64, 6, 6], data)),
            ],
        };
        let out = heads.forward(&pyramid);
        assert_eq!(out.levels[0].cls.to_vec(), out.levels[1].cls.to_vec());
        assert_eq!(out.levels[0].controller.to_vec(), out.levels[1].controller.to_vec());
    }
}

//! Synthetic multi-instance scenes: overlapping circles, rectangles and
//! triangles on a noisy flat background.
//!
//! Scenes stand in for a real detection corpus at desk scale. A configurable
//! fraction of scenes contains a pair of same-class, same-color instances
//! placed next to each other — the case where appearance alone cannot tell
//! two instances apart and location information has to do the work.
//!
//! On-disk layout under a dataset directory:
//!
//! ```text
//! manifest.json
//! images/scene_00000.png          8-bit RGB
//! masks/scene_00000/00.png        8-bit gray, 0 or 255, one per instance
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 3] = ["circle", "rectangle", "triangle"];

/// One ground-truth instance: a binary mask (occlusion already resolved),
/// its shape class in `1..=C`, and the surviving pixel count.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGt {
    pub mask: Vec<u8>,
    pub class_id: u32,
    pub visible_pixels: usize,
}

/// Synthetic image plus per-instance ground truth, in draw order: a later
/// instance occludes everything before it, so no pixel belongs to two masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// H x W x 3, row-major, values in [0, 1].
    pub image: Vec<f32>,
    pub instances: Vec<InstanceGt>,
    pub seed: u64,
}

/// Mass center, tight bounding box and area of a binary mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskGeometry {
    pub center: (f32, f32),
    /// Continuous box: pixel (x, y) spans [x, x+1) x [y, y+1).
    pub bbox: [f32; 4],
    pub area: usize,
}

pub fn mask_geometry(mask: &[u8], width: usize, height: usize) -> Option<MaskGeometry> {
    let mut count = 0usize;
    let (mut sx, mut sy) = (0f64, 0f64);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] != 0 {
                count += 1;
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if count == 0 {
        return None;
    }
    Some(MaskGeometry {
        center: ((sx / count as f64) as f32, (sy / count as f64) as f32),
        bbox: [x0 as f32, y0 as f32, (x1 + 1) as f32, (y1 + 1) as f32],
        area: count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Shape half-extent range in pixels (circle radius and the like).
    pub min_half_extent: usize,
    pub max_half_extent: usize,
    /// Probability that a scene contains a same-class same-color pair
    /// placed adjacently (the appearance-similarity stress case).
    pub similar_pair_fraction: f32,
    pub noise_sigma: f32,
    /// Instances occluded below this many visible pixels force a redraw.
    pub min_visible_pixels: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 256,
            height: 256,
            min_instances: 2,
            max_instances: 6,
            min_half_extent: 10,
            max_half_extent: 40,
            similar_pair_fraction: 0.5,
            noise_sigma: 0.02,
            min_visible_pixels: 24,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width % 32 != 0 || self.height % 32 != 0 || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "scene size {}x{} must be a positive multiple of 32 (largest backbone stride)",
                self.width, self.height
            )));
        }
        if self.min_instances > self.max_instances {
            return Err(Error::InvalidArgument(
                "min_instances exceeds max_instances".into(),
            ));
        }
        if self.min_half_extent == 0 || self.min_half_extent > self.max_half_extent {
            return Err(Error::InvalidArgument(
                "half-extent range must be positive and ordered".into(),
            ));
        }
        if 2 * self.max_half_extent >= self.width.min(self.height) {
            return Err(Error::InvalidArgument(format!(
                "max shape extent {} does not fit a {}x{} image",
                2 * self.max_half_extent,
                self.width,
                self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.similar_pair_fraction) || self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument(
                "similar_pair_fraction must be in [0,1], noise_sigma nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle {
        cx: f32,
        cy: f32,
        r: f32,
    },
    Rect {
        cx: f32,
        cy: f32,
        hw: f32,
        hh: f32,
    },
    Triangle {
        pts: [(f32, f32); 3],
    },
}

impl Shape {
    fn class_id(&self) -> u32 {
        match self {
            Shape::Circle { .. } => 1,
            Shape::Rect { .. } => 2,
            Shape::Triangle { .. } => 3,
        }
    }

    fn rasterize(&self, width: usize, height: usize) -> Vec<u8> {
        let mut mask = vec![0u8; width * height];
        match *self {
            Shape::Circle { cx, cy, r } => {
                let r2 = r * r;
                for y in 0..height {
                    let dy = y as f32 + 0.5 - cy;
                    for x in 0..width {
                        let dx = x as f32 + 0.5 - cx;
                        if dx * dx + dy * dy <= r2 {
                            mask[y * width + x] = 1;
                        }
                    }
                }
            }
            Shape::Rect { cx, cy, hw, hh } => {
                for y in 0..height {
                    let py = y as f32 + 0.5;
                    for x in 0..width {
                        let px = x as f32 + 0.5;
                        if (px - cx).abs() <= hw && (py - cy).abs() <= hh {
                            mask[y * width + x] = 1;
                        }
                    }
                }
            }
            Shape::Triangle { pts } => {
                let sign = |a: (f32, f32), b: (f32, f32), p: (f32, f32)| {
                    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
                };
                for y in 0..height {
                    for x in 0..width {
                        let p = (x as f32 + 0.5, y as f32 + 0.5);
                        let d0 = sign(pts[0], pts[1], p);
                        let d1 = sign(pts[1], pts[2], p);
                        let d2 = sign(pts[2], pts[0], p);
                        let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                        let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                        if !(has_neg && has_pos) {
                            mask[y * width + x] = 1;
                        }
                    }
                }
            }
        }
        mask
    }
}

/// Analytic area of a shape (rasterization differs by O(perimeter)).
pub(crate) fn shape_area(shape: &Shape) -> f32 {
    match *shape {
        Shape::Circle { r, .. } => std::f32::consts::PI * r * r,
        Shape::Rect { hw, hh, .. } => 4.0 * hw * hh,
        Shape::Triangle { pts } => {
            0.5 * ((pts[1].0 - pts[0].0) * (pts[2].1 - pts[0].1)
                - (pts[2].0 - pts[0].0) * (pts[1].1 - pts[0].1))
                .abs()
        }
    }
}

pub(crate) fn shape_perimeter(shape: &Shape) -> f32 {
    match *shape {
        Shape::Circle { r, .. } => 2.0 * std::f32::consts::PI * r,
        Shape::Rect { hw, hh, .. } => 4.0 * (hw + hh),
        Shape::Triangle { pts } => {
            let d = |a: (f32, f32), b: (f32, f32)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            d(pts[0], pts[1]) + d(pts[1], pts[2]) + d(pts[2], pts[0])
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, spec: &SceneSpec, class_id: u32, center: Option<(f32, f32)>, half_extent: Option<f32>) -> Shape {
    let he = half_extent
        .unwrap_or_else(|| rng.gen_range(spec.min_half_extent as f32..=spec.max_half_extent as f32));
    let margin = he + 1.0;
    let (cx, cy) = center.unwrap_or_else(|| {
        (
            rng.gen_range(margin..spec.width as f32 - margin),
            rng.gen_range(margin..spec.height as f32 - margin),
        )
    });
    match class_id {
        1 => Shape::Circle { cx, cy, r: he },
        2 => {
            let aspect = rng.gen_range(0.6..1.6);
            Shape::Rect {
                cx,
                cy,
                hw: he,
                hh: (he * aspect).clamp(spec.min_half_extent as f32 * 0.5, he),
            }
        }
        _ => {
            // Vertices on a circle of radius he around the center, one per
            // third of the circle so the triangle never degenerates.
            let mut pts = [(0.0, 0.0); 3];
            for (i, p) in pts.iter_mut().enumerate() {
                let ang = rng.gen_range(0.0..(2.0 * std::f32::consts::PI / 3.0))
                    + i as f32 * 2.0 * std::f32::consts::PI / 3.0;
                *p = (cx + he * ang.cos(), cy + he * ang.sin());
            }
            Shape::Triangle { pts }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller
    let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

fn random_color(rng: &mut ChaCha8Rng, away_from: Option<[f32; 3]>) -> [f32; 3] {
    loop {
        let c = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        match away_from {
            Some(bg) => {
                let maxdiff = c
                    .iter()
                    .zip(bg.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                if maxdiff >= 0.2 {
                    return c;
                }
            }
            None => return c,
        }
    }
}

struct Layout {
    background: [f32; 3],
    shapes: Vec<Shape>,
    colors: Vec<[f32; 3]>,
    rng: ChaCha8Rng,
}

/// Draws shape placements for a seed. Placements that leave any instance
/// with fewer than `min_visible_pixels` after occlusion are redrawn.
fn scene_layout(seed: u64, spec: &SceneSpec) -> Result<Layout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_instances = rng.gen_range(spec.min_instances..=spec.max_instances);
    let background = random_color(&mut rng, None);

    let (shapes, colors) = 'attempt: {
        for _ in 0..64 {
            let mut shapes: Vec<Shape> = Vec::with_capacity(n_instances);
            let mut colors: Vec<[f32; 3]> = Vec::with_capacity(n_instances);
            let mut remaining = n_instances;
            if remaining >= 2 && rng.gen::<f32>() < spec.similar_pair_fraction {
                // Same class, size and color; second center one to two
                // extents away so the pair nearly touches or overlaps.
                let class_id = rng.gen_range(1..=3u32);
                let he = rng.gen_range(spec.min_half_extent as f32..=spec.max_half_extent as f32);
                let color = random_color(&mut rng, Some(background));
                let first = random_shape(&mut rng, spec, class_id, None, Some(he));
                let (cx, cy) = shape_center(&first);
                let ang = rng.gen_range(0.0..2.0 * std::f32::consts::PI);
                let dist = rng.gen_range(1.6..2.4) * he;
                let (mut nx, mut ny) = (cx + dist * ang.cos(), cy + dist * ang.sin());
                let margin = he + 1.0;
                nx = nx.clamp(margin, spec.width as f32 - margin);
                ny = ny.clamp(margin, spec.height as f32 - margin);
                let second = random_shape(&mut rng, spec, class_id, Some((nx, ny)), Some(he));
                shapes.push(first);
                shapes.push(second);
                colors.push(color);
                colors.push(color);
                remaining -= 2;
            }
            for _ in 0..remaining {
                let class_id = rng.gen_range(1..=3u32);
                shapes.push(random_shape(&mut rng, spec, class_id, None, None));
                colors.push(random_color(&mut rng, Some(background)));
            }
            if shapes.is_empty() {
                break 'attempt (shapes, colors);
            }
            // Later shapes occlude earlier ones.
            let rasters: Vec<Vec<u8>> = shapes.iter().map(|s| s.rasterize(spec.width, spec.height)).collect();
            let mut visible = rasters.clone();
            for i in 0..visible.len() {
                for j in (i + 1)..rasters.len() {
                    for (v, &occ) in visible[i].iter_mut().zip(&rasters[j]) {
                        if occ != 0 {
                            *v = 0;
                        }
                    }
                }
            }
            if visible
                .iter()
                .all(|m| m.iter().filter(|&&v| v != 0).count() >= spec.min_visible_pixels)
            {
                break 'attempt (shapes, colors);
            }
        }
        return Err(Error::InvalidArgument(format!(
            "could not place {n_instances} instances with >= {} visible pixels each; spec too tight",
            spec.min_visible_pixels
        )));
    };
    Ok(Layout {
        background,
        shapes,
        colors,
        rng,
    })
}

/// Deterministic scene from a seed.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    let Layout {
        background,
        shapes,
        colors,
        mut rng,
    } = scene_layout(seed, spec)?;

    // Compose the image in draw order, then resolve instance visibility.
    let (w, h) = (spec.width, spec.height);
    let mut image = vec![0f32; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * 3;
            image[o..o + 3].copy_from_slice(&background);
        }
    }
    let rasters: Vec<Vec<u8>> = shapes.iter().map(|s| s.rasterize(w, h)).collect();
    for (raster, color) in rasters.iter().zip(&colors) {
        for (pix, &inside) in raster.iter().enumerate() {
            if inside != 0 {
                image[pix * 3..pix * 3 + 3].copy_from_slice(color);
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            *v = (*v + spec.noise_sigma * gaussian(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let mut instances = Vec::with_capacity(shapes.len());
    for i in 0..shapes.len() {
        let mut mask = rasters[i].clone();
        for later in rasters.iter().skip(i + 1) {
            for (v, &occ) in mask.iter_mut().zip(later) {
                if occ != 0 {
                    *v = 0;
                }
            }
        }
        let visible_pixels = mask.iter().filter(|&&v| v != 0).count();
        instances.push(InstanceGt {
            mask,
            class_id: shapes[i].class_id(),
            visible_pixels,
        });
    }

    Ok(Scene {
        width: w,
        height: h,
        image,
        instances,
        seed,
    })
}

fn shape_center(shape: &Shape) -> (f32, f32) {
    match *shape {
        Shape::Circle { cx, cy, .. } => (cx, cy),
        Shape::Rect { cx, cy, .. } => (cx, cy),
        Shape::Triangle { pts } => (
            (pts[0].0 + pts[1].0 + pts[2].0) / 3.0,
            (pts[0].1 + pts[1].1 + pts[2].1) / 3.0,
        ),
    }
}

/// Analytic (area, perimeter) of every shape a seed lays out, in draw
/// order. Lets tests compare rasterized pixel counts against closed-form
/// geometry without duplicating the generator.
pub fn scene_shape_geometry(seed: u64, spec: &SceneSpec) -> Result<Vec<(f32, f32)>> {
    let layout = scene_layout(seed, spec)?;
    Ok(layout
        .shapes
        .iter()
        .map(|s| (shape_area(s), shape_perimeter(s)))
        .collect())
}

// --- dataset serialization ---

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestInstance {
    pub mask: String,
    pub class_id: u32,
    pub visible_pixels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestScene {
    pub id: String,
    pub image: String,
    pub seed: u64,
    pub instances: Vec<ManifestInstance>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub image_width: usize,
    pub image_height: usize,
    pub class_names: Vec<String>,
    pub scenes: Vec<ManifestScene>,
}

pub fn write_dataset(scenes: &[Scene], dir: &Path, split: &str) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let (mut width, mut height) = (0, 0);
    let mut manifest_scenes = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        width = scene.width;
        height = scene.height;
        let id = format!("scene_{i:05}");
        let image_rel = format!("images/{id}.png");
        let mut img = image::RgbImage::new(scene.width as u32, scene.height as u32);
        for (pix, px) in img.pixels_mut().enumerate() {
            for c in 0..3 {
                px.0[c] = (scene.image[pix * 3 + c] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        img.save(dir.join(&image_rel))?;

        let mask_dir = dir.join("masks").join(&id);
        std::fs::create_dir_all(&mask_dir)?;
        let mut instances = Vec::with_capacity(scene.instances.len());
        for (k, inst) in scene.instances.iter().enumerate() {
            let mask_rel = format!("masks/{id}/{k:02}.png");
            let mut m = image::GrayImage::new(scene.width as u32, scene.height as u32);
            for (pix, px) in m.pixels_mut().enumerate() {
                px.0[0] = if inst.mask[pix] != 0 { 255 } else { 0 };
            }
            m.save(dir.join(&mask_rel))?;
            instances.push(ManifestInstance {
                mask: mask_rel,
                class_id: inst.class_id,
                visible_pixels: inst.visible_pixels,
            });
        }
        manifest_scenes.push(ManifestScene {
            id,
            image: image_rel,
            seed: scene.seed,
            instances,
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        split: split.to_string(),
        image_width: width,
        image_height: height,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        scenes: manifest_scenes,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Dataset {
            file: dir.join("manifest.json").display().to_string(),
            reason: e.to_string(),
        })?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        file: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| dataset_err(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| dataset_err(&path, e.to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Scene>)> {
    let manifest = read_manifest(dir)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for ms in &manifest.scenes {
        let img_path: PathBuf = dir.join(&ms.image);
        let img = image::open(&img_path)
            .map_err(|e| dataset_err(&img_path, e.to_string()))?
            .to_rgb8();
        if (img.width() as usize, img.height() as usize)
            != (manifest.image_width, manifest.image_height)
        {
            return Err(dataset_err(
                &img_path,
                format!(
                    "image is {}x{}, manifest says {}x{}",
                    img.width(),
                    img.height(),
                    manifest.image_width,
                    manifest.image_height
                ),
            ));
        }
        let mut data = vec![0f32; (img.width() * img.height() * 3) as usize];
        for (pix, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[pix * 3 + c] = px.0[c] as f32 / 255.0;
            }
        }
        let mut instances = Vec::with_capacity(ms.instances.len());
        for mi in &ms.instances {
            let mask_path = dir.join(&mi.mask);
            let m = image::open(&mask_path)
                .map_err(|e| dataset_err(&mask_path, e.to_string()))?
                .to_luma8();
            if (m.width(), m.height()) != (img.width(), img.height()) {
                return Err(dataset_err(&mask_path, "mask size differs from image"));
            }
            let mask: Vec<u8> = m.pixels().map(|p| u8::from(p.0[0] > 127)).collect();
            let visible = mask.iter().filter(|&&v| v != 0).count();
            if visible != mi.visible_pixels {
                return Err(dataset_err(
                    &mask_path,
                    format!(
                        "mask has {visible} foreground pixels, manifest says {}",
                        mi.visible_pixels
                    ),
                ));
            }
            instances.push(InstanceGt {
                mask,
                class_id: mi.class_id,
                visible_pixels: visible,
            });
        }
        scenes.push(Scene {
            width: manifest.image_width,
            height: manifest.image_height,
            image: data,
            instances,
            seed: ms.seed,
        });
    }
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            width: 96,
            height: 96,
            min_instances: 1,
            max_instances: 4,
            min_half_extent: 8,
            max_half_extent: 18,
            similar_pair_fraction: 0.5,
            noise_sigma: 0.02,
            min_visible_pixels: 16,
        }
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let spec = small_spec();
        let a = generate_scene(1234, &spec).unwrap();
        let b = generate_scene(1234, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(1235, &spec).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn single_instance_area_matches_analytic_geometry() {
        let mut spec = small_spec();
        spec.min_instances = 1;
        spec.max_instances = 1;
        spec.similar_pair_fraction = 0.0;
        for seed in 0..30u64 {
            let scene = generate_scene(seed, &spec).unwrap();
            let geo = scene_shape_geometry(seed, &spec).unwrap();
            assert_eq!(geo.len(), 1);
            let (area, perimeter) = geo[0];
            let pixels = scene.instances[0].visible_pixels as f32;
            assert!(
                (pixels - area).abs() <= 1.5 * perimeter + 4.0,
                "seed {seed}: rasterized {pixels} px vs analytic {area} (perimeter {perimeter})"
            );
        }
    }

    #[test]
    fn masks_are_disjoint_after_occlusion() {
        let mut spec = small_spec();
        spec.min_instances = 4;
        spec.max_instances = 4;
        for seed in 0..20u64 {
            let scene = generate_scene(seed, &spec).unwrap();
            let mut coverage = vec![0u32; scene.width * scene.height];
            for inst in &scene.instances {
                assert!(inst.visible_pixels >= spec.min_visible_pixels);
                for (c, &m) in coverage.iter_mut().zip(&inst.mask) {
                    *c += u32::from(m != 0);
                }
            }
            assert!(coverage.iter().all(|&c| c <= 1), "seed {seed}: overlapping masks");
        }
    }

    #[test]
    fn union_of_masks_is_rendered_foreground() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        let scene = generate_scene(77, &spec).unwrap();
        let bg = &scene.image[0..3]; // corner pixel is never covered (placement margin)
        for pix in 0..scene.width * scene.height {
            let fg = scene.instances.iter().any(|i| i.mask[pix] != 0);
            let differs = (0..3).any(|c| scene.image[pix * 3 + c] != bg[c]);
            assert_eq!(fg, differs, "pixel {pix}");
        }
    }

    #[test]
    fn class_balance_near_uniform() {
        let spec = small_spec();
        let mut counts = [0usize; 3];
        for seed in 0..1000u64 {
            let scene = generate_scene(seed, &spec).unwrap();
            for inst in &scene.instances {
                counts[(inst.class_id - 1) as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let uniform = total as f64 / 3.0;
        for (c, &n) in counts.iter().enumerate() {
            let dev = (n as f64 - uniform).abs() / uniform;
            assert!(dev < 0.2, "class {c} frequency off by {:.1}%", dev * 100.0);
        }
    }

    #[test]
    fn infeasible_spec_rejected() {
        let mut spec = small_spec();
        spec.min_half_extent = 60;
        spec.max_half_extent = 60;
        assert!(generate_scene(0, &spec).is_err());
        let mut spec2 = small_spec();
        spec2.width = 100; // not a multiple of 32
        assert!(generate_scene(0, &spec2).is_err());
    }

    #[test]
    fn dataset_roundtrip_masks_bit_exact() {
        let spec = small_spec();
        let scenes: Vec<Scene> = (0..4).map(|s| generate_scene(s, &spec).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&scenes, dir.path(), "train").unwrap();
        assert_eq!(manifest.scenes.len(), 4);

        let (loaded_manifest, loaded) = read_dataset(dir.path()).unwrap();
        assert_eq!(manifest, loaded_manifest);
        assert_eq!(loaded.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&loaded) {
            assert_eq!(a.instances.len(), b.instances.len());
            for (ia, ib) in a.instances.iter().zip(&b.instances) {
                assert_eq!(ia.mask, ib.mask, "masks must round-trip bit-for-bit");
                assert_eq!(ia.class_id, ib.class_id);
            }
            // 8-bit quantization bound on the image
            let max_err = a
                .image
                .iter()
                .zip(&b.image)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err <= 1.0 / 255.0 + 1e-6, "quantization error {max_err}");
        }
    }

    #[test]
    fn corrupt_mask_file_names_the_file() {
        let spec = small_spec();
        let scenes = vec![generate_scene(3, &spec).unwrap()];
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scenes, dir.path(), "train").unwrap();
        let bad = dir.path().join("masks/scene_00000/00.png");
        std::fs::write(&bad, b"not a png").unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("00.png"), "{err}");
    }

    #[test]
    fn mask_geometry_basics() {
        // 4x4 with a 2x2 block at (1,1)
        let mut mask = vec![0u8; 16];
        for y in 1..3 {
            for x in 1..3 {
                mask[y * 4 + x] = 1;
            }
        }
        let g = mask_geometry(&mask, 4, 4).unwrap();
        assert_eq!(g.area, 4);
        assert_eq!(g.center, (2.0, 2.0));
        assert_eq!(g.bbox, [1.0, 1.0, 3.0, 3.0]);
        assert!(mask_geometry(&[0u8; 16], 4, 4).is_none());
    }

    #[test]
    fn empty_scene_allowed() {
        let mut spec = small_spec();
        spec.min_instances = 0;
        spec.max_instances = 0;
        let scene = generate_scene(5, &spec).unwrap();
        assert!(scene.instances.is_empty());
    }
}

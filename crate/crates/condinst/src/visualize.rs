//! Static visualization artifacts: color overlays and per-instance mask
//! exports with a structured-text summary.

use std::path::Path;

use crate::error::Result;
use crate::inference::{resize_nearest, InstanceResult};

/// Fixed palette; instances cycle through it in result order.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
];

/// Blends instance masks over the input image. With no detections the
/// overlay is exactly the input.
pub fn render_overlay(
    image: &[f32],
    width: usize,
    height: usize,
    results: &[InstanceResult],
) -> image::RgbImage {
    let mut out = image::RgbImage::new(width as u32, height as u32);
    for (pix, px) in out.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (image[pix * 3 + c] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    for (k, r) in results.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let full = resize_nearest(&r.mask, r.mask_width, r.mask_height, width, height);
        for (pix, &m) in full.iter().enumerate() {
            if m != 0 {
                let px = out.get_pixel_mut((pix % width) as u32, (pix / width) as u32);
                for c in 0..3 {
                    px.0[c] = ((px.0[c] as f32) * 0.45 + (color[c] as f32) * 0.55) as u8;
                }
            }
        }
    }
    out
}

/// Writes `overlay.png`, one `instance_XX.png` mask per detection, and
/// `summary.txt` with class, score and box per line.
pub fn export_results(
    dir: &Path,
    image: &[f32],
    width: usize,
    height: usize,
    results: &[InstanceResult],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    render_overlay(image, width, height, results).save(dir.join("overlay.png"))?;
    let mut summary = String::new();
    for (k, r) in results.iter().enumerate() {
        let mut png = image::GrayImage::new(r.mask_width as u32, r.mask_height as u32);
        for (pix, px) in png.pixels_mut().enumerate() {
            px.0[0] = if r.mask[pix] != 0 { 255 } else { 0 };
        }
        png.save(dir.join(format!("instance_{k:02}.png")))?;
        let bbox = match r.bbox {
            Some([x1, y1, x2, y2]) => format!("{x1:.1},{y1:.1},{x2:.1},{y2:.1}"),
            None => "-".to_string(),
        };
        summary.push_str(&format!(
            "instance {k}: class={} score={:.4} box={bbox}\n",
            r.class_id, r.score
        ));
    }
    std::fs::write(dir.join("summary.txt"), summary)?;
    Ok(())
}

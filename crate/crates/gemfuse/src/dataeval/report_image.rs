//! Report image rendering: the modality-a frame upscaled, predicted boxes
//! outlined per class, and the blue/green sensor-contribution bar across the
//! top.

use std::path::Path;

use crate::detmini::Detection;
use crate::preproc::Image;

use super::Result;

const SCALE: usize = 4;
const BAR_ROWS: usize = 6;

const CLASS_OUTLINE: [[u8; 3]; 3] = [[255, 80, 60], [70, 255, 90], [90, 120, 255]];
const BAR_BLUE: [u8; 3] = [40, 90, 230];
const BAR_GREEN: [u8; 3] = [60, 200, 90];

/// Render one report frame to `path`. `certainty` is the normalized (a, b)
/// contribution pair; when absent the bar is omitted.
pub fn render_report_image(
    image_a: &Image,
    detections: &[Detection],
    min_confidence: f64,
    certainty: Option<(f64, f64)>,
    path: &Path,
) -> Result<()> {
    let (h, w) = (image_a.height, image_a.width);
    let (oh, ow) = (h * SCALE + BAR_ROWS, w * SCALE);
    let mut img = image::RgbImage::new(ow as u32, oh as u32);

    // Upscaled base image (nearest neighbour).
    for y in 0..h * SCALE {
        for x in 0..w * SCALE {
            let (sy, sx) = (y / SCALE, x / SCALE);
            let px = if image_a.channels == 3 {
                [
                    (image_a.get(0, sy, sx) * 255.0).round() as u8,
                    (image_a.get(1, sy, sx) * 255.0).round() as u8,
                    (image_a.get(2, sy, sx) * 255.0).round() as u8,
                ]
            } else {
                let v = (image_a.get(0, sy, sx) * 255.0).round() as u8;
                [v, v, v]
            };
            img.put_pixel(x as u32, (y + BAR_ROWS) as u32, image::Rgb(px));
        }
    }

    // Contribution bar.
    if let Some((ca, _cb)) = certainty {
        let split = ((ca.clamp(0.0, 1.0)) * ow as f64).round() as usize;
        for y in 0..BAR_ROWS {
            for x in 0..ow {
                let color = if x < split { BAR_BLUE } else { BAR_GREEN };
                img.put_pixel(x as u32, y as u32, image::Rgb(color));
            }
        }
    }

    // Box outlines.
    for det in detections.iter().filter(|d| d.confidence >= min_confidence) {
        let color = CLASS_OUTLINE[det.class_id % CLASS_OUTLINE.len()];
        let [cx, cy, bw, bh] = det.box_cxcywh;
        let x1 = (((cx - bw / 2.0) * w as f64) * SCALE as f64).round().max(0.0) as usize;
        let y1 = (((cy - bh / 2.0) * h as f64) * SCALE as f64).round().max(0.0) as usize;
        let x2 = ((((cx + bw / 2.0) * w as f64) * SCALE as f64).round() as usize).min(ow - 1);
        let y2 = ((((cy + bh / 2.0) * h as f64) * SCALE as f64).round() as usize)
            .min(h * SCALE - 1);
        if x2 <= x1 || y2 <= y1 {
            continue;
        }
        for x in x1..=x2 {
            img.put_pixel(x as u32, (y1 + BAR_ROWS) as u32, image::Rgb(color));
            img.put_pixel(x as u32, (y2 + BAR_ROWS) as u32, image::Rgb(color));
        }
        for y in y1..=y2 {
            img.put_pixel(x1 as u32, (y + BAR_ROWS) as u32, image::Rgb(color));
            img.put_pixel(x2 as u32, (y + BAR_ROWS) as u32, image::Rgb(color));
        }
    }

    img.save(path).map_err(crate::preproc::PreprocError::from)?;
    Ok(())
}

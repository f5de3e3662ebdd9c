//! Synthetic scene generator with asymmetric modality appearance.
//!
//! Three shape classes rendered consistently into both modalities: modality A
//! (RGB-like) separates classes by color, modality B (IR-like) by intensity.
//! Ground-truth boxes are derived from the rendered pixel mask, so they are
//! tight by construction. Objects are placed without overlap by rejection
//! sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::preproc::{Image, ImageKind};

use super::{Annotation, MultiModalSample};

pub const CLASS_NAMES: [&str; 3] = ["disc", "square", "triangle"];

/// Per-class appearance: RGB color in modality A, intensity in modality B.
/// Classes are separable by color in A and by intensity (and outline) in B.
const CLASS_COLOR_A: [[f64; 3]; 3] = [
    [0.85, 0.16, 0.14],
    [0.16, 0.82, 0.18],
    [0.22, 0.32, 0.88],
];
const CLASS_INTENSITY_B: [f64; 3] = [0.92, 0.62, 0.38];

const BACKGROUND_A: [f64; 3] = [0.38, 0.40, 0.42];
const BACKGROUND_B: f64 = 0.06;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_px: usize,
    pub max_object_px: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            min_object_px: 12,
            max_object_px: 24,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> super::Result<()> {
        if self.image_size < 8 {
            return Err(super::EvalError::InvalidInput(format!(
                "image_size {} too small",
                self.image_size
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(super::EvalError::InvalidInput(
                "min_objects exceeds max_objects".to_string(),
            ));
        }
        if self.min_object_px < 4
            || self.min_object_px > self.max_object_px
            || self.max_object_px >= self.image_size
        {
            return Err(super::EvalError::InvalidInput(
                "object pixel range must satisfy 4 <= min <= max < image_size".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    fn of_class(class_id: usize) -> Shape {
        match class_id {
            0 => Shape::Disc,
            1 => Shape::Square,
            _ => Shape::Triangle,
        }
    }

    /// Pixel-center membership within the side x side bounding square,
    /// in local coordinates (lx, ly) from its top-left corner.
    fn contains(&self, lx: f64, ly: f64, side: f64) -> bool {
        match self {
            Shape::Disc => {
                let r = side / 2.0;
                (lx - r).powi(2) + (ly - r).powi(2) <= r * r
            }
            Shape::Square => true,
            Shape::Triangle => {
                // Apex at (side/2, 0), base corners at (0, side) and
                // (side, side): inside iff between the two slanted edges.
                if ly > side {
                    return false;
                }
                let half = side / 2.0;
                let reach = half * (ly / side);
                lx >= half - reach && lx <= half + reach
            }
        }
    }
}

struct PlacedObject {
    class_id: usize,
    x0: usize,
    y0: usize,
    side: usize,
}

impl PlacedObject {
    fn bbox(&self) -> (usize, usize, usize, usize) {
        (self.x0, self.y0, self.side, self.side)
    }

    fn intersects(&self, other: &PlacedObject) -> bool {
        let (ax, ay, aw, ah) = self.bbox();
        let (bx, by, bw, bh) = other.bbox();
        // One-pixel separation gap.
        !(ax + aw + 1 <= bx || bx + bw + 1 <= ax || ay + ah + 1 <= by || by + bh + 1 <= ay)
    }

    fn mask(&self, size: usize) -> Vec<(usize, usize)> {
        let shape = Shape::of_class(self.class_id);
        let mut px = Vec::new();
        for y in self.y0..(self.y0 + self.side).min(size) {
            for x in self.x0..(self.x0 + self.side).min(size) {
                let lx = (x - self.x0) as f64 + 0.5;
                let ly = (y - self.y0) as f64 + 0.5;
                if shape.contains(lx, ly, self.side as f64) {
                    px.push((x, y));
                }
            }
        }
        px
    }
}

/// Render one paired sample. Deterministic per (config, seed).
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> MultiModalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;

    let mut image_a = Image::new(3, size, size, ImageKind::Rgb);
    let mut image_b = Image::new(1, size, size, ImageKind::Ir);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                image_a.set(c, y, x, BACKGROUND_A[c] + rng.gen_range(-0.03..0.03));
            }
            image_b.set(0, y, x, (BACKGROUND_B + rng.gen_range(-0.02..0.02)).max(0.0));
        }
    }

    let count = if cfg.max_objects == 0 {
        0
    } else if cfg.min_objects == cfg.max_objects {
        cfg.min_objects
    } else {
        rng.gen_range(cfg.min_objects..=cfg.max_objects)
    };

    let mut placed: Vec<PlacedObject> = Vec::new();
    for _ in 0..count {
        let class_id = rng.gen_range(0..CLASS_NAMES.len());
        let side = if cfg.min_object_px == cfg.max_object_px {
            cfg.min_object_px
        } else {
            rng.gen_range(cfg.min_object_px..=cfg.max_object_px)
        };
        let mut ok = None;
        for _attempt in 0..40 {
            let x0 = rng.gen_range(1..size - side);
            let y0 = rng.gen_range(1..size - side);
            let cand = PlacedObject { class_id, x0, y0, side };
            if placed.iter().all(|p| !p.intersects(&cand)) {
                ok = Some(cand);
                break;
            }
        }
        if let Some(obj) = ok {
            placed.push(obj);
        }
        // If no free spot was found the object is skipped; the sample simply
        // carries fewer annotations.
    }

    let mut gts = Vec::new();
    for obj in &placed {
        let color = CLASS_COLOR_A[obj.class_id];
        let jitter_a: f64 = rng.gen_range(-0.05..0.05);
        let intensity = CLASS_INTENSITY_B[obj.class_id] + rng.gen_range(-0.04..0.04);
        let mask = obj.mask(size);
        let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for &(x, y) in &mask {
            for c in 0..3 {
                image_a.set(c, y, x, (color[c] + jitter_a).clamp(0.0, 1.0));
            }
            image_b.set(0, y, x, intensity.clamp(0.0, 1.0));
            xmin = xmin.min(x);
            ymin = ymin.min(y);
            xmax = xmax.max(x);
            ymax = ymax.max(y);
        }
        if mask.is_empty() {
            continue;
        }
        gts.push(Annotation {
            class_id: obj.class_id,
            bbox_xywh: [
                xmin as f64,
                ymin as f64,
                (xmax - xmin + 1) as f64,
                (ymax - ymin + 1) as f64,
            ],
        });
    }

    image_a.clamp_unit();
    image_b.clamp_unit();
    MultiModalSample { image_a, image_b, gts, corruption: None }
}

//! Sensor-output preprocessing.
//!
//! r-blended hybrid depth (linear blend of a depth map with the red channel),
//! correspondence-based homography estimation (normalized DLT) with inverse
//! bilinear warping for cross-modal alignment, and Random Shadows and
//! Highlights (RSH) lighting corruption.
//!
//! Images are channels x H x W with values in [0,1] internally; disk I/O is
//! 8-bit PNG with half-away-from-zero rounding at export.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("homography estimation failed: {0}")]
    EstimationFailed(String),
    #[error("image i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, PreprocError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Rgb,
    Ir,
    Depth,
}

/// Channels x H x W image with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub kind: ImageKind,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, kind: ImageKind) -> Self {
        Image { channels, height, width, data: vec![0.0; channels * height * width], kind }
    }

    pub fn from_data(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        kind: ImageKind,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(PreprocError::InvalidInput(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Image { channels, height, width, data, kind })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Export as 8-bit PNG: grayscale for one channel, RGB for three.
    /// Quantization rounds half away from zero.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let mut img = image::GrayImage::new(self.width as u32, self.height as u32);
                for y in 0..self.height {
                    for x in 0..self.width {
                        img.put_pixel(x as u32, y as u32, image::Luma([q(self.get(0, y, x))]));
                    }
                }
                img.save(path)?;
            }
            3 => {
                let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
                for y in 0..self.height {
                    for x in 0..self.width {
                        let px = image::Rgb([
                            q(self.get(0, y, x)),
                            q(self.get(1, y, x)),
                            q(self.get(2, y, x)),
                        ]);
                        img.put_pixel(x as u32, y as u32, px);
                    }
                }
                img.save(path)?;
            }
            c => {
                return Err(PreprocError::InvalidInput(format!(
                    "cannot export {c}-channel image as PNG"
                )))
            }
        }
        Ok(())
    }

    /// Load an 8-bit PNG. Grayscale files load as one channel, color as three.
    pub fn load_png(path: &Path, kind: ImageKind) -> Result<Self> {
        let dynimg = image::open(path)?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        match dynimg {
            image::DynamicImage::ImageLuma8(img) => {
                let data: Vec<f64> = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
                Image::from_data(1, h, w, data, kind)
            }
            other => {
                let rgb = other.to_rgb8();
                let mut data = vec![0.0; 3 * h * w];
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
                    }
                }
                Image::from_data(3, h, w, data, kind)
            }
        }
    }
}

// ── r-blended hybrid depth ───────────────────────────────────────────

/// Blend a single-channel depth image with the red channel of an RGB image:
/// out = alpha * depth + (1 - alpha) * red, clamped to [0,1].
pub fn r_blend(depth: &Image, rgb: &Image, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(PreprocError::InvalidParameter(format!("alpha {alpha} outside [0,1]")));
    }
    if depth.channels != 1 {
        return Err(PreprocError::InvalidInput(format!(
            "depth must be single-channel, got {}",
            depth.channels
        )));
    }
    if rgb.channels != 3 {
        return Err(PreprocError::InvalidInput(format!(
            "rgb must be 3-channel, got {}",
            rgb.channels
        )));
    }
    if depth.height != rgb.height || depth.width != rgb.width {
        return Err(PreprocError::InvalidInput(format!(
            "size mismatch: depth {}x{}, rgb {}x{}",
            depth.height, depth.width, rgb.height, rgb.width
        )));
    }
    let mut out = Image::new(1, depth.height, depth.width, ImageKind::Depth);
    let hw = depth.height * depth.width;
    for i in 0..hw {
        out.data[i] = alpha * depth.data[i] + (1.0 - alpha) * rgb.data[i];
    }
    out.clamp_unit();
    Ok(out)
}

// ── homography ───────────────────────────────────────────────────────

/// 3x3 projective transform, normalized so the bottom-right entry is 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    /// Row-major 3x3 entries.
    pub h: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Homography { h: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if s.abs() < 1e-12 {
            return Err(PreprocError::EstimationFailed(
                "homography cannot be normalized: h33 ~ 0".to_string(),
            ));
        }
        let n = m / s;
        Ok(Homography {
            h: [
                [n[(0, 0)], n[(0, 1)], n[(0, 2)]],
                [n[(1, 0)], n[(1, 1)], n[(1, 2)]],
                [n[(2, 0)], n[(2, 1)], n[(2, 2)]],
            ],
        })
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.h[r][c])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let v = self.to_matrix() * Vector3::new(x, y, 1.0);
        (v[0] / v[2], v[1] / v[2])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = self
            .to_matrix()
            .try_inverse()
            .ok_or_else(|| PreprocError::InvalidParameter("singular homography".to_string()))?;
        Homography::from_matrix(&inv)
    }

    pub fn determinant(&self) -> f64 {
        self.to_matrix().determinant()
    }
}

/// Point-pair correspondences (source -> target), in pixel coordinates.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Correspondences {
    /// Each entry is [sx, sy, tx, ty].
    pub pairs: Vec<[f64; 4]>,
}

impl Correspondences {
    pub fn push(&mut self, sx: f64, sy: f64, tx: f64, ty: f64) {
        self.pairs.push([sx, sy, tx, ty]);
    }
}

/// Reprojection residual statistics of an estimated homography.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean: f64,
    pub max: f64,
}

/// Hartley normalization: translate the centroid to the origin and scale so
/// the mean distance from it is sqrt(2).
fn normalize_points(pts: &[(f64, f64)]) -> (Vec<(f64, f64)>, Matrix3<f64>) {
    let n = pts.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for &(x, y) in pts {
        cx += x;
        cy += y;
    }
    cx /= n;
    cy /= n;
    let mut mean_dist = 0.0;
    for &(x, y) in pts {
        mean_dist += ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    }
    mean_dist /= n;
    let s = if mean_dist > 1e-12 { 2.0f64.sqrt() / mean_dist } else { 1.0 };
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = pts.iter().map(|&(x, y)| (s * (x - cx), s * (y - cy))).collect();
    (out, t)
}

fn collinear(pts: &[(f64, f64)]) -> bool {
    // All points collinear iff every triple has (near-)zero twice-area.
    if pts.len() < 3 {
        return true;
    }
    let (x0, y0) = pts[0];
    let mut dir: Option<(f64, f64)> = None;
    for &(x, y) in &pts[1..] {
        let (dx, dy) = (x - x0, y - y0);
        if dx.abs() < 1e-9 && dy.abs() < 1e-9 {
            continue;
        }
        match dir {
            None => dir = Some((dx, dy)),
            Some((ux, uy)) => {
                if (ux * dy - uy * dx).abs() > 1e-6 * (ux.hypot(uy) * dx.hypot(dy)).max(1.0) {
                    return false;
                }
            }
        }
    }
    true
}

/// Estimate the homography mapping source points to target points with the
/// normalized direct linear transform. Requires at least four pairs with
/// non-collinear sources.
pub fn estimate_homography(c: &Correspondences) -> Result<(Homography, ResidualStats)> {
    if c.pairs.len() < 4 {
        return Err(PreprocError::EstimationFailed(format!(
            "need at least 4 correspondences, got {}",
            c.pairs.len()
        )));
    }
    let src: Vec<(f64, f64)> = c.pairs.iter().map(|p| (p[0], p[1])).collect();
    let dst: Vec<(f64, f64)> = c.pairs.iter().map(|p| (p[2], p[3])).collect();
    if collinear(&src) {
        return Err(PreprocError::EstimationFailed(
            "source points are collinear".to_string(),
        ));
    }

    let (sn, ts) = normalize_points(&src);
    let (dn, td) = normalize_points(&dst);

    // Each pair contributes two rows of the DLT system A h = 0.
    let n = c.pairs.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for k in 0..n {
        let (x, y) = sn[k];
        let (u, v) = dn[k];
        a[(2 * k, 0)] = -x;
        a[(2 * k, 1)] = -y;
        a[(2 * k, 2)] = -1.0;
        a[(2 * k, 6)] = u * x;
        a[(2 * k, 7)] = u * y;
        a[(2 * k, 8)] = u;
        a[(2 * k + 1, 3)] = -x;
        a[(2 * k + 1, 4)] = -y;
        a[(2 * k + 1, 5)] = -1.0;
        a[(2 * k + 1, 6)] = v * x;
        a[(2 * k + 1, 7)] = v * y;
        a[(2 * k + 1, 8)] = v;
    }

    // Null-space direction: right singular vector of the smallest singular value.
    let svd = a.svd(true, true);
    let vt = svd
        .v_t
        .ok_or_else(|| PreprocError::EstimationFailed("SVD did not produce V^T".to_string()))?;
    let hrow = vt.row(vt.nrows() - 1);
    let hn = Matrix3::new(
        hrow[0], hrow[1], hrow[2], hrow[3], hrow[4], hrow[5], hrow[6], hrow[7], hrow[8],
    );

    // Denormalize: H = Td^-1 * Hn * Ts.
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| PreprocError::EstimationFailed("normalization not invertible".to_string()))?;
    let h = Homography::from_matrix(&(td_inv * hn * ts))?;

    if h.determinant().abs() < 1e-12 {
        return Err(PreprocError::EstimationFailed("estimated homography is singular".to_string()));
    }

    let mut sum = 0.0;
    let mut max = 0.0f64;
    for p in &c.pairs {
        let (px, py) = h.apply(p[0], p[1]);
        let r = (px - p[2]).hypot(py - p[3]);
        sum += r;
        max = max.max(r);
    }
    let stats = ResidualStats { mean: sum / n as f64, max };
    Ok((h, stats))
}

/// Warp an image with a homography by inverse mapping and bilinear sampling.
/// Samples outside the source read as zero.
pub fn warp_image(img: &Image, h: &Homography, out_size: (usize, usize)) -> Result<Image> {
    let inv = h.inverse()?;
    let (oh, ow) = out_size;
    let mut out = Image::new(img.channels, oh, ow, img.kind);
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            if !sx.is_finite() || !sy.is_finite() {
                continue;
            }
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..img.channels {
                let sample = |xx: isize, yy: isize| -> f64 {
                    if xx < 0 || yy < 0 || xx >= img.width as isize || yy >= img.height as isize {
                        0.0
                    } else {
                        img.get(c, yy as usize, xx as usize)
                    }
                };
                let v = (1.0 - fx) * (1.0 - fy) * sample(x0, y0)
                    + fx * (1.0 - fy) * sample(x0 + 1, y0)
                    + (1.0 - fx) * fy * sample(x0, y0 + 1)
                    + fx * fy * sample(x0 + 1, y0 + 1);
                out.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

// ── random shadows and highlights ────────────────────────────────────

/// Configuration of the RSH corruption: counts, multiplier ranges, polygon
/// geometry. Shadows multiply by a factor below 1, highlights above 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RshConfig {
    pub shadow_count: [usize; 2],
    pub highlight_count: [usize; 2],
    pub shadow_strength: [f64; 2],
    pub highlight_strength: [f64; 2],
    pub vertex_count: [usize; 2],
    /// Polygon radius range as a fraction of the smaller image dimension.
    pub radius_frac: [f64; 2],
}

impl Default for RshConfig {
    fn default() -> Self {
        RshConfig {
            shadow_count: [1, 3],
            highlight_count: [1, 3],
            shadow_strength: [0.3, 0.7],
            highlight_strength: [1.3, 1.8],
            vertex_count: [3, 8],
            radius_frac: [0.15, 0.45],
        }
    }
}

impl RshConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: &[f64; 2]| r[0] <= r[1];
        let ordered_u = |r: &[usize; 2]| r[0] <= r[1];
        if !ordered_u(&self.shadow_count)
            || !ordered_u(&self.highlight_count)
            || !ordered_u(&self.vertex_count)
            || !ordered(&self.shadow_strength)
            || !ordered(&self.highlight_strength)
            || !ordered(&self.radius_frac)
        {
            return Err(PreprocError::InvalidParameter("rsh ranges must be lo <= hi".to_string()));
        }
        if self.shadow_strength[0] <= 0.0 || self.shadow_strength[1] >= 1.0 {
            return Err(PreprocError::InvalidParameter(
                "shadow strength must lie in (0,1)".to_string(),
            ));
        }
        if self.highlight_strength[0] <= 1.0 {
            return Err(PreprocError::InvalidParameter(
                "highlight strength must be > 1".to_string(),
            ));
        }
        if self.vertex_count[0] < 3 {
            return Err(PreprocError::InvalidParameter(
                "polygons need at least 3 vertices".to_string(),
            ));
        }
        Ok(())
    }

    /// A configuration that never changes the image.
    pub fn disabled() -> Self {
        RshConfig { shadow_count: [0, 0], highlight_count: [0, 0], ..Default::default() }
    }
}

/// Convex polygon as an ordered vertex list.
struct ConvexPolygon {
    vertices: Vec<(f64, f64)>,
}

impl ConvexPolygon {
    /// Vertices sampled on an ellipse around a center, sorted by angle;
    /// convex by construction.
    fn random<R: Rng>(cfg: &RshConfig, height: usize, width: usize, rng: &mut R) -> Self {
        let n = sample_range_usize(cfg.vertex_count, rng);
        let min_dim = height.min(width) as f64;
        let rx = sample_range(cfg.radius_frac, rng) * min_dim;
        let ry = sample_range(cfg.radius_frac, rng) * min_dim;
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let mut angles: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let vertices = angles
            .into_iter()
            .map(|t| (cx + rx * t.cos(), cy + ry * t.sin()))
            .collect();
        ConvexPolygon { vertices }
    }

    fn full_frame(height: usize, width: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        ConvexPolygon {
            vertices: vec![(-1.0, -1.0), (w + 1.0, -1.0), (w + 1.0, h + 1.0), (-1.0, h + 1.0)],
        }
    }

    /// Even-odd rule point-in-polygon test at pixel centers.
    fn contains(&self, px: f64, py: f64) -> bool {
        let mut inside = false;
        let n = self.vertices.len();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = self.vertices[i];
            let (xj, yj) = self.vertices[j];
            if ((yi > py) != (yj > py)) && (px < (xj - xi) * (py - yi) / (yj - yi) + xi) {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

fn sample_range<R: Rng>(r: [f64; 2], rng: &mut R) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn sample_range_usize<R: Rng>(r: [usize; 2], rng: &mut R) -> usize {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

fn multiply_polygon(img: &mut Image, poly: &ConvexPolygon, factor: f64) {
    for y in 0..img.height {
        for x in 0..img.width {
            if poly.contains(x as f64 + 0.5, y as f64 + 0.5) {
                for c in 0..img.channels {
                    let v = img.get(c, y, x) * factor;
                    img.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
    }
}

/// Apply random shadows and highlights: convex polygons filled
/// multiplicatively, clamped to [0,1]. Geometry and labels are untouched.
/// Designed for RGB inputs; any channel count is corrupted uniformly.
pub fn apply_rsh<R: Rng>(img: &Image, cfg: &RshConfig, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    let mut out = img.clone();
    let n_shadow = sample_range_usize(cfg.shadow_count, rng);
    let n_highlight = sample_range_usize(cfg.highlight_count, rng);
    for _ in 0..n_shadow {
        let poly = ConvexPolygon::random(cfg, img.height, img.width, rng);
        let f = sample_range(cfg.shadow_strength, rng);
        multiply_polygon(&mut out, &poly, f);
    }
    for _ in 0..n_highlight {
        let poly = ConvexPolygon::random(cfg, img.height, img.width, rng);
        let f = sample_range(cfg.highlight_strength, rng);
        multiply_polygon(&mut out, &poly, f);
    }
    Ok(out)
}

/// Multiply the whole frame by one factor. Test and harness hook for the
/// "full-image shadow" case.
pub fn apply_uniform_shadow(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    let poly = ConvexPolygon::full_frame(img.height, img.width);
    multiply_polygon(&mut out, &poly, factor);
    out
}

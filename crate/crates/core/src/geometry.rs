//! Object transformation: planar affine warps and depth-based rotation.
//!
//! Pixel coordinates are `(x, y)` with `x` along columns, `y` down rows and
//! pixel centers at integers.

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer as RawImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ImageBuffer, MaskBuffer};

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub sx: f64,
    pub sy: f64,
    /// Degrees. Positive turns +x toward +y, which is clockwise on screen
    /// because y points down.
    pub phi: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self {
            sx: 1.0,
            sy: 1.0,
            phi: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }
}

impl AffineParams {
    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::default() }
    }

    pub fn rotation(phi: f64) -> Self {
        Self { phi, ..Self::default() }
    }

    pub fn scale(s: f64) -> Self {
        Self { sx: s, sy: s, ..Self::default() }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.sx, self.sy, self.phi, self.tx, self.ty];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("affine parameters must be finite"));
        }
        if self.sx <= 0.0 || self.sy <= 0.0 {
            return Err(Error::invalid("scale factors must be positive"));
        }
        Ok(())
    }
}

pub fn affine_matrix(p: &AffineParams) -> Mat3 {
    let (s, c) = p.phi.to_radians().sin_cos();
    [[p.sx * c, -p.sy * s, p.tx], [p.sx * s, p.sy * c, p.ty], [0.0, 0.0, 1.0]]
}

/// Rotation and scale about `pivot`, translation applied afterwards.
pub fn affine_about(p: &AffineParams, pivot: (f64, f64)) -> Mat3 {
    let linear = affine_matrix(&AffineParams { tx: 0.0, ty: 0.0, ..*p });
    let to = [[1.0, 0.0, pivot.0 + p.tx], [0.0, 1.0, pivot.1 + p.ty], [0.0, 0.0, 1.0]];
    let from = [[1.0, 0.0, -pivot.0], [0.0, 1.0, -pivot.1], [0.0, 0.0, 1.0]];
    mat3_mul(&mat3_mul(&to, &linear), &from)
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn apply(m: &Mat3, p: (f64, f64)) -> (f64, f64) {
    let w = m[2][0] * p.0 + m[2][1] * p.1 + m[2][2];
    (
        (m[0][0] * p.0 + m[0][1] * p.1 + m[0][2]) / w,
        (m[1][0] * p.0 + m[1][1] * p.1 + m[1][2]) / w,
    )
}

pub fn mat3_inverse(m: &Mat3) -> Result<Mat3> {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
    if det.abs() < 1e-12 || !det.is_finite() {
        return Err(Error::Numerical("singular transform".into()));
    }
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = adj[i][j] / det;
        }
    }
    Ok(out)
}

/// Bilinear taps of a continuous source position; taps outside the image
/// are omitted, so the weights sum to less than one near the border.
fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> impl Iterator<Item = (usize, usize, f64)> {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let taps = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1.0, (1.0 - fy) * fx),
        (y0 + 1.0, x0, fy * (1.0 - fx)),
        (y0 + 1.0, x0 + 1.0, fy * fx),
    ];
    taps.into_iter().filter_map(move |(ty, tx, wt)| {
        (wt > 0.0 && ty >= 0.0 && tx >= 0.0 && (ty as usize) < h && (tx as usize) < w).then(|| (ty as usize, tx as usize, wt))
    })
}

/// Inverse-mapping warp with bilinear sampling; pixels whose preimage lies
/// outside the source take `fill`.
pub fn warp_image(img: &ImageBuffer, a: &Mat3, fill: [f32; 3]) -> Result<ImageBuffer> {
    let inv = mat3_inverse(a)?;
    let (h, w) = (img.height(), img.width());
    let (hf, wf) = ((h - 1) as f64, (w - 1) as f64);
    let mut out = ImageBuffer::filled(h, w, fill);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = apply(&inv, (x as f64, y as f64));
            if !(sx >= 0.0 && sy >= 0.0 && sx <= wf && sy <= hf) {
                continue;
            }
            let mut acc = [0.0f64; 3];
            for (ty, tx, wt) in bilinear_taps(h, w, sx, sy) {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += wt * img.get(ty, tx, c) as f64;
                }
            }
            out.set_pixel(y, x, &acc.map(|v| v.clamp(0.0, 1.0) as f32));
        }
    }
    Ok(out)
}

/// Inverse-mapping warp with nearest-neighbor sampling.
pub fn warp_mask(mask: &MaskBuffer, a: &Mat3) -> Result<MaskBuffer> {
    let inv = mat3_inverse(a)?;
    let (h, w) = (mask.height(), mask.width());
    Ok(MaskBuffer::from_fn(h, w, |y, x| {
        let (sx, sy) = apply(&inv, (x as f64, y as f64));
        let (rx, ry) = (sx.round(), sy.round());
        rx >= 0.0 && ry >= 0.0 && (rx as usize) < w && (ry as usize) < h && mask.get(ry as usize, rx as usize)
    }))
}

/// True when some source pixel center maps outside the frame.
pub fn exceeds_frame(mask: &MaskBuffer, a: &Mat3) -> bool {
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    (0..mask.height()).any(|y| {
        (0..mask.width()).any(|x| {
            if !mask.get(y, x) {
                return false;
            }
            let (tx, ty) = apply(a, (x as f64, y as f64));
            !(tx >= -0.5 && ty >= -0.5 && tx < w - 0.5 && ty < h - 0.5)
        })
    })
}

fn centroid_or_err(mask: &MaskBuffer) -> Result<(f64, f64)> {
    mask.centroid().ok_or_else(|| Error::invalid("source mask is empty"))
}

/// Full transform matrix for `p` about `pivot` (default: mask centroid).
pub fn object_matrix(mask: &MaskBuffer, p: &AffineParams, pivot: Option<(f64, f64)>) -> Result<Mat3> {
    p.validate()?;
    let pivot = match pivot {
        Some(v) => v,
        None => centroid_or_err(mask)?,
    };
    Ok(affine_about(p, pivot))
}

/// Step 1 for planar edits: `(I_c, M_t)`. The vacated source region keeps
/// its original pixels.
pub fn transform_2d(img: &ImageBuffer, mask: &MaskBuffer, p: &AffineParams, pivot: Option<(f64, f64)>) -> Result<(ImageBuffer, MaskBuffer)> {
    if !img.same_dims(mask) {
        return Err(Error::dims("image and source mask differ in size"));
    }
    if mask.is_empty() {
        return Err(Error::invalid("source mask is empty"));
    }
    let a = object_matrix(mask, p, pivot)?;
    if exceeds_frame(mask, &a) {
        return Err(Error::OutOfBounds("transformed object extends beyond the image".into()));
    }
    let m_t = warp_mask(mask, &a)?;
    if m_t.is_empty() {
        return Err(Error::OutOfBounds("transformed object left the frame".into()));
    }
    let inv = mat3_inverse(&a)?;
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = apply(&inv, (x as f64, y as f64));
            let mut alpha = 0.0;
            let mut acc = [0.0f64; 3];
            for (ty, tx, wt) in bilinear_taps(h, w, sx, sy) {
                if mask.get(ty, tx) {
                    alpha += wt;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += wt * img.get(ty, tx, c) as f64;
                    }
                }
            }
            if alpha >= 0.5 {
                out.set_pixel(y, x, &acc.map(|v| (v / alpha).clamp(0.0, 1.0) as f32));
            }
        }
    }
    Ok((out, m_t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// `f = max(h, w)`, principal point at the image center.
    pub fn default_for(h: usize, w: usize) -> Self {
        Self {
            f: h.max(w) as f64,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        }
    }

    pub fn matrix(&self) -> Mat3 {
        [[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims("depth map size"));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// 16-bit grayscale PNG plus the per-file scale: depth = value · scale.
    pub fn to_png16(&self) -> Result<(Vec<u8>, f64)> {
        let max = self.data.iter().cloned().fold(0.0f32, f32::max) as f64;
        let scale = if max > 0.0 { max / 65535.0 } else { 1.0 };
        let raw: Vec<u16> = self.data.iter().map(|d| (*d as f64 / scale).round().clamp(0.0, 65535.0) as u16).collect();
        let img: RawImage<Luma<u16>, Vec<u16>> = RawImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::dims("depth raster"))?;
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        Ok((bytes, scale))
    }

    pub fn from_png16(bytes: &[u8], scale: f64) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma16();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| (p.0[0] as f64 * scale) as f32).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<f64> {
        let (bytes, scale) = self.to_png16()?;
        std::fs::write(path, bytes)?;
        Ok(scale)
    }

    pub fn load(path: impl AsRef<Path>, scale: f64) -> Result<Self> {
        Self::from_png16(&std::fs::read(path)?, scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticDepth {
    Constant { depth: f64 },
    /// Linear ramp from `near` at the left edge to `far` at the right.
    Ramp { near: f64, far: f64 },
    /// A hemisphere bulging toward the camera over a flat backdrop.
    Sphere { backdrop: f64, cx: f64, cy: f64, radius: f64, bulge: f64 },
}

pub fn synthetic_depth(kind: &SyntheticDepth, h: usize, w: usize) -> Result<DepthMap> {
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d = match *kind {
                SyntheticDepth::Constant { depth } => depth,
                SyntheticDepth::Ramp { near, far } => near + (far - near) * x as f64 / (w.max(2) - 1) as f64,
                SyntheticDepth::Sphere { backdrop, cx, cy, radius, bulge } => {
                    let r2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (radius * radius);
                    backdrop - bulge * (1.0 - r2).max(0.0).sqrt()
                }
            };
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::invalid("synthetic depth must be positive"));
            }
            data.push(d as f32);
        }
    }
    DepthMap::new(h, w, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPoint {
    pub p: [f64; 3],
    pub color: [f32; 3],
}

/// `P = K⁻¹ (x, y, 1)ᵀ · D(x, y)` for every masked pixel.
pub fn lift_points(img: &ImageBuffer, mask: &MaskBuffer, depth: &DepthMap, k: &CameraIntrinsics) -> Result<Vec<LiftedPoint>> {
    if !img.same_dims(mask) || depth.height != mask.height() || depth.width != mask.width() {
        return Err(Error::dims("image, mask and depth must share dimensions"));
    }
    if !(k.f > 0.0) {
        return Err(Error::invalid("focal length must be positive"));
    }
    let mut out = Vec::with_capacity(mask.count());
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if !mask.get(y, x) {
                continue;
            }
            let d = depth.get(y, x) as f64;
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::invalid(format!("depth at ({x}, {y}) must be positive")));
            }
            let px = img.pixel(y, x);
            out.push(LiftedPoint {
                p: [(x as f64 - k.cx) / k.f * d, (y as f64 - k.cy) / k.f * d, d],
                color: [px[0], px[1], px[2]],
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation3DParams {
    pub axis: Axis,
    /// Degrees.
    pub angle: f64,
    /// Defaults to the centroid of the lifted points.
    pub pivot: Option<[f64; 3]>,
}

pub fn rotation_matrix(axis: Axis, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.to_radians().sin_cos();
    match axis {
        Axis::X => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        Axis::Y => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        Axis::Z => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

pub fn points_centroid(points: &[LiftedPoint]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in points {
        for i in 0..3 {
            c[i] += p.p[i];
        }
    }
    c.map(|v| v / points.len().max(1) as f64)
}

pub fn rotate_points(points: &[LiftedPoint], r: &Rotation3DParams) -> Vec<LiftedPoint> {
    if r.angle == 0.0 {
        return points.to_vec();
    }
    let m = rotation_matrix(r.axis, r.angle);
    let c = r.pivot.unwrap_or_else(|| points_centroid(points));
    points
        .iter()
        .map(|lp| {
            let d = [lp.p[0] - c[0], lp.p[1] - c[1], lp.p[2] - c[2]];
            let mut p = c;
            for i in 0..3 {
                p[i] += (0..3).map(|j| m[i][j] * d[j]).sum::<f64>();
            }
            LiftedPoint { p, color: lp.color }
        })
        .collect()
}

/// Perspective projection of one point; `None` behind the camera.
pub fn project(p: &[f64; 3], k: &CameraIntrinsics) -> Option<(f64, f64)> {
    (p[2] > 0.0).then(|| (k.f * p[0] / p[2] + k.cx, k.f * p[1] / p[2] + k.cy))
}

/// Sparse raster of projected points and the count of points that fell
/// outside the frame or behind the camera.
#[derive(Debug, Clone)]
pub struct Reprojection {
    pub image: ImageBuffer,
    pub mask: MaskBuffer,
    pub dropped: usize,
}

/// Z-buffered projection with one-pixel hole filling.
pub fn reproject(points: &[LiftedPoint], k: &CameraIntrinsics, h: usize, w: usize) -> Reprojection {
    let mut zbuf = vec![f64::INFINITY; h * w];
    let mut image = ImageBuffer::filled(h, w, [0.0; 3]);
    let mut dropped = 0;
    for lp in points {
        let Some((x, y)) = project(&lp.p, k) else {
            dropped += 1;
            continue;
        };
        let (rx, ry) = (x.round(), y.round());
        if !(rx >= 0.0 && ry >= 0.0 && rx < w as f64 && ry < h as f64) {
            dropped += 1;
            continue;
        }
        let i = ry as usize * w + rx as usize;
        if lp.p[2] < zbuf[i] {
            zbuf[i] = lp.p[2];
            image.set_pixel(ry as usize, rx as usize, &lp.color);
        }
    }
    let covered: Vec<bool> = zbuf.iter().map(|z| z.is_finite()).collect();
    let mut mask = MaskBuffer::from_fn(h, w, |y, x| covered[y * w + x]);
    // A hole is an uncovered pixel flanked on opposite sides; fill it from
    // the nearest-depth neighbour.
    let opposite = [((0i64, -1i64), (0i64, 1i64)), ((-1, 0), (1, 0)), ((-1, -1), (1, 1)), ((-1, 1), (1, -1))];
    let at = |y: usize, x: usize, d: (i64, i64)| -> Option<usize> {
        let (yy, xx) = (y as i64 + d.0, x as i64 + d.1);
        (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
    };
    for y in 0..h {
        for x in 0..w {
            if covered[y * w + x] {
                continue;
            }
            let flanked = opposite.iter().any(|(a, b)| {
                matches!((at(y, x, *a), at(y, x, *b)), (Some(i), Some(j)) if covered[i] && covered[j])
            });
            if !flanked {
                continue;
            }
            let mut best: Option<usize> = None;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(i) = at(y, x, (dy, dx)) {
                        if covered[i] && best.map_or(true, |b| zbuf[i] < zbuf[b]) {
                            best = Some(i);
                        }
                    }
                }
            }
            if let Some(b) = best {
                let src = image.pixel(b / w, b % w).to_vec();
                image.set_pixel(y, x, &src);
                mask.set(y, x, true);
            }
        }
    }
    Reprojection { image, mask, dropped }
}

/// Step 1 for depth-based rotation: lift, rotate, reproject and composite
/// the projected object over the source.
pub fn transform_3d(
    img: &ImageBuffer,
    mask: &MaskBuffer,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    r: &Rotation3DParams,
) -> Result<(ImageBuffer, MaskBuffer)> {
    if mask.is_empty() {
        return Err(Error::invalid("source mask is empty"));
    }
    if !r.angle.is_finite() {
        return Err(Error::invalid("rotation angle must be finite"));
    }
    let pts = lift_points(img, mask, depth, k)?;
    let moved = rotate_points(&pts, r);
    let proj = reproject(&moved, k, img.height(), img.width());
    if proj.dropped > 0 || proj.mask.is_empty() {
        return Err(Error::OutOfBounds(format!("{} object points left the view", proj.dropped)));
    }
    let out = crate::imaging::blend(&proj.image, img, &proj.mask)?;
    Ok((out, proj.mask))
}

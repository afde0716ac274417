//! Raster primitives shared by every stage of the editor.
//!
//! Images are stored as row-major interleaved `f32` samples in `[0, 1]`;
//! masks are row-major `u8` cells holding exactly `0` or `1`. Conversion to
//! 8-bit happens only at the PNG boundary.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Dense RGB raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "image data has {} samples, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("image sample {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Clamps every sample into `[0, 1]` (non-finite values become 0).
    pub fn from_unclamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&color);
        }
        Self {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, value: &[f32]) {
        let i = (y * self.width + x) * self.channels;
        for (dst, src) in self.data[i..i + self.channels].iter_mut().zip(value) {
            *dst = src.clamp(0.0, 1.0);
        }
    }

    pub fn same_dims(&self, mask: &MaskBuffer) -> bool {
        self.height == mask.height && self.width == mask.width
    }

    fn check_mask(&self, mask: &MaskBuffer) -> Result<()> {
        if !self.same_dims(mask) {
            return Err(Error::dims(format!(
                "mask {}x{} does not match image {}x{}",
                mask.height, mask.width, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Multiplies every channel by the mask (`I · M`).
    pub fn masked(&self, mask: &MaskBuffer) -> Result<ImageBuffer> {
        self.check_mask(mask)?;
        let mut out = self.clone();
        for (i, m) in mask.data.iter().enumerate() {
            if *m == 0 {
                for c in 0..self.channels {
                    out.data[i * self.channels + c] = 0.0;
                }
            }
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(y, x);
                let px = |c: usize| quantize(p[c.min(self.channels - 1)]);
                img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        img
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
        Self {
            height: h,
            width: w,
            channels: 3,
            data,
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Mean absolute difference over all samples.
    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        if self.height != other.height || self.width != other.width || self.channels != other.channels {
            return Err(Error::dims("images differ in shape"));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Peak signal-to-noise ratio in dB for unit-range images.
    pub fn psnr(&self, other: &ImageBuffer) -> Result<f64> {
        if self.height != other.height || self.width != other.width || self.channels != other.channels {
            return Err(Error::dims("images differ in shape"));
        }
        let mse: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64;
        if mse == 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(10.0 * (1.0 / mse).log10())
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary raster; every cell is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskBuffer {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskBuffer {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::dims(format!(
                "mask data has {} cells, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v == 0)
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|v| *v != 0)
    }

    pub fn same_dims(&self, other: &MaskBuffer) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn invert(&self) -> MaskBuffer {
        MaskBuffer {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    fn zip_with(&self, other: &MaskBuffer, f: impl Fn(u8, u8) -> u8) -> Result<MaskBuffer> {
        if !self.same_dims(other) {
            return Err(Error::dims(format!(
                "masks {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(MaskBuffer {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn intersection(&self, other: &MaskBuffer) -> Result<MaskBuffer> {
        self.zip_with(other, |a, b| a & b)
    }

    /// Cells set in `self` but not in `other`.
    pub fn difference(&self, other: &MaskBuffer) -> Result<MaskBuffer> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    /// Centroid `(x, y)` of the set cells, or `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set cells.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Whether any set cell lies on the outermost row or column.
    pub fn touches_border(&self) -> bool {
        let (h, w) = (self.height, self.width);
        (0..w).any(|x| self.get(0, x) || self.get(h - 1, x)) || (0..h).any(|y| self.get(y, 0) || self.get(y, w - 1))
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|v| v * 255).collect(),
        )
        .expect("buffer length matches dimensions")
    }

    /// Decodes a grayscale raster; values `>= 128` become 1.
    pub fn from_gray8(img: &GrayImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|v| (*v >= 128) as u8).collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_gray8().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Self::from_gray8(&img.to_luma8()))
    }
}

/// Squared Euclidean distance from every cell to the nearest set cell
/// (`f64::INFINITY` when the mask is empty).
fn squared_distance_transform(mask: &MaskBuffer) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let inf = f64::INFINITY;
    let mut grid: Vec<f64> = mask.data.iter().map(|v| if *v != 0 { 0.0 } else { inf }).collect();

    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&row, &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|i| f[*i].is_finite()).collect();
    if finite.is_empty() {
        d.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let mut v = vec![0usize; finite.len()];
    let mut z = vec![0.0f64; finite.len() + 1];
    let mut k = 0usize;
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &finite[1..] {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: q dominates p everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Morphological dilation with a Euclidean disk of the given radius.
pub fn dilate(mask: &MaskBuffer, radius: usize) -> MaskBuffer {
    if radius == 0 || mask.is_empty() {
        return mask.clone();
    }
    let dist = squared_distance_transform(mask);
    let r2 = (radius * radius) as f64;
    MaskBuffer {
        height: mask.height,
        width: mask.width,
        data: dist.iter().map(|d| (*d <= r2) as u8).collect(),
    }
}

/// `dilate(mask, radius) − mask`: a ring just outside the region.
pub fn boundary_mask(mask: &MaskBuffer, radius: usize) -> MaskBuffer {
    dilate(mask, radius)
        .difference(mask)
        .expect("dilation preserves dimensions")
}

/// Dilation radius used when clearing the source region: 30 px at 512²,
/// scaled to the working resolution.
pub fn scaled_inpaint_radius(height: usize, width: usize) -> usize {
    (30.0 / 512.0 * height.min(width) as f64).round() as usize
}

/// `M·fg + (1−M)·bg`, evaluated as a per-pixel select.
pub fn blend(fg: &ImageBuffer, bg: &ImageBuffer, mask: &MaskBuffer) -> Result<ImageBuffer> {
    if fg.height != bg.height || fg.width != bg.width || fg.channels != bg.channels {
        return Err(Error::dims("blend inputs differ in shape"));
    }
    fg.check_mask(mask)?;
    let c = fg.channels;
    let mut out = bg.clone();
    for (i, m) in mask.data.iter().enumerate() {
        if *m != 0 {
            out.data[i * c..(i + 1) * c].copy_from_slice(&fg.data[i * c..(i + 1) * c]);
        }
    }
    Ok(out)
}

/// Overlap of source cell `s` with target cell `t` when `src` cells are
/// resampled onto `dst` cells, measured in source-cell units.
fn overlap_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let lo = t as f64 * scale;
            let hi = (t + 1) as f64 * scale;
            let mut w = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let a = lo.max(s as f64);
                let b = hi.min((s + 1) as f64);
                if b > a {
                    w.push((s, b - a));
                }
                s += 1;
            }
            w
        })
        .collect()
}

/// Area-average pooling onto a target grid followed by a 0.5 threshold;
/// an average of exactly 0.5 maps to 1.
pub fn downsample_mask(mask: &MaskBuffer, target_h: usize, target_w: usize) -> Result<MaskBuffer> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::invalid("target dimensions must be at least 1"));
    }
    if target_h == mask.height && target_w == mask.width {
        return Ok(mask.clone());
    }
    let wy = overlap_weights(mask.height, target_h);
    let wx = overlap_weights(mask.width, target_w);
    let mut out = MaskBuffer::empty(target_h, target_w);
    for (ty, ys) in wy.iter().enumerate() {
        for (tx, xs) in wx.iter().enumerate() {
            let (mut on, mut total) = (0.0, 0.0);
            for &(sy, fy) in ys {
                for &(sx, fx) in xs {
                    let w = fy * fx;
                    total += w;
                    if mask.get(sy, sx) {
                        on += w;
                    }
                }
            }
            out.set(ty, tx, on >= 0.5 * total);
        }
    }
    Ok(out)
}

pub fn mask_union(a: &MaskBuffer, b: &MaskBuffer) -> Result<MaskBuffer> {
    a.zip_with(b, |x, y| x | y)
}

/// `ΣM / (h·w)`.
pub fn mask_area_fraction(mask: &MaskBuffer) -> f64 {
    mask.count() as f64 / (mask.height * mask.width) as f64
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let img = image::open(path.as_ref())?;
    Ok(ImageBuffer::from_rgb8(&img.to_rgb8()))
}

pub fn save_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, img.to_png_bytes()?)?;
    Ok(())
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<MaskBuffer> {
    let img = image::open(path.as_ref())?;
    Ok(MaskBuffer::from_gray8(&img.to_luma8()))
}

pub fn save_mask_png(mask: &MaskBuffer, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, mask.to_png_bytes()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_dilate(mask: &MaskBuffer, r: usize) -> MaskBuffer {
        let r2 = (r * r) as i64;
        MaskBuffer::from_fn(mask.height(), mask.width(), |y, x| {
            (0..mask.height()).any(|sy| {
                (0..mask.width()).any(|sx| {
                    let dy = sy as i64 - y as i64;
                    let dx = sx as i64 - x as i64;
                    mask.get(sy, sx) && dx * dx + dy * dy <= r2
                })
            })
        })
    }

    fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = MaskBuffer> {
        proptest::collection::vec(prop_oneof![4 => Just(0u8), 1 => Just(1u8)], h * w)
            .prop_map(move |d| MaskBuffer::new(h, w, d).unwrap())
    }

    #[test]
    fn dilate_radius_zero_is_identity() {
        let m = MaskBuffer::from_fn(9, 7, |y, x| (x + y) % 3 == 0);
        assert_eq!(dilate(&m, 0), m);
    }

    #[test]
    fn dilate_single_pixel_matches_disk_footprint() {
        let mut m = MaskBuffer::empty(21, 21);
        m.set(10, 10, true);
        let d = dilate(&m, 1);
        assert_eq!(d, brute_dilate(&m, 1));
        assert_eq!(d.count(), 5);
        let d3 = dilate(&m, 3);
        assert_eq!(d3, brute_dilate(&m, 3));
        assert_eq!(d3.count(), 29);
    }

    #[test]
    fn dilate_full_mask_saturates() {
        let m = MaskBuffer::full(8, 8);
        assert_eq!(dilate(&m, 5), m);
    }

    #[test]
    fn boundary_of_square_matches_set_difference() {
        let m = MaskBuffer::from_fn(20, 20, |y, x| (7..13).contains(&y) && (7..13).contains(&x));
        let b = boundary_mask(&m, 2);
        let oracle = MaskBuffer::from_fn(20, 20, |y, x| brute_dilate(&m, 2).get(y, x) && !m.get(y, x));
        assert_eq!(b, oracle);
        assert!(b.intersection(&m).unwrap().is_empty());
        assert!(boundary_mask(&MaskBuffer::empty(5, 5), 2).is_empty());
        assert!(boundary_mask(&MaskBuffer::full(5, 5), 2).is_empty());
    }

    #[test]
    fn blend_selects_per_pixel() {
        let a = ImageBuffer::from_fn(4, 4, |y, x| [y as f32 / 4.0, x as f32 / 4.0, 0.25]);
        let b = ImageBuffer::filled(4, 4, [0.9, 0.1, 0.5]);
        assert_eq!(blend(&a, &b, &MaskBuffer::empty(4, 4)).unwrap(), b);
        assert_eq!(blend(&a, &b, &MaskBuffer::full(4, 4)).unwrap(), a);
        let checker = MaskBuffer::from_fn(4, 4, |y, x| (x + y) % 2 == 0);
        let out = blend(&a, &b, &checker).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let m = if checker.get(y, x) { 1.0 } else { 0.0 };
                for c in 0..3 {
                    let expect = m * a.get(y, x, c) + (1.0 - m) * b.get(y, x, c);
                    assert_eq!(out.get(y, x, c), expect);
                }
            }
        }
        assert!(blend(&a, &b, &MaskBuffer::empty(3, 4)).is_err());
    }

    #[test]
    fn downsample_quadrant() {
        let m = MaskBuffer::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let d = downsample_mask(&m, 2, 2).unwrap();
        assert_eq!(d.data(), &[1, 0, 0, 0]);
        assert!(downsample_mask(&MaskBuffer::full(13, 9), 4, 3).unwrap().is_full());
        assert!(downsample_mask(&MaskBuffer::empty(13, 9), 4, 3).unwrap().is_empty());
    }

    #[test]
    fn downsample_tie_maps_to_one() {
        let m = MaskBuffer::from_fn(2, 2, |y, _| y == 0);
        assert!(downsample_mask(&m, 1, 1).unwrap().is_full());
    }

    #[test]
    fn area_fraction_tiny_mask() {
        let m = MaskBuffer::from_fn(512, 512, |y, x| y == 0 && x < 200);
        let f = mask_area_fraction(&m);
        assert!((f - 200.0 / 262144.0).abs() < 1e-12);
        assert!(f < 0.001);
        let left = MaskBuffer::from_fn(6, 6, |_, x| x < 3);
        let u = mask_union(&left, &left.invert()).unwrap();
        assert_eq!(mask_area_fraction(&u), 1.0);
        assert_eq!(mask_union(&left, &MaskBuffer::empty(6, 6)).unwrap(), left);
    }

    #[test]
    fn png_round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(5, 6, |y, x| [y as f32 / 7.3, x as f32 / 11.0, 0.333]);
        let p = dir.path().join("a.png");
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
        let m = MaskBuffer::from_fn(5, 6, |y, x| x > y);
        let mp = dir.path().join("m.png");
        save_mask_png(&m, &mp).unwrap();
        assert_eq!(load_mask_png(&mp).unwrap(), m);
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(ImageBuffer::new(1, 1, 3, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageBuffer::new(1, 1, 3, vec![0.0, f32::NAN, 0.0]).is_err());
        assert!(MaskBuffer::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn inpaint_radius_scales_with_resolution() {
        assert_eq!(scaled_inpaint_radius(512, 512), 30);
        assert_eq!(scaled_inpaint_radius(64, 64), 4);
    }

    proptest! {
        #[test]
        fn dilation_matches_brute_force(m in arb_mask(9, 11), r in 0usize..5) {
            prop_assert_eq!(dilate(&m, r), brute_dilate(&m, r));
        }

        #[test]
        fn dilation_is_extensive_and_monotone(a in arb_mask(10, 10), b in arb_mask(10, 10), r in 0usize..4) {
            let ab = mask_union(&a, &b).unwrap();
            let da = dilate(&a, r);
            let dab = dilate(&ab, r);
            prop_assert!(a.difference(&da).unwrap().is_empty());
            prop_assert!(da.difference(&dab).unwrap().is_empty());
        }

        #[test]
        fn union_laws(a in arb_mask(6, 6), b in arb_mask(6, 6), c in arb_mask(6, 6)) {
            prop_assert_eq!(mask_union(&a, &b).unwrap(), mask_union(&b, &a).unwrap());
            prop_assert_eq!(
                mask_union(&mask_union(&a, &b).unwrap(), &c).unwrap(),
                mask_union(&a, &mask_union(&b, &c).unwrap()).unwrap()
            );
            prop_assert_eq!(mask_union(&a, &a).unwrap(), a);
        }

        #[test]
        fn blend_with_itself_is_identity(m in arb_mask(5, 5), v in 0.0f32..1.0) {
            let img = ImageBuffer::from_fn(5, 5, |y, x| [v, (y * 5 + x) as f32 / 25.0, 1.0 - v]);
            prop_assert_eq!(blend(&img, &img, &m).unwrap(), img);
        }

        #[test]
        fn downsample_constant_mask(h in 1usize..20, w in 1usize..20, th in 1usize..8, tw in 1usize..8, on in any::<bool>()) {
            let m = if on { MaskBuffer::full(h, w) } else { MaskBuffer::empty(h, w) };
            let d = downsample_mask(&m, th, tw).unwrap();
            let ok = if on { d.is_full() } else { d.is_empty() };
            prop_assert!(ok);
        }
    }
}

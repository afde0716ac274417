//! Edit-quality measures: warp error, interest-point mean distance,
//! embedding consistency, and Fréchet / kernel distances between sets.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Denoiser, LatentCodec};
use crate::error::{Error, Result};
use crate::geometry::{apply, warp_image, Mat3};
use crate::imaging::{mask_union, ImageBuffer, MaskBuffer};

fn check_pair(a: &ImageBuffer, b: &ImageBuffer, m: &MaskBuffer) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || !a.same_dims(m) {
        return Err(Error::dims("metric inputs differ in size"));
    }
    Ok(())
}

/// Mean absolute difference between `i_t` and the reference `i_w` over the
/// pixels of `m_t` (all channels).
pub fn warp_error_against(i_t: &ImageBuffer, i_w: &ImageBuffer, m_t: &MaskBuffer) -> Result<f64> {
    check_pair(i_t, i_w, m_t)?;
    if m_t.is_empty() {
        return Err(Error::invalid("warp error needs a non-empty target mask"));
    }
    let c = i_t.channels();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, m) in m_t.data().iter().enumerate() {
        if *m != 0 {
            for k in 0..c {
                sum += (i_t.data()[i * c + k] as f64 - i_w.data()[i * c + k] as f64).abs();
            }
            n += c;
        }
    }
    Ok(sum / n as f64)
}

/// Warp error against `I_s` warped by the ground-truth transform `a`.
pub fn warp_error(i_t: &ImageBuffer, i_s: &ImageBuffer, a: &Mat3, m_t: &MaskBuffer) -> Result<f64> {
    let i_w = warp_image(i_s, a, [0.0; 3])?;
    warp_error_against(i_t, &i_w, m_t)
}

pub type Point = (f64, f64);

/// Finds where content around a source point went in the edited image.
pub trait CorrespondenceProvider: Send + Sync {
    fn name(&self) -> &str;
    /// `p_i` in `I_s`, `p_t` its expected location in `I_t`.
    fn correspond(&self, i_s: &ImageBuffer, i_t: &ImageBuffer, p_i: Point, p_t: Point) -> Option<Point>;
}

/// Returns the expected location; for tests.
pub struct OracleProvider;

impl CorrespondenceProvider for OracleProvider {
    fn name(&self) -> &str {
        "oracle"
    }

    fn correspond(&self, _: &ImageBuffer, _: &ImageBuffer, _: Point, p_t: Point) -> Option<Point> {
        Some(p_t)
    }
}

/// Normalized cross-correlation patch search centered on the expected
/// location.
pub struct NccProvider {
    pub window: usize,
    pub radius: usize,
}

impl Default for NccProvider {
    fn default() -> Self {
        Self { window: 11, radius: 8 }
    }
}

fn gray(img: &ImageBuffer) -> Vec<f64> {
    (0..img.height() * img.width())
        .map(|i| {
            let p = &img.data()[i * img.channels()..];
            if img.channels() >= 3 {
                0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
            } else {
                p[0] as f64
            }
        })
        .collect()
}

fn patch(g: &[f64], w: usize, h: usize, cx: i64, cy: i64, half: i64) -> Option<Vec<f64>> {
    if cx - half < 0 || cy - half < 0 || cx + half >= w as i64 || cy + half >= h as i64 {
        return None;
    }
    let mut out = Vec::with_capacity(((2 * half + 1) * (2 * half + 1)) as usize);
    for y in cy - half..=cy + half {
        for x in cx - half..=cx + half {
            out.push(g[y as usize * w + x as usize]);
        }
    }
    Some(out)
}

fn ncc(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 1e-12 && vb > 1e-12).then(|| num / (va * vb).sqrt())
}

impl CorrespondenceProvider for NccProvider {
    fn name(&self) -> &str {
        "ncc"
    }

    fn correspond(&self, i_s: &ImageBuffer, i_t: &ImageBuffer, p_i: Point, p_t: Point) -> Option<Point> {
        let half = (self.window / 2) as i64;
        let (w, h) = (i_s.width(), i_s.height());
        let (gs, gt) = (gray(i_s), gray(i_t));
        let tmpl = patch(&gs, w, h, p_i.0.round() as i64, p_i.1.round() as i64, half)?;
        let (cx, cy) = (p_t.0.round() as i64, p_t.1.round() as i64);
        let r = self.radius as i64;
        let mut best: Option<(f64, i64, i64)> = None;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                if let Some(cand) = patch(&gt, w, h, cx + dx, cy + dy, half) {
                    if let Some(score) = ncc(&tmpl, &cand) {
                        // ties prefer the candidate nearest the expected point
                        let better = match best {
                            None => true,
                            Some((s, bx, by)) => score > s + 1e-12 || ((score - s).abs() <= 1e-12 && dx * dx + dy * dy < (bx - cx).pow(2) + (by - cy).pow(2)),
                        };
                        if better {
                            best = Some((score, cx + dx, cy + dy));
                        }
                    }
                }
            }
        }
        best.map(|(_, x, y)| (x as f64, y as f64))
    }
}

/// Grid points inside `mask` (stride `stride`) whose Shi-Tomasi corner
/// strength reaches 1% of the strongest; all grid points when none do.
pub fn interest_points(img: &ImageBuffer, mask: &MaskBuffer, stride: usize) -> Vec<Point> {
    let (h, w) = (img.height(), img.width());
    let g = gray(img);
    let at = |x: usize, y: usize| g[y.min(h - 1) * w + x.min(w - 1)];
    let strength = |x: usize, y: usize| {
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                let gx = (at(xx + 1, yy) - at(xx.saturating_sub(1), yy)) / 2.0;
                let gy = (at(xx, yy + 1) - at(xx, yy.saturating_sub(1))) / 2.0;
                sxx += gx * gx;
                syy += gy * gy;
                sxy += gx * gy;
            }
        }
        let tr = sxx + syy;
        let det = sxx * syy - sxy * sxy;
        tr / 2.0 - ((tr * tr / 4.0 - det).max(0.0)).sqrt()
    };
    let mut grid = Vec::new();
    for y in (stride / 2..h).step_by(stride.max(1)) {
        for x in (stride / 2..w).step_by(stride.max(1)) {
            if mask.get(y, x) {
                grid.push((x, y, strength(x, y)));
            }
        }
    }
    let max = grid.iter().map(|p| p.2).fold(0.0, f64::max);
    let strong: Vec<Point> = grid.iter().filter(|p| max > 0.0 && p.2 >= 0.01 * max).map(|p| (p.0 as f64, p.1 as f64)).collect();
    if strong.is_empty() {
        grid.iter().map(|p| (p.0 as f64, p.1 as f64)).collect()
    } else {
        strong
    }
}

/// Mean `|P_t − P_c|` over interest points of `M_s`; points the provider
/// cannot match are skipped.
pub fn mean_distance(
    i_s: &ImageBuffer,
    i_t: &ImageBuffer,
    m_s: &MaskBuffer,
    transform: &dyn Fn(Point) -> Point,
    provider: &dyn CorrespondenceProvider,
) -> Result<f64> {
    check_pair(i_s, i_t, m_s)?;
    let pts = interest_points(i_s, m_s, 4);
    let (mut sum, mut n) = (0.0, 0usize);
    for p in pts {
        let p_t = transform(p);
        if let Some(p_c) = provider.correspond(i_s, i_t, p, p_t) {
            sum += ((p_t.0 - p_c.0).powi(2) + (p_t.1 - p_c.1).powi(2)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no interest points could be matched"));
    }
    Ok(sum / n as f64)
}

pub fn matrix_transform(a: Mat3) -> impl Fn(Point) -> Point {
    move |p| apply(&a, p)
}

/// Image → feature vector.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, img: &ImageBuffer) -> Result<Vec<f64>>;
}

/// Pooled encoder features of the denoiser.
pub struct BackboneEmbedder {
    pub net: Arc<Denoiser>,
    pub codec: Arc<dyn LatentCodec>,
}

impl Embedder for BackboneEmbedder {
    fn name(&self) -> &str {
        "backbone"
    }

    fn dim(&self) -> usize {
        let c = &self.net.config();
        (0..c.levels).map(|l| c.level_channels(l)).sum::<usize>() + c.level_channels(c.levels - 1)
    }

    fn embed(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        let f = self.net.pooled_features(&self.codec.encode(img))?;
        Ok(f.into_iter().map(|v| v as f64).collect())
    }
}

/// Seeded Gaussian projection of the raw pixels.
pub struct RandomProjection {
    pub seed: u64,
    pub dim: usize,
    weights: Mutex<HashMap<usize, Arc<Vec<f32>>>>,
}

impl RandomProjection {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            weights: Mutex::new(HashMap::new()),
        }
    }

    fn weights(&self, len: usize) -> Arc<Vec<f32>> {
        let mut cache = self.weights.lock().expect("projection lock");
        cache
            .entry(len)
            .or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ len as u64);
                let s = 1.0 / (len as f32).sqrt();
                Arc::new((0..len * self.dim).map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * z as f32
                }).collect())
            })
            .clone()
    }
}

impl Embedder for RandomProjection {
    fn name(&self) -> &str {
        "random_projection"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        let x = img.data();
        let wts = self.weights(x.len());
        Ok((0..self.dim)
            .map(|d| wts[d * x.len()..(d + 1) * x.len()].iter().zip(x).map(|(a, b)| (a * b) as f64).sum())
            .collect())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("embedding lengths differ"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        // two zero vectors are identical; one zero vector shares nothing
        return Ok(if na == nb { 1.0 } else { 0.0 });
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn masked(img: &ImageBuffer, m: &MaskBuffer) -> Result<ImageBuffer> {
    img.masked(m)
}

/// `cos(F[I_s·M_s], F[I_t·M_t])`, raw.
pub fn subject_consistency(i_s: &ImageBuffer, i_t: &ImageBuffer, m_s: &MaskBuffer, m_t: &MaskBuffer, e: &dyn Embedder) -> Result<f64> {
    check_pair(i_s, i_t, m_s)?;
    check_pair(i_s, i_t, m_t)?;
    cosine(&e.embed(&masked(i_s, m_s)?)?, &e.embed(&masked(i_t, m_t)?)?)
}

/// Cosine similarity of both images outside `M_s ∪ M_t`.
pub fn background_consistency(i_s: &ImageBuffer, i_t: &ImageBuffer, m_s: &MaskBuffer, m_t: &MaskBuffer, e: &dyn Embedder) -> Result<f64> {
    check_pair(i_s, i_t, m_s)?;
    let bg = mask_union(m_s, m_t)?.invert();
    cosine(&e.embed(&masked(i_s, &bg)?)?, &e.embed(&masked(i_t, &bg)?)?)
}

fn to_matrix(set: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = set.first().map(|v| v.len()).ok_or_else(|| Error::invalid("empty vector set"))?;
    if set.iter().any(|v| v.len() != d) {
        return Err(Error::dims("vectors of unequal length"));
    }
    Ok(DMatrix::from_fn(set.len(), d, |i, j| set[i][j]))
}

/// Sample mean and unbiased covariance.
pub fn mean_cov(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let x = to_matrix(set)?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("covariance needs at least two vectors"));
    }
    let mu = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n as f64);
    let mut centered = x.clone();
    for j in 0..x.ncols() {
        for i in 0..n {
            centered[(i, j)] -= mu[j];
        }
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| if l < 1e-10 { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa−μb‖² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`.
pub fn frechet_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() || cov_a.nrows() != mu_a.len() {
        return Err(Error::dims("statistics of unequal dimension"));
    }
    let ra = sym_sqrt(cov_a);
    let inner = &ra * cov_b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|l| if *l < 1e-10 { 0.0 } else { l.sqrt() }).sum();
    let d = (mu_a - mu_b).norm_squared();
    Ok((d + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = mean_cov(a)?;
    let (mb, cb) = mean_cov(b)?;
    frechet_from_stats(&ma, &ca, &mb, &cb)
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d + 1.0).powi(3)
}

/// Unbiased MMD² with the cubic polynomial kernel.
pub fn kernel_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(Error::invalid("kernel distance needs at least two vectors per set"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::dims("vectors of unequal length"));
    }
    let within = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                t += poly_kernel(&s[i], &s[j]);
            }
        }
        2.0 * t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += poly_kernel(x, y);
        }
    }
    Ok(within(a) + within(b) - 2.0 * cross / (m * n) as f64)
}

/// First line names the embedder; then one space-separated vector per line.
pub fn save_vectors(path: impl AsRef<Path>, embedder: &str, set: &[Vec<f64>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# embedder {embedder}")?;
    for v in set {
        let line: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn load_vectors(path: impl AsRef<Path>) -> Result<(String, Vec<Vec<f64>>)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut name = None;
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 {
            name = Some(
                line.strip_prefix("# embedder ")
                    .ok_or_else(|| Error::invalid("vector file must start with '# embedder <name>'"))?
                    .to_string(),
            );
            continue;
        }
        let v = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::invalid(format!("bad number {t:?} on line {}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = out.first() {
            if first.len() != v.len() {
                return Err(Error::dims(format!("line {} has {} values, expected {}", i + 1, v.len(), first.len())));
            }
        }
        out.push(v);
    }
    Ok((name.ok_or_else(|| Error::invalid("empty vector file"))?, out))
}

/// Per-edit measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub we: f64,
    pub md: f64,
    pub subc: f64,
    pub bc: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{affine_matrix, AffineParams};
    use proptest::prelude::*;
    use rand::Rng;

    fn noise_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn warp_error_examples() {
        let src = noise_image(16, 16, 1);
        let m = MaskBuffer::from_fn(16, 16, |y, x| (4..12).contains(&y) && (4..12).contains(&x));
        let a = affine_matrix(&AffineParams::translation(2.0, 1.0));
        let target = warp_image(&src, &a, [0.0; 3]).unwrap();
        assert_eq!(warp_error(&target, &src, &a, &m).unwrap(), 0.0);
        let ones = ImageBuffer::filled(16, 16, [1.0; 3]);
        let zeros = ImageBuffer::filled(16, 16, [0.0; 3]);
        assert_eq!(warp_error_against(&ones, &zeros, &m).unwrap(), 1.0);
        assert!(warp_error_against(&ones, &zeros, &MaskBuffer::empty(16, 16)).is_err());
    }

    #[test]
    fn warp_error_matches_loop_oracle() {
        let (a, b) = (noise_image(12, 10, 2), noise_image(12, 10, 3));
        let m = MaskBuffer::from_fn(12, 10, |y, x| (x + 2 * y) % 3 != 0);
        let mut sum = 0.0;
        let mut n = 0.0;
        for y in 0..12 {
            for x in 0..10 {
                if m.get(y, x) {
                    for c in 0..3 {
                        sum += (a.get(y, x, c) as f64 - b.get(y, x, c) as f64).abs();
                        n += 1.0;
                    }
                }
            }
        }
        assert!((warp_error_against(&a, &b, &m).unwrap() - sum / n).abs() < 1e-9);
    }

    struct Offset;
    impl CorrespondenceProvider for Offset {
        fn name(&self) -> &str {
            "offset"
        }
        fn correspond(&self, _: &ImageBuffer, _: &ImageBuffer, _: Point, p: Point) -> Option<Point> {
            Some((p.0 + 3.0, p.1 + 4.0))
        }
    }

    #[test]
    fn mean_distance_examples() {
        let src = noise_image(40, 40, 4);
        let m = MaskBuffer::from_fn(40, 40, |y, x| (10..30).contains(&y) && (8..26).contains(&x));
        let a = affine_matrix(&AffineParams::translation(5.0, 0.0));
        let shifted = warp_image(&src, &a, [0.0; 3]).unwrap();
        let tf = matrix_transform(a);
        assert_eq!(mean_distance(&src, &shifted, &m, &tf, &OracleProvider).unwrap(), 0.0);
        assert_eq!(mean_distance(&src, &shifted, &m, &tf, &Offset).unwrap(), 5.0);
        assert!(mean_distance(&src, &shifted, &m, &tf, &NccProvider::default()).unwrap() <= 0.5);
        // an unedited target leaves every point 5 px from where it should be
        let md = mean_distance(&src, &src, &m, &tf, &NccProvider::default()).unwrap();
        assert!((md - 5.0).abs() < 0.5);
    }

    #[test]
    fn consistency_examples() {
        let e = RandomProjection::new(3, 16);
        let img = noise_image(8, 8, 5);
        let m = MaskBuffer::from_fn(8, 8, |y, _| y < 4);
        assert!((subject_consistency(&img, &img, &m, &m, &e).unwrap() - 1.0).abs() < 1e-12);
        assert!((background_consistency(&img, &img, &m, &m, &e).unwrap() - 1.0).abs() < 1e-12);
        let v = vec![0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        let (a, b) = ([1.0, 2.0, -0.5, 0.25], [0.5, -1.0, 3.0, 2.0]);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let expect = dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!((cosine(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    /// Four points whose sample statistics are exactly `mu`, `diag(sx², sy²)`.
    fn cross_set(mu: (f64, f64), sx: f64, sy: f64) -> Vec<Vec<f64>> {
        let k = 1.5f64.sqrt();
        vec![
            vec![mu.0 + k * sx, mu.1],
            vec![mu.0 - k * sx, mu.1],
            vec![mu.0, mu.1 + k * sy],
            vec![mu.0, mu.1 - k * sy],
        ]
    }

    #[test]
    fn frechet_examples() {
        let a = cross_set((0.0, 0.0), 1.0, 2.0);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        let b = cross_set((3.0, -1.0), 1.0, 2.0);
        assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-6);
        let c = cross_set((1.0, 2.0), 0.5, 3.0);
        let closed = 1.0 + 4.0 + (1.0f64 - 0.5).powi(2) + (2.0f64 - 3.0).powi(2);
        assert!((frechet_distance(&a, &c).unwrap() - closed).abs() < 1e-6);
    }

    #[test]
    fn kernel_distance_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<Vec<f64>> = (0..7).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..2.0)).collect()).collect();
        let k = |x: &Vec<f64>, y: &Vec<f64>| (x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / 4.0 + 1.0).powi(3);
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for i in 0..7 {
            for j in 0..7 {
                if i != j {
                    xx += k(&a[i], &a[j]);
                }
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    yy += k(&b[i], &b[j]);
                }
            }
        }
        for x in &a {
            for y in &b {
                xy += k(x, y);
            }
        }
        let oracle = xx / 42.0 + yy / 20.0 - 2.0 * xy / 35.0;
        assert!((kernel_distance(&a, &b).unwrap() - oracle).abs() < 1e-9);
        let far: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| x + 10.0).collect()).collect();
        assert!(kernel_distance(&a, &far).unwrap() > 0.0);
    }

    #[test]
    fn kernel_distance_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let all: Vec<Vec<f64>> = (0..400).map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let v = kernel_distance(&all[..200], &all[200..]).unwrap();
        assert!(v.abs() <= 2.0 / 200f64.sqrt());
    }

    #[test]
    fn vector_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        let set = vec![vec![1.5, -2.0, 3.25e-7], vec![0.0, 1.0, 2.0]];
        save_vectors(&p, "custom", &set).unwrap();
        let (name, back) = load_vectors(&p).unwrap();
        assert_eq!(name, "custom");
        assert_eq!(back, set);
    }

    proptest! {
        #[test]
        fn frechet_symmetric_and_rotation_invariant(seed in 0u64..200, theta in 0.0f64..6.28) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0)]).collect();
            let b: Vec<Vec<f64>> = (0..9).map(|_| vec![rng.random_range(0.0..1.5), rng.random_range(-1.0..1.0)]).collect();
            let d = frechet_distance(&a, &b).unwrap();
            prop_assert!((d - frechet_distance(&b, &a).unwrap()).abs() < 1e-6);
            let (s, c) = theta.sin_cos();
            let rot = |set: &[Vec<f64>]| -> Vec<Vec<f64>> { set.iter().map(|v| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect() };
            prop_assert!((d - frechet_distance(&rot(&a), &rot(&b)).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn warp_error_symmetric(seed in 0u64..100) {
            let (a, b) = (noise_image(6, 6, seed), noise_image(6, 6, seed + 500));
            let m = MaskBuffer::full(6, 6);
            prop_assert_eq!(warp_error_against(&a, &b, &m).unwrap(), warp_error_against(&b, &a, &m).unwrap());
            prop_assert_eq!(warp_error_against(&a, &a, &m).unwrap(), 0.0);
        }
    }
}

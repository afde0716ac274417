//! Trainable layers with hand-written backward passes.
//!
//! Every `forward` returns its output together with whatever the matching
//! `backward` needs; inference simply drops the cache.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{gemm, silu, silu_grad, Fmap, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Flat, named parameter arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f32, rng: &mut ChaCha8Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.add(name, shape, data)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f32) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].data
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            data: self.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub data: Vec<Vec<f32>>,
}

impl Grads {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.data[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.data[id.0]
    }

    pub fn scale(&mut self, s: f32) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

pub struct ConvCache {
    cols: Vec<f32>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f32, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (cin * k * k) as f32;
        let weight = ps.add_normal(format!("{name}.weight"), vec![cout, cin, k, k], gain / fan_in.sqrt(), rng);
        let bias = ps.add_const(format!("{name}.bias"), vec![cout], 0.0);
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        ((h + 2 * pad - self.k) / self.stride + 1, (w + 2 * pad - self.k) / self.stride + 1)
    }

    fn im2col(&self, x: &Fmap, ho: usize, wo: usize) -> Vec<f32> {
        let k = self.k;
        let pad = (k / 2) as isize;
        let s = self.stride as isize;
        let p = ho * wo;
        let mut cols = vec![0.0f32; self.cin * k * k * p];
        for ci in 0..self.cin {
            let plane = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix >= 0 && ix < x.w as isize {
                                dst[oy * wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, ps: &ParamStore, x: &Fmap) -> (Fmap, ConvCache) {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = self.out_dims(x.h, x.w);
        let p = ho * wo;
        let kk = self.cin * self.k * self.k;
        let cols = if self.k == 1 && self.stride == 1 {
            x.data.clone()
        } else {
            self.im2col(x, ho, wo)
        };
        let mut out = Fmap::zeros(self.cout, ho, wo);
        let bias = ps.get(self.bias);
        for co in 0..self.cout {
            out.data[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = bias[co]);
        }
        gemm(self.cout, kk, p, 1.0, ps.get(self.weight), false, &cols, false, 1.0, &mut out.data);
        (
            out,
            ConvCache {
                cols,
                in_shape: (x.c, x.h, x.w),
                out_hw: (ho, wo),
            },
        )
    }

    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &ConvCache, dy: &Fmap) -> Fmap {
        let (ho, wo) = cache.out_hw;
        let p = ho * wo;
        let kk = self.cin * self.k * self.k;
        {
            let gb = grads.get_mut(self.bias);
            for co in 0..self.cout {
                gb[co] += dy.data[co * p..(co + 1) * p].iter().sum::<f32>();
            }
        }
        gemm(self.cout, p, kk, 1.0, &dy.data, false, &cache.cols, true, 1.0, grads.get_mut(self.weight));
        let mut dcols = vec![0.0f32; kk * p];
        gemm(kk, self.cout, p, 1.0, ps.get(self.weight), true, &dy.data, false, 0.0, &mut dcols);

        let (c, h, w) = cache.in_shape;
        if self.k == 1 && self.stride == 1 {
            return Fmap::from_vec(c, h, w, dcols).expect("1x1 conv preserves shape");
        }
        let mut dx = Fmap::zeros(c, h, w);
        let k = self.k;
        let pad = (k / 2) as isize;
        let s = self.stride as isize;
        for ci in 0..c {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

pub struct NormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

const NORM_EPS: f32 = 1e-5;

/// Largest group count `<= 8` dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add_const(format!("{name}.gamma"), vec![channels], 1.0),
            beta: ps.add_const(format!("{name}.beta"), vec![channels], 0.0),
            channels,
            groups: group_count(channels),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Fmap) -> (Fmap, NormCache) {
        let n = x.hw();
        let cpg = self.channels / self.groups;
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut out = Fmap::zeros(x.c, x.h, x.w);
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; self.groups];
        for g in 0..self.groups {
            let range = g * cpg * n..(g + 1) * cpg * n;
            let slice = &x.data[range.clone()];
            let count = slice.len() as f64;
            let mean = slice.iter().map(|v| *v as f64).sum::<f64>() / count;
            let var = slice.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / count;
            let istd = 1.0 / (var + NORM_EPS as f64).sqrt();
            inv_std[g] = istd as f32;
            for (i, v) in slice.iter().enumerate() {
                xhat[range.start + i] = ((*v as f64 - mean) * istd) as f32;
            }
            for c in g * cpg..(g + 1) * cpg {
                for p in 0..n {
                    let i = c * n + p;
                    out.data[i] = xhat[i] * gamma[c] + beta[c];
                }
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &NormCache, dy: &Fmap) -> Fmap {
        let n = dy.hw();
        let cpg = self.channels / self.groups;
        let gamma = ps.get(self.gamma);
        {
            let gg = grads.get_mut(self.gamma);
            for c in 0..self.channels {
                let mut s = 0.0f32;
                for p in 0..n {
                    s += dy.data[c * n + p] * cache.xhat[c * n + p];
                }
                gg[c] += s;
            }
        }
        {
            let gb = grads.get_mut(self.beta);
            for c in 0..self.channels {
                gb[c] += dy.data[c * n..(c + 1) * n].iter().sum::<f32>();
            }
        }
        let mut dx = Fmap::zeros(dy.c, dy.h, dy.w);
        for g in 0..self.groups {
            let count = (cpg * n) as f64;
            let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
            for c in g * cpg..(g + 1) * cpg {
                for p in 0..n {
                    let i = c * n + p;
                    let d = (dy.data[i] * gamma[c]) as f64;
                    sum_d += d;
                    sum_dx += d * cache.xhat[i] as f64;
                }
            }
            let istd = cache.inv_std[g] as f64;
            for c in g * cpg..(g + 1) * cpg {
                for p in 0..n {
                    let i = c * n + p;
                    let d = (dy.data[i] * gamma[c]) as f64;
                    dx.data[i] = (istd * (d - sum_d / count - cache.xhat[i] as f64 * sum_dx / count)) as f32;
                }
            }
        }
        dx
    }
}

/// `y = x Wᵀ + b` over token rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, din: usize, dout: usize, gain: f32, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: ps.add_normal(format!("{name}.weight"), vec![dout, din], gain / (din as f32).sqrt(), rng),
            bias: ps.add_const(format!("{name}.bias"), vec![dout], 0.0),
            din,
            dout,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Mat) -> Mat {
        debug_assert_eq!(x.cols, self.din);
        let mut out = Mat::zeros(x.rows, self.dout);
        let b = ps.get(self.bias);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(b);
        }
        gemm(x.rows, self.din, self.dout, 1.0, &x.data, false, ps.get(self.weight), true, 1.0, &mut out.data);
        out
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, x: &Mat, dy: &Mat) -> Mat {
        {
            let gb = grads.get_mut(self.bias);
            for r in 0..dy.rows {
                for (g, d) in gb.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        gemm(self.dout, dy.rows, self.din, 1.0, &dy.data, true, &x.data, false, 1.0, grads.get_mut(self.weight));
        let mut dx = Mat::zeros(x.rows, self.din);
        gemm(dy.rows, self.dout, self.din, 1.0, &dy.data, false, ps.get(self.weight), false, 0.0, &mut dx.data);
        dx
    }
}

pub fn silu_fmap(x: &Fmap) -> Fmap {
    Fmap {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|v| silu(*v)).collect(),
    }
}

pub fn silu_fmap_backward(x: &Fmap, dy: &Fmap) -> Fmap {
    Fmap {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().zip(&dy.data).map(|(v, d)| d * silu_grad(*v)).collect(),
    }
}

/// Row softmax in place.
pub fn softmax_rows(m: &mut Mat) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

pub struct AttnCache {
    pub probs: Mat,
}

/// Single-head scaled dot-product attention returning the softmax weights.
pub fn attention_forward(q: &Mat, k: &Mat, v: &Mat) -> (Mat, AttnCache) {
    let scale = 1.0 / (q.cols as f32).sqrt();
    let mut s = Mat::zeros(q.rows, k.rows);
    gemm(q.rows, q.cols, k.rows, scale, &q.data, false, &k.data, true, 0.0, &mut s.data);
    softmax_rows(&mut s);
    let mut out = Mat::zeros(q.rows, v.cols);
    gemm(q.rows, k.rows, v.cols, 1.0, &s.data, false, &v.data, false, 0.0, &mut out.data);
    (out, AttnCache { probs: s })
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward(q: &Mat, k: &Mat, v: &Mat, cache: &AttnCache, dout: &Mat) -> (Mat, Mat, Mat) {
    let p = &cache.probs;
    let scale = 1.0 / (q.cols as f32).sqrt();
    let mut dv = Mat::zeros(v.rows, v.cols);
    gemm(k.rows, q.rows, v.cols, 1.0, &p.data, true, &dout.data, false, 0.0, &mut dv.data);
    let mut dp = Mat::zeros(q.rows, k.rows);
    gemm(q.rows, v.cols, k.rows, 1.0, &dout.data, false, &v.data, true, 0.0, &mut dp.data);
    for r in 0..dp.rows {
        let prow = p.row(r);
        let drow = dp.row_mut(r);
        let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
        for (d, pv) in drow.iter_mut().zip(prow) {
            *d = pv * (*d - dot);
        }
    }
    let mut dq = Mat::zeros(q.rows, q.cols);
    gemm(q.rows, k.rows, q.cols, scale, &dp.data, false, &k.data, false, 0.0, &mut dq.data);
    let mut dk = Mat::zeros(k.rows, k.cols);
    gemm(k.rows, q.rows, k.cols, scale, &dp.data, true, &q.data, false, 0.0, &mut dk.data);
    (dq, dk, dv)
}

/// Space-to-depth by a factor of 2: `C×H×W → 4C×H/2×W/2`.
pub fn pixel_unshuffle(x: &Fmap) -> Fmap {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Fmap::zeros(x.c * 4, h2, w2);
    for c in 0..x.c {
        for y in 0..x.h {
            for xx in 0..x.w {
                let oc = c * 4 + (y % 2) * 2 + (xx % 2);
                out.data[(oc * h2 + y / 2) * w2 + xx / 2] = x.data[(c * x.h + y) * x.w + xx];
            }
        }
    }
    out
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Fmap) -> Fmap {
    let (h, w) = (x.h * 2, x.w * 2);
    let c = x.c / 4;
    let mut out = Fmap::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let ic = ch * 4 + (y % 2) * 2 + (xx % 2);
                out.data[(ch * h + y) * w + xx] = x.data[(ic * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest(x: &Fmap) -> Fmap {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Fmap::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dy: &Fmap) -> Fmap {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Fmap::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                out.data[(c * h + y / 2) * w + xx / 2] += dy.data[(c * dy.h + y) * dy.w + xx];
            }
        }
    }
    out
}

pub fn concat_channels(a: &Fmap, b: &Fmap) -> Fmap {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Fmap {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn split_channels(x: &Fmap, first: usize) -> (Fmap, Fmap) {
    let n = x.hw();
    let a = Fmap {
        c: first,
        h: x.h,
        w: x.w,
        data: x.data[..first * n].to_vec(),
    };
    let b = Fmap {
        c: x.c - first,
        h: x.h,
        w: x.w,
        data: x.data[first * n..].to_vec(),
    };
    (a, b)
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

pub fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

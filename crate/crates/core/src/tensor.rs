//! Dense row-major matrices and channel-major feature maps.

use crate::error::{Error, Result};

/// Row-major `rows × cols` matrix. Token sequences are stored one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Stacks `self` on top of `other` (row concatenation).
    pub fn vstack(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::dims("vstack column mismatch"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Mat {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// `C × H × W` feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Fmap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::dims(format!(
                "feature map has {} entries, expected {c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &Fmap) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.hw();
        &self.data[c * n..(c + 1) * n]
    }

    /// `[HW, C]` token matrix.
    pub fn to_tokens(&self) -> Mat {
        let n = self.hw();
        let mut out = Mat::zeros(n, self.c);
        for c in 0..self.c {
            for p in 0..n {
                out.data[p * self.c + c] = self.data[c * n + p];
            }
        }
        out
    }

    pub fn from_tokens(tokens: &Mat, h: usize, w: usize) -> Result<Fmap> {
        if tokens.rows != h * w {
            return Err(Error::dims("token count does not match grid"));
        }
        let n = h * w;
        let c = tokens.cols;
        let mut out = Fmap::zeros(c, h, w);
        for p in 0..n {
            for ch in 0..c {
                out.data[ch * n + p] = tokens.data[p * c + ch];
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Fmap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `C = alpha · op(A) · op(B) + beta · C` where `op` optionally transposes.
///
/// `a` is stored row-major as `m × k` (or `k × m` when `ta`), `b` as `k × n`
/// (or `n × k` when `tb`), `c` as `m × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], ta: bool, b: &[f32], tb: bool, beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the row-major layouts asserted above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `A · B`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, 1.0, &a.data, false, &b.data, false, 0.0, &mut out.data);
    out
}

/// `A · Bᵀ`.
pub fn matmul_t(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_t inner dimension");
    let mut out = Mat::zeros(a.rows, b.rows);
    gemm(a.rows, a.cols, b.rows, 1.0, &a.data, false, &b.data, true, 0.0, &mut out.data);
    out
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0f64;
                for k in 0..a.cols {
                    s += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                out.data[i * b.cols + j] = s as f32;
            }
        }
        out
    }

    fn seq(rows: usize, cols: usize, seed: f32) -> Mat {
        let data = (0..rows * cols).map(|i| (i as f32 * 0.37 + seed).sin()).collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a = seq(5, 7, 0.1);
        let b = seq(7, 3, 0.7);
        assert!(matmul(&a, &b).max_abs_diff(&naive(&a, &b)) < 1e-5);
        let bt = b.transpose();
        assert!(matmul_t(&a, &bt).max_abs_diff(&naive(&a, &b)) < 1e-5);
        let at = a.transpose();
        let mut c = Mat::zeros(5, 3);
        gemm(5, 7, 3, 1.0, &at.data, true, &bt.data, true, 0.0, &mut c.data);
        assert!(c.max_abs_diff(&naive(&a, &b)) < 1e-5);
    }

    #[test]
    fn token_round_trip() {
        let f = Fmap::from_vec(2, 2, 3, (0..12).map(|v| v as f32).collect()).unwrap();
        let t = f.to_tokens();
        assert_eq!(t.row(1), &[1.0, 7.0]);
        assert_eq!(Fmap::from_tokens(&t, 2, 3).unwrap(), f);
    }
}

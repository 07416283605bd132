//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! value-level API and the autodiff tape.
//!
//! Spatial feature maps are stored token-major: an `h x w` grid with `c`
//! channels is a `[h * w, c]` matrix whose row `y * w + x` holds cell `(y, x)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Self, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add_assign: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![n, m], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!("transpose of {:?}", self.shape)));
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Self::new(vec![m, n], out)
    }

    /// Adds a `[m]` vector to every row of a `[n, m]` matrix.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        let m = self.cols();
        if bias.len() != m {
            return Err(Error::Dimension(format!(
                "row bias of length {} onto {:?}",
                bias.len(),
                self.shape
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Multiplies every row of a `[n, d]` matrix elementwise by a `[d]` vector.
    pub fn mul_row_broadcast(&self, v: &Self) -> Result<Self> {
        let d = self.cols();
        if v.len() != d {
            return Err(Error::Dimension(format!(
                "channel-wise product of {:?} with vector of length {}",
                self.shape,
                v.len()
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(d) {
            for (o, s) in row.iter_mut().zip(&v.data) {
                *o *= s;
            }
        }
        Ok(out)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(0.0))
    }

    pub fn softmax_rows(&self) -> Self {
        let m = self.cols();
        let mut out = self.clone();
        for row in out.data.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        out
    }

    pub fn log_softmax_rows(&self) -> Self {
        let m = self.cols();
        let mut out = self.clone();
        for row in out.data.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    /// L2-normalizes each row; zero rows are an error.
    pub fn normalize_rows(&self) -> Result<Self> {
        let m = self.cols();
        let mut out = self.clone();
        for (i, row) in out.data.chunks_mut(m).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!("row {i} has norm {n}")));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        Ok(out)
    }

    pub fn checksum(&self) -> u64 {
        // FNV-1a over the raw bit patterns.
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Spatial geometry of a token-major grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn square(l: usize) -> Self {
        Self {
            height: l,
            width: l,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// 3x3 convolution with zero "same" padding.
///
/// `x: [B*h*w, ci]` holds `B` independent grids stacked row-wise,
/// `w: [9*ci, co]` indexed by `(ky*3 + kx)*ci + c`, `b: [co]`.
pub fn conv3x3_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: Grid) -> Result<Tensor> {
    let ci = x.cols();
    let co = w.cols();
    if x.rows() == 0 || !x.rows().is_multiple_of(g.cells()) || w.rows() != 9 * ci || b.len() != co {
        return Err(Error::Dimension(format!(
            "conv3x3: x {:?}, w {:?}, b {:?} on {}x{} grid",
            x.shape(),
            w.shape(),
            b.shape(),
            g.height,
            g.width
        )));
    }
    let (h, wd) = (g.height as isize, g.width as isize);
    let batch = x.rows() / g.cells();
    let mut out = vec![0.0; x.rows() * co];
    for bi in 0..batch {
        let off = (bi * g.cells()) as isize;
        for y in 0..h {
            for xx in 0..wd {
                let p = (off + y * wd + xx) as usize;
                let orow = &mut out[p * co..(p + 1) * co];
                orow.copy_from_slice(b.data());
                for ky in 0..3isize {
                    let ny = y + ky - 1;
                    if ny < 0 || ny >= h {
                        continue;
                    }
                    for kx in 0..3isize {
                        let nx = xx + kx - 1;
                        if nx < 0 || nx >= wd {
                            continue;
                        }
                        let n = (off + ny * wd + nx) as usize;
                        let k = (ky * 3 + kx) as usize;
                        let xrow = &x.data()[n * ci..(n + 1) * ci];
                        for (c, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &w.data()[(k * ci + c) * co..(k * ci + c + 1) * co];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![x.rows(), co], out)
}

/// Gradients of [`conv3x3_forward`] with respect to `(x, w, b)`.
pub fn conv3x3_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    g: Grid,
) -> (Tensor, Tensor, Tensor) {
    let ci = x.cols();
    let co = w.cols();
    let (h, wd) = (g.height as isize, g.width as isize);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    for bi in 0..x.rows() / g.cells() {
        let off = (bi * g.cells()) as isize;
        for y in 0..h {
            for xx in 0..wd {
                let p = (off + y * wd + xx) as usize;
                let drow = &dout.data()[p * co..(p + 1) * co];
                for (d, &g) in db.iter_mut().zip(drow) {
                    *d += g;
                }
                for ky in 0..3isize {
                    let ny = y + ky - 1;
                    if ny < 0 || ny >= h {
                        continue;
                    }
                    for kx in 0..3isize {
                        let nx = xx + kx - 1;
                        if nx < 0 || nx >= wd {
                            continue;
                        }
                        let n = (off + ny * wd + nx) as usize;
                        let k = (ky * 3 + kx) as usize;
                        for c in 0..ci {
                            let xv = x.data()[n * ci + c];
                            let base = (k * ci + c) * co;
                            let wrow = &w.data()[base..base + co];
                            let dwrow = &mut dw[base..base + co];
                            let mut acc = 0.0;
                            for j in 0..co {
                                acc += drow[j] * wrow[j];
                                dwrow[j] += xv * drow[j];
                            }
                            dx[n * ci + c] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::vector(db),
    )
}

/// 4x4 transposed convolution with stride 2 and padding 1:
/// `[B*h*w, ci] -> [B*(2h)*(2w), co]` over `B` stacked grids.
///
/// `w: [16*ci, co]` indexed by `(ky*4 + kx)*ci + c`.
pub fn conv_transpose2x_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: Grid) -> Result<Tensor> {
    let ci = x.cols();
    let co = w.cols();
    if x.rows() == 0 || !x.rows().is_multiple_of(g.cells()) || w.rows() != 16 * ci || b.len() != co
    {
        return Err(Error::Dimension(format!(
            "conv_transpose2x: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let batch = x.rows() / g.cells();
    let ocells = 4 * g.cells();
    let mut out = vec![0.0; batch * ocells * co];
    for p in 0..batch * ocells {
        out[p * co..(p + 1) * co].copy_from_slice(b.data());
    }
    for_each_tap(g, batch, |n, o, k| {
        let xrow = &x.data()[n * ci..(n + 1) * ci];
        let orow = &mut out[o * co..(o + 1) * co];
        for (c, &xv) in xrow.iter().enumerate() {
            let base = (k * ci + c) * co;
            for (ov, &wv) in orow.iter_mut().zip(&w.data()[base..base + co]) {
                *ov += xv * wv;
            }
        }
    });
    Tensor::new(vec![batch * ocells, co], out)
}

/// Visits every (input cell, output cell, kernel tap) triple of the stride-2 transposed conv.
fn for_each_tap(g: Grid, batch: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = (2 * g.height as isize, 2 * g.width as isize);
    for bi in 0..batch {
        let (ioff, ooff) = (bi * g.cells(), bi * 4 * g.cells());
        for iy in 0..g.height as isize {
            for ix in 0..g.width as isize {
                let n = ioff + (iy * g.width as isize + ix) as usize;
                for ky in 0..4isize {
                    let oy = 2 * iy - 1 + ky;
                    if oy < 0 || oy >= oh {
                        continue;
                    }
                    for kx in 0..4isize {
                        let ox = 2 * ix - 1 + kx;
                        if ox < 0 || ox >= ow {
                            continue;
                        }
                        f(n, ooff + (oy * ow + ox) as usize, (ky * 4 + kx) as usize);
                    }
                }
            }
        }
    }
}

pub fn conv_transpose2x_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    g: Grid,
) -> (Tensor, Tensor, Tensor) {
    let ci = x.cols();
    let co = w.cols();
    let batch = x.rows() / g.cells();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    for row in dout.data().chunks(co) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    for_each_tap(g, batch, |n, o, k| {
        let drow = &dout.data()[o * co..(o + 1) * co];
        for c in 0..ci {
            let xv = x.data()[n * ci + c];
            let base = (k * ci + c) * co;
            let mut acc = 0.0;
            for j in 0..co {
                acc += drow[j] * w.data()[base + j];
                dw[base + j] += xv * drow[j];
            }
            dx[n * ci + c] += acc;
        }
    });
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::vector(db),
    )
}

/// Bilinear 2x upsampling of a single-channel grid (half-pixel centers, edge clamp).
pub fn bilinear_upsample2x(x: &[f64], g: Grid) -> Vec<f64> {
    let (oh, ow) = (2 * g.height, 2 * g.width);
    let sample = |o: usize, n: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = sample(oy, g.height);
        for ox in 0..ow {
            let (x0, x1, fx) = sample(ox, g.width);
            let v00 = x[y0 * g.width + x0];
            let v01 = x[y0 * g.width + x1];
            let v10 = x[y1 * g.width + x0];
            let v11 = x[y1 * g.width + x1];
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            out[oy * ow + ox] = top + (bot - top) * fy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert!(a.matmul(&a.transpose().unwrap()).is_ok());
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn conv3x3_identity_kernel_copies_input() {
        let g = Grid::square(3);
        let x = Tensor::new(vec![9, 2], (0..18).map(|v| v as f64).collect()).unwrap();
        let mut w = Tensor::zeros(&[18, 2]);
        // center tap (k = 4) as identity over channels
        w.data_mut()[(4 * 2) * 2] = 1.0;
        w.data_mut()[(4 * 2 + 1) * 2 + 1] = 1.0;
        let y = conv3x3_forward(&x, &w, &Tensor::zeros(&[2]), g).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let g = Grid::square(4);
        let out = bilinear_upsample2x(&[2.5; 16], g);
        assert_eq!(out.len(), 64);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 10.0]]).unwrap();
        let s = t.softmax_rows();
        for i in 0..2 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ls = t.log_softmax_rows();
        for (a, b) in ls.data().iter().zip(s.data()) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(t.normalize_rows(), Err(Error::Numeric(_))));
    }

    #[test]
    fn batched_convs_match_per_grid_calls() {
        let g = Grid::square(3);
        let x = Tensor::new(
            vec![18, 2],
            (0..36).map(|v| (v as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![18, 2],
            (0..36).map(|v| (v as f64 * 0.11).cos()).collect(),
        )
        .unwrap();
        let wt = Tensor::new(
            vec![32, 2],
            (0..64).map(|v| (v as f64 * 0.07).cos()).collect(),
        )
        .unwrap();
        let b = Tensor::vector(vec![0.1, -0.2]);
        let both = conv3x3_forward(&x, &w, &b, g).unwrap();
        let both_t = conv_transpose2x_forward(&x, &wt, &b, g).unwrap();
        for k in 0..2 {
            let part = Tensor::new(vec![9, 2], x.data()[k * 18..(k + 1) * 18].to_vec()).unwrap();
            let one = conv3x3_forward(&part, &w, &b, g).unwrap();
            assert_eq!(one.data(), &both.data()[k * 18..(k + 1) * 18]);
            let one_t = conv_transpose2x_forward(&part, &wt, &b, g).unwrap();
            assert_eq!(one_t.data(), &both_t.data()[k * 72..(k + 1) * 72]);
        }
    }
}

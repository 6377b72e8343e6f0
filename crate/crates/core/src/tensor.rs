//! Dense row-major `f64` tensors and the handful of kernels the pipeline needs.
//!
//! Nothing here broadcasts or tracks gradients. Matrices are rank-2 tensors,
//! stacks of spatial maps are rank-3 tensors laid out `channel x row x col`.

use std::fmt;

use crate::error::{DidError, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, rejecting zero extents, a data length that does not
    /// match the shape, and non-finite elements.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(DidError::InvalidTensor(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DidError::InvalidTensor(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DidError::InvalidTensor(format!(
                "element {pos} is not finite ({})",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DidError::InvalidTensor("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "extents must be positive, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Internal constructor for kernels whose output length is correct by
    /// construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(DidError::InvalidTensor(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    /// `(channels, rows, cols)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(DidError::InvalidTensor(format!(
                "expected a rank-3 tensor, got shape {other:?}"
            ))),
        }
    }

    /// Row `i` of a matrix, or channel `i` (flattened) of a rank-3 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(DidError::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Standard matrix product. Every output element accumulates its `k` terms in
/// increasing index order, so results do not depend on how rows are scheduled.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(DidError::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a * b + bias`, with `bias` added to every row.
pub fn affine(a: &Tensor, b: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let mut out = matmul(a, b)?;
    let (_, n) = out.dims2()?;
    if bias.len() != n {
        return Err(DidError::shape("affine", out.shape(), &[bias.len()]));
    }
    for row in out.data.chunks_mut(n) {
        for (o, &bv) in row.iter_mut().zip(bias) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Row-wise softmax, shifted by each row's maximum.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let cols = *m.shape.last().expect("tensor has rank >= 1");
    let mut out = m.data.clone();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Tensor::from_parts(m.shape.clone(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` with the population variance.
///
/// A zero denominator (constant input with `eps == 0`) yields `beta`, since the
/// centred numerator is zero as well.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(x.len(), gamma.len());
    assert_eq!(x.len(), beta.len());
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| {
            if denom > 0.0 {
                (v - mean) / denom * g + b
            } else {
                b
            }
        })
        .collect()
}

/// Align-corners sample position of output index `i` on a source axis of
/// length `src` when resampling to `dst` samples.
fn source_coord(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    if src == 1 || dst == 1 {
        return (0, 0, 0.0);
    }
    let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resampling of an `h x w` map with the align-corners convention:
/// output corners coincide with input corners. An output axis of length 1
/// samples the first source row/column.
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if out_h == 0 || out_w == 0 {
        return Err(DidError::InvalidTensor(format!(
            "output extents must be positive, got {out_h}x{out_w}"
        )));
    }
    Ok(Tensor::from_parts(
        vec![out_h, out_w],
        resample_plane(map.data(), h, w, out_h, out_w),
    ))
}

pub(crate) fn resample_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let cols: Vec<_> = (0..out_w).map(|j| source_coord(j, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (y0, y1, fy) = source_coord(i, h, out_h);
        let top = &src[y0 * w..(y0 + 1) * w];
        let bottom = &src[y1 * w..(y1 + 1) * w];
        for &(x0, x1, fx) in &cols {
            let upper = (1.0 - fx) * top[x0] + fx * top[x1];
            let lower = (1.0 - fx) * bottom[x0] + fx * bottom[x1];
            out.push((1.0 - fy) * upper + fy * lower);
        }
    }
    out
}

/// Spatial mean of every channel of a `C x h x w` tensor.
pub fn average_pool_spatial(a: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = a.dims3()?;
    let area = (h * w) as f64;
    Ok((0..c)
        .map(|ch| a.row(ch).iter().sum::<f64>() / area)
        .collect())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

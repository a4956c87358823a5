//! Dense row-major tensors and the raw kernels the autodiff layer is built on.
//!
//! A [`Tensor`] is an immutable value: cloning shares storage, and every
//! kernel returns a fresh tensor. Broadcasting is deliberately absent beyond
//! the explicit row/column/scalar expansions below.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

/// Spatial layout of a 2-D convolution lowered to a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    /// Stride-1 square-kernel geometry for an NCHW input.
    pub fn new(input_shape: &[usize], kernel: usize, padding: usize) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::invalid(
                "conv2d",
                format!("expected NCHW input, got shape {input_shape:?}"),
            ));
        }
        let (h, w) = (input_shape[2], input_shape[3]);
        if kernel == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kernel} with padding {padding} does not fit {h}x{w}"),
            ));
        }
        Ok(Self {
            batch: input_shape[0],
            channels: input_shape[1],
            height: h,
            width: w,
            kernel,
            padding,
            out_height: h + 2 * padding - kernel + 1,
            out_width: w + 2 * padding - kernel + 1,
        })
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    /// `[batch·out_h·out_w, channels·k·k]`
    pub fn cols_shape(&self) -> [usize; 2] {
        [
            self.batch * self.out_height * self.out_width,
            self.channels * self.kernel * self.kernel,
        ]
    }

    /// For every column-matrix cell, the flat input index it reads (or
    /// `None` inside the zero padding).
    fn for_each_cell(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let k = self.kernel;
        let ncols = self.channels * k * k;
        let pad = self.padding as isize;
        for b in 0..self.batch {
            for oy in 0..self.out_height {
                for ox in 0..self.out_width {
                    let row = (b * self.out_height + oy) * self.out_width + ox;
                    for c in 0..self.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let col = (c * k + ky) * k + kx;
                                let iy = oy as isize + ky as isize - pad;
                                let ix = ox as isize + kx as isize - pad;
                                let src = if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize
                                {
                                    None
                                } else {
                                    Some(
                                        ((b * self.channels + c) * self.height + iy as usize) * self.width
                                            + ix as usize,
                                    )
                                };
                                f(row * ncols + col, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    /// Rank-1 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new((0..numel).map(f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access; copies the storage if it is shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<S> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Leading dimension (batch size); 1 for rank-0-like tensors.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading-dimension row.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    /// Row `i` along the leading dimension, keeping a leading axis of 1.
    pub fn row(&self, i: usize) -> Result<Self> {
        self.rows_range(i, i + 1)
    }

    pub fn rows_range(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows() {
            return Err(Error::invalid(
                "rows",
                format!("range {start}..{end} out of bounds for {} rows", self.rows()),
            ));
        }
        let len = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::new(shape, self.data[start * len..end * len].to_vec())
    }

    /// Gathers rows by index along the leading dimension.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let len = self.row_len();
        let rows = self.rows();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(
                    "select_rows",
                    format!("row {i} out of bounds for {rows} rows"),
                ));
            }
            data.extend_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }

    /// Stacks equally-shaped tensors along their leading dimension.
    pub fn concat_rows(parts: &[Tensor<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no tensors to concatenate"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len() != first.shape.len() || &p.shape[1..] != tail {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Self::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        if self.numel() != other.numel() {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// `op(a)·op(b)` for rank-2 operands, `op` being optional transposition.
    pub fn matmul(a: &Self, b: &Self, ta: bool, tb: bool) -> Result<Self> {
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::shape("matmul", &a.shape, &b.shape));
        }
        let (a0, a1) = (a.shape[0], a.shape[1]);
        let (b0, b1) = (b.shape[0], b.shape[1]);
        let (m, k, rsa, csa) = if ta { (a1, a0, 1, a1) } else { (a0, a1, a1, 1) };
        let (k2, n, rsb, csb) = if tb { (b1, b0, 1, b1) } else { (b0, b1, b1, 1) };
        if k != k2 {
            return Err(Error::shape("matmul", &a.shape, &b.shape));
        }
        let mut out = vec![S::zero(); m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: strides describe the row-major buffers checked above.
            unsafe {
                S::gemm(
                    m,
                    k,
                    n,
                    S::one(),
                    a.data.as_ptr(),
                    rsa as isize,
                    csa as isize,
                    b.data.as_ptr(),
                    rsb as isize,
                    csb as isize,
                    S::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Self::new(vec![m, n], out)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::invalid(op, format!("expected rank 2, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `[m, n] -> [1, n]`
    pub fn sum_rows(&self) -> Result<Self> {
        let (m, n) = self.matrix_dims("sum_rows")?;
        let mut out = vec![S::zero(); n];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(&self.data[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        Self::new(vec![1, n], out)
    }

    /// `[m, n] -> [m, 1]`
    pub fn sum_cols(&self) -> Result<Self> {
        let (m, n) = self.matrix_dims("sum_cols")?;
        let out = (0..m)
            .map(|r| self.data[r * n..(r + 1) * n].iter().fold(S::zero(), |acc, &v| acc + v))
            .collect();
        Self::new(vec![m, 1], out)
    }

    /// `[1, n] -> [m, n]`
    pub fn broadcast_rows(&self, m: usize) -> Result<Self> {
        let (one, n) = self.matrix_dims("broadcast_rows")?;
        if one != 1 {
            return Err(Error::shape("broadcast_rows", &self.shape, &[1, n]));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&self.data);
        }
        Self::new(vec![m, n], out)
    }

    /// `[m, 1] -> [m, n]`
    pub fn broadcast_cols(&self, n: usize) -> Result<Self> {
        let (m, one) = self.matrix_dims("broadcast_cols")?;
        if one != 1 {
            return Err(Error::shape("broadcast_cols", &self.shape, &[m, 1]));
        }
        let mut out = Vec::with_capacity(m * n);
        for &v in self.data.iter() {
            out.extend(std::iter::repeat_n(v, n));
        }
        Self::new(vec![m, n], out)
    }

    /// `out[i] = self[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, indices: &[usize], shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != indices.len() {
            return Err(Error::invalid(
                "gather",
                format!("{} indices cannot fill shape {shape:?}", indices.len()),
            ));
        }
        let n = self.numel();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::invalid("gather", format!("index {i} out of bounds for {n}")));
            }
            out.push(self.data[i]);
        }
        Self::new(shape.to_vec(), out)
    }

    /// `out[indices[i]] += self[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&self, indices: &[usize], shape: &[usize]) -> Result<Self> {
        if indices.len() != self.numel() {
            return Err(Error::invalid(
                "scatter_add",
                format!("{} indices for {} values", indices.len(), self.numel()),
            ));
        }
        let numel: usize = shape.iter().product();
        let mut out = vec![S::zero(); numel];
        for (&i, &v) in indices.iter().zip(self.data.iter()) {
            if i >= numel {
                return Err(Error::invalid(
                    "scatter_add",
                    format!("index {i} out of bounds for {numel}"),
                ));
            }
            out[i] += v;
        }
        Self::new(shape.to_vec(), out)
    }

    pub fn im2col(&self, geom: &ConvGeometry) -> Result<Self> {
        if self.shape != geom.input_shape() {
            return Err(Error::shape("im2col", &self.shape, &geom.input_shape()));
        }
        let cols = geom.cols_shape();
        let mut out = vec![S::zero(); cols[0] * cols[1]];
        geom.for_each_cell(|dst, src| {
            if let Some(s) = src {
                out[dst] = self.data[s];
            }
        });
        Self::new(cols.to_vec(), out)
    }

    pub fn col2im(&self, geom: &ConvGeometry) -> Result<Self> {
        let cols = geom.cols_shape();
        if self.shape != cols {
            return Err(Error::shape("col2im", &self.shape, &cols));
        }
        let input = geom.input_shape();
        let mut out = vec![S::zero(); input.iter().product()];
        geom.for_each_cell(|src, dst| {
            if let Some(d) = dst {
                out[d] += self.data[src];
            }
        });
        Self::new(input.to_vec(), out)
    }

    /// Index of the largest value per leading-dimension row; ties resolve to
    /// the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let len = self.row_len().max(1);
        self.data
            .chunks(len)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::of(v.f64())).collect()),
        }
    }
}

/// Flat indices of the 2×2 (or `size`×`size`) max-pool winners of an NCHW
/// tensor; ties go to the lowest flat index.
pub fn maxpool_argmax<S: Scalar>(x: &Tensor<S>, size: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let shape = x.shape();
    if shape.len() != 4 || size == 0 || shape[2] % size != 0 || shape[3] % size != 0 {
        return Err(Error::invalid(
            "maxpool2d",
            format!("pool {size} does not tile input shape {shape:?}"),
        ));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let data = x.data();
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, vec![b, c, oh, ow]))
}

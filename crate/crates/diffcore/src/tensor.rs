//! Dense row-major tensors and the raw kernels behind tape operations.

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DiffError::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("buffer holds {} scalars", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64_lossy(x.to_f64_lossy())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Trailing-dimension alignment; each pair of extents must match or one be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

pub(crate) fn can_broadcast(from: &[usize], to: &[usize]) -> bool {
    broadcast_shape(from, to).as_deref() == Some(to)
}

/// Source strides for reading `from` at positions of `to` (zero along broadcast axes).
fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let offset = to.len() - from.len();
    let src = row_major_strides(from);
    (0..to.len())
        .map(|d| {
            if d < offset || from[d - offset] == 1 {
                0
            } else {
                src[d - offset]
            }
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order and hands the caller
/// the running offset into a second strided buffer.
fn for_each_strided(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = shape.len();
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for linear in 0..numel {
        f(linear, offset);
        for d in (0..rank).rev() {
            index[d] += 1;
            offset += strides[d];
            if index[d] < shape[d] {
                break;
            }
            offset -= strides[d] * shape[d];
            index[d] = 0;
        }
    }
}

pub(crate) fn broadcast_to<T: Scalar>(x: &Tensor<T>, to: &[usize]) -> Tensor<T> {
    if x.shape == to {
        return x.clone();
    }
    let numel: usize = to.iter().product();
    // Leading-axis repetition is a block copy.
    let offset = to.len() - x.shape.len();
    if to[offset..] == x.shape[..] {
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            data.extend_from_slice(&x.data);
        }
        return Tensor {
            shape: to.to_vec(),
            data,
        };
    }
    let strides = broadcast_strides(&x.shape, to);
    let mut data = vec![T::zero(); numel];
    for_each_strided(to, &strides, |i, src| data[i] = x.data[src]);
    Tensor {
        shape: to.to_vec(),
        data,
    }
}

/// Adjoint of [`broadcast_to`]: sums over the broadcast axes.
pub(crate) fn reduce_to<T: Scalar>(x: &Tensor<T>, to: &[usize]) -> Tensor<T> {
    if x.shape == to {
        return x.clone();
    }
    let numel: usize = to.iter().product();
    let mut data = vec![T::zero(); numel];
    let offset = x.shape.len() - to.len();
    if x.shape[offset..] == to[..] {
        for chunk in x.data.chunks(numel.max(1)) {
            for (acc, &v) in data.iter_mut().zip(chunk) {
                *acc += v;
            }
        }
        return Tensor {
            shape: to.to_vec(),
            data,
        };
    }
    let strides = broadcast_strides(to, &x.shape);
    for_each_strided(&x.shape, &strides, |i, dst| data[dst] += x.data[i]);
    Tensor {
        shape: to.to_vec(),
        data,
    }
}

pub(crate) fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let src = row_major_strides(&x.shape);
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let mut data = vec![T::zero(); x.data.len()];
    for_each_strided(&shape, &strides, |i, s| data[i] = x.data[s]);
    Tensor { shape, data }
}

/// (outer, axis extent, inner) decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sum along `axis`, keeping it with extent 1.
pub(crate) fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut data[o * inner..(o + 1) * inner];
        for a in 0..len {
            let base = (o * len + a) * inner;
            for (acc, &v) in dst.iter_mut().zip(&x.data[base..base + inner]) {
                *acc += v;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = 1;
    Tensor { shape, data }
}

pub(crate) fn slice_axis<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, full, inner) = split_axis(&x.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Tensor { shape, data }
}

/// Adjoint of [`slice_axis`]: zero-pads back to extent `full`.
pub(crate) fn pad_axis<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, full: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut data = vec![T::zero(); outer * full * inner];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        data[dst..dst + len * inner].copy_from_slice(&x.data[src..src + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = full;
    Tensor { shape, data }
}

pub(crate) fn concat_axis<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let mut shape = parts[0].shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor { shape, data }
}

/// Running sum along `axis`. `exclusive` shifts by one (first entry 0);
/// `reverse` accumulates from the far end.
pub(crate) fn cumsum_axis<T: Scalar>(x: &Tensor<T>, axis: usize, exclusive: bool, reverse: bool) -> Tensor<T> {
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut data = vec![T::zero(); x.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = T::zero();
            for step in 0..len {
                let a = if reverse { len - 1 - step } else { step };
                let idx = (o * len + a) * inner + i;
                if exclusive {
                    data[idx] = acc;
                    acc += x.data[idx];
                } else {
                    acc += x.data[idx];
                    data[idx] = acc;
                }
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Output shape of `op(a)·op(b)` for rank-2 operands.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Option<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return None;
    }
    let (m, ka) = if ta { (a[1], a[0]) } else { (a[0], a[1]) };
    let (kb, n) = if tb { (b[1], b[0]) } else { (b[0], b[1]) };
    (ka == kb).then_some((m, ka, n))
}

pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (m, k, n) = matmul_dims(&a.shape, &b.shape, ta, tb).expect("validated matmul shapes");
    let mut data = vec![T::zero(); m * n];
    if k > 0 {
        T::gemm(m, k, n, &a.data, ta, &b.data, tb, &mut data);
    }
    Tensor {
        shape: vec![m, n],
        data,
    }
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.height, self.width]
    }

    /// `[batch·out_h·out_w, channels·kernel_h·kernel_w]`.
    pub fn cols_shape(&self) -> Vec<usize> {
        vec![
            self.batch * self.out_h() * self.out_w(),
            self.channels * self.kernel_h * self.kernel_w,
        ]
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let row_len = self.channels * self.kernel_h * self.kernel_w;
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    for c in 0..self.channels {
                        for ky in 0..self.kernel_h {
                            let y = (oy * self.stride + ky) as isize - self.pad as isize;
                            if y < 0 || y >= self.height as isize {
                                continue;
                            }
                            for kx in 0..self.kernel_w {
                                let x = (ox * self.stride + kx) as isize - self.pad as isize;
                                if x < 0 || x >= self.width as isize {
                                    continue;
                                }
                                let col = row * row_len + (c * self.kernel_h + ky) * self.kernel_w + kx;
                                let src =
                                    ((b * self.channels + c) * self.height + y as usize) * self.width + x as usize;
                                f(col, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col<T: Scalar>(x: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let shape = g.cols_shape();
    let mut data = vec![T::zero(); shape[0] * shape[1]];
    g.for_each_tap(|col, src| data[col] = x.data[src]);
    Tensor { shape, data }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the image.
pub(crate) fn col2im<T: Scalar>(cols: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let shape = g.input_shape();
    let mut data = vec![T::zero(); shape.iter().product()];
    g.for_each_tap(|col, dst| data[dst] += cols.data[col]);
    Tensor { shape, data }
}

//! Dense row-major tensors and the raw kernels behind the autodiff ops.
//!
//! Kernels are deterministic: fixed iteration order, no internal threading,
//! so identical inputs produce bit-identical outputs within one build.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} has {len} elements, expected {expected}")]
    BadLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("cannot broadcast {from:?} to {to:?}")]
    BadBroadcast { from: Vec<usize>, to: Vec<usize> },
    #[error("gradient root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<V> = std::result::Result<V, TensorError>;

/// Dense tensor with row-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::BadLength {
                op: "from_vec",
                len: data.len(),
                expected,
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a rank-0 / single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::BadLength {
                op: "reshape",
                len: self.data.len(),
                expected,
                shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// 2-D transpose.
    pub fn transpose2d(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose expects a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Row-major matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); m * n];
        if m * k * n > 0 {
            T::gemm(m, k, n, &self.data, &rhs.data, &mut out);
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Sum over `axes`, keeping reduced axes as size 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        for &a in axes {
            if a >= nd {
                return Err(TensorError::Invalid(format!(
                    "sum axis {a} out of range for shape {:?}",
                    self.shape
                )));
            }
        }
        let mut out_shape = self.shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let out_strides = row_major_strides(&out_shape);
        let contrib: Vec<usize> = (0..nd)
            .map(|d| if out_shape[d] == 1 { 0 } else { out_strides[d] })
            .collect();
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); out_len];
        let mut coords = vec![0usize; nd];
        let mut out_idx = 0usize;
        for &v in &self.data {
            out[out_idx] = out[out_idx] + v;
            for d in (0..nd).rev() {
                coords[d] += 1;
                out_idx += contrib[d];
                if coords[d] < self.shape[d] {
                    break;
                }
                coords[d] = 0;
                out_idx -= contrib[d] * self.shape[d];
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    pub fn sum_all(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        acc
    }

    /// Right-aligned broadcast (missing leading axes and size-1 axes expand).
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Self> {
        if target.len() < self.shape.len() {
            return Err(TensorError::BadBroadcast {
                from: self.shape.clone(),
                to: target.to_vec(),
            });
        }
        let nd = target.len();
        let offset = nd - self.shape.len();
        let mut from = vec![1usize; nd];
        from[offset..].copy_from_slice(&self.shape);
        for d in 0..nd {
            if from[d] != target[d] && from[d] != 1 {
                return Err(TensorError::BadBroadcast {
                    from: self.shape.clone(),
                    to: target.to_vec(),
                });
            }
        }
        let src_strides_full = row_major_strides(&from);
        let contrib: Vec<usize> = (0..nd)
            .map(|d| if from[d] == 1 { 0 } else { src_strides_full[d] })
            .collect();
        let out_len: usize = target.iter().product();
        let mut out = vec![T::zero(); out_len];
        let mut coords = vec![0usize; nd];
        let mut src_idx = 0usize;
        for slot in out.iter_mut() {
            *slot = self.data[src_idx];
            for d in (0..nd).rev() {
                coords[d] += 1;
                src_idx += contrib[d];
                if coords[d] < target[d] {
                    break;
                }
                coords[d] = 0;
                src_idx -= contrib[d] * target[d];
            }
        }
        Ok(Self {
            shape: target.to_vec(),
            data: out,
        })
    }

    /// Reduce back to `from` after a broadcast: sum over expanded axes.
    pub fn sum_to(&self, from: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        let offset = nd - from.len();
        let mut axes = Vec::new();
        for d in 0..nd {
            let f = if d < offset { 1 } else { from[d - offset] };
            if f == 1 && self.shape[d] != 1 {
                axes.push(d);
            }
        }
        let reduced = self.sum_axes(&axes)?;
        reduced.reshape(from.to_vec())
    }

    /// Per-row argmax of a `[rows, cols]` tensor; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.shape.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "argmax_rows expects a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        if items.is_empty() {
            return Err(TensorError::Invalid("stack of zero tensors".into()));
        }
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for it in items {
            if it.shape != inner {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: inner,
                    rhs: it.shape.clone(),
                });
            }
            data.extend_from_slice(&it.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&inner);
        Ok(Self { shape, data })
    }
}

/// Geometry of one 2-D convolution (NHWC layout).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// "Same" padding: `out = ceil(in / stride)`, zeros split low/high with the
    /// extra zero at the high edge.
    pub fn same(batch: usize, in_h: usize, in_w: usize, in_c: usize, k: usize, stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + k).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + k).saturating_sub(in_w);
        Self {
            batch,
            in_h,
            in_w,
            in_c,
            k_h: k,
            k_w: k,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            out_h,
            out_w,
        }
    }

    pub fn valid(batch: usize, in_h: usize, in_w: usize, in_c: usize, k_h: usize, k_w: usize, stride: usize) -> Self {
        Self {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            stride,
            pad_top: 0,
            pad_left: 0,
            out_h: (in_h - k_h) / stride + 1,
            out_w: (in_w - k_w) / stride + 1,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_h, self.in_w, self.in_c]
    }

    pub fn cols_shape(&self) -> Vec<usize> {
        vec![
            self.batch * self.out_h * self.out_w,
            self.k_h * self.k_w * self.in_c,
        ]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Patch extraction: NHWC input -> `[batch*out_h*out_w, k_h*k_w*in_c]`.
    /// Out-of-bounds (padding) positions read as zero.
    pub fn im2col(&self, g: &ConvGeom) -> Result<Self> {
        if self.shape != g.input_shape() {
            return Err(TensorError::ShapeMismatch {
                op: "im2col",
                lhs: self.shape.clone(),
                rhs: g.input_shape(),
            });
        }
        let cols_shape = g.cols_shape();
        let row_w = cols_shape[1];
        let mut out = vec![T::zero(); cols_shape[0] * row_w];
        let c = g.in_c;
        for b in 0..g.batch {
            let in_base = b * g.in_h * g.in_w * c;
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let row = ((b * g.out_h + oy) * g.out_w + ox) * row_w;
                    for ky in 0..g.k_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..g.k_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            let src = in_base + ((iy as usize * g.in_w) + ix as usize) * c;
                            let dst = row + (ky * g.k_w + kx) * c;
                            out[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
                        }
                    }
                }
            }
        }
        Ok(Self {
            shape: cols_shape,
            data: out,
        })
    }

    /// Adjoint of [`Tensor::im2col`]: scatter-add columns back onto the image.
    pub fn col2im(&self, g: &ConvGeom) -> Result<Self> {
        let cols_shape = g.cols_shape();
        if self.shape != cols_shape {
            return Err(TensorError::ShapeMismatch {
                op: "col2im",
                lhs: self.shape.clone(),
                rhs: cols_shape,
            });
        }
        let row_w = cols_shape[1];
        let c = g.in_c;
        let mut out = vec![T::zero(); g.batch * g.in_h * g.in_w * c];
        for b in 0..g.batch {
            let in_base = b * g.in_h * g.in_w * c;
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let row = ((b * g.out_h + oy) * g.out_w + ox) * row_w;
                    for ky in 0..g.k_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..g.k_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            let dst = in_base + ((iy as usize * g.in_w) + ix as usize) * c;
                            let src = row + (ky * g.k_w + kx) * c;
                            for i in 0..c {
                                out[dst + i] = out[dst + i] + self.data[src + i];
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            shape: g.input_shape(),
            data: out,
        })
    }

    /// `out[i] = self[indices[i]]`; the adjoint of [`Tensor::scatter_sum`].
    pub fn gather(&self, indices: &[usize], out_shape: Vec<usize>) -> Result<Self> {
        let expected: usize = out_shape.iter().product();
        if indices.len() != expected {
            return Err(TensorError::BadLength {
                op: "gather",
                len: indices.len(),
                expected,
                shape: out_shape,
            });
        }
        let mut out = Vec::with_capacity(indices.len());
        for &idx in indices {
            out.push(self.data[idx]);
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Zeros of `out_shape` with `self[i]` added at `indices[i]`.
    pub fn scatter_sum(&self, indices: &[usize], out_shape: Vec<usize>) -> Result<Self> {
        if indices.len() != self.data.len() {
            return Err(TensorError::BadLength {
                op: "scatter_sum",
                len: indices.len(),
                expected: self.data.len(),
                shape: out_shape,
            });
        }
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); out_len];
        for (i, &idx) in indices.iter().enumerate() {
            out[idx] = out[idx] + self.data[i];
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// NHWC max pooling. Returns the pooled tensor and, per output element,
    /// the flat input index that won (first index wins ties).
    pub fn max_pool2d(&self, window: usize, stride: usize) -> Result<(Self, Vec<usize>)> {
        if self.shape.len() != 4 {
            return Err(TensorError::Invalid(format!(
                "max_pool2d expects NHWC, got {:?}",
                self.shape
            )));
        }
        let (b, h, w, c) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if h < window || w < window {
            return Err(TensorError::Invalid(format!(
                "max_pool2d window {window} larger than input {h}x{w}"
            )));
        }
        let out_h = (h - window) / stride + 1;
        let out_w = (w - window) / stride + 1;
        let mut out = Vec::with_capacity(b * out_h * out_w * c);
        let mut indices = Vec::with_capacity(b * out_h * out_w * c);
        for bi in 0..b {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    for ch in 0..c {
                        let mut best_idx = ((bi * h + oy * stride) * w + ox * stride) * c + ch;
                        let mut best = self.data[best_idx];
                        for ky in 0..window {
                            for kx in 0..window {
                                let idx =
                                    ((bi * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                if self.data[idx] > best {
                                    best = self.data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        indices.push(best_idx);
                    }
                }
            }
        }
        Ok((
            Self {
                shape: vec![b, out_h, out_w, c],
                data: out,
            },
            indices,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn sum_axes_keepdims() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = a.sum_axes(&[1]).unwrap();
        assert_eq!(rows.shape(), &[2, 1]);
        assert_eq!(rows.data(), &[6.0, 15.0]);
        let cols = a.sum_axes(&[0]).unwrap();
        assert_eq!(cols.shape(), &[1, 3]);
        assert_eq!(cols.data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn broadcast_right_aligned() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = a.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(b.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = b.sum_to(&[3]).unwrap();
        assert_eq!(s.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn broadcast_keepdims_row() {
        let a = t(&[2, 1], &[10.0, 20.0]);
        let b = a.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(b.data(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn im2col_identity_on_1x1_window() {
        let g = ConvGeom::valid(1, 2, 2, 3, 1, 1, 1);
        let x = t(&[1, 2, 2, 3], &(0..12).map(|v| v as f64).collect::<Vec<_>>());
        let cols = x.im2col(&g).unwrap();
        assert_eq!(cols.shape(), &[4, 3]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn conv_by_cols_matches_hand_computation() {
        // 3x3 all-ones input against a 3x3 all-ones kernel, no padding -> 9.
        let g = ConvGeom::valid(1, 3, 3, 1, 3, 3, 1);
        let x = Tensor::full(vec![1, 3, 3, 1], 1.0f64);
        let cols = x.im2col(&g).unwrap();
        let w = Tensor::full(vec![9, 1], 1.0f64);
        let y = cols.matmul(&w).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for the pair to be adjoint.
        let g = ConvGeom::same(2, 5, 4, 3, 3, 2);
        let n_in: usize = g.input_shape().iter().product();
        let n_cols: usize = g.cols_shape().iter().product();
        let x = t(
            &g.input_shape(),
            &(0..n_in).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(),
        );
        let y = t(
            &g.cols_shape(),
            &(0..n_cols).map(|i| (i as f64 * 0.11).cos()).collect::<Vec<_>>(),
        );
        let lhs: f64 = x
            .im2col(&g)
            .unwrap()
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(y.col2im(&g).unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn same_geometry_follows_ceil_rule() {
        // The stack used by the classifier: 98x40 halves down to 7x3.
        let dims = [(98, 40), (49, 20), (25, 10), (13, 5)];
        let expect = [(49, 20), (25, 10), (13, 5), (7, 3)];
        for (i, &(h, w)) in dims.iter().enumerate() {
            let g = ConvGeom::same(1, h, w, 1, 3, 2);
            assert_eq!((g.out_h, g.out_w), expect[i]);
        }
    }

    #[test]
    fn max_pool_tracks_argmax() {
        let x = t(&[1, 2, 2, 1], &[1.0, 5.0, 3.0, 2.0]);
        let (y, idx) = x.max_pool2d(2, 2).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let x = t(&[2, 3], &[1.0, 3.0, 3.0, 2.0, 2.0, 2.0]);
        assert_eq!(x.argmax_rows().unwrap(), vec![1, 0]);
    }
}

//! Minimal dense tensor kernel.
//!
//! A [`Tensor`] is a row-major `f32` buffer with a shape. Every public
//! operation is a pure function returning a new tensor, and every result is
//! checked to be finite so that NaN/Inf never escapes into later stages.
//! Reductions inside `matmul` and `conv2d` accumulate in `f64`.
//!
//! Broadcasting is limited to a single leading batch axis in [`Tensor::matmul`].

pub mod backward;
pub(crate) mod kernels;

use crate::error::{Error, Result};
use kernels::ConvGeometry;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, validating the shape and that every value is finite.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expects {numel} elements, buffer has {}", data.len()),
            });
        }
        Self::from_op("new", shape.to_vec(), data)
    }

    fn check_shape(shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "dimensions must be positive".into(),
            });
        }
        Ok(())
    }

    fn from_op(op: &'static str, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        Self::check_shape(shape)?;
        let numel = shape.iter().product();
        Self::from_op("full", shape.to_vec(), vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    /// Build from a function of the flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Result<Self> {
        Self::check_shape(shape)?;
        let numel: usize = shape.iter().product();
        Self::from_op("from_fn", shape.to_vec(), (0..numel).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Element at a multi-index. Panics on an out-of-range index.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {i} out of range for dim {d}");
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Little-endian bytes of the buffer (the checkpoint payload layout).
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Self::check_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects rank {rank}"),
            });
        }
        Ok(())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        self.expect_rank("transpose", 2)?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Matrix product of rank-2 or rank-3 tensors.
    ///
    /// A rank-3 operand carries a leading batch axis; a rank-2 operand paired
    /// with a rank-3 one is reused for every batch entry.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        let split = |t: &Tensor| -> Option<(Option<usize>, usize, usize)> {
            match t.shape.as_slice() {
                &[r, c] => Some((None, r, c)),
                &[b, r, c] => Some((Some(b), r, c)),
                _ => None,
            }
        };
        let (ba, m, k) = split(self).ok_or_else(mismatch)?;
        let (bb, k2, n) = split(other).ok_or_else(mismatch)?;
        if k != k2 {
            return Err(mismatch());
        }
        let batch = match (ba, bb) {
            (None, None) => None,
            (Some(b), None) | (None, Some(b)) => Some(b),
            (Some(x), Some(y)) if x == y => Some(x),
            _ => return Err(mismatch()),
        };
        match batch {
            None => Self::from_op("matmul", vec![m, n], kernels::gemm(&self.data, &other.data, m, k, n)),
            Some(b) => {
                let mut out = Vec::with_capacity(b * m * n);
                for i in 0..b {
                    let a = if ba.is_some() {
                        &self.data[i * m * k..(i + 1) * m * k]
                    } else {
                        &self.data[..]
                    };
                    let bm = if bb.is_some() {
                        &other.data[i * k * n..(i + 1) * k * n]
                    } else {
                        &other.data[..]
                    };
                    out.extend(kernels::gemm(a, bm, m, k, n));
                }
                Self::from_op("matmul", vec![b, m, n], out)
            }
        }
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0f32; self.numel()];
        let mut buf = vec![0f32; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.data[base + j * inner];
                }
                softmax_in_place(&mut buf);
                for (j, &b) in buf.iter().enumerate() {
                    out[base + j * inner] = b;
                }
            }
        }
        Self::from_op("softmax", self.shape.clone(), out)
    }

    /// 2-D cross-correlation of `[C, H, W]` with `[O, C, k, k]`.
    ///
    /// Output spatial size is `(H + 2·padding − k) / stride + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let g = conv_geometry(self, weight, stride, padding)?;
        let out_ch = weight.shape[0];
        if let Some(b) = bias {
            if b.shape != [out_ch] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: weight.shape.clone(),
                    right: b.shape.clone(),
                });
            }
        }
        let cols = kernels::im2col(&self.data, &g);
        let mut out = kernels::gemm(&weight.data, &cols, out_ch, g.patch_len(), g.positions());
        if let Some(b) = bias {
            for (o, row) in out.chunks_mut(g.positions()).enumerate() {
                row.iter_mut().for_each(|v| *v += b.data[o]);
            }
        }
        Self::from_op("conv2d", vec![out_ch, g.out_height, g.out_width], out)
    }

    /// Nearest-neighbour resize of `[H, W]` or `[C, H, W]` to `(H2, W2)`.
    ///
    /// Output cell `(i, j)` reads source cell `(floor(i·H/H2), floor(j·W/W2))`.
    pub fn resize_nearest(&self, target: (usize, usize)) -> Result<Tensor> {
        let (h2, w2) = target;
        if h2 == 0 || w2 == 0 {
            return Err(Error::InvalidShape {
                shape: vec![h2, w2],
                reason: "resize target must be at least 1x1".into(),
            });
        }
        let (c, h, w) = match self.shape.as_slice() {
            &[h, w] => (1, h, w),
            &[c, h, w] => (c, h, w),
            _ => {
                return Err(Error::InvalidShape {
                    shape: self.shape.clone(),
                    reason: "resize_nearest expects rank 2 or 3".into(),
                })
            }
        };
        let mut out = Vec::with_capacity(c * h2 * w2);
        for ch in 0..c {
            let plane = &self.data[ch * h * w..(ch + 1) * h * w];
            for i in 0..h2 {
                let si = kernels::nearest_index(i, h, h2);
                for j in 0..w2 {
                    out.push(plane[si * w + kernels::nearest_index(j, w, w2)]);
                }
            }
        }
        let shape = if self.rank() == 2 {
            vec![h2, w2]
        } else {
            vec![c, h2, w2]
        };
        Ok(Tensor { shape, data: out })
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::from_op(op, self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, op: &'static str, mut f: impl FnMut(f32) -> f32) -> Result<Tensor> {
        Self::from_op(op, self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        self.map("scale", |v| v * factor)
    }

    pub fn silu(&self) -> Result<Tensor> {
        self.map("silu", |v| v * kernels::sigmoid(v))
    }

    /// Add a per-channel bias `[C]` to a `[C, ...]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = self.shape[0];
        if bias.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let plane = self.numel() / c;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias.data[i / plane])
            .collect();
        Self::from_op("add_channel_bias", self.shape.clone(), data)
    }

    /// Linear layer `x · W + b` with `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mut y = self.matmul(weight)?;
        if let Some(b) = bias {
            let out = *y.shape.last().unwrap_or(&0);
            if b.shape != [out] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    left: weight.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            for row in y.data.chunks_mut(out) {
                row.iter_mut().zip(&b.data).for_each(|(v, &bv)| *v += bv);
            }
            y = Self::from_op("linear", y.shape, y.data)?;
        }
        Ok(y)
    }

    /// Group normalization of `[C, H, W]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let stats = group_norm_stats(self, groups, eps)?;
        let c = self.shape[0];
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "group_norm affine",
                left: self.shape.clone(),
                right: gamma.shape.clone(),
            });
        }
        let plane = self.numel() / c;
        let per_group = c / groups;
        let mut out = vec![0f32; self.numel()];
        for ch in 0..c {
            let (mean, inv_std) = stats[ch / per_group];
            for i in 0..plane {
                let idx = ch * plane + i;
                let xhat = (self.data[idx] as f64 - mean) * inv_std;
                out[idx] = (xhat as f32) * gamma.data[ch] + beta.data[ch];
            }
        }
        Self::from_op("group_norm", self.shape.clone(), out)
    }

    /// Sum of all elements (f64 accumulation).
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Bitwise equality of shape and every value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// In-place stable softmax of one slice.
pub(crate) fn softmax_in_place(buf: &mut [f32]) {
    let max = buf.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0f64;
    for v in buf.iter_mut() {
        let e = (*v - max).exp();
        *v = e;
        total += e as f64;
    }
    for v in buf.iter_mut() {
        *v = (*v as f64 / total) as f32;
    }
}

pub(crate) fn conv_geometry(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<ConvGeometry> {
    let (c, h, wd) = match x.shape.as_slice() {
        &[c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: x.shape.clone(),
                reason: "conv2d input must be [C, H, W]".into(),
            })
        }
    };
    let (wc, k) = match w.shape.as_slice() {
        &[_, wc, k1, k2] if k1 == k2 => (wc, k1),
        _ => {
            return Err(Error::InvalidShape {
                shape: w.shape.clone(),
                reason: "conv2d weight must be [O, C, k, k]".into(),
            })
        }
    };
    if wc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            left: x.shape.clone(),
            right: w.shape.clone(),
        });
    }
    if k % 2 == 0 || stride == 0 {
        return Err(Error::InvalidShape {
            shape: w.shape.clone(),
            reason: "conv2d needs an odd kernel and positive stride".into(),
        });
    }
    if h + 2 * padding < k || wd + 2 * padding < k {
        return Err(Error::ShapeMismatch {
            op: "conv2d spatial",
            left: x.shape.clone(),
            right: w.shape.clone(),
        });
    }
    Ok(ConvGeometry {
        channels: c,
        height: h,
        width: wd,
        kernel: k,
        stride,
        padding,
        out_height: (h + 2 * padding - k) / stride + 1,
        out_width: (wd + 2 * padding - k) / stride + 1,
    })
}

/// Per-group `(mean, 1/sqrt(var + eps))` for a `[C, ...]` tensor.
pub(crate) fn group_norm_stats(x: &Tensor, groups: usize, eps: f32) -> Result<Vec<(f64, f64)>> {
    let c = x.shape[0];
    if x.rank() < 2 || groups == 0 || c % groups != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape.clone(),
            reason: format!("group_norm with {groups} groups"),
        });
    }
    let group_len = x.numel() / groups;
    Ok(x.data
        .chunks(group_len)
        .map(|g| {
            let n = g.len() as f64;
            let mean = g.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = g.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            (mean, 1.0 / (var + eps as f64).sqrt())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(i2.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        // 1*3 + 2*4
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_zero() {
        let z = Tensor::zeros(&[2, 3]).unwrap();
        let o = Tensor::ones(&[3, 2]).unwrap();
        assert_eq!(z.matmul(&o).unwrap(), Tensor::zeros(&[2, 2]).unwrap());
    }

    #[test]
    fn matmul_batch_broadcast() {
        let a = Tensor::from_fn(&[2, 2, 3], |i| i as f32).unwrap();
        let b = Tensor::from_fn(&[3, 2], |i| (i % 3) as f32).unwrap();
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        let second = t(&[2, 3], &a.data()[6..]).matmul(&b).unwrap();
        assert_eq!(&y.data()[4..], second.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[2], &[0., 0.]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[1000., 1000.]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        // e^0 / (e^0 + e^ln3) = 1/4
        let s = t(&[2], &[0., 3f32.ln()]).softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6);
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_invalid_axis() {
        let err = t(&[2], &[0., 0.]).softmax(1).unwrap_err();
        assert!(matches!(err, Error::InvalidAxis { axis: 1, rank: 1 }));
    }

    #[test]
    fn softmax_middle_axis() {
        let x = Tensor::from_fn(&[2, 3, 2], |i| (i as f32 * 0.7).sin()).unwrap();
        let s = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let total: f32 = (0..3).map(|j| s.at(&[o, j, i])).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f32).unwrap();
        let w = Tensor::ones(&[1, 1, 1, 1]).unwrap();
        assert_eq!(x.conv2d(&w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_box_sum_center() {
        let x = Tensor::ones(&[1, 4, 4]).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        // interior cells see the full 3x3 neighbourhood, corners only 2x2
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn conv_zero_kernel_and_stride() {
        let x = Tensor::from_fn(&[2, 6, 6], |i| i as f32 * 0.1).unwrap();
        let w = Tensor::zeros(&[3, 2, 3, 3]).unwrap();
        let y = x.conv2d(&w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]).unwrap();
        let w = Tensor::zeros(&[1, 3, 3, 3]).unwrap();
        assert!(matches!(x.conv2d(&w, None, 1, 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn resize_examples() {
        let ones = Tensor::ones(&[2, 2]).unwrap();
        assert_eq!(ones.resize_nearest((4, 4)).unwrap(), Tensor::ones(&[4, 4]).unwrap());

        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let up = eye.resize_nearest((4, 4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                // floor(i * 2 / 4)
                assert_eq!(up.at(&[i, j]), eye.at(&[i / 2, j / 2]));
            }
        }
        assert_eq!(eye.resize_nearest((2, 2)).unwrap(), eye);
        assert!(eye.resize_nearest((0, 2)).is_err());
    }

    #[test]
    fn new_rejects_nonfinite_and_bad_shape() {
        assert!(matches!(Tensor::new(&[1], vec![f32::NAN]), Err(Error::NonFinite { .. })));
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let x = Tensor::from_fn(&[4, 3, 3], |i| (i as f32 * 1.3).cos() * 5.0 + 2.0).unwrap();
        let y = x
            .group_norm(2, &Tensor::ones(&[4]).unwrap(), &Tensor::zeros(&[4]).unwrap(), 1e-5)
            .unwrap();
        for g in y.data().chunks(18) {
            let mean: f32 = g.iter().sum::<f32>() / 18.0;
            let var: f32 = g.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 18.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_and_silu() {
        let x = t(&[1, 2], &[1., -1.]);
        let w = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2], &[0.5, 0.5]);
        assert_eq!(x.linear(&w, Some(&b)).unwrap().data(), &[-1.5, -1.5]);
        let s = t(&[2], &[0., 10.]).silu().unwrap();
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] - 10.0 * kernels::sigmoid(10.0)).abs() < 1e-6);
    }
}

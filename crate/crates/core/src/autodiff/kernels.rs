//! Forward and adjoint kernels shared by the expression graph and the
//! non-recording analysis code paths.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// `c (+)= op(a) * op(b)` for row-major `a` and `b`.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths were checked against the stated extents and
    // strides above, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a)?;
    let (k2, n) = matrix_dims(b)?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Zero padding mode for 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// Pad by `kernel / 2` on every side.
    Same,
    Valid,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Same => kernel / 2,
            Padding::Valid => 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (x, k) else {
            return Err(Error::shape(format!(
                "conv2d expects NCHW input and OCHW kernel, got {x:?} and {k:?}"
            )));
        };
        if c != kc {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {x:?}, kernel {k:?}"
            )));
        }
        let pad = padding.amount(kh.max(kw));
        let ho = conv_output_extent(h, kh, stride, pad);
        let wo = conv_output_extent(w, kw, stride, pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::shape(format!(
                "conv2d kernel {k:?} does not fit input {x:?}"
            )));
        };
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }

    /// Unfolds one image into a `(C*kh*kw) x (ho*wo)` column matrix.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let pix = self.pixels();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * pix..(row + 1) * pix];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if y >= 0
                                && (y as usize) < self.h
                                && x >= 0
                                && (x as usize) < self.w
                            {
                                img[(c * self.h + y as usize) * self.w + x as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let pix = self.pixels();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * pix..(row + 1) * pix];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            if x >= 0 && (x as usize) < self.w {
                                img[(c * self.h + y as usize) * self.w + x as usize] +=
                                    src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, padding)?;
    Ok(conv2d_geom(&g, x.data(), kernel.data()))
}

pub(crate) fn conv2d_geom(g: &ConvGeom, x: &[f64], kernel: &[f64]) -> Tensor {
    let (patch, pix) = (g.patch(), g.pixels());
    let img_len = g.c * g.h * g.w;
    let mut cols = vec![0.0; patch * pix];
    let mut out = vec![0.0; g.n * g.o * pix];
    for n in 0..g.n {
        g.im2col(&x[n * img_len..(n + 1) * img_len], &mut cols);
        gemm(
            g.o,
            patch,
            pix,
            kernel,
            false,
            &cols,
            false,
            &mut out[n * g.o * pix..(n + 1) * g.o * pix],
            false,
        );
    }
    Tensor::from_parts(g.out_shape(), out)
}

/// Adjoints of conv2d with respect to the input and the kernel.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (patch, pix) = (g.patch(), g.pixels());
    let img_len = g.c * g.h * g.w;
    let mut cols = vec![0.0; patch * pix];
    let mut dx = want_input.then(|| vec![0.0; x.len()]);
    let mut dk = want_kernel.then(|| vec![0.0; kernel.len()]);
    for n in 0..g.n {
        let go = &grad_out[n * g.o * pix..(n + 1) * g.o * pix];
        if let Some(dk) = dk.as_mut() {
            g.im2col(&x[n * img_len..(n + 1) * img_len], &mut cols);
            gemm(g.o, pix, patch, go, false, &cols, true, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(patch, g.o, pix, kernel, true, go, false, &mut cols, false);
            g.col2im(&cols, &mut dx[n * img_len..(n + 1) * img_len]);
        }
    }
    (dx, dk)
}

/// Checks that `from` can be expanded to `to` with right-aligned axes,
/// where every source extent is either 1 or equal to the target extent.
pub(crate) fn check_broadcast(from: &[usize], to: &[usize]) -> Result<()> {
    let ok = from.len() <= to.len()
        && from
            .iter()
            .rev()
            .zip(to.iter().rev())
            .all(|(&f, &t)| f == t || f == 1);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(format!("cannot broadcast {from:?} to {to:?}")))
    }
}

/// For each target element, the index of the source element it copies.
fn broadcast_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    let lead = to.len() - from.len();
    let mut src_strides = vec![0usize; to.len()];
    let mut stride = 1;
    for (axis, &extent) in from.iter().enumerate().rev() {
        src_strides[lead + axis] = if extent == 1 { 0 } else { stride };
        stride *= extent;
    }
    let total = numel(to);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for axis in (0..to.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < to[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    map
}

pub fn broadcast(x: &Tensor, to: &[usize]) -> Result<Tensor> {
    check_broadcast(x.shape(), to)?;
    let src = x.data();
    let data = broadcast_map(x.shape(), to)
        .into_iter()
        .map(|i| src[i])
        .collect();
    Ok(Tensor::from_parts(to.to_vec(), data))
}

pub(crate) fn broadcast_backward(from: &[usize], to: &[usize], grad: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; numel(from)];
    for (g, i) in grad.iter().zip(broadcast_map(from, to)) {
        out[i] += g;
    }
    out
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::shape(format!(
            "global average pool expects NCHW, got {:?}",
            x.shape()
        )));
    };
    let hw = h * w;
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], data))
}

pub(crate) fn global_avg_pool_backward(in_shape: &[usize], grad: &[f64]) -> Vec<f64> {
    let hw = in_shape[2] * in_shape[3];
    let scale = 1.0 / hw as f64;
    grad.iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
        .collect()
}

/// Row-wise softmax over the last axis of a matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, cols) = matrix_dims(x)?;
    let mut data = x.data().to_vec();
    for row in data.chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row `logsumexp(logits) - logits[label]`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, cols) = matrix_dims(logits)?;
    check_labels(rows, cols, labels)?;
    let data = logits
        .data()
        .chunks_exact(cols)
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .collect();
    Ok(Tensor::from_parts(vec![rows], data))
}

pub(crate) fn check_labels(rows: usize, cols: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= cols) {
        return Err(Error::shape(format!(
            "label {bad} out of range for {cols} classes"
        )));
    }
    Ok(())
}

/// Converts an index tensor to `usize`s, rejecting non-integral values.
pub(crate) fn tensor_to_indices(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::shape(format!("invalid index value {v}")))
            }
        })
        .collect()
}

//! Value-level kernels shared by the tape and by non-differentiable callers.

use super::tensor::{axis_extents, gemm, Tensor};
use crate::error::{Error, Result};

fn check_axis(x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::arg(format!("axis {axis} out of range for shape {:?}", x.shape())));
    }
    Ok(())
}

/// Softmax along `axis`, with the slice maximum subtracted before exponentiation.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis)?;
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..len {
                let e = (src[idx(i)] - max).exp();
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[idx(i)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Row softmax over the `allowed` entries of a matrix; the rest are exactly 0.
pub fn masked_softmax_rows(x: &Tensor, allowed: &[bool]) -> Result<Tensor> {
    if x.rank() != 2 || allowed.len() != x.numel() {
        return Err(Error::shape(format!(
            "mask of {} entries for matrix {:?}",
            allowed.len(),
            x.shape()
        )));
    }
    let cols = x.cols();
    let mut out = vec![0.0; x.numel()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let mask = &allowed[r * cols..(r + 1) * cols];
        if !mask.iter().any(|&m| m) {
            return Err(Error::arg(format!("attention row {r} has every position masked")));
        }
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite { context: format!("attention scores, row {r}") });
        }
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for ((d, &v), &m) in dst.iter_mut().zip(row).zip(mask) {
            if m {
                *d = (v - max).exp();
                total += *d;
            }
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Normalizes every slice along `axis` to zero mean and unit (population)
/// variance. Returns the output and the per-slice reciprocal std.
pub fn normalize(x: &Tensor, axis: usize, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    check_axis(x, axis)?;
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + j;
            let mean = (0..len).map(|i| src[idx(i)]).sum::<f64>() / len as f64;
            let var = (0..len).map(|i| (src[idx(i)] - mean).powi(2)).sum::<f64>() / len as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[o * inner + j] = r;
            for i in 0..len {
                out[idx(i)] = (src[idx(i)] - mean) * r;
            }
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), rstd))
}

/// Layer normalization along `axis` followed by a per-position affine map.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    check_axis(x, axis)?;
    let len = x.shape()[axis];
    if gain.numel() != len || bias.numel() != len {
        return Err(Error::shape(format!(
            "gain/bias of length {}/{} for axis length {len}",
            gain.numel(),
            bias.numel()
        )));
    }
    let (mut out, _) = normalize(x, axis, eps)?;
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    for o in 0..outer {
        for i in 0..len {
            let base = (o * len + i) * inner;
            for v in &mut out.data_mut()[base..base + inner] {
                *v = *v * gain.data()[i] + bias.data()[i];
            }
        }
    }
    Ok(out)
}

/// Same-padded 1-D convolution that also returns the im2col buffer used for
/// the backward pass.
pub(crate) fn conv1d_with_cols(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if x.rank() != 2 || kernel.rank() != 3 {
        return Err(Error::shape(format!("conv1d input {:?} kernel {:?}", x.shape(), kernel.shape())));
    }
    let (t, cin) = (x.rows(), x.cols());
    let (ksize, kin, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if ksize % 2 == 0 {
        return Err(Error::arg(format!("conv1d kernel size {ksize} must be odd")));
    }
    if kin != cin || bias.numel() != cout {
        return Err(Error::shape(format!(
            "conv1d input {:?} kernel {:?} bias {:?}",
            x.shape(),
            kernel.shape(),
            bias.shape()
        )));
    }
    let half = ksize / 2;
    let kc = ksize * cin;
    let mut cols = vec![0.0; t * kc];
    for r in 0..t {
        for k in 0..ksize {
            let src = r + k;
            if src < half || src - half >= t {
                continue;
            }
            let src = src - half;
            cols[r * kc + k * cin..r * kc + (k + 1) * cin].copy_from_slice(x.row(src));
        }
    }
    let mut out = Vec::with_capacity(t * cout);
    for _ in 0..t {
        out.extend_from_slice(bias.data());
    }
    gemm(t, kc, cout, &cols, (kc, 1), kernel.data(), (cout, 1), 1.0, &mut out);
    Ok((Tensor::from_parts(vec![t, cout], out), cols))
}

/// Same-padded 1-D convolution: `x: [T×C_in]`, `kernel: [K×C_in×C_out]`.
pub fn conv1d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    conv1d_with_cols(x, kernel, bias).map(|(out, _)| out)
}

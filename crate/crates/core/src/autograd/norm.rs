//! Normalization kernels over 2-D token matrices.

use crate::tensor::{lit, Float, Tensor};

/// Per-row normalization without affine terms. Returns output and per-row 1/sigma.
pub(crate) fn layer_norm_fwd<T: Float>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let (n, m) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, m]);
    let mut rstd = Vec::with_capacity(n);
    let inv_m = T::one() / lit::<T>(m as f64);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_m;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
        let r = T::one() / (var + eps).sqrt();
        let o = &mut out.data_mut()[i * m..(i + 1) * m];
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = (v - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}

pub(crate) fn layer_norm_bwd<T: Float>(y: &Tensor<T>, rstd: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let (n, m) = (y.rows(), y.cols());
    let inv_m = T::one() / lit::<T>(m as f64);
    let mut dx = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let yr = y.row(i);
        let dr = dy.row(i);
        let mean_dy = dr.iter().copied().sum::<T>() * inv_m;
        let mean_dyy = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_m;
        let o = &mut dx.data_mut()[i * m..(i + 1) * m];
        for j in 0..m {
            o[j] = rstd[i] * (dr[j] - mean_dy - yr[j] * mean_dyy);
        }
    }
    dx
}

/// Group normalization of an `L x d` sequence: channels are split into
/// `groups` contiguous groups and each group is normalized over the first
/// `valid` rows and its channels. Rows past `valid` (padding) are normalized
/// with the same statistics but do not contribute to them.
pub(crate) fn group_norm_fwd<T: Float>(
    x: &Tensor<T>,
    groups: usize,
    valid: usize,
    eps: T,
) -> (Tensor<T>, Vec<T>) {
    let (n, m) = (x.rows(), x.cols());
    let cpg = m / groups;
    let count = lit::<T>((valid * cpg) as f64);
    let mut out = Tensor::zeros(&[n, m]);
    let mut rstd = Vec::with_capacity(groups);
    let xd = x.data();
    for g in 0..groups {
        let cols = g * cpg..(g + 1) * cpg;
        let mut sum = T::zero();
        for i in 0..valid {
            for j in cols.clone() {
                sum += xd[i * m + j];
            }
        }
        let mean = sum / count;
        let mut var = T::zero();
        for i in 0..valid {
            for j in cols.clone() {
                let d = xd[i * m + j] - mean;
                var += d * d;
            }
        }
        let r = T::one() / (var / count + eps).sqrt();
        let od = out.data_mut();
        for i in 0..n {
            for j in cols.clone() {
                od[i * m + j] = (xd[i * m + j] - mean) * r;
            }
        }
        rstd.push(r);
    }
    (out, rstd)
}

pub(crate) fn group_norm_bwd<T: Float>(
    y: &Tensor<T>,
    rstd: &[T],
    groups: usize,
    valid: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (n, m) = (y.rows(), y.cols());
    let cpg = m / groups;
    let count = lit::<T>((valid * cpg) as f64);
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = Tensor::zeros(&[n, m]);
    let dxd = dx.data_mut();
    for g in 0..groups {
        let cols = g * cpg..(g + 1) * cpg;
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for i in 0..n {
            for j in cols.clone() {
                s1 += gd[i * m + j];
                s2 += gd[i * m + j] * yd[i * m + j];
            }
        }
        let r = rstd[g];
        for i in 0..n {
            for j in cols.clone() {
                let k = i * m + j;
                dxd[k] = if i < valid {
                    r * (gd[k] - (s1 + yd[k] * s2) / count)
                } else {
                    r * gd[k]
                };
            }
        }
    }
    dx
}

/// Column means over the first `valid` rows, as a `1 x d` tensor.
pub(crate) fn mean_rows_fwd<T: Float>(x: &Tensor<T>, valid: usize) -> Tensor<T> {
    let m = x.cols();
    let mut out = Tensor::zeros(&[1, m]);
    for i in 0..valid {
        for (o, &v) in out.data_mut().iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    out.scale_assign(T::one() / lit::<T>(valid as f64));
    out
}

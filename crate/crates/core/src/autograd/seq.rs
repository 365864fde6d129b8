//! Kernels acting along the temporal axis of `L x d` sequences.

use crate::tensor::{lit, Float, Tensor};

pub(crate) fn max_pool_fwd<T: Float>(x: &Tensor<T>, k: usize) -> (Tensor<T>, Vec<usize>) {
    let (l, d) = (x.rows(), x.cols());
    let lo = l / k;
    let mut out = Tensor::zeros(&[lo, d]);
    let mut arg = vec![0usize; lo * d];
    let xd = x.data();
    for t in 0..lo {
        for c in 0..d {
            let mut best = t * k;
            for s in t * k + 1..t * k + k {
                if xd[s * d + c] > xd[best * d + c] {
                    best = s;
                }
            }
            out.data_mut()[t * d + c] = xd[best * d + c];
            arg[t * d + c] = best;
        }
    }
    (out, arg)
}

/// Endpoint-aligned linear interpolation weights for resizing `n` rows to
/// `m`: output row `i` reads `(1 - f) * x[i0] + f * x[i0 + 1]`.
pub(crate) fn interp_taps(n: usize, m: usize) -> Vec<(usize, f64)> {
    (0..m)
        .map(|i| {
            if n == 1 || m == 1 {
                return (0, 0.0);
            }
            let num = i * (n - 1);
            let den = m - 1;
            let i0 = num / den;
            let rem = num % den;
            if i0 >= n - 1 {
                (n - 2, 1.0)
            } else {
                (i0, rem as f64 / den as f64)
            }
        })
        .collect()
}

pub(crate) fn upsample_fwd<T: Float>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[m, d]);
    for (i, (i0, f)) in interp_taps(n, m).into_iter().enumerate() {
        let f = lit::<T>(f);
        let a = x.row(i0);
        let o = &mut out.data_mut()[i * d..(i + 1) * d];
        if f == T::zero() {
            o.copy_from_slice(a);
        } else {
            let b = x.row(i0 + 1);
            for c in 0..d {
                o[c] = (T::one() - f) * a[c] + f * b[c];
            }
        }
    }
    out
}

pub(crate) fn upsample_bwd<T: Float>(n: usize, dy: &Tensor<T>) -> Tensor<T> {
    let (m, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    for (i, (i0, f)) in interp_taps(n, m).into_iter().enumerate() {
        let f = lit::<T>(f);
        let g = dy.row(i).to_vec();
        let dd = dx.data_mut();
        for c in 0..d {
            dd[i0 * d + c] += (T::one() - f) * g[c];
            if f != T::zero() {
                dd[(i0 + 1) * d + c] += f * g[c];
            }
        }
    }
    dx
}

/// Cached per-step activations of a GRU scan.
#[derive(Clone, Debug)]
pub(crate) struct GruCache<T> {
    pub r: Vec<T>,
    pub z: Vec<T>,
    pub n: Vec<T>,
    pub hn: Vec<T>,
    pub h_prev: Vec<T>,
}

#[inline]
fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Single-direction GRU recurrence over precomputed input gates.
///
/// `xg` is `L x 3h` holding the input contributions for the (reset,
/// update, candidate) gates, `u` is `h x 3h`, `bh` has `3h` entries.
/// Output is `L x h`, indexed by time regardless of direction.
pub(crate) fn gru_fwd<T: Float>(
    xg: &Tensor<T>,
    u: &Tensor<T>,
    bh: &Tensor<T>,
    reverse: bool,
) -> (Tensor<T>, GruCache<T>) {
    let l = xg.rows();
    let h = u.rows();
    let mut out = Tensor::zeros(&[l, h]);
    let mut cache = GruCache {
        r: vec![T::zero(); l * h],
        z: vec![T::zero(); l * h],
        n: vec![T::zero(); l * h],
        hn: vec![T::zero(); l * h],
        h_prev: vec![T::zero(); l * h],
    };
    let mut state = vec![T::zero(); h];
    let mut hu = vec![T::zero(); 3 * h];
    for step in 0..l {
        let t = if reverse { l - 1 - step } else { step };
        hu.copy_from_slice(bh.data());
        T::gemm(
            1,
            h,
            3 * h,
            T::one(),
            (&state, h as isize, 1),
            (u.data(), 3 * h as isize, 1),
            T::one(),
            (&mut hu, 3 * h as isize, 1),
        );
        let xr = xg.row(t);
        for j in 0..h {
            let r = sigmoid(xr[j] + hu[j]);
            let z = sigmoid(xr[h + j] + hu[h + j]);
            let n = (xr[2 * h + j] + r * hu[2 * h + j]).tanh();
            let k = t * h + j;
            cache.r[k] = r;
            cache.z[k] = z;
            cache.n[k] = n;
            cache.hn[k] = hu[2 * h + j];
            cache.h_prev[k] = state[j];
            state[j] = (T::one() - z) * n + z * state[j];
        }
        out.data_mut()[t * h..(t + 1) * h].copy_from_slice(&state);
    }
    (out, cache)
}

/// Returns `(dxg, du, dbh)`.
pub(crate) fn gru_bwd<T: Float>(
    u: &Tensor<T>,
    cache: &GruCache<T>,
    reverse: bool,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let l = dy.rows();
    let h = u.rows();
    let mut dxg = Tensor::zeros(&[l, 3 * h]);
    let mut du = Tensor::zeros(&[h, 3 * h]);
    let mut dbh = Tensor::zeros(&[3 * h]);
    let mut carry = vec![T::zero(); h];
    let mut dhu = vec![T::zero(); 3 * h];
    for step in (0..l).rev() {
        let t = if reverse { l - 1 - step } else { step };
        let mut dh_prev = vec![T::zero(); h];
        for j in 0..h {
            let k = t * h + j;
            let dh = dy.data()[k] + carry[j];
            let (r, z, n) = (cache.r[k], cache.z[k], cache.n[k]);
            let dn = dh * (T::one() - z);
            let dz = dh * (cache.h_prev[k] - n);
            dh_prev[j] = dh * z;
            let dan = dn * (T::one() - n * n);
            let dr = dan * cache.hn[k];
            let dar = dr * r * (T::one() - r);
            let daz = dz * z * (T::one() - z);
            let row = &mut dxg.data_mut()[t * 3 * h..(t + 1) * 3 * h];
            row[j] = dar;
            row[h + j] = daz;
            row[2 * h + j] = dan;
            dhu[j] = dar;
            dhu[h + j] = daz;
            dhu[2 * h + j] = dan * r;
        }
        for (acc, &v) in dbh.data_mut().iter_mut().zip(&dhu) {
            *acc += v;
        }
        let hp = &cache.h_prev[t * h..(t + 1) * h];
        // du += h_prev^T dhu
        T::gemm(
            h,
            1,
            3 * h,
            T::one(),
            (hp, 1, 1),
            (&dhu, 3 * h as isize, 1),
            T::one(),
            (du.data_mut(), 3 * h as isize, 1),
        );
        // dh_prev += dhu u^T
        T::gemm(
            1,
            3 * h,
            h,
            T::one(),
            (&dhu, 3 * h as isize, 1),
            (u.data(), 1, 3 * h as isize),
            T::one(),
            (&mut dh_prev, h as isize, 1),
        );
        carry = dh_prev;
    }
    (dxg, du, dbh)
}

//! Convolution kernels: 2-D spatial (im2col + gemm) and depthwise temporal.

use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Rows are output locations `(n, oy, ox)`, columns are `(c, ky, kx)`.
fn im2col<T: Float>(x: &[T], g: &Conv2dGeom) -> Vec<T> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.k());
    let mut cols = vec![T::zero(); g.n * oh * ow * k];
    let mut r = 0;
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[r * k..(r + 1) * k];
                let mut idx = 0;
                for c in 0..g.c {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                row[idx] = plane[iy as usize * g.w + ix as usize];
                            }
                            idx += 1;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &Conv2dGeom) -> Vec<T> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.k());
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    let mut r = 0;
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols[r * k..(r + 1) * k];
                let mut idx = 0;
                for c in 0..g.c {
                    let base = (n * g.c + c) * g.h * g.w;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                x[base + iy as usize * g.w + ix as usize] += row[idx];
                            }
                            idx += 1;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    x
}

/// Returns the output `[n, o, oh, ow]` and the cached column matrix.
pub(crate) fn conv2d_fwd<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: &Conv2dGeom,
) -> (Tensor<T>, Vec<T>) {
    let cols = im2col(x.data(), g);
    let (p, k, o) = (g.p(), g.k(), g.o);
    let rows = g.n * p;
    // out_t[(n,p), o] = cols[(n,p), :] . w[o, :]
    let mut out_t = vec![T::zero(); rows * o];
    T::gemm(
        rows,
        k,
        o,
        T::one(),
        (&cols, k as isize, 1),
        (w.data(), 1, k as isize),
        T::zero(),
        (&mut out_t, o as isize, 1),
    );
    let mut out = Tensor::zeros(&[g.n, o, g.out_h(), g.out_w()]);
    let od = out.data_mut();
    let bd = b.data();
    for n in 0..g.n {
        for pi in 0..p {
            let src = &out_t[(n * p + pi) * o..(n * p + pi + 1) * o];
            for oc in 0..o {
                od[(n * o + oc) * p + pi] = src[oc] + bd[oc];
            }
        }
    }
    (out, cols)
}

/// Gradients `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub(crate) fn conv2d_bwd<T: Float>(
    cols: &[T],
    w: &Tensor<T>,
    g: &Conv2dGeom,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (p, k, o) = (g.p(), g.k(), g.o);
    let rows = g.n * p;
    let dyd = dy.data();
    let mut dy_t = vec![T::zero(); rows * o];
    let mut db = Tensor::zeros(&[o]);
    for n in 0..g.n {
        for oc in 0..o {
            let src = &dyd[(n * o + oc) * p..(n * o + oc + 1) * p];
            let mut s = T::zero();
            for (pi, &v) in src.iter().enumerate() {
                dy_t[(n * p + pi) * o + oc] = v;
                s += v;
            }
            db.data_mut()[oc] += s;
        }
    }
    // dw[o, k] = sum_rows dy_t[row, o] * cols[row, k]
    let mut dw = Tensor::zeros(w.shape());
    T::gemm(
        o,
        rows,
        k,
        T::one(),
        (&dy_t, 1, o as isize),
        (cols, k as isize, 1),
        T::zero(),
        (dw.data_mut(), k as isize, 1),
    );
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); rows * k];
        T::gemm(
            rows,
            o,
            k,
            T::one(),
            (&dy_t, o as isize, 1),
            (w.data(), k as isize, 1),
            T::zero(),
            (&mut dcols, k as isize, 1),
        );
        Tensor::from_vec(&[g.n, g.c, g.h, g.w], col2im(&dcols, g)).expect("geometry")
    });
    (dx, dw, db)
}

/// Source row for tap `j` of a centered kernel at output row `t`, with
/// replicate (edge) padding.
#[inline]
fn tap(t: usize, j: usize, ks: usize, dilation: usize, len: usize) -> usize {
    let off = (j as isize - (ks as isize - 1) / 2) * dilation as isize;
    (t as isize + off).clamp(0, len as isize - 1) as usize
}

/// Depthwise temporal convolution on `L x d` with weights `d x ks`, "same"
/// output length and replicate padding.
pub(crate) fn dwconv1d_fwd<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dilation: usize,
) -> Tensor<T> {
    let (l, d) = (x.rows(), x.cols());
    let ks = w.cols();
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = Tensor::zeros(&[l, d]);
    let od = out.data_mut();
    for t in 0..l {
        od[t * d..(t + 1) * d].copy_from_slice(bd);
        for j in 0..ks {
            let src = tap(t, j, ks, dilation, l);
            let xr = &xd[src * d..(src + 1) * d];
            let orow = &mut od[t * d..(t + 1) * d];
            for c in 0..d {
                orow[c] += wd[c * ks + j] * xr[c];
            }
        }
    }
    out
}

pub(crate) fn dwconv1d_bwd<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dilation: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (l, d) = (x.rows(), x.cols());
    let ks = w.cols();
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut dx = Tensor::zeros(&[l, d]);
    let mut dw = Tensor::zeros(&[d, ks]);
    let mut db = Tensor::zeros(&[d]);
    for t in 0..l {
        let g = &gd[t * d..(t + 1) * d];
        for (acc, &v) in db.data_mut().iter_mut().zip(g) {
            *acc += v;
        }
        for j in 0..ks {
            let src = tap(t, j, ks, dilation, l);
            for c in 0..d {
                dw.data_mut()[c * ks + j] += g[c] * xd[src * d + c];
                dx.data_mut()[src * d + c] += g[c] * wd[c * ks + j];
            }
        }
    }
    (dx, dw, db)
}

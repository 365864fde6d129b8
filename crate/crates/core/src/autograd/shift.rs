//! Gated temporal channel shift (GSM / GSF style) on `[L, C, h, w]` maps.
//!
//! The first `n` channels are shifted: channels `0..ceil(n/2)` move forward in
//! time (`t -> t + 1`), the rest of the `n` move backward (`t -> t - 1`); clip
//! boundaries are zero-padded. Each direction has a per-pixel sigmoid gate
//! computed from the `n` shifted channels. For a shifted channel `c`:
//!
//! ```text
//! u = g * x                       gated stream
//! s = shift(u)                    shifted gated stream
//! out = (1 - g) * x + f_c * s + (1 - f_c) * u  =  x + f_c * (s - u)
//! ```
//!
//! GSM fixes `f_c = 1`; GSF learns `f_c = sigmoid(theta_c)` per channel.

use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftGeom {
    pub frames: usize,
    pub channels: usize,
    pub pixels: usize,
    /// Number of shifted channels (split evenly between the two directions).
    pub shifted: usize,
    pub fuse: bool,
    /// Replace the computed gate by a constant (tests and probes).
    pub gate_override: Option<f64>,
    /// Replace the computed fusion weight by a constant.
    pub fuse_override: Option<f64>,
}

impl ShiftGeom {
    pub(crate) fn forward_channels(&self) -> usize {
        self.shifted.div_ceil(2)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ShiftCache<T> {
    /// Gates `[L, 2, P]`.
    gates: Vec<T>,
    /// Fusion weights per shifted channel.
    fuse: Vec<T>,
    /// Gated streams `u` for the shifted channels, `[L, n, P]`.
    gated: Vec<T>,
}

#[inline]
fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `gate_w` is `[2, n]`, `gate_b` is `[2]`, `fuse_logit` is `[n]`.
pub(crate) fn gate_shift_fwd<T: Float>(
    x: &Tensor<T>,
    gate_w: &Tensor<T>,
    gate_b: &Tensor<T>,
    fuse_logit: &Tensor<T>,
    g: &ShiftGeom,
) -> (Tensor<T>, ShiftCache<T>) {
    let (l, c, p, n) = (g.frames, g.channels, g.pixels, g.shifted);
    let nf = g.forward_channels();
    let xd = x.data();
    let (wd, bd) = (gate_w.data(), gate_b.data());
    let mut gates = vec![T::zero(); l * 2 * p];
    for t in 0..l {
        for dir in 0..2 {
            let gslot = &mut gates[(t * 2 + dir) * p..(t * 2 + dir + 1) * p];
            match g.gate_override {
                Some(v) => gslot.fill(T::from_f64_lossy(v)),
                None => {
                    gslot.fill(bd[dir]);
                    for ch in 0..n {
                        let wv = wd[dir * n + ch];
                        let plane = &xd[(t * c + ch) * p..(t * c + ch + 1) * p];
                        for (a, &v) in gslot.iter_mut().zip(plane) {
                            *a += wv * v;
                        }
                    }
                    for a in gslot.iter_mut() {
                        *a = sigmoid(*a);
                    }
                }
            }
        }
    }
    let fuse: Vec<T> = (0..n)
        .map(|ch| match (g.fuse_override, g.fuse) {
            (Some(v), _) => T::from_f64_lossy(v),
            (None, true) => sigmoid(fuse_logit.data()[ch]),
            (None, false) => T::one(),
        })
        .collect();
    let mut gated = vec![T::zero(); l * n * p];
    for t in 0..l {
        for ch in 0..n {
            let dir = usize::from(ch >= nf);
            let gs = &gates[(t * 2 + dir) * p..(t * 2 + dir + 1) * p];
            let plane = &xd[(t * c + ch) * p..(t * c + ch + 1) * p];
            let dst = &mut gated[(t * n + ch) * p..(t * n + ch + 1) * p];
            for i in 0..p {
                dst[i] = gs[i] * plane[i];
            }
        }
    }
    let mut out = x.clone();
    let od = out.data_mut();
    for t in 0..l {
        for ch in 0..n {
            let src_t = if ch < nf {
                t.checked_sub(1)
            } else {
                (t + 1 < l).then_some(t + 1)
            };
            let f = fuse[ch];
            for i in 0..p {
                let u = gated[(t * n + ch) * p + i];
                let s = src_t.map_or(T::zero(), |st| gated[(st * n + ch) * p + i]);
                od[(t * c + ch) * p + i] += f * (s - u);
            }
        }
    }
    (out, ShiftCache { gates, fuse, gated })
}

/// Returns `(dx, d_gate_w, d_gate_b, d_fuse_logit)`.
pub(crate) fn gate_shift_bwd<T: Float>(
    x: &Tensor<T>,
    gate_w: &Tensor<T>,
    cache: &ShiftCache<T>,
    g: &ShiftGeom,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let (l, c, p, n) = (g.frames, g.channels, g.pixels, g.shifted);
    let nf = g.forward_channels();
    let (xd, gd) = (x.data(), dy.data());
    let mut dx = dy.clone();
    let mut dfuse = Tensor::zeros(&[n]);
    // Gradient w.r.t. the gated stream u.
    let mut du = vec![T::zero(); l * n * p];
    for t in 0..l {
        for ch in 0..n {
            let f = cache.fuse[ch];
            let src_t = if ch < nf {
                t.checked_sub(1)
            } else {
                (t + 1 < l).then_some(t + 1)
            };
            let mut acc_f = T::zero();
            for i in 0..p {
                let go = gd[(t * c + ch) * p + i];
                let u = cache.gated[(t * n + ch) * p + i];
                du[(t * n + ch) * p + i] -= f * go;
                let s = match src_t {
                    Some(st) => {
                        du[(st * n + ch) * p + i] += f * go;
                        cache.gated[(st * n + ch) * p + i]
                    }
                    None => T::zero(),
                };
                acc_f += go * (s - u);
            }
            if g.fuse && g.fuse_override.is_none() {
                dfuse.data_mut()[ch] += acc_f * f * (T::one() - f);
            }
        }
    }
    let learn_gate = g.gate_override.is_none();
    let mut dgate_w = Tensor::zeros(&[2, n]);
    let mut dgate_b = Tensor::zeros(&[2]);
    let mut da = vec![T::zero(); 2 * p];
    let dxd = dx.data_mut();
    for t in 0..l {
        da.fill(T::zero());
        for ch in 0..n {
            let dir = usize::from(ch >= nf);
            let gs = &cache.gates[(t * 2 + dir) * p..(t * 2 + dir + 1) * p];
            for i in 0..p {
                let k = (t * c + ch) * p + i;
                let dui = du[(t * n + ch) * p + i];
                dxd[k] += dui * gs[i];
                da[dir * p + i] += dui * xd[k];
            }
        }
        if !learn_gate {
            continue;
        }
        for dir in 0..2 {
            let gs = &cache.gates[(t * 2 + dir) * p..(t * 2 + dir + 1) * p];
            for i in 0..p {
                da[dir * p + i] *= gs[i] * (T::one() - gs[i]);
            }
            let dslot = &da[dir * p..(dir + 1) * p];
            dgate_b.data_mut()[dir] += dslot.iter().copied().sum::<T>();
            for ch in 0..n {
                let wv = gate_w.data()[dir * n + ch];
                let base = (t * c + ch) * p;
                let mut acc = T::zero();
                for i in 0..p {
                    acc += dslot[i] * xd[base + i];
                    dxd[base + i] += dslot[i] * wv;
                }
                dgate_w.data_mut()[dir * n + ch] += acc;
            }
        }
    }
    (dx, dgate_w, dgate_b, dfuse)
}

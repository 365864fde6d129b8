//! Small parameterized layers shared by the backbone and temporal stacks.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{normal, uniform, ParamId, ParamStore};
use crate::tensor::{lit, Float, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Float> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Float> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = uniform(shape, bound, self.rng);
        self.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = normal(shape, std, self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, T::one()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = b.sub(name);
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: s.uniform("w", &[fan_in, fan_out], bound),
            b: s.uniform("b", &[fan_out], bound),
        }
    }

    pub fn zeroed<T: Float>(b: &mut Builder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            w: s.zeros("w", &[fan_in, fan_out]),
            b: s.zeros("b", &[fan_out]),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

/// Per-token layer norm with affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, d: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.ones("gamma", &[d]),
            beta: s.zeros("beta", &[d]),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let y = g.layer_norm(x, lit(LN_EPS));
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        let y = g.mul_row(y, ga);
        g.add_row(y, be)
    }
}

/// Group norm over (time, channels-in-group) with the first `valid` rows
/// providing the statistics.
#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, d: usize, groups: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            groups,
            gamma: s.ones("gamma", &[d]),
            beta: s.zeros("beta", &[d]),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, valid: usize) -> Var {
        let y = g.group_norm(x, self.groups, valid, lit(LN_EPS));
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        let y = g.mul_row(y, ga);
        g.add_row(y, be)
    }
}

/// Depthwise temporal convolution `[L, d]`, replicate-padded.
#[derive(Clone, Copy, Debug)]
pub struct DwConv {
    pub w: ParamId,
    pub b: ParamId,
    pub dilation: usize,
}

impl DwConv {
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        name: &str,
        d: usize,
        ks: usize,
        dilation: usize,
    ) -> Self {
        let mut s = b.sub(name);
        let bound = 1.0 / (ks as f64).sqrt();
        Self {
            w: s.uniform("w", &[d, ks], bound),
            b: s.zeros("b", &[d]),
            dilation,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.dwconv1d(x, w, b, self.dilation)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal init scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let mut s = b.sub(name);
        let std = gain * (2.0 / (c_in * k * k) as f64).sqrt();
        Self {
            w: s.normal("w", &[c_out, c_in, k, k], std),
            b: s.zeros("b", &[c_out]),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, d: usize, hidden: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            fc1: Linear::new(&mut s, "fc1", d, hidden),
            fc2: Linear::new(&mut s, "fc2", hidden, d),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Parameter count of a [`Linear`].
pub fn linear_params(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

/// Divisor of `d` closest to 8 (ties go to the smaller one).
pub fn default_groups(d: usize) -> usize {
    (1..=d)
        .filter(|g| d % g == 0)
        .min_by_key(|&g| ((g as i64 - 8).abs(), g))
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_defaults() {
        assert_eq!(default_groups(32), 8);
        assert_eq!(default_groups(368), 8);
        assert_eq!(default_groups(6), 6);
        assert_eq!(default_groups(30), 6);
        assert_eq!(default_groups(7), 7);
    }

    #[test]
    fn builder_prefixes_names() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let mut enc = b.sub("enc");
        let lin = Linear::new(&mut enc.sub("0"), "fc", 3, 2);
        assert_eq!(store.name(lin.w), "enc.0.fc.w");
        assert_eq!(store.get(lin.b).shape(), &[2]);
    }
}

//! Temporal layers on `[L, d]` token sequences: learnable positions, SGP and
//! SGP-Mixer layers, decoder skip variants and max-pooling.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, Error, Result};
use crate::nn::{default_groups, Builder, DwConv, Ffn, GroupNorm, LayerNorm, Linear};
use crate::params::ParamId;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgpCfg {
    pub d: usize,
    /// Window kernel size (odd, >= 3).
    pub ks: usize,
    /// Dilation of the widened window path.
    pub r: usize,
    /// Group-norm groups; `None` picks the divisor of `d` closest to 8.
    pub group_norm_groups: Option<usize>,
    pub ffn_ratio: usize,
}

impl Default for SgpCfg {
    fn default() -> Self {
        Self {
            d: 32,
            ks: 7,
            r: 4,
            group_norm_groups: None,
            ffn_ratio: 4,
        }
    }
}

impl SgpCfg {
    pub fn groups(&self) -> usize {
        self.group_norm_groups.unwrap_or_else(|| default_groups(self.d))
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks < 3 || self.ks % 2 == 0 {
            return config_err(format!("sgp.ks must be odd and >= 3, got {}", self.ks));
        }
        if self.r < 1 {
            return config_err("sgp.r must be >= 1");
        }
        if self.d == 0 || self.ffn_ratio == 0 {
            return config_err("sgp.d and sgp.ffn_ratio must be positive");
        }
        let g = self.groups();
        if g == 0 || self.d % g != 0 {
            return config_err(format!(
                "sgp.group_norm_groups {g} must divide d = {}",
                self.d
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipVariant {
    None,
    Sum,
    Concat,
    SgpMixerSum,
    SgpMixer,
}

impl SkipVariant {
    pub const ALL: [SkipVariant; 5] = [
        SkipVariant::None,
        SkipVariant::Sum,
        SkipVariant::Concat,
        SkipVariant::SgpMixerSum,
        SkipVariant::SgpMixer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SkipVariant::None => "none",
            SkipVariant::Sum => "sum",
            SkipVariant::Concat => "concat",
            SkipVariant::SgpMixerSum => "sgp_mixer_sum",
            SkipVariant::SgpMixer => "sgp_mixer",
        }
    }
}

/// Learnable `L_max x d` position table.
#[derive(Clone, Copy, Debug)]
pub struct PositionalTable {
    pub table: ParamId,
    pub l_max: usize,
}

impl PositionalTable {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, l_max: usize, d: usize) -> Self {
        Self {
            table: b.normal(name, &[l_max, d], 0.02),
            l_max,
        }
    }
}

/// `out[l] = tokens[l] + table[l]`.
pub fn add_positional<T: Float>(g: &mut Graph<'_, T>, x: Var, pos: &PositionalTable) -> Result<Var> {
    let l = g.shape(x)[0];
    if l > pos.l_max {
        return config_err(format!(
            "sequence length {l} exceeds the positional table length {}",
            pos.l_max
        ));
    }
    let t = g.param(pos.table);
    let rows = g.gather_rows(t, (0..l).collect());
    Ok(g.add(x, rows))
}

/// Element-wise max over non-overlapping windows of `k` tokens.
pub fn temporal_pool<T: Float>(g: &mut Graph<'_, T>, x: Var, k: usize) -> Result<Var> {
    let l = g.shape(x)[0];
    if k == 0 || l % k != 0 {
        return Err(Error::Contract(format!(
            "temporal_pool: length {l} is not divisible by {k}"
        )));
    }
    if k == 1 {
        return Ok(x);
    }
    Ok(g.max_pool(x, k))
}

/// Pads `x` to a multiple of `k` by repeating the last token.
pub fn pad_to_multiple<T: Float>(g: &mut Graph<'_, T>, x: Var, k: usize) -> Var {
    let l = g.shape(x)[0];
    let target = l.div_ceil(k) * k;
    if target == l {
        return x;
    }
    let idx = (0..target).map(|i| i.min(l - 1)).collect();
    g.gather_rows(x, idx)
}

/// First `len` tokens of `x`.
pub fn crop<T: Float>(g: &mut Graph<'_, T>, x: Var, len: usize) -> Var {
    if g.shape(x)[0] == len {
        return x;
    }
    g.gather_rows(x, (0..len).collect())
}

/// Instant-level branch: `fc(x) * sigmoid(fc_g(mean(x)))`.
#[derive(Clone, Copy, Debug)]
struct Instant {
    fc: Linear,
    gate: Linear,
}

impl Instant {
    fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, d: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            fc: Linear::new(&mut s, "fc", d, d),
            gate: Linear::new(&mut s, "gate", d, d),
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, valid: usize) -> Var {
        let mean = g.mean_rows(x, valid);
        let gate = self.gate.forward(g, mean);
        let gate = g.sigmoid(gate);
        let h = self.fc.forward(g, x);
        g.mul_row(h, gate)
    }
}

/// Window-level path `conv_ks(x) + conv_ks,dil=r(x)` (gate applied by caller).
#[derive(Clone, Copy, Debug)]
struct Window {
    conv_w: DwConv,
    conv_kw: DwConv,
}

impl Window {
    fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, cfg: &SgpCfg) -> Self {
        let mut s = b.sub(name);
        Self {
            conv_w: DwConv::new(&mut s, "conv_w", cfg.d, cfg.ks, 1),
            conv_kw: DwConv::new(&mut s, "conv_kw", cfg.d, cfg.ks, cfg.r),
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let a = self.conv_w.forward(g, x);
        let b = self.conv_kw.forward(g, x);
        g.add(a, b)
    }
}

fn gate_or_const<T: Float>(g: &mut Graph<'_, T>, psi: &DwConv, x: Var, fixed: Option<f64>) -> Var {
    match fixed {
        Some(v) => {
            let shape = g.shape(x).to_vec();
            g.constant(Tensor::full(&shape, T::from_f64_lossy(v)))
        }
        None => psi.forward(g, x),
    }
}

/// `y = x + SGP(GN(x)); out = y + FFN(LN(y))`.
#[derive(Clone, Copy, Debug)]
pub struct SgpLayer {
    gn: GroupNorm,
    instant: Instant,
    window: Window,
    psi: DwConv,
    ln: LayerNorm,
    ffn: Ffn,
}

impl SgpLayer {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, cfg: &SgpCfg) -> Self {
        let mut s = b.sub(name);
        let d = cfg.d;
        Self {
            gn: GroupNorm::new(&mut s, "gn", d, cfg.groups()),
            instant: Instant::new(&mut s, "instant", d),
            window: Window::new(&mut s, "window", cfg),
            psi: DwConv::new(&mut s, "psi", d, cfg.ks, 1),
            ln: LayerNorm::new(&mut s, "ln", d),
            ffn: Ffn::new(&mut s, "ffn", d, d * cfg.ffn_ratio),
        }
    }

    /// `valid` rows (from the top) are real tokens; the rest is padding that
    /// is excluded from normalization and mean statistics.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, valid: usize) -> Var {
        let h = self.gn.forward(g, x, valid);
        let inst = self.instant.forward(g, h, valid);
        let win = self.window.forward(g, h);
        let psi = self.psi.forward(g, h);
        let win = g.mul(win, psi);
        let m = g.add(inst, win);
        let m = g.add(m, h);
        let y = g.add(x, m);
        let n = self.ln.forward(g, y);
        let f = self.ffn.forward(g, n);
        g.add(y, f)
    }
}

/// Two-scale fusion layer. `aggregate_sum` replaces the concatenation and
/// projection by a plain sum of the branch outputs.
#[derive(Clone, Copy, Debug)]
pub struct SgpMixer {
    ln_z: LayerNorm,
    ln_x: LayerNorm,
    inst_z: Instant,
    inst_x: Instant,
    win_z: Window,
    win_x: Window,
    psi_z: DwConv,
    psi_x: DwConv,
    proj: Option<Linear>,
    ln: LayerNorm,
    ffn: Ffn,
    /// Replaces both window gates by a constant (probes).
    pub gate_override: Option<f64>,
}

impl SgpMixer {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, cfg: &SgpCfg, aggregate_sum: bool) -> Self {
        let mut s = b.sub(name);
        let d = cfg.d;
        Self {
            ln_z: LayerNorm::new(&mut s, "ln_z", d),
            ln_x: LayerNorm::new(&mut s, "ln_x", d),
            inst_z: Instant::new(&mut s, "inst_z", d),
            inst_x: Instant::new(&mut s, "inst_x", d),
            win_z: Window::new(&mut s, "win_z", cfg),
            win_x: Window::new(&mut s, "win_x", cfg),
            psi_z: DwConv::new(&mut s, "psi_z", d, cfg.ks, 1),
            psi_x: DwConv::new(&mut s, "psi_x", d, cfg.ks, 1),
            proj: (!aggregate_sum).then(|| Linear::new(&mut s, "proj", 6 * d, d)),
            ln: LayerNorm::new(&mut s, "ln", d),
            ffn: Ffn::new(&mut s, "ffn", d, d * cfg.ffn_ratio),
            gate_override: None,
        }
    }

    /// `z` is the coarse input (`len / k` tokens), `x` the skip features.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, z: Var, x: Var, valid: usize) -> Var {
        let len = g.shape(x)[0];
        let z = self.ln_z.forward(g, z);
        let x = self.ln_x.forward(g, x);
        let z = g.upsample(z, len);
        let iz = self.inst_z.forward(g, z, valid);
        let ix = self.inst_x.forward(g, x, valid);
        // each window path evolves one feature and is gated by the other
        let wz = self.win_z.forward(g, z);
        let gx = gate_or_const(g, &self.psi_x, x, self.gate_override);
        let wz = g.mul(wz, gx);
        let wx = self.win_x.forward(g, x);
        let gz = gate_or_const(g, &self.psi_z, z, self.gate_override);
        let wx = g.mul(wx, gz);
        let parts = [iz, ix, wz, wx, z, x];
        let y = match &self.proj {
            Some(p) => {
                let cat = g.concat_cols(&parts);
                p.forward(g, cat)
            }
            None => parts[1..].iter().fold(parts[0], |acc, &v| g.add(acc, v)),
        };
        let n = self.ln.forward(g, y);
        let f = self.ffn.forward(g, n);
        g.add(y, f)
    }
}

/// One decoder block: restores resolution by `k` and merges the skip input.
#[derive(Clone, Copy, Debug)]
pub enum DecoderBlock {
    None(SgpLayer),
    Sum(SgpLayer),
    Concat { proj: Linear, sgp: SgpLayer },
    Mixer(SgpMixer),
}

impl DecoderBlock {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, cfg: &SgpCfg, variant: SkipVariant) -> Self {
        let mut s = b.sub(name);
        match variant {
            SkipVariant::None => DecoderBlock::None(SgpLayer::new(&mut s, "sgp", cfg)),
            SkipVariant::Sum => DecoderBlock::Sum(SgpLayer::new(&mut s, "sgp", cfg)),
            SkipVariant::Concat => DecoderBlock::Concat {
                proj: Linear::new(&mut s, "proj", 2 * cfg.d, cfg.d),
                sgp: SgpLayer::new(&mut s, "sgp", cfg),
            },
            SkipVariant::SgpMixerSum => DecoderBlock::Mixer(SgpMixer::new(&mut s, "mixer", cfg, true)),
            SkipVariant::SgpMixer => DecoderBlock::Mixer(SgpMixer::new(&mut s, "mixer", cfg, false)),
        }
    }
}

/// Runs a decoder block. Requires `len(x_skip) == k * len(z)`; `valid`
/// counts real (unpadded) tokens of the output.
pub fn skip_fuse<T: Float>(
    g: &mut Graph<'_, T>,
    block: &DecoderBlock,
    z: Var,
    x_skip: Var,
    k: usize,
    valid: usize,
) -> Result<Var> {
    let (lz, lx) = (g.shape(z)[0], g.shape(x_skip)[0]);
    if lx != k * lz {
        return Err(Error::Contract(format!(
            "skip input length {lx} must be k * {lz} = {}",
            k * lz
        )));
    }
    if g.shape(z)[1] != g.shape(x_skip)[1] {
        return Err(Error::Contract("skip and coarse inputs differ in width".into()));
    }
    Ok(match block {
        DecoderBlock::None(sgp) => {
            let up = g.upsample(z, lx);
            sgp.forward(g, up, valid)
        }
        DecoderBlock::Sum(sgp) => {
            let up = g.upsample(z, lx);
            let s = g.add(up, x_skip);
            sgp.forward(g, s, valid)
        }
        DecoderBlock::Concat { proj, sgp } => {
            let up = g.upsample(z, lx);
            let cat = g.concat_cols(&[up, x_skip]);
            let p = proj.forward(g, cat);
            sgp.forward(g, p, valid)
        }
        DecoderBlock::Mixer(m) => m.forward(g, z, x_skip, valid),
    })
}

/// SGP-Mixer layer with the length contract checked.
pub fn sgp_mixer_layer<T: Float>(
    g: &mut Graph<'_, T>,
    mixer: &SgpMixer,
    z: Var,
    x_skip: Var,
    k: usize,
) -> Result<Var> {
    let lx = g.shape(x_skip)[0];
    skip_fuse(g, &DecoderBlock::Mixer(*mixer), z, x_skip, k, lx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{uniform, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn cfg(d: usize) -> SgpCfg {
        SgpCfg {
            d,
            ks: 3,
            r: 2,
            ..SgpCfg::default()
        }
    }

    fn run<F: Fn(&mut Graph<'_, f64>) -> Var>(store: &ParamStore<f64>, f: F) -> Tensor<f64> {
        let mut g = Graph::inference(store);
        let v = f(&mut g);
        g.value(v).clone()
    }

    #[test]
    fn positional_fixture_and_limits() {
        let mut store = ParamStore::<f64>::new();
        let table = store.add("pos", Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![5.0, 5.0]]).unwrap());
        let pos = PositionalTable { table, l_max: 3 };
        let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let out = run(&store, |g| {
            let xv = g.constant(x.clone());
            add_positional(g, xv, &pos).unwrap()
        });
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 2.0]);
        let mut g = Graph::inference(&store);
        let long = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(add_positional(&mut g, long, &pos), Err(Error::Config(_))));
    }

    #[test]
    fn positional_zero_table_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let table = store.add("pos", Tensor::zeros(&[5, 3]));
        let pos = PositionalTable { table, l_max: 5 };
        let x = rand_t(&[4, 3], 1);
        let out = run(&store, |g| {
            let xv = g.constant(x.clone());
            add_positional(g, xv, &pos).unwrap()
        });
        assert_eq!(out, x);
    }

    #[test]
    fn pool_fixtures() {
        let mut g = Graph::<f64>::detached();
        let x = g.constant(Tensor::from_vec(&[4, 1], vec![1.0, 3.0, 2.0, 0.0]).unwrap());
        let p = temporal_pool(&mut g, x, 2).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 2.0]);
        let same = temporal_pool(&mut g, x, 1).unwrap();
        assert_eq!(g.value(same).data(), g.value(x).data());
        assert!(matches!(temporal_pool(&mut g, x, 3), Err(Error::Contract(_))));
        let up = g.upsample(p, 4);
        assert_eq!(g.shape(up)[0], 4);
    }

    #[test]
    fn upsample_endpoint_fixture() {
        let mut g = Graph::<f64>::detached();
        let z = g.constant(Tensor::from_vec(&[2, 1], vec![3.0, 6.0]).unwrap());
        let u = g.upsample(z, 4);
        let got = g.value(u).data().to_vec();
        for (a, b) in got.iter().zip([3.0, 4.0, 5.0, 6.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgp_layer_shapes() {
        for d in [16, 368] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let c = SgpCfg { d, ..SgpCfg::default() };
            let layer = SgpLayer::new(&mut Builder::new(&mut store, &mut rng), "l", &c);
            for l in [4, 25, 100] {
                let mut g = Graph::inference(&store);
                let x = g.constant(uniform(&[l, d], 1.0, &mut rng));
                let y = layer.forward(&mut g, x, l);
                assert_eq!(g.shape(y), &[l, d]);
            }
        }
    }

    #[test]
    fn sgp_layer_constant_sequence_stays_constant() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = SgpLayer::new(&mut Builder::new(&mut store, &mut rng), "l", &cfg(8));
        let row = rand_t(&[1, 8], 2).into_data();
        let x = Tensor::from_vec(&[10, 8], row.repeat(10)).unwrap();
        let out = run(&store, |g| {
            let xv = g.constant(x.clone());
            layer.forward(g, xv, 10)
        });
        for i in 1..10 {
            for (a, b) in out.row(i).iter().zip(out.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgp_layer_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // one channel per group would pin the mean token to the GN bias
        let c = SgpCfg { group_norm_groups: Some(2), ..cfg(6) };
        let layer = SgpLayer::new(&mut Builder::new(&mut store, &mut rng), "l", &c);
        let x = store.add("x", rand_t(&[8, 6], 4));
        let w = rand_t(&[8, 6], 5);
        let err = crate::gradcheck::check_params(&store, 1e-5, |g| {
            let xv = g.param(x);
            let y = layer.forward(g, xv, 8);
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv);
            g.sum(p)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn sgp_mixer_gradient_check() {
        for sum in [false, true] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let m = SgpMixer::new(&mut Builder::new(&mut store, &mut rng), "m", &cfg(6), sum);
            let z = store.add("z", rand_t(&[4, 6], 7));
            let x = store.add("x", rand_t(&[8, 6], 8));
            let w = rand_t(&[8, 6], 9);
            let err = crate::gradcheck::check_params(&store, 1e-5, |g| {
                let (zv, xv) = (g.param(z), g.param(x));
                let y = sgp_mixer_layer(g, &m, zv, xv, 2).unwrap();
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv);
                g.sum(p)
            });
            assert!(err < 1e-4, "sum={sum}: relative error {err}");
        }
    }

    #[test]
    fn mixer_length_contract() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = SgpMixer::new(&mut Builder::new(&mut store, &mut rng), "m", &cfg(4), false);
        let mut g = Graph::inference(&store);
        let z = g.constant(rand_t(&[50, 4], 1));
        let x = g.constant(rand_t(&[100, 4], 2));
        let y = sgp_mixer_layer(&mut g, &m, z, x, 2).unwrap();
        assert_eq!(g.shape(y), &[100, 4]);
        let bad = g.constant(rand_t(&[99, 4], 3));
        assert!(matches!(sgp_mixer_layer(&mut g, &m, z, bad, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn mixer_ignores_skip_when_its_paths_are_zeroed_and_gates_open() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let mut m = SgpMixer::new(&mut Builder::new(&mut store, &mut rng), "m", &cfg(d), false);
        m.gate_override = Some(1.0);
        for name in [
            "m.inst_x.fc.w",
            "m.inst_x.fc.b",
            "m.win_x.conv_w.w",
            "m.win_x.conv_w.b",
            "m.win_x.conv_kw.w",
            "m.win_x.conv_kw.b",
        ] {
            let id = store.find(name).unwrap();
            let shape = store.get(id).shape().to_vec();
            store.set(name, Tensor::zeros(&shape)).unwrap();
        }
        // projection rows reading the skip shortcut ([iz, ix, wz, wx, z, x])
        let pid = store.find("m.proj.w").unwrap();
        let mut pw = store.get(pid).clone();
        for r in 5 * d..6 * d {
            for c in 0..d {
                pw.data_mut()[r * d + c] = 0.0;
            }
        }
        store.set("m.proj.w", pw).unwrap();
        let z = rand_t(&[3, d], 3);
        let eval = |x: Tensor<f64>| {
            run(&store, |g| {
                let (zv, xv) = (g.constant(z.clone()), g.constant(x.clone()));
                sgp_mixer_layer(g, &m, zv, xv, 2).unwrap()
            })
        };
        let base = eval(Tensor::zeros(&[6, d]));
        let probe = eval(rand_t(&[6, d], 4));
        assert!(base.max_abs_diff(&probe) < 1e-12);
    }

    fn variant_store(variant: SkipVariant, d: usize) -> (ParamStore<f64>, DecoderBlock) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let block = DecoderBlock::new(&mut Builder::new(&mut store, &mut rng), "dec", &cfg(d), variant);
        (store, block)
    }

    fn copy_shared(from: &ParamStore<f64>, to: &mut ParamStore<f64>) {
        for (name, t) in from.iter() {
            if to.find(name).is_some() {
                to.set(name, t.clone()).unwrap();
            }
        }
    }

    fn fuse(store: &ParamStore<f64>, block: &DecoderBlock, z: &Tensor<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        run(store, |g| {
            let (zv, xv) = (g.constant(z.clone()), g.constant(x.clone()));
            let valid = x.rows();
            skip_fuse(g, block, zv, xv, 2, valid).unwrap()
        })
    }

    #[test]
    fn sum_with_zero_skip_equals_none() {
        let d = 4;
        let (none_store, none) = variant_store(SkipVariant::None, d);
        let (mut sum_store, sum) = variant_store(SkipVariant::Sum, d);
        copy_shared(&none_store, &mut sum_store);
        let z = rand_t(&[5, d], 1);
        let x = Tensor::zeros(&[10, d]);
        let a = fuse(&none_store, &none, &z, &rand_t(&[10, d], 2));
        let b = fuse(&sum_store, &sum, &z, &x);
        assert_eq!(a, b);
    }

    #[test]
    fn concat_with_identity_projection_equals_none() {
        let d = 4;
        let (none_store, none) = variant_store(SkipVariant::None, d);
        let (mut cat_store, cat) = variant_store(SkipVariant::Concat, d);
        copy_shared(&none_store, &mut cat_store);
        let mut w = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        cat_store.set("dec.proj.w", w).unwrap();
        cat_store.set("dec.proj.b", Tensor::zeros(&[d])).unwrap();
        let z = rand_t(&[5, d], 1);
        let x = rand_t(&[10, d], 2);
        assert_eq!(fuse(&none_store, &none, &z, &x), fuse(&cat_store, &cat, &z, &x));
    }

    #[test]
    fn all_variants_share_output_shape() {
        for v in SkipVariant::ALL {
            let (store, block) = variant_store(v, 8);
            let out = fuse(&store, &block, &rand_t(&[50, 8], 1), &rand_t(&[100, 8], 2));
            assert_eq!(out.shape(), &[100, 8], "{}", v.name());
        }
    }

    #[test]
    fn padded_rows_do_not_affect_valid_outputs() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = SgpLayer::new(&mut Builder::new(&mut store, &mut rng), "l", &cfg(4));
        let x = rand_t(&[7, 4], 5);
        // pad one replicated row vs. a wildly different padded row: the
        // statistics ignore both, but the conv taps read the pad row, so
        // only rows far from the end are compared
        let a = run(&store, |g| {
            let xv = g.constant(x.clone());
            let p = pad_to_multiple(g, xv, 2);
            layer.forward(g, p, 7)
        });
        let mut xb = x.clone().into_data();
        xb.extend(vec![9.0; 4]);
        let b = run(&store, |g| {
            let xv = g.constant(Tensor::from_vec(&[8, 4], xb.clone()).unwrap());
            layer.forward(g, xv, 7)
        });
        for i in 0..4 {
            for (p, q) in a.row(i).iter().zip(b.row(i)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn determinism() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = SgpLayer::new(&mut Builder::new(&mut store, &mut rng), "l", &SgpCfg::default());
        let x = uniform::<f32>(&[20, 32], 1.0, &mut rng);
        let once = || {
            let mut g = Graph::inference(&store);
            let xv = g.constant(x.clone());
            let y = layer.forward(&mut g, xv, 20);
            g.value(y).clone()
        };
        assert_eq!(once(), once());
    }

    #[test]
    fn cfg_validation() {
        assert!(SgpCfg { ks: 4, ..SgpCfg::default() }.validate().is_err());
        assert!(SgpCfg { r: 0, ..SgpCfg::default() }.validate().is_err());
        assert!(SgpCfg { group_norm_groups: Some(5), ..SgpCfg::default() }.validate().is_err());
        assert_eq!(SgpCfg { d: 368, ..SgpCfg::default() }.groups(), 8);
    }
}

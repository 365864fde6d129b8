//! Full spotting models: backbone, temporal module and prediction heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneCfg};
use crate::error::{config_err, Error, Result};
use crate::nn::{linear_params, Builder, Ffn, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::sgp::{
    add_positional, crop, pad_to_multiple, skip_fuse, temporal_pool, DecoderBlock, PositionalTable,
    SgpCfg, SgpLayer, SkipVariant,
};
use crate::tensor::{lit, Float};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalModule {
    SgpEd,
    Transformer,
    Gru,
    SgpPyramid,
}

impl TemporalModule {
    pub fn name(self) -> &'static str {
        match self {
            TemporalModule::SgpEd => "sgp_ed",
            TemporalModule::Transformer => "transformer",
            TemporalModule::Gru => "gru",
            TemporalModule::SgpPyramid => "sgp_pyramid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerCfg {
    pub heads: usize,
    /// Layer count; `None` uses `2B + 1`, the depth of the encoder-decoder.
    pub layers: Option<usize>,
    /// Replace attention by the identity (each token attends to itself).
    pub identity_attention: bool,
}

impl Default for TransformerCfg {
    fn default() -> Self {
        Self {
            heads: 4,
            layers: None,
            identity_attention: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GruCfg {
    pub layers: usize,
}

impl Default for GruCfg {
    fn default() -> Self {
        Self { layers: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    pub backbone: BackboneCfg,
    pub clip_len: usize,
    pub blocks: usize,
    pub k: usize,
    pub sgp: SgpCfg,
    pub skip: SkipVariant,
    pub num_classes: usize,
    pub radius: usize,
    pub temporal_module: TemporalModule,
    pub transformer: TransformerCfg,
    pub gru: GruCfg,
    /// Size Transformer/GRU baselines to the encoder-decoder parameter count.
    pub match_params: bool,
    pub seed: u64,
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self {
            backbone: BackboneCfg::default(),
            clip_len: 100,
            blocks: 2,
            k: 2,
            sgp: SgpCfg::default(),
            skip: SkipVariant::SgpMixer,
            num_classes: 4,
            radius: 2,
            temporal_module: TemporalModule::SgpEd,
            transformer: TransformerCfg::default(),
            gru: GruCfg::default(),
            match_params: true,
            seed: 0,
        }
    }
}

impl ModelCfg {
    pub fn d(&self) -> usize {
        self.backbone.d
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.sgp.validate()?;
        if self.sgp.d != self.backbone.d {
            return config_err(format!(
                "model.sgp.d ({}) must equal model.backbone.d ({})",
                self.sgp.d, self.backbone.d
            ));
        }
        if self.blocks < 1 {
            return config_err("model.blocks must be >= 1");
        }
        if self.k < 2 {
            return config_err("model.k must be >= 2");
        }
        if self.num_classes < 1 {
            return config_err("model.num_classes must be >= 1");
        }
        if self.clip_len < 1 {
            return config_err("model.clip_len must be >= 1");
        }
        let coarsest = self.scale_lengths().last().copied().unwrap_or(0);
        if coarsest < 1 {
            return config_err("model.clip_len too short for the number of blocks");
        }
        if self.temporal_module == TemporalModule::Transformer {
            let h = self.transformer.heads;
            if h == 0 || self.d() % h != 0 {
                return config_err(format!(
                    "model.transformer.heads ({h}) must divide d ({})",
                    self.d()
                ));
            }
        }
        if self.temporal_module == TemporalModule::Gru && self.gru.layers == 0 {
            return config_err("model.gru.layers must be >= 1");
        }
        Ok(())
    }

    /// Token counts at scales `0..=B` (non-divisible lengths round up).
    pub fn scale_lengths(&self) -> Vec<usize> {
        let mut out = vec![self.clip_len];
        for _ in 0..self.blocks {
            let last = *out.last().expect("non-empty");
            out.push(last.div_ceil(self.k));
        }
        out
    }

    pub fn transformer_layers(&self) -> usize {
        self.transformer.layers.unwrap_or(2 * self.blocks + 1)
    }
}

/// Classification and displacement heads.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub cls: Linear,
    pub disp: Linear,
}

impl Heads {
    fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, d: usize, c: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            cls: Linear::new(&mut s, "cls", d, c + 1),
            disp: Linear::new(&mut s, "disp", d, 1),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> (Var, Var) {
        (classification_head(g, &self.cls, x), displacement_head(g, &self.disp, x))
    }
}

/// Linear projection then row softmax.
pub fn classification_head<T: Float>(g: &mut Graph<'_, T>, head: &Linear, x: Var) -> Var {
    let logits = head.forward(g, x);
    g.softmax_rows(logits)
}

/// Unbounded linear regression of the displacement (frames).
pub fn displacement_head<T: Float>(g: &mut Graph<'_, T>, head: &Linear, x: Var) -> Var {
    head.forward(g, x)
}

#[derive(Clone, Copy, Debug)]
struct TfLayer {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ffn: Ffn,
}

#[derive(Clone, Copy, Debug)]
struct GruDir {
    w: Linear,
    u: ParamId,
    bh: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct GruLayer {
    fwd: GruDir,
    bwd: GruDir,
    proj: Linear,
}

#[derive(Clone, Debug)]
enum Temporal {
    Ed {
        enc: Vec<SgpLayer>,
        neck: SgpLayer,
        dec: Vec<DecoderBlock>,
    },
    Transformer {
        layers: Vec<TfLayer>,
        ffn_hidden: usize,
    },
    Gru {
        layers: Vec<GruLayer>,
        hidden: usize,
    },
    Pyramid {
        levels: Vec<SgpLayer>,
    },
}

/// Per-clip model output. `scales` holds one `(probs, disp)` pair per
/// pyramid level (just the full-resolution pair for the other modules);
/// `stages` holds the token sequences probed for discriminability.
#[derive(Clone, Debug)]
pub struct ClipOutput {
    pub probs: Var,
    pub disp: Var,
    pub scales: Vec<(Var, Var)>,
    pub stages: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelCfg,
    pub backbone: Backbone,
    pub pos: PositionalTable,
    temporal: Temporal,
    heads: Vec<Heads>,
}

impl Model {
    /// Builds the model, registering parameters into `store` (seeded from
    /// `cfg.seed`).
    pub fn new<T: Float>(cfg: &ModelCfg, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d();
        let mut b = Builder::new(store, &mut rng);
        let backbone = Backbone::new(&cfg.backbone, &mut b.sub("backbone"))?;
        let pos = PositionalTable::new(&mut b, "pos", cfg.clip_len, d);
        let target = if cfg.match_params {
            encoder_decoder_params(cfg)
        } else {
            0
        };
        let temporal = {
            let mut t = b.sub("temporal");
            match cfg.temporal_module {
                TemporalModule::SgpEd => Temporal::Ed {
                    enc: (0..cfg.blocks)
                        .map(|j| SgpLayer::new(&mut t, &format!("enc{j}"), &cfg.sgp))
                        .collect(),
                    neck: SgpLayer::new(&mut t, "neck", &cfg.sgp),
                    dec: (0..cfg.blocks)
                        .map(|j| DecoderBlock::new(&mut t, &format!("dec{j}"), &cfg.sgp, cfg.skip))
                        .collect(),
                },
                TemporalModule::Transformer => {
                    let n = cfg.transformer_layers();
                    let ffn_hidden = if cfg.match_params {
                        transformer_hidden_for(d, n, target)
                    } else {
                        d * cfg.sgp.ffn_ratio
                    };
                    let layers = (0..n)
                        .map(|j| {
                            let mut s = t.sub(&format!("layer{j}"));
                            TfLayer {
                                ln1: LayerNorm::new(&mut s, "ln1", d),
                                qkv: Linear::new(&mut s, "qkv", d, 3 * d),
                                out: Linear::new(&mut s, "out", d, d),
                                ln2: LayerNorm::new(&mut s, "ln2", d),
                                ffn: Ffn::new(&mut s, "ffn", d, ffn_hidden),
                            }
                        })
                        .collect();
                    Temporal::Transformer { layers, ffn_hidden }
                }
                TemporalModule::Gru => {
                    let n = cfg.gru.layers;
                    let hidden = if cfg.match_params {
                        gru_hidden_for(d, n, target)
                    } else {
                        d
                    };
                    let layers = (0..n)
                        .map(|j| {
                            let mut s = t.sub(&format!("layer{j}"));
                            let dir = |name: &str, s: &mut Builder<'_, T>| {
                                let mut ds = s.sub(name);
                                let bound = 1.0 / (hidden as f64).sqrt();
                                GruDir {
                                    w: Linear::new(&mut ds, "w", d, 3 * hidden),
                                    u: ds.uniform("u", &[hidden, 3 * hidden], bound),
                                    bh: ds.uniform("bh", &[3 * hidden], bound),
                                }
                            };
                            let fwd = dir("fwd", &mut s);
                            let bwd = dir("bwd", &mut s);
                            GruLayer {
                                fwd,
                                bwd,
                                proj: Linear::new(&mut s, "proj", 2 * hidden, d),
                            }
                        })
                        .collect();
                    Temporal::Gru { layers, hidden }
                }
                TemporalModule::SgpPyramid => Temporal::Pyramid {
                    levels: (0..=cfg.blocks)
                        .map(|j| SgpLayer::new(&mut t, &format!("level{j}"), &cfg.sgp))
                        .collect(),
                },
            }
        };
        let n_heads = if cfg.temporal_module == TemporalModule::SgpPyramid {
            cfg.blocks + 1
        } else {
            1
        };
        let heads = (0..n_heads)
            .map(|j| {
                let name = if n_heads == 1 {
                    "head".to_string()
                } else {
                    format!("head{j}")
                };
                Heads::new(&mut b, &name, d, cfg.num_classes)
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            pos,
            temporal,
            heads,
        })
    }

    /// Hidden width chosen for a Transformer FFN or a GRU (parameter match).
    pub fn baseline_width(&self) -> Option<usize> {
        match &self.temporal {
            Temporal::Transformer { ffn_hidden, .. } => Some(*ffn_hidden),
            Temporal::Gru { hidden, .. } => Some(*hidden),
            _ => None,
        }
    }

    /// Stride (in frames) of each prediction scale.
    pub fn scale_strides(&self) -> Vec<usize> {
        (0..self.heads.len()).map(|j| self.cfg.k.pow(j as u32)).collect()
    }

    /// Runs one clip of `clip_len` frames (`h x w x 3`, frame-major).
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, frames: &[f32], h: usize, w: usize) -> Result<ClipOutput> {
        let l = self.cfg.clip_len;
        if frames.len() != l * h * w * 3 {
            return Err(Error::Contract(format!(
                "model expects {l} frames of {h}x{w}x3, got {} values",
                frames.len()
            )));
        }
        let tokens = self.backbone.extract(g, frames, l, h, w)?;
        let mut stages = vec![("backbone".to_string(), tokens)];
        let x = add_positional(g, tokens, &self.pos)?;
        stages.push(("positional".to_string(), x));
        let k = self.cfg.k;
        let (final_tokens, scales) = match &self.temporal {
            Temporal::Ed { enc, neck, dec } => {
                let mut x = x;
                let mut skips = Vec::with_capacity(enc.len());
                for (j, layer) in enc.iter().enumerate() {
                    let n = g.shape(x)[0];
                    x = layer.forward(g, x, n);
                    stages.push((format!("enc{j}"), x));
                    skips.push(x);
                    let p = pad_to_multiple(g, x, k);
                    x = temporal_pool(g, p, k)?;
                }
                let n = g.shape(x)[0];
                x = neck.forward(g, x, n);
                stages.push(("neck".to_string(), x));
                for (j, block) in dec.iter().enumerate() {
                    let skip = skips[enc.len() - 1 - j];
                    let n = g.shape(skip)[0];
                    let target = k * g.shape(x)[0];
                    let skip_p = if target > n {
                        let idx = (0..target).map(|i| i.min(n - 1)).collect();
                        g.gather_rows(skip, idx)
                    } else {
                        skip
                    };
                    let y = skip_fuse(g, block, x, skip_p, k, n)?;
                    x = crop(g, y, n);
                    stages.push((format!("dec{j}"), x));
                }
                let hd = self.heads[0].forward(g, x);
                (x, vec![hd])
            }
            Temporal::Transformer { layers, .. } => {
                let mut x = x;
                for (j, layer) in layers.iter().enumerate() {
                    x = self.transformer_layer(g, layer, x);
                    stages.push((format!("layer{j}"), x));
                }
                let hd = self.heads[0].forward(g, x);
                (x, vec![hd])
            }
            Temporal::Gru { layers, .. } => {
                let mut x = x;
                for (j, layer) in layers.iter().enumerate() {
                    x = gru_layer(g, layer, x);
                    stages.push((format!("layer{j}"), x));
                }
                let hd = self.heads[0].forward(g, x);
                (x, vec![hd])
            }
            Temporal::Pyramid { levels } => {
                let mut x = x;
                let mut outs = Vec::with_capacity(levels.len());
                for (j, layer) in levels.iter().enumerate() {
                    if j > 0 {
                        let p = pad_to_multiple(g, x, k);
                        x = temporal_pool(g, p, k)?;
                    }
                    let n = g.shape(x)[0];
                    x = layer.forward(g, x, n);
                    stages.push((format!("level{j}"), x));
                    outs.push(self.heads[j].forward(g, x));
                }
                (x, outs)
            }
        };
        let _ = final_tokens;
        let (probs, disp) = scales[0];
        Ok(ClipOutput {
            probs,
            disp,
            scales,
            stages,
        })
    }

    fn transformer_layer<T: Float>(&self, g: &mut Graph<'_, T>, layer: &TfLayer, x: Var) -> Var {
        let d = self.cfg.d();
        let heads = self.cfg.transformer.heads;
        let dh = d / heads;
        let n = layer.ln1.forward(g, x);
        let qkv = layer.qkv.forward(g, n);
        let mut outs = Vec::with_capacity(heads);
        for hh in 0..heads {
            let v = g.slice_cols(qkv, 2 * d + hh * dh, 2 * d + (hh + 1) * dh);
            if self.cfg.transformer.identity_attention {
                outs.push(v);
                continue;
            }
            let q = g.slice_cols(qkv, hh * dh, (hh + 1) * dh);
            let kk = g.slice_cols(qkv, d + hh * dh, d + (hh + 1) * dh);
            let s = g.matmul_nt(q, kk);
            let s = g.scale(s, lit::<T>(1.0 / (dh as f64).sqrt()));
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, v));
        }
        let att = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let att = layer.out.forward(g, att);
        let x = g.add(x, att);
        let n = layer.ln2.forward(g, x);
        let f = layer.ffn.forward(g, n);
        g.add(x, f)
    }
}

fn gru_layer<T: Float>(g: &mut Graph<'_, T>, layer: &GruLayer, x: Var) -> Var {
    let run = |g: &mut Graph<'_, T>, dir: &GruDir, reverse: bool| {
        let xg = dir.w.forward(g, x);
        let (u, bh) = (g.param(dir.u), g.param(dir.bh));
        g.gru(xg, u, bh, reverse)
    };
    let f = run(g, &layer.fwd, false);
    let b = run(g, &layer.bwd, true);
    let cat = g.concat_cols(&[f, b]);
    layer.proj.forward(g, cat)
}

/// Parameters of the SGP encoder-decoder temporal stack for `cfg` (the
/// baseline sizing target).
pub fn encoder_decoder_params(cfg: &ModelCfg) -> usize {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = Builder::new(&mut store, &mut rng);
    for j in 0..cfg.blocks {
        SgpLayer::new(&mut b, &format!("enc{j}"), &cfg.sgp);
        DecoderBlock::new(&mut b, &format!("dec{j}"), &cfg.sgp, cfg.skip);
    }
    SgpLayer::new(&mut b, "neck", &cfg.sgp);
    store.num_scalars()
}

pub fn transformer_params(d: usize, layers: usize, hidden: usize) -> usize {
    let per = 4 * d + linear_params(d, 3 * d) + linear_params(d, d) + linear_params(d, hidden) + linear_params(hidden, d);
    layers * per
}

pub fn gru_params(d: usize, layers: usize, hidden: usize) -> usize {
    let dir = linear_params(d, 3 * hidden) + hidden * 3 * hidden + 3 * hidden;
    layers * (2 * dir + linear_params(2 * hidden, d))
}

fn closest_width(target: usize, count: impl Fn(usize) -> usize) -> usize {
    let mut best = (usize::MAX, 1);
    let mut h = 1;
    loop {
        let c = count(h);
        let diff = c.abs_diff(target);
        if diff < best.0 {
            best = (diff, h);
        }
        if c > target || h > 1 << 16 {
            break;
        }
        h += 1;
    }
    best.1
}

pub fn transformer_hidden_for(d: usize, layers: usize, target: usize) -> usize {
    closest_width(target, |h| transformer_params(d, layers, h))
}

pub fn gru_hidden_for(d: usize, layers: usize, target: usize) -> usize {
    closest_width(target, |h| gru_params(d, layers, h))
}

/// Parameters of a built model's temporal stack (names under `temporal.`).
pub fn temporal_param_count<T: Float>(store: &ParamStore<T>) -> usize {
    store
        .iter()
        .filter(|(n, _)| n.starts_with("temporal."))
        .map(|(_, t)| t.len())
        .sum()
}

//! Per-frame 2D feature extractor with optional gate-shift temporal modules.
//!
//! Every variant is a stack of four strided stages. A stage is a stride-2
//! 3x3 convolution followed by `depth` residual blocks; blocks in
//! shift-equipped stages run a gate-shift on their residual branch input.
//! Global average pooling and a linear projection produce one `d`-wide token
//! per frame.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ShiftGeom, Var};
use crate::error::{config_err, Error, Result};
use crate::nn::{Builder, Conv2d, Linear};
use crate::params::ParamId;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneVariant {
    #[serde(rename = "tiny-desk")]
    TinyDesk,
    #[serde(rename = "200MF-like")]
    Mf200Like,
    #[serde(rename = "800MF-like")]
    Mf800Like,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftModule {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "GSM")]
    Gsm,
    #[serde(rename = "GSF")]
    Gsf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftPlacement {
    All,
    LatterHalf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneCfg {
    pub variant: BackboneVariant,
    pub d: usize,
    pub shift_module: ShiftModule,
    pub shift_placement: ShiftPlacement,
    pub shift_channel_fraction: f64,
    /// Stage widths for `tiny-desk` (ignored by the other variants).
    pub tiny_widths: [usize; 4],
}

impl Default for BackboneCfg {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::TinyDesk,
            d: 32,
            shift_module: ShiftModule::Gsf,
            shift_placement: ShiftPlacement::LatterHalf,
            shift_channel_fraction: 0.25,
            tiny_widths: [8, 16, 24, 32],
        }
    }
}

pub const NUM_STAGES: usize = 4;
/// RGB plus two coordinate ramps.
pub const INPUT_CHANNELS: usize = 5;

impl BackboneCfg {
    pub fn widths(&self) -> [usize; 4] {
        match self.variant {
            BackboneVariant::TinyDesk => self.tiny_widths,
            BackboneVariant::Mf200Like => [24, 56, 152, 368],
            BackboneVariant::Mf800Like => [64, 128, 320, 768],
        }
    }

    pub fn depths(&self) -> [usize; 4] {
        match self.variant {
            BackboneVariant::TinyDesk => [1, 1, 1, 1],
            BackboneVariant::Mf200Like => [1, 1, 4, 7],
            BackboneVariant::Mf800Like => [1, 3, 8, 2],
        }
    }

    /// Whether stage `s` carries gate-shift modules.
    pub fn stage_has_shift(&self, s: usize) -> bool {
        match (self.shift_module, self.shift_placement) {
            (ShiftModule::None, _) => false,
            (_, ShiftPlacement::All) => true,
            (_, ShiftPlacement::LatterHalf) => s >= NUM_STAGES.div_ceil(2),
        }
    }

    /// Channels shifted in a block of width `c` (even, at least 2).
    pub fn shifted_channels(&self, c: usize) -> usize {
        let n = (self.shift_channel_fraction * c as f64).floor() as usize;
        n - n % 2
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.shift_channel_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return config_err(format!(
                "backbone.shift_channel_fraction must be in (0, 1], got {f}"
            ));
        }
        if self.d == 0 {
            return config_err("backbone.d must be positive");
        }
        match self.variant {
            BackboneVariant::Mf200Like if self.d != 368 => {
                return config_err(format!("backbone.d must be 368 for 200MF-like, got {}", self.d))
            }
            BackboneVariant::Mf800Like if self.d != 768 => {
                return config_err(format!("backbone.d must be 768 for 800MF-like, got {}", self.d))
            }
            _ => {}
        }
        if self.tiny_widths.contains(&0) {
            return config_err("backbone.tiny_widths entries must be positive");
        }
        let widths = self.widths();
        for s in 0..NUM_STAGES {
            if self.stage_has_shift(s) && self.shifted_channels(widths[s]) < 2 {
                return config_err(format!(
                    "backbone.shift_channel_fraction {f} leaves fewer than 2 shifted channels in stage {s} (width {})",
                    widths[s]
                ));
            }
        }
        Ok(())
    }
}

/// Learnable gate-shift parameters for a block of width `c` with `n`
/// shifted channels.
#[derive(Clone, Copy, Debug)]
pub struct GateShift {
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub fuse: ParamId,
    pub shifted: usize,
    pub mode: ShiftModule,
}

impl GateShift {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, shifted: usize, mode: ShiftModule) -> Self {
        let mut s = b.sub(name);
        Self {
            gate_w: s.normal("gate_w", &[2, shifted], 0.01),
            gate_b: s.zeros("gate_b", &[2]),
            fuse: s.zeros("fuse", &[shifted]),
            shifted,
            mode,
        }
    }

    /// Applies the module to `x: [L, C, h, w]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, overrides: ShiftOverrides) -> Var {
        let s = g.shape(x).to_vec();
        let geom = ShiftGeom {
            frames: s[0],
            channels: s[1],
            pixels: s[2] * s[3],
            shifted: self.shifted,
            fuse: self.mode == ShiftModule::Gsf,
            gate_override: overrides.gate,
            fuse_override: overrides.fuse,
        };
        let (w, b, f) = (g.param(self.gate_w), g.param(self.gate_b), g.param(self.fuse));
        g.gate_shift(x, w, b, f, geom)
    }
}

/// Constant replacements for gates and fusion weights (probes and tests).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShiftOverrides {
    pub gate: Option<f64>,
    pub fuse: Option<f64>,
}

/// Stand-alone gate shift on `[L, C_f, h, w]`; `fraction` of the channels
/// are shifted. Validates the fraction before building the op.
pub fn gate_shift<T: Float>(
    g: &mut Graph<'_, T>,
    x: Var,
    module: &GateShift,
    fraction: f64,
    overrides: ShiftOverrides,
) -> Result<Var> {
    let c = g.shape(x)[1];
    if !(fraction > 0.0 && fraction <= 1.0) {
        return config_err(format!("gate_shift fraction must be in (0, 1], got {fraction}"));
    }
    let n = (fraction * c as f64).floor() as usize;
    let n = n - n % 2;
    if n < 2 || n != module.shifted {
        return config_err(format!(
            "gate_shift fraction {fraction} of {c} channels gives {n} shifted channels; module expects {}",
            module.shifted
        ));
    }
    Ok(module.forward(g, x, overrides))
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv2d,
    conv2: Conv2d,
    shift: Option<GateShift>,
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneCfg,
    stages: Vec<Stage>,
    proj: Linear,
    pub overrides: ShiftOverrides,
}

impl Backbone {
    pub fn new<T: Float>(cfg: &BackboneCfg, b: &mut Builder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let depths = cfg.depths();
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut c_in = INPUT_CHANNELS;
        for s in 0..NUM_STAGES {
            let mut sb = b.sub(&format!("stage{s}"));
            let c = widths[s];
            let down = Conv2d::new(&mut sb, "down", c_in, c, 3, 2, 1.0);
            let mut blocks = Vec::with_capacity(depths[s]);
            for k in 0..depths[s] {
                let mut bb = sb.sub(&format!("block{k}"));
                let shift = cfg
                    .stage_has_shift(s)
                    .then(|| GateShift::new(&mut bb, "shift", cfg.shifted_channels(c), cfg.shift_module));
                blocks.push(Block {
                    conv1: Conv2d::new(&mut bb, "conv1", c, c, 3, 1, 1.0),
                    conv2: Conv2d::new(&mut bb, "conv2", c, c, 3, 1, 0.5),
                    shift,
                });
            }
            stages.push(Stage { down, blocks });
            c_in = c;
        }
        let proj = Linear::new(b, "proj", widths[NUM_STAGES - 1], cfg.d);
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            proj,
            overrides: ShiftOverrides::default(),
        })
    }

    /// Number of gate-shift modules on any input-to-output path; a frame
    /// influences at most this many tokens on either side.
    pub fn temporal_radius(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| &s.blocks)
            .filter(|b| b.shift.is_some())
            .count()
    }

    /// Tokens `[len, d]` for `len` frames of `h x w x 3` values (frame-major
    /// HWC layout).
    pub fn extract<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        frames: &[f32],
        len: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        if len == 0 || frames.len() != len * h * w * 3 {
            return Err(Error::Contract(format!(
                "backbone expects {len} frames of {h}x{w}x3 ({} values), got {}",
                len * h * w * 3,
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("backbone input contains non-finite values".into()));
        }
        let x = g.constant(to_planar(frames, len, h, w));
        let mut x = x;
        for stage in &self.stages {
            x = stage.down.forward(g, x);
            x = g.relu(x);
            for block in &stage.blocks {
                let branch_in = match &block.shift {
                    Some(gs) => gs.forward(g, x, self.overrides),
                    None => x,
                };
                let y = block.conv1.forward(g, branch_in);
                let y = g.relu(y);
                let y = block.conv2.forward(g, y);
                let y = g.add(x, y);
                x = g.relu(y);
            }
        }
        let pooled = g.spatial_mean(x);
        Ok(self.proj.forward(g, pooled))
    }
}

/// `[L, H, W, 3]` in `[0, 1]` to `[L, 5, H, W]`: centred RGB plus x/y ramps.
fn to_planar<T: Float>(frames: &[f32], len: usize, h: usize, w: usize) -> Tensor<T> {
    let p = h * w;
    let mut out = vec![T::zero(); len * INPUT_CHANNELS * p];
    let ramp = |i: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    for t in 0..len {
        let base = t * INPUT_CHANNELS * p;
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                let src = (t * p + pix) * 3;
                for k in 0..3 {
                    out[base + k * p + pix] = T::from_f64_lossy((frames[src + k] as f64 - 0.5) * 4.0);
                }
                out[base + 3 * p + pix] = T::from_f64_lossy(ramp(x, w));
                out[base + 4 * p + pix] = T::from_f64_lossy(ramp(y, h));
            }
        }
    }
    Tensor::from_vec(&[len, INPUT_CHANNELS, h, w], out).expect("planar shape")
}

//! Clip-level augmentations. Spatial transforms draw their parameters once
//! per clip and apply them identically to every frame.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::labels::blend_targets;
use super::{Clip, MixupInfo};
use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropCfg {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentCfg {
    pub enabled: bool,
    /// Random crop to this size during training (center crop at inference).
    pub crop: Option<CropCfg>,
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f32, f32),
    pub jitter_prob: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub mixup_prob: f64,
    pub mixup_alpha: f64,
    pub mixup_beta: f64,
}

impl Default for AugmentCfg {
    fn default() -> Self {
        Self {
            enabled: true,
            crop: None,
            flip_prob: 0.5,
            blur_prob: 0.25,
            blur_sigma: (0.1, 1.0),
            jitter_prob: 0.25,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            mixup_prob: 1.0,
            mixup_alpha: 0.2,
            mixup_beta: 0.2,
        }
    }
}

impl AugmentCfg {
    pub fn all_off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("blur_prob", self.blur_prob),
            ("jitter_prob", self.jitter_prob),
            ("mixup_prob", self.mixup_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return config_err(format!("augment.{name} must be in [0, 1], got {p}"));
            }
        }
        if self.mixup_alpha <= 0.0 || self.mixup_beta <= 0.0 {
            return config_err("augment.mixup_alpha and augment.mixup_beta must be positive");
        }
        if self.blur_sigma.0 <= 0.0 || self.blur_sigma.1 < self.blur_sigma.0 {
            return config_err("augment.blur_sigma must be an increasing positive range");
        }
        Ok(())
    }
}

/// Applies crop, flip, blur and colour jitter (each with its probability).
/// Labels are untouched; with `enabled == false` the clip is returned as is.
pub fn augment(clip: &Clip, cfg: &AugmentCfg, rng: &mut impl Rng) -> Clip {
    let mut out = clip.clone();
    if !cfg.enabled {
        return out;
    }
    if let Some(crop) = cfg.crop {
        if crop.height <= clip.height && crop.width <= clip.width {
            let oy = rng.random_range(0..=clip.height - crop.height);
            let ox = rng.random_range(0..=clip.width - crop.width);
            crop_clip(&mut out, crop, oy, ox);
        }
    }
    if rng.random_bool(cfg.flip_prob) {
        flip_horizontal(&mut out);
    }
    if rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        gaussian_blur(&mut out, sigma);
    }
    if rng.random_bool(cfg.jitter_prob) {
        let b = 1.0 + rng.random_range(-cfg.brightness..=cfg.brightness);
        let c = 1.0 + rng.random_range(-cfg.contrast..=cfg.contrast);
        let s = 1.0 + rng.random_range(-cfg.saturation..=cfg.saturation);
        color_jitter(&mut out, b, c, s);
    }
    out
}

/// Center crop used at inference when training crops are configured.
pub fn center_crop(clip: &mut Clip, crop: CropCfg) {
    if crop.height <= clip.height && crop.width <= clip.width {
        let oy = (clip.height - crop.height) / 2;
        let ox = (clip.width - crop.width) / 2;
        crop_clip(clip, crop, oy, ox);
    }
}

fn crop_clip(clip: &mut Clip, crop: CropCfg, oy: usize, ox: usize) {
    let (h, w) = (clip.height, clip.width);
    let mut frames = Vec::with_capacity(clip.len * crop.height * crop.width * 3);
    for f in 0..clip.len {
        let base = f * h * w * 3;
        for y in oy..oy + crop.height {
            let row = base + (y * w + ox) * 3;
            frames.extend_from_slice(&clip.frames[row..row + crop.width * 3]);
        }
    }
    clip.frames = frames;
    clip.height = crop.height;
    clip.width = crop.width;
}

pub(crate) fn flip_horizontal(clip: &mut Clip) {
    let (h, w) = (clip.height, clip.width);
    for f in 0..clip.len {
        for y in 0..h {
            let row = f * h * w * 3 + y * w * 3;
            for x in 0..w / 2 {
                for k in 0..3 {
                    clip.frames.swap(row + x * 3 + k, row + (w - 1 - x) * 3 + k);
                }
            }
        }
    }
}

fn gaussian_blur(clip: &mut Clip, sigma: f32) {
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|v| v / norm).collect();
    let (h, w) = (clip.height as isize, clip.width as isize);
    let fs = (h * w * 3) as usize;
    let mut tmp = vec![0.0f32; fs];
    for f in 0..clip.len {
        let frame = &mut clip.frames[f * fs..(f + 1) * fs];
        // horizontal then vertical pass, edge-clamped
        for y in 0..h {
            for x in 0..w {
                for k in 0..3 {
                    let mut acc = 0.0;
                    for (j, kv) in kernel.iter().enumerate() {
                        let xx = (x + j as isize - radius).clamp(0, w - 1);
                        acc += kv * frame[((y * w + xx) * 3 + k) as usize];
                    }
                    tmp[((y * w + x) * 3 + k) as usize] = acc;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for k in 0..3 {
                    let mut acc = 0.0;
                    for (j, kv) in kernel.iter().enumerate() {
                        let yy = (y + j as isize - radius).clamp(0, h - 1);
                        acc += kv * tmp[((yy * w + x) * 3 + k) as usize];
                    }
                    frame[((y * w + x) * 3 + k) as usize] = acc;
                }
            }
        }
    }
}

fn color_jitter(clip: &mut Clip, brightness: f32, contrast: f32, saturation: f32) {
    let fs = clip.frame_size();
    for f in 0..clip.len {
        let frame = &mut clip.frames[f * fs..(f + 1) * fs];
        for v in frame.iter_mut() {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
        let gray_mean = frame
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .sum::<f32>()
            / (fs / 3) as f32;
        for v in frame.iter_mut() {
            *v = ((*v - gray_mean) * contrast + gray_mean).clamp(0.0, 1.0);
        }
        for p in frame.chunks_mut(3) {
            let g = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            for v in p.iter_mut() {
                *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
            }
        }
    }
}

/// Blends two clips with `lambda ~ Beta(alpha, beta)`.
pub fn mixup(a: &Clip, b: &Clip, alpha: f64, beta: f64, rng: &mut impl Rng) -> Result<Clip> {
    let dist = Beta::new(alpha, beta)
        .map_err(|e| Error::Config(format!("mixup alpha/beta: {e}")))?;
    let lambda = dist.sample(rng) as f32;
    mixup_with_lambda(a, b, lambda)
}

/// `lambda * a + (1 - lambda) * b` on frames and class targets; the
/// displacement targets of the dominant clip are kept.
pub fn mixup_with_lambda(a: &Clip, b: &Clip, lambda: f32) -> Result<Clip> {
    if a.len != b.len || a.height != b.height || a.width != b.width {
        return Err(Error::Contract(format!(
            "mixup needs equal clip shapes, got {}x{}x{} and {}x{}x{}",
            a.len, a.height, a.width, b.len, b.height, b.width
        )));
    }
    if a.targets.class_targets.shape() != b.targets.class_targets.shape() {
        return Err(Error::Contract("mixup needs equal target shapes".into()));
    }
    let mut out = a.clone();
    for (o, &v) in out.frames.iter_mut().zip(&b.frames) {
        *o = lambda * *o + (1.0 - lambda) * v;
    }
    out.targets = blend_targets(&a.targets, &b.targets, lambda);
    out.mixup = Some(MixupInfo {
        partner_events: b.events.clone(),
        lambda,
    });
    Ok(out)
}

//! Procedural renderer: soft sprites orbiting over a textured background.
//!
//! Event classes are instantaneous state changes of the sprites:
//!
//! | class | name      | visual change at the event frame                     |
//! |-------|-----------|------------------------------------------------------|
//! | 1     | color     | sprite palette swap, blended over `scale` frames      |
//! | 2     | reversal  | orbit direction flips; the event frame is the turn    |
//! | 3     | split     | one sprite becomes two, separating over `scale` frames|
//! | 4     | merge     | two sprites converge over `scale` frames, then fuse   |
//!
//! `context_scales[c - 1]` sets how many frames of context class `c` needs:
//! blend/separation durations for classes 1, 3, 4 and the orbit slowdown for
//! class 2 (a slower orbit needs a longer window to see the turn).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EventAnnotation, SyntheticVideo};
use crate::error::{config_err, Result};

pub const EVENT_NAMES: [&str; 4] = ["color", "reversal", "split", "merge"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub num_videos: usize,
    pub video_length: usize,
    pub num_classes: usize,
    /// Fraction of annotated frames; events per video = floor(length * sparsity).
    pub sparsity: f64,
    /// Per-class temporal context in frames.
    pub context_scales: Vec<usize>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Clip length the dataset is meant for; videos must hold four clips.
    pub clip_length: usize,
    /// Minimum distance between consecutive events.
    pub min_gap: usize,
    /// Amplitude of per-pixel uniform noise.
    pub noise: f32,
    pub fps: f32,
    /// Prefix for generated video ids.
    pub id_prefix: String,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_videos: 10,
            video_length: 400,
            num_classes: 4,
            sparsity: 0.022,
            context_scales: vec![1, 2, 1, 4],
            seed: 0,
            height: 64,
            width: 64,
            clip_length: 100,
            min_gap: 12,
            noise: 0.03,
            fps: 25.0,
            id_prefix: "video".into(),
        }
    }
}

impl GeneratorSpec {
    pub fn events_per_video(&self) -> usize {
        (self.video_length as f64 * self.sparsity + 1e-9).floor() as usize
    }

    fn margin(&self) -> usize {
        self.context_scales.iter().copied().max().unwrap_or(1) + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > EVENT_NAMES.len() {
            return config_err(format!(
                "num_classes must be in [2, {}], got {}",
                EVENT_NAMES.len(),
                self.num_classes
            ));
        }
        if self.num_videos == 0 {
            return config_err("num_videos must be positive");
        }
        if self.clip_length == 0 || self.video_length < 4 * self.clip_length {
            return config_err(format!(
                "video_length must be at least 4 * clip_length ({}), got {}",
                4 * self.clip_length,
                self.video_length
            ));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 0.05) {
            return config_err(format!("sparsity must be in (0, 0.05], got {}", self.sparsity));
        }
        if self.context_scales.len() != self.num_classes {
            return config_err(format!(
                "context_scales needs {} entries (one per class), got {}",
                self.num_classes,
                self.context_scales.len()
            ));
        }
        if self.context_scales.iter().any(|&s| s == 0) {
            return config_err("context_scales entries must be >= 1");
        }
        if self.height < 8 || self.width < 8 {
            return config_err("height and width must be at least 8");
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return config_err("noise must be in [0, 0.5]");
        }
        let n = self.events_per_video();
        let usable = self.video_length.saturating_sub(2 * self.margin());
        if n > 0 && (n - 1) * self.min_gap >= usable {
            return config_err(format!(
                "sparsity {} with min_gap {} does not fit in video_length {}",
                self.sparsity, self.min_gap, self.video_length
            ));
        }
        Ok(())
    }
}

/// Renders `spec.num_videos` videos; video `i` draws from ChaCha stream `i`
/// of `spec.seed`, so output is a pure function of the spec.
pub fn generate_dataset(spec: &GeneratorSpec) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    Ok((0..spec.num_videos)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            render_video(spec, format!("{}_{i:04}", spec.id_prefix), &mut rng)
        })
        .collect())
}

const PALETTE: [[f32; 3]; 2] = [[0.95, 0.3, 0.15], [0.15, 0.5, 0.95]];

#[derive(Clone, Copy)]
struct FrameState {
    angle: f32,
    /// Radial separation of the sprite pair (0 = single sprite).
    separation: f32,
    /// Blend towards palette[1] in [0, 1].
    color_mix: f32,
}

fn place_events(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = spec.events_per_video();
    if n == 0 {
        return Vec::new();
    }
    let margin = spec.margin();
    let usable = spec.video_length - 2 * margin;
    let slack = usable - 1 - (n - 1) * spec.min_gap;
    // Distribute the slack over n + 1 gaps via sorted cut points.
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    cuts.iter()
        .enumerate()
        .map(|(k, &c)| margin + c + k * spec.min_gap)
        .collect()
}

fn choose_classes(spec: &GeneratorSpec, frames: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut split = false;
    frames
        .iter()
        .map(|_| {
            let mut options = vec![1, 2];
            if spec.num_classes >= 3 && !split {
                options.push(3);
            }
            if spec.num_classes >= 4 && split {
                options.push(4);
            }
            let c = options[rng.random_range(0..options.len())];
            match c {
                3 => split = true,
                4 => split = false,
                _ => {}
            }
            c
        })
        .collect()
}

fn render_video(spec: &GeneratorSpec, video_id: String, rng: &mut ChaCha8Rng) -> SyntheticVideo {
    let (h, w, len) = (spec.height, spec.width, spec.video_length);
    let size = h.min(w) as f32;
    let event_frames = place_events(spec, rng);
    let classes = choose_classes(spec, &event_frames, rng);
    let scale = |c: usize| spec.context_scales[c - 1] as f32;

    let orbit = 0.25 * size;
    let max_sep = 0.25 * size;
    let sprite_r = (0.11 * size).max(1.2);
    let base_speed = 0.07 * size / orbit;
    let reversal_speed = if spec.num_classes >= 2 {
        base_speed / scale(2)
    } else {
        base_speed
    };
    let center = (
        0.5 * w as f32 + rng.random_range(-0.05..0.05) * size,
        0.5 * h as f32 + rng.random_range(-0.05..0.05) * size,
    );

    // Per-frame sprite state.
    let mut states = Vec::with_capacity(len);
    let mut angle = rng.random_range(0.0..std::f32::consts::TAU);
    let mut dir = if rng.random_bool(0.5) { 1.0f32 } else { -1.0 };
    let mut color_to = if rng.random_bool(0.5) { 1.0f32 } else { 0.0 };
    let mut split_at: Option<usize> = None;
    let mut merge_at: Option<usize> = None;
    let mut next_event = 0;
    // Merge convergence starts before the event, so look ahead.
    let upcoming = |t: usize| -> Option<(usize, usize)> {
        event_frames
            .iter()
            .zip(&classes)
            .find(|(&f, _)| f >= t)
            .map(|(&f, &c)| (f, c))
    };
    for t in 0..len {
        while next_event < event_frames.len() && event_frames[next_event] == t {
            match classes[next_event] {
                1 => color_to = 1.0 - color_to,
                3 => {
                    split_at = Some(t);
                    merge_at = None;
                }
                4 => {
                    merge_at = Some(t);
                    split_at = None;
                }
                _ => {}
            }
            next_event += 1;
        }
        // Colour blends over the frames ending at the event frame.
        let mut color_mix = color_to;
        if let Some((f, 1)) = upcoming(t) {
            let s = scale(1);
            let before = (f - t) as f32;
            if before < s && f != t {
                let frac = 1.0 - before / s;
                color_mix = color_to + (1.0 - 2.0 * color_to) * frac;
            }
        }
        let mut separation = 0.0;
        if let Some(s0) = split_at {
            let s = scale(3);
            separation = max_sep * ((t - s0 + 1) as f32 / s).min(1.0);
            if let Some((f, 4)) = upcoming(t) {
                let sm = scale(4);
                let before = (f - t) as f32;
                if before < sm + 1.0 && f != t {
                    separation = separation.min(max_sep * before / sm);
                }
            }
        }
        if merge_at.is_some() {
            separation = 0.0;
        }
        states.push(FrameState {
            angle,
            separation,
            color_mix,
        });
        if event_frames
            .iter()
            .zip(&classes)
            .any(|(&f, &c)| f == t && c == 2)
        {
            dir = -dir;
        }
        angle += dir * reversal_speed;
    }

    let background = texture(h, w, rng);
    let mut frames = Vec::with_capacity(len * h * w * 3);
    for st in &states {
        let color = [0, 1, 2].map(|k| {
            PALETTE[0][k] * (1.0 - st.color_mix) + PALETTE[1][k] * st.color_mix
        });
        let (ca, sa) = (st.angle.cos(), st.angle.sin());
        let mut sprites = Vec::with_capacity(2);
        if st.separation > 0.0 {
            for sign in [-0.5f32, 0.5] {
                let r = orbit + sign * st.separation;
                sprites.push((center.0 + r * ca, center.1 + r * sa));
            }
        } else {
            sprites.push((center.0 + orbit * ca, center.1 + orbit * sa));
        }
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let alpha = sprites
                    .iter()
                    .map(|&(sx, sy)| {
                        let d = ((px - sx).powi(2) + (py - sy).powi(2)).sqrt();
                        (sprite_r + 0.5 - d).clamp(0.0, 1.0)
                    })
                    .fold(0.0f32, f32::max);
                for k in 0..3 {
                    let bg = background[(y * w + x) * 3 + k];
                    let noise = if spec.noise > 0.0 {
                        rng.random_range(-spec.noise..=spec.noise)
                    } else {
                        0.0
                    };
                    let v = (1.0 - alpha) * bg + alpha * color[k] + noise;
                    frames.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }

    let events = event_frames
        .iter()
        .zip(&classes)
        .map(|(&frame, &class_id)| EventAnnotation {
            video_id: video_id.clone(),
            frame,
            class_id,
        })
        .collect();
    SyntheticVideo {
        video_id,
        height: h,
        width: w,
        frames,
        events,
        fps: spec.fps,
    }
}

/// Smooth low-contrast background made of a few random plane waves.
fn texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let waves: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            let fx = rng.random_range(-0.6..0.6);
            let fy = rng.random_range(-0.6..0.6);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let amp = [0, 1, 2].map(|_| rng.random_range(0.02..0.06));
            (fx, fy, phase, amp)
        })
        .collect();
    let base = [0, 1, 2].map(|_| rng.random_range(0.15..0.3));
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let mut v = base[k];
                for (fx, fy, ph, amp) in &waves {
                    v += amp[k] * (fx * x as f32 + fy * y as f32 + ph).sin();
                }
                out.push(v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            num_videos: 1,
            video_length: 1000,
            num_classes: 4,
            sparsity: 0.002,
            seed,
            height: 16,
            width: 16,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn event_count_follows_sparsity() {
        let v = generate_dataset(&small(7)).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].events.len(), 2);
        let dense = GeneratorSpec {
            sparsity: 0.022,
            ..small(7)
        };
        assert_eq!(generate_dataset(&dense).unwrap()[0].events.len(), 22);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_dataset(&small(7)).unwrap();
        let b = generate_dataset(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(8)).unwrap();
        assert_ne!(a[0].frames, c[0].frames);
    }

    #[test]
    fn events_sorted_distinct_and_in_bounds() {
        let spec = GeneratorSpec {
            num_videos: 3,
            sparsity: 0.03,
            ..small(3)
        };
        for v in generate_dataset(&spec).unwrap() {
            assert!(v.events.windows(2).all(|w| w[0].frame + spec.min_gap <= w[1].frame));
            assert!(v.events.iter().all(|e| e.frame < v.len() && e.class_id >= 1));
            assert!(v.frames.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn split_and_merge_alternate() {
        let spec = GeneratorSpec {
            num_videos: 4,
            sparsity: 0.04,
            ..small(11)
        };
        for v in generate_dataset(&spec).unwrap() {
            let seq: Vec<usize> = v
                .events
                .iter()
                .map(|e| e.class_id)
                .filter(|&c| c >= 3)
                .collect();
            for (i, c) in seq.iter().enumerate() {
                assert_eq!(*c, if i % 2 == 0 { 3 } else { 4 });
            }
        }
    }

    #[test]
    fn events_change_the_picture() {
        let spec = GeneratorSpec {
            noise: 0.0,
            sparsity: 0.01,
            ..small(5)
        };
        let v = &generate_dataset(&spec).unwrap()[0];
        for e in &v.events {
            let a = v.frame(e.frame - 1);
            let b = v.frame(e.frame);
            assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-3), "{e:?}");
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let bad = GeneratorSpec {
            sparsity: 0.2,
            ..small(1)
        };
        assert!(bad.validate().unwrap_err().to_string().contains("sparsity"));
        let bad = GeneratorSpec {
            num_classes: 1,
            context_scales: vec![1],
            ..small(1)
        };
        assert!(bad.validate().unwrap_err().to_string().contains("num_classes"));
        let bad = GeneratorSpec {
            video_length: 300,
            ..small(1)
        };
        assert!(bad.validate().unwrap_err().to_string().contains("video_length"));
    }
}

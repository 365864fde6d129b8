//! Full-video inference: overlapping-clip stitching, displacement decoding
//! and (soft) non-maximum suppression.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::SyntheticVideo;
use crate::error::{config_err, Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Per-frame outputs for a clip or a whole video.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePredictions {
    /// `len x (C + 1)`, rows on the simplex.
    pub class_probs: Tensor<f32>,
    pub displacements: Vec<f32>,
}

impl FramePredictions {
    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpottedEvent {
    pub video_id: String,
    pub frame: usize,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnmsMode {
    Linear,
    Gaussian,
}

impl std::str::FromStr for SnmsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SnmsMode::Linear),
            "gaussian" => Ok(SnmsMode::Gaussian),
            other => config_err(format!("unknown soft-NMS mode `{other}` (linear | gaussian)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostProc {
    Nms,
    Snms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferCfg {
    pub overlap: f64,
    pub threshold: f64,
    pub postproc: PostProc,
    pub nms_window: usize,
    pub snms_window: usize,
    pub snms_mode: SnmsMode,
    pub snms_sigma: f64,
    pub final_threshold: f64,
    /// Ignore the displacement head (classification-only models).
    pub use_displacement: bool,
}

impl Default for InferCfg {
    fn default() -> Self {
        Self {
            overlap: 0.5,
            threshold: 0.01,
            postproc: PostProc::Snms,
            nms_window: 1,
            snms_window: 3,
            snms_mode: SnmsMode::Linear,
            snms_sigma: 1.0,
            final_threshold: 0.05,
            use_displacement: true,
        }
    }
}

impl InferCfg {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return config_err(format!("infer.overlap must be in [0, 1), got {}", self.overlap));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return config_err(format!("infer.threshold must be in [0, 1), got {}", self.threshold));
        }
        if self.snms_mode == SnmsMode::Gaussian && self.snms_sigma <= 0.0 {
            return config_err("infer.snms_sigma must be > 0 for gaussian mode");
        }
        Ok(())
    }

    /// Runs the configured suppression.
    pub fn suppress(&self, cands: Vec<SpottedEvent>) -> Vec<SpottedEvent> {
        match self.postproc {
            PostProc::Nms => nms(cands, self.nms_window),
            PostProc::Snms => soft_nms(
                cands,
                self.snms_window,
                self.snms_mode,
                self.snms_sigma,
                self.final_threshold,
            )
            .expect("validated"),
        }
    }
}

/// Clip starts every `L * (1 - overlap)` frames; the last clip is
/// right-aligned so that every frame is covered.
pub fn clip_starts(video_len: usize, l: usize, overlap: f64) -> Vec<usize> {
    if video_len <= l {
        return vec![0];
    }
    let stride = ((l as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut out = Vec::new();
    let mut s = 0;
    while s + l < video_len {
        out.push(s);
        s += stride;
    }
    out.push(video_len - l);
    out.dedup();
    out
}

/// Averages overlapping clip predictions into one full-length prediction.
/// Class rows covered more than once are averaged then re-normalized;
/// displacements are averaged.
pub fn stitch_clips(clips: &[(usize, FramePredictions)], video_len: usize) -> Result<FramePredictions> {
    let cols = clips
        .first()
        .map(|(_, p)| p.class_probs.cols())
        .ok_or_else(|| Error::Contract("stitch needs at least one clip".into()))?;
    let mut probs = vec![0.0f64; video_len * cols];
    let mut disp = vec![0.0f64; video_len];
    let mut count = vec![0usize; video_len];
    for (start, p) in clips {
        if p.class_probs.cols() != cols {
            return Err(Error::Contract("clip predictions disagree on class count".into()));
        }
        for i in 0..p.len() {
            let f = start + i;
            if f >= video_len {
                break;
            }
            count[f] += 1;
            disp[f] += p.displacements[i] as f64;
            for (acc, &v) in probs[f * cols..(f + 1) * cols].iter_mut().zip(p.class_probs.row(i)) {
                *acc += v as f64;
            }
        }
    }
    if let Some(f) = count.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("frame {f} not covered by any clip")));
    }
    let mut out = Vec::with_capacity(video_len * cols);
    for f in 0..video_len {
        let row = &probs[f * cols..(f + 1) * cols];
        if count[f] == 1 {
            out.extend(row.iter().map(|&v| v as f32));
        } else {
            let s: f64 = row.iter().sum();
            out.extend(row.iter().map(|v| (v / s) as f32));
        }
        disp[f] /= count[f] as f64;
    }
    Ok(FramePredictions {
        class_probs: Tensor::from_vec(&[video_len, cols], out)?,
        displacements: disp.into_iter().map(|v| v as f32).collect(),
    })
}

/// Recorded when a video shorter than the clip length was padded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferWarning {
    pub video_id: String,
    pub message: String,
}

/// Frames `[start, start + l)` of `video`, repeating the last frame past the end.
pub fn clip_frames(video: &SyntheticVideo, start: usize, l: usize) -> Vec<f32> {
    let n = video.len();
    let mut out = Vec::with_capacity(l * video.frame_size());
    for i in start..start + l {
        out.extend_from_slice(video.frame(i.min(n - 1)));
    }
    out
}

/// Raw per-scale predictions of one clip.
pub fn predict_clip(
    model: &Model,
    store: &ParamStore<f32>,
    frames: &[f32],
    h: usize,
    w: usize,
) -> Result<Vec<FramePredictions>> {
    let mut g = Graph::inference(store);
    let out = model.forward(&mut g, frames, h, w)?;
    Ok(out
        .scales
        .iter()
        .map(|&(p, d)| FramePredictions {
            class_probs: g.value(p).clone(),
            displacements: g.value(d).data().to_vec(),
        })
        .collect())
}

/// Full-length predictions for one video by overlapping-clip stitching.
pub fn stitch(
    model: &Model,
    store: &ParamStore<f32>,
    video: &SyntheticVideo,
    overlap: f64,
) -> Result<(FramePredictions, Option<InferWarning>)> {
    let l = model.cfg.clip_len;
    let n = video.len();
    if n == 0 {
        return Err(Error::Contract(format!("video {} is empty", video.video_id)));
    }
    let warning = (n < l).then(|| InferWarning {
        video_id: video.video_id.clone(),
        message: format!("video length {n} < clip length {l}; last frame repeated"),
    });
    let mut clips = Vec::new();
    for s in clip_starts(n, l, overlap) {
        let frames = clip_frames(video, s, l);
        let mut p = predict_clip(model, store, &frames, video.height, video.width)?;
        clips.push((s, p.swap_remove(0)));
    }
    Ok((stitch_clips(&clips, n)?, warning))
}

/// Candidates `(clamp(l + round(d_l)), c, p)` for every frame and event class
/// with probability above `threshold`. Index `l` of a strided prediction
/// stands for frame `l * stride` (`offset` is added first).
pub fn decode_strided(
    video_id: &str,
    preds: &FramePredictions,
    threshold: f64,
    stride: usize,
    offset: usize,
    video_len: usize,
    use_displacement: bool,
) -> Vec<SpottedEvent> {
    let mut out = Vec::new();
    let cols = preds.class_probs.cols();
    for l in 0..preds.len() {
        let row = preds.class_probs.row(l);
        let d = if use_displacement {
            preds.displacements[l].round() as i64
        } else {
            0
        };
        let frame = (offset as i64 + (l * stride) as i64 + d).clamp(0, video_len as i64 - 1) as usize;
        for (c, &p) in row.iter().enumerate().take(cols).skip(1) {
            if p as f64 > threshold {
                out.push(SpottedEvent {
                    video_id: video_id.to_string(),
                    frame,
                    class_id: c,
                    score: p as f64,
                });
            }
        }
    }
    out
}

pub fn decode_candidates(video_id: &str, preds: &FramePredictions, threshold: f64) -> Vec<SpottedEvent> {
    decode_strided(video_id, preds, threshold, 1, 0, preds.len(), true)
}

/// Score-descending order; ties by earlier frame then lower class.
fn rank(a: &SpottedEvent, b: &SpottedEvent) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.video_id.cmp(&b.video_id))
        .then(a.frame.cmp(&b.frame))
        .then(a.class_id.cmp(&b.class_id))
}

/// Splits candidates into (video, class) groups in a fixed order.
fn groups(cands: Vec<SpottedEvent>) -> Vec<Vec<SpottedEvent>> {
    let mut map: std::collections::BTreeMap<(String, usize), Vec<SpottedEvent>> = Default::default();
    for c in cands {
        map.entry((c.video_id.clone(), c.class_id)).or_default().push(c);
    }
    map.into_values().collect()
}

/// Greedy hard suppression within `window` frames, per (video, class).
pub fn nms(cands: Vec<SpottedEvent>, window: usize) -> Vec<SpottedEvent> {
    let mut kept: Vec<SpottedEvent> = Vec::new();
    for mut group in groups(cands) {
        group.sort_by(rank);
        let first = kept.len();
        for c in group {
            if !kept[first..].iter().any(|k| k.frame.abs_diff(c.frame) <= window) {
                kept.push(c);
            }
        }
    }
    kept
}

/// Generic soft suppression: after each selection, remaining same-group
/// candidates within `window` frames are multiplied by `decay(|df|)`.
/// Candidates scoring below `final_threshold` are dropped at the end.
pub fn soft_nms_with(
    cands: Vec<SpottedEvent>,
    window: usize,
    decay: impl Fn(usize) -> f64,
    final_threshold: f64,
) -> Vec<SpottedEvent> {
    let mut out = Vec::with_capacity(cands.len());
    for mut pool in groups(cands) {
        while !pool.is_empty() {
            let best = (0..pool.len())
                .min_by(|&a, &b| rank(&pool[a], &pool[b]))
                .expect("non-empty");
            let sel = pool.swap_remove(best);
            if window > 0 {
                for c in pool.iter_mut() {
                    let df = c.frame.abs_diff(sel.frame);
                    if df <= window {
                        c.score *= decay(df);
                    }
                }
            }
            out.push(sel);
        }
    }
    out.retain(|c| c.score >= final_threshold);
    out
}

/// Soft-NMS. Linear decay is `1 - (window - |df| + 1) / (window + 1)`,
/// gaussian is `exp(-df^2 / (2 sigma^2))`. `window == 0` disables decay.
pub fn soft_nms(
    cands: Vec<SpottedEvent>,
    window: usize,
    mode: SnmsMode,
    sigma: f64,
    final_threshold: f64,
) -> Result<Vec<SpottedEvent>> {
    match mode {
        SnmsMode::Linear => Ok(soft_nms_with(
            cands,
            window,
            |df| 1.0 - (window as f64 - df as f64 + 1.0) / (window as f64 + 1.0),
            final_threshold,
        )),
        SnmsMode::Gaussian => {
            if sigma <= 0.0 {
                return config_err("soft-NMS sigma must be > 0");
            }
            Ok(soft_nms_with(
                cands,
                window,
                |df| (-((df * df) as f64) / (2.0 * sigma * sigma)).exp(),
                final_threshold,
            ))
        }
    }
}

/// Stitch, decode and suppress one video.
pub fn spot_video(
    model: &Model,
    store: &ParamStore<f32>,
    video: &SyntheticVideo,
    cfg: &InferCfg,
) -> Result<(Vec<SpottedEvent>, Option<InferWarning>)> {
    let (preds, warn) = stitch(model, store, video, cfg.overlap)?;
    let cands = decode_strided(
        &video.video_id,
        &preds,
        cfg.threshold,
        1,
        0,
        video.len(),
        cfg.use_displacement,
    );
    Ok((cfg.suppress(cands), warn))
}

/// Per-scale candidates for one video, decoded clip by clip (pyramid
/// models predict at strides `k^j` so their clips are not stitched).
pub fn pyramid_candidates(
    model: &Model,
    store: &ParamStore<f32>,
    video: &SyntheticVideo,
    cfg: &InferCfg,
) -> Result<Vec<Vec<SpottedEvent>>> {
    let l = model.cfg.clip_len;
    let strides = model.scale_strides();
    let mut per_scale = vec![Vec::new(); strides.len()];
    for s in clip_starts(video.len(), l, cfg.overlap) {
        let frames = clip_frames(video, s, l);
        let preds = predict_clip(model, store, &frames, video.height, video.width)?;
        for (j, p) in preds.iter().enumerate() {
            per_scale[j].extend(decode_strided(
                &video.video_id,
                p,
                cfg.threshold,
                strides[j],
                s,
                video.len(),
                cfg.use_displacement,
            ));
        }
    }
    Ok(per_scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedEvent {
    pub frame: usize,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPredictions {
    pub video_id: String,
    pub events: Vec<PredictedEvent>,
}

/// Groups events per video (sorted by id, events by frame then class).
pub fn group_predictions(events: &[SpottedEvent]) -> Vec<VideoPredictions> {
    let mut map: std::collections::BTreeMap<&str, Vec<PredictedEvent>> = Default::default();
    for e in events {
        map.entry(&e.video_id).or_default().push(PredictedEvent {
            frame: e.frame,
            class: e.class_id,
            score: e.score,
        });
    }
    map.into_iter()
        .map(|(id, mut ev)| {
            ev.sort_by(|a, b| a.frame.cmp(&b.frame).then(a.class.cmp(&b.class)));
            VideoPredictions {
                video_id: id.to_string(),
                events: ev,
            }
        })
        .collect()
}

pub fn save_predictions(path: &Path, events: &[SpottedEvent]) -> Result<()> {
    let json = serde_json::to_string_pretty(&group_predictions(events))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<SpottedEvent>> {
    let text = std::fs::read_to_string(path)?;
    let videos: Vec<VideoPredictions> = serde_json::from_str(&text)?;
    let mut out = Vec::new();
    for v in videos {
        for e in v.events {
            if e.class == 0 {
                return Err(Error::Format(format!("{}: class 0 is background", v.video_id)));
            }
            out.push(SpottedEvent {
                video_id: v.video_id.clone(),
                frame: e.frame,
                class_id: e.class,
                score: e.score,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(frame: usize, class_id: usize, score: f64) -> SpottedEvent {
        SpottedEvent {
            video_id: "v".into(),
            frame,
            class_id,
            score,
        }
    }

    fn preds(rows: &[Vec<f32>], disp: &[f32]) -> FramePredictions {
        FramePredictions {
            class_probs: Tensor::from_rows(rows).unwrap(),
            displacements: disp.to_vec(),
        }
    }

    #[test]
    fn clip_start_fixtures() {
        assert_eq!(clip_starts(150, 100, 0.5), vec![0, 50]);
        assert_eq!(clip_starts(300, 100, 0.0), vec![0, 100, 200]);
        assert_eq!(clip_starts(100, 100, 0.5), vec![0]);
        assert_eq!(clip_starts(260, 100, 0.5), vec![0, 50, 100, 150, 160]);
        assert_eq!(clip_starts(40, 100, 0.5), vec![0]);
    }

    #[test]
    fn stitch_averages_overlaps() {
        let a = preds(&vec![vec![1.0, 0.0]; 4], &[2.0; 4]);
        let b = preds(&vec![vec![0.0, 1.0]; 4], &[0.0; 4]);
        let s = stitch_clips(&[(0, a), (2, b)], 6).unwrap();
        assert_eq!(s.class_probs.row(0), &[1.0, 0.0]);
        assert_eq!(s.class_probs.row(2), &[0.5, 0.5]);
        assert_eq!(s.class_probs.row(5), &[0.0, 1.0]);
        assert_eq!(s.displacements, vec![2.0, 2.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn stitch_without_overlap_concatenates() {
        let a = preds(&[vec![0.2, 0.8], vec![0.6, 0.4]], &[1.0, -1.0]);
        let b = preds(&[vec![0.9, 0.1], vec![0.3, 0.7]], &[0.5, 0.0]);
        let s = stitch_clips(&[(0, a.clone()), (2, b.clone())], 4).unwrap();
        assert_eq!(&s.class_probs.data()[..4], a.class_probs.data());
        assert_eq!(&s.class_probs.data()[4..], b.class_probs.data());
        assert_eq!(s.displacements, vec![1.0, -1.0, 0.5, 0.0]);
    }

    #[test]
    fn stitch_reports_gaps() {
        let a = preds(&[vec![1.0, 0.0]], &[0.0]);
        assert!(matches!(stitch_clips(&[(0, a)], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn decode_fixture() {
        let mut rows = vec![vec![1.0, 0.0]; 12];
        rows[10] = vec![0.1, 0.9];
        let mut disp = vec![0.0; 12];
        disp[10] = -2.0;
        let out = decode_candidates("v", &preds(&rows, &disp), 0.01);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].frame, out[0].class_id), (8, 1));
        assert!((out[0].score - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decode_background_is_empty_and_keeps_duplicates() {
        let rows = vec![vec![1.0, 0.0, 0.0]; 5];
        assert!(decode_candidates("v", &preds(&rows, &[0.0; 5]), 0.01).is_empty());
        let rows = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let out = decode_candidates("v", &preds(&rows, &[1.0, 0.0]), 0.01);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|e| e.frame == 1));
    }

    #[test]
    fn decode_clamps_and_strides() {
        let rows = vec![vec![0.0, 1.0]; 3];
        let out = decode_strided("v", &preds(&rows, &[-5.0, 0.0, 9.0]), 0.01, 4, 0, 10, true);
        let frames: Vec<usize> = out.iter().map(|e| e.frame).collect();
        assert_eq!(frames, vec![0, 4, 9]);
    }

    #[test]
    fn nms_fixtures() {
        let kept = nms(vec![ev(10, 1, 0.9), ev(11, 1, 0.8)], 1);
        assert_eq!(kept, vec![ev(10, 1, 0.9)]);
        let kept = nms(vec![ev(10, 1, 0.9), ev(11, 2, 0.8)], 1);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn snms_identity_cases() {
        let one = soft_nms(vec![ev(3, 1, 0.7)], 3, SnmsMode::Linear, 1.0, 0.05).unwrap();
        assert_eq!(one, vec![ev(3, 1, 0.7)]);
        let cands = vec![ev(3, 1, 0.7), ev(4, 1, 0.6), ev(5, 1, 0.01)];
        let out = soft_nms(cands, 0, SnmsMode::Linear, 1.0, 0.05).unwrap();
        assert_eq!(out, vec![ev(3, 1, 0.7), ev(4, 1, 0.6)]);
    }

    #[test]
    fn snms_linear_decay_values() {
        let out = soft_nms(vec![ev(10, 1, 0.9), ev(11, 1, 0.8), ev(13, 1, 0.6)], 3, SnmsMode::Linear, 1.0, 0.0)
            .unwrap();
        // f11: 0.8 * (1 - 3/4) = 0.2; f13: 0.6 * (1 - 1/4) = 0.45, then f13 decays f11 by 1 - 2/4.
        assert_eq!(out[0], ev(10, 1, 0.9));
        assert_eq!(out[1].frame, 13);
        assert!((out[1].score - 0.45).abs() < 1e-12);
        assert!((out[2].score - 0.1).abs() < 1e-12);
    }

    #[test]
    fn snms_gaussian_requires_sigma() {
        assert!(matches!(
            soft_nms(vec![], 3, SnmsMode::Gaussian, 0.0, 0.05),
            Err(Error::Config(_))
        ));
        assert!(matches!("box".parse::<SnmsMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn predictions_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.json");
        let evs = vec![ev(3, 1, 0.5), ev(1, 2, 0.25)];
        save_predictions(&p, &evs).unwrap();
        let mut back = load_predictions(&p).unwrap();
        back.sort_by_key(|e| e.frame);
        assert_eq!(back, vec![ev(1, 2, 0.25), ev(3, 1, 0.5)]);
    }
}

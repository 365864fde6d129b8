//! Tolerance mAP, token discriminability and per-layer pyramid analysis.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{EventAnnotation, SyntheticVideo};
use crate::error::{Error, Result};
use crate::infer::{clip_frames, clip_starts, pyramid_candidates, spot_video, InferCfg, SpottedEvent};
use crate::model::{Model, TemporalModule};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

/// Per-class matching outcome: ranked `(score, is_tp)` pairs and GT count.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub ranked: Vec<(f64, bool)>,
    pub num_gt: usize,
}

/// Greedy score-descending matching: each prediction takes the nearest
/// unmatched same-class GT of its video within `delta` frames (ties go to
/// the earlier GT).
pub fn match_class(preds: &[SpottedEvent], gts: &[EventAnnotation], class_id: usize, delta: usize) -> MatchResult {
    let gts: Vec<&EventAnnotation> = gts.iter().filter(|g| g.class_id == class_id).collect();
    let mut ps: Vec<&SpottedEvent> = preds.iter().filter(|p| p.class_id == class_id).collect();
    ps.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.video_id.cmp(&b.video_id))
            .then(a.frame.cmp(&b.frame))
    });
    let mut used = vec![false; gts.len()];
    let mut ranked = Vec::with_capacity(ps.len());
    for p in ps {
        let mut best: Option<(usize, usize, usize)> = None;
        for (i, g) in gts.iter().enumerate() {
            if used[i] || g.video_id != p.video_id {
                continue;
            }
            let dist = g.frame.abs_diff(p.frame);
            if dist > delta {
                continue;
            }
            if best.is_none_or(|(bd, bf, _)| dist < bd || (dist == bd && g.frame < bf)) {
                best = Some((dist, g.frame, i));
            }
        }
        if let Some((_, _, i)) = best {
            used[i] = true;
        }
        ranked.push((p.score, best.is_some()));
    }
    MatchResult {
        ranked,
        num_gt: gts.len(),
    }
}

/// All-point interpolated AP of a ranked match list (0 when there are GTs
/// but no predictions, and also 0 for a class without GTs).
pub fn ap_from_matches(m: &MatchResult) -> f64 {
    if m.num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(m.ranked.len());
    for (i, &(_, hit)) in m.ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / m.num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut envelope = 0.0f64;
    // Walk backwards for the precision envelope.
    let mut env = vec![0.0; points.len()];
    for i in (0..points.len()).rev() {
        envelope = envelope.max(points[i].1);
        env[i] = envelope;
    }
    for (i, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * env[i];
            prev_recall = r;
        }
    }
    ap
}

pub fn average_precision(preds: &[SpottedEvent], gts: &[EventAnnotation], class_id: usize, delta: usize) -> f64 {
    ap_from_matches(&match_class(preds, gts, class_id, delta))
}

/// Unweighted mean AP over classes `1..=C` having at least one GT.
pub fn map_at(preds: &[SpottedEvent], gts: &[EventAnnotation], num_classes: usize, delta: usize) -> f64 {
    let aps: Vec<f64> = (1..=num_classes)
        .filter(|&c| gts.iter().any(|g| g.class_id == c))
        .map(|c| average_precision(preds, gts, c, delta))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub const DISC_EPS: f64 = 1e-12;

/// Mean cosine similarity between each token (row) and the mean token.
pub fn discriminability<T: Float>(tokens: &Tensor<T>) -> Result<f64> {
    let (l, d) = (tokens.rows(), tokens.cols());
    if l == 0 {
        return Err(Error::Contract("discriminability needs at least one token".into()));
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..l {
        for (m, &v) in mean.iter_mut().zip(tokens.row(i)) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= l as f64);
    let mnorm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..l {
        let row = tokens.row(i);
        let dot: f64 = row.iter().zip(&mean).map(|(&a, &b)| a.as_f64() * b).sum();
        let n = row.iter().map(|&a| a.as_f64() * a.as_f64()).sum::<f64>().sqrt();
        total += dot / (n * mnorm).max(DISC_EPS);
    }
    Ok(total / l as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSimilarity {
    pub stage: String,
    pub similarity: f64,
}

/// Mean similarity per hooked stage over the probe clips.
pub fn discriminability_profile(
    model: &Model,
    store: &ParamStore<f32>,
    clips: &[(Vec<f32>, usize, usize)],
) -> Result<Vec<StageSimilarity>> {
    let mut names: Vec<String> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    for (frames, h, w) in clips {
        let mut g = Graph::inference(store);
        let out = model.forward(&mut g, frames, *h, *w)?;
        if names.is_empty() {
            names = out.stages.iter().map(|(n, _)| n.clone()).collect();
            sums = vec![0.0; names.len()];
        }
        for (s, (_, v)) in sums.iter_mut().zip(&out.stages) {
            *s += discriminability(g.value(*v))?;
        }
    }
    if clips.is_empty() {
        return Err(Error::Contract("discriminability profile needs probe clips".into()));
    }
    Ok(names
        .into_iter()
        .zip(sums)
        .map(|(stage, s)| StageSimilarity {
            stage,
            similarity: s / clips.len() as f64,
        })
        .collect())
}

/// Non-overlapping probe clips drawn from the start of each video.
pub fn probe_clips(videos: &[SyntheticVideo], l: usize, per_video: usize) -> Vec<(Vec<f32>, usize, usize)> {
    let mut out = Vec::new();
    for v in videos {
        for s in clip_starts(v.len(), l, 0.0).into_iter().take(per_video) {
            out.push((clip_frames(v, s, l), v.height, v.width));
        }
    }
    out
}

/// Spots every video and returns the flattened event list.
pub fn spot_all(
    model: &Model,
    store: &ParamStore<f32>,
    videos: &[SyntheticVideo],
    cfg: &InferCfg,
) -> Result<Vec<SpottedEvent>> {
    use rayon::prelude::*;
    let per: Vec<Vec<SpottedEvent>> = videos
        .par_iter()
        .map(|v| spot_video(model, store, v, cfg).map(|(e, _)| e))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn all_events(videos: &[SyntheticVideo]) -> Vec<EventAnnotation> {
    videos.iter().flat_map(|v| v.events.iter().cloned()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub map_d1: f64,
    pub map_d2: f64,
}

/// mAP at δ = 1 and δ = 2 for a model on a split. Pyramid models are
/// evaluated on the union of all scales.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    videos: &[SyntheticVideo],
    cfg: &InferCfg,
) -> Result<MapRow> {
    let preds = if model.cfg.temporal_module == TemporalModule::SgpPyramid {
        let per = pyramid_per_scale(model, store, videos, cfg)?;
        cfg.suppress(per.into_iter().flatten().collect())
    } else {
        spot_all(model, store, videos, cfg)?
    };
    let gts = all_events(videos);
    let c = model.cfg.num_classes;
    Ok(MapRow {
        map_d1: map_at(&preds, &gts, c, 1),
        map_d2: map_at(&preds, &gts, c, 2),
    })
}

fn pyramid_per_scale(
    model: &Model,
    store: &ParamStore<f32>,
    videos: &[SyntheticVideo],
    cfg: &InferCfg,
) -> Result<Vec<Vec<SpottedEvent>>> {
    use rayon::prelude::*;
    let per_video: Vec<Vec<Vec<SpottedEvent>>> = videos
        .par_iter()
        .map(|v| pyramid_candidates(model, store, v, cfg))
        .collect::<Result<_>>()?;
    let scales = model.scale_strides().len();
    let mut out = vec![Vec::new(); scales];
    for v in per_video {
        for (j, c) in v.into_iter().enumerate() {
            out[j].extend(c);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidLayerRow {
    pub layer: usize,
    pub standalone_map: f64,
    pub cumulative_map: f64,
}

/// Standalone (layer j only) and cumulative (layers 0..=j) mAP per layer.
pub fn pyramid_layer_map(
    model: &Model,
    store: &ParamStore<f32>,
    videos: &[SyntheticVideo],
    delta: usize,
    cfg: &InferCfg,
) -> Result<Vec<PyramidLayerRow>> {
    let per = pyramid_per_scale(model, store, videos, cfg)?;
    Ok(layer_table(&per, &all_events(videos), model.cfg.num_classes, delta, cfg))
}

/// Layer table from per-scale candidate lists.
pub fn layer_table(
    per_scale: &[Vec<SpottedEvent>],
    gts: &[EventAnnotation],
    num_classes: usize,
    delta: usize,
    cfg: &InferCfg,
) -> Vec<PyramidLayerRow> {
    let mut acc = Vec::new();
    per_scale
        .iter()
        .enumerate()
        .map(|(j, c)| {
            acc.extend(c.iter().cloned());
            PyramidLayerRow {
                layer: j,
                standalone_map: map_at(&cfg.suppress(c.clone()), gts, num_classes, delta),
                cumulative_map: map_at(&cfg.suppress(acc.clone()), gts, num_classes, delta),
            }
        })
        .collect()
}

/// Classes present in a GT list.
pub fn gt_classes(gts: &[EventAnnotation]) -> BTreeSet<usize> {
    gts.iter().map(|g| g.class_id).collect()
}

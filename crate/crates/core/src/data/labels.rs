//! Per-frame supervision: radius labelling, strided (pyramid) labelling and
//! label dilation.

use super::{Clip, ClipEvent, SyntheticVideo};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class targets (`len x (C + 1)`, rows on the simplex) and signed frame
/// displacements towards the assigned event.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub class_targets: Tensor<f32>,
    pub disp_targets: Vec<f32>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.disp_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.disp_targets.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_targets.cols() - 1
    }

    /// Hard label of row `i` (argmax of the target distribution).
    pub fn label(&self, i: usize) -> usize {
        let row = self.class_targets.row(i);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        best
    }
}

/// Labels index `i` (covering original frames `[i*stride, (i+1)*stride)`)
/// with the nearest event whose frame lies within `radius` frames of that
/// interval; ties go to the earlier event. The displacement target is
/// `event - i*stride`. With `stride == 1` this is plain radius labelling.
pub fn assign_targets(
    events: &[ClipEvent],
    len: usize,
    stride: usize,
    radius: usize,
    num_classes: usize,
) -> Targets {
    let rows = len.div_ceil(stride);
    let mut class_targets = Tensor::zeros(&[rows, num_classes + 1]);
    let mut disp_targets = vec![0.0f32; rows];
    for i in 0..rows {
        let lo = (i * stride) as i64;
        let hi = lo + stride as i64 - 1;
        let mut best: Option<(i64, i64, usize)> = None;
        for e in events {
            let dist = if e.offset < lo {
                lo - e.offset
            } else if e.offset > hi {
                e.offset - hi
            } else {
                0
            };
            if dist > radius as i64 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bd, bo, _)) => dist < bd || (dist == bd && e.offset < bo),
            };
            if better {
                best = Some((dist, e.offset, e.class_id));
            }
        }
        let cols = num_classes + 1;
        match best {
            Some((_, off, class)) => {
                class_targets.data_mut()[i * cols + class] = 1.0;
                disp_targets[i] = (off - lo) as f32;
            }
            None => class_targets.data_mut()[i * cols] = 1.0,
        }
    }
    Targets {
        class_targets,
        disp_targets,
    }
}

/// Cuts `[start, start + len)` from a video and labels it with radius
/// `radius`.
pub fn sample_clip(
    video: &SyntheticVideo,
    start: usize,
    len: usize,
    radius: usize,
    num_classes: usize,
) -> Result<Clip> {
    if len == 0 || start + len > video.len() {
        return Err(Error::Range(format!(
            "clip [{start}, {}) outside video {} of length {}",
            start + len,
            video.video_id,
            video.len()
        )));
    }
    let fs = video.frame_size();
    let frames = video.frames[start * fs..(start + len) * fs].to_vec();
    // Keep every event that can influence labels at any stride.
    let events: Vec<ClipEvent> = video
        .events
        .iter()
        .map(|e| ClipEvent {
            offset: e.frame as i64 - start as i64,
            class_id: e.class_id,
        })
        .filter(|e| e.offset >= -(len as i64) && e.offset < 2 * len as i64)
        .collect();
    let targets = assign_targets(&events, len, 1, radius, num_classes);
    Ok(Clip {
        video_id: video.video_id.clone(),
        start,
        len,
        height: video.height,
        width: video.width,
        frames,
        events,
        targets,
        mixup: None,
    })
}

/// Targets of `clip` at a temporal stride, honouring mixup blending.
pub fn clip_targets(clip: &Clip, stride: usize, radius: usize, num_classes: usize) -> Targets {
    let own = assign_targets(&clip.events, clip.len, stride, radius, num_classes);
    match &clip.mixup {
        None => own,
        Some(m) => {
            let other = assign_targets(&m.partner_events, clip.len, stride, radius, num_classes);
            blend_targets(&own, &other, m.lambda)
        }
    }
}

/// `lambda * a + (1 - lambda) * b` for class targets; displacements come
/// from the dominant side (`lambda >= 0.5` picks `a`).
pub(crate) fn blend_targets(a: &Targets, b: &Targets, lambda: f32) -> Targets {
    let mut class_targets = a.class_targets.clone();
    for (o, &v) in class_targets
        .data_mut()
        .iter_mut()
        .zip(b.class_targets.data())
    {
        *o = lambda * *o + (1.0 - lambda) * v;
    }
    let disp_targets = if lambda >= 0.5 {
        a.disp_targets.clone()
    } else {
        b.disp_targets.clone()
    };
    Targets {
        class_targets,
        disp_targets,
    }
}

/// Classification-only labels: every frame within `dilation` of an exact
/// event frame (a positive row with zero displacement) takes that event's
/// class; all displacements become zero. `dilation == 0` returns the input.
pub fn dilate_labels(targets: &Targets, dilation: usize) -> Targets {
    if dilation == 0 {
        return targets.clone();
    }
    let len = targets.len();
    let events: Vec<ClipEvent> = (0..len)
        .filter_map(|i| {
            let c = targets.label(i);
            (c != 0 && targets.disp_targets[i] == 0.0).then_some(ClipEvent {
                offset: i as i64,
                class_id: c,
            })
        })
        .collect();
    let mut out = assign_targets(&events, len, 1, dilation, targets.num_classes());
    out.disp_targets.fill(0.0);
    out
}

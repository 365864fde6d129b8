//! Synthetic precise-event-spotting videos, clip sampling and augmentation.

mod augment;
mod generator;
mod io;
mod labels;

pub use augment::{augment, center_crop, mixup, mixup_with_lambda, AugmentCfg, CropCfg};
pub use generator::{generate_dataset, GeneratorSpec, EVENT_NAMES};
pub use io::{
    events_by_video, load_annotations, load_frames, save_annotations, save_frames, FrameEncoding,
    VideoAnnotations,
};
pub use labels::{assign_targets, clip_targets, dilate_labels, sample_clip, Targets};
pub(crate) use labels::blend_targets as blend;

use serde::{Deserialize, Serialize};

/// A ground-truth event: class `class_id` (1-based, 0 is background) at
/// `frame` of video `video_id`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub video_id: String,
    pub frame: usize,
    pub class_id: usize,
}

/// A rendered video: `len` frames of `height x width x 3` values in `[0, 1]`,
/// stored frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<f32>,
    pub events: Vec<EventAnnotation>,
    pub fps: f32,
}

impl SyntheticVideo {
    pub fn frame_size(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn len(&self) -> usize {
        if self.frame_size() == 0 {
            0
        } else {
            self.frames.len() / self.frame_size()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_size();
        &self.frames[i * n..(i + 1) * n]
    }
}

/// An event position relative to a clip start (may lie outside the clip).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipEvent {
    pub offset: i64,
    pub class_id: usize,
}

/// Partner record kept when two clips are blended by mixup.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupInfo {
    pub partner_events: Vec<ClipEvent>,
    pub lambda: f32,
}

/// One training clip: `len` frames plus per-frame supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub video_id: String,
    pub start: usize,
    pub len: usize,
    pub height: usize,
    pub width: usize,
    /// `len x height x width x 3`, frame-major.
    pub frames: Vec<f32>,
    /// Events near the clip, with offsets relative to `start`.
    pub events: Vec<ClipEvent>,
    pub targets: Targets,
    pub mixup: Option<MixupInfo>,
}

impl Clip {
    pub fn frame_size(&self) -> usize {
        self.height * self.width * 3
    }
}

pub type ClipBatch = Vec<Clip>;

//! Annotation JSON and packed frame storage.
//!
//! Packed layout: `PESV1`, a dtype flag byte (0 = f32, 1 = u8), a `u32`
//! video count, then per video: `u32` id length, id bytes, `u32` frames,
//! `u32` height, `u32` width, `f32` fps and the row-major payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EventAnnotation, SyntheticVideo};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"PESV1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameEncoding {
    F32,
    U8,
}

#[derive(Serialize, Deserialize)]
struct AnnFile {
    videos: Vec<AnnVideo>,
}

#[derive(Serialize, Deserialize)]
struct AnnVideo {
    id: String,
    length: usize,
    fps: f32,
    events: Vec<AnnEvent>,
}

#[derive(Serialize, Deserialize)]
struct AnnEvent {
    frame: usize,
    class: usize,
}

/// Per-video metadata read back from an annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotations {
    pub video_id: String,
    pub length: usize,
    pub fps: f32,
    pub events: Vec<EventAnnotation>,
}

pub fn save_annotations(path: &Path, videos: &[SyntheticVideo]) -> Result<()> {
    let doc = AnnFile {
        videos: videos
            .iter()
            .map(|v| AnnVideo {
                id: v.video_id.clone(),
                length: v.len(),
                fps: v.fps,
                events: v
                    .events
                    .iter()
                    .map(|e| AnnEvent {
                        frame: e.frame,
                        class: e.class_id,
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<Vec<VideoAnnotations>> {
    let doc: AnnFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let mut out = Vec::with_capacity(doc.videos.len());
    for v in doc.videos {
        let mut last: Option<usize> = None;
        for e in &v.events {
            if e.class == 0 || e.frame >= v.length {
                return Err(Error::Format(format!(
                    "video {}: invalid event (frame {}, class {})",
                    v.id, e.frame, e.class
                )));
            }
            if last.is_some_and(|l| l >= e.frame) {
                return Err(Error::Format(format!("video {}: events not strictly sorted", v.id)));
            }
            last = Some(e.frame);
        }
        out.push(VideoAnnotations {
            events: v
                .events
                .iter()
                .map(|e| EventAnnotation {
                    video_id: v.id.clone(),
                    frame: e.frame,
                    class_id: e.class,
                })
                .collect(),
            video_id: v.id,
            length: v.length,
            fps: v.fps,
        })
    }
    Ok(out)
}

/// All ground-truth events of an annotation file keyed by video id.
pub fn events_by_video(anns: &[VideoAnnotations]) -> BTreeMap<String, Vec<EventAnnotation>> {
    anns.iter()
        .map(|a| (a.video_id.clone(), a.events.clone()))
        .collect()
}

pub fn save_frames(path: &Path, videos: &[SyntheticVideo], enc: FrameEncoding) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[match enc {
        FrameEncoding::F32 => 0u8,
        FrameEncoding::U8 => 1u8,
    }])?;
    write_u32(&mut w, videos.len())?;
    for v in videos {
        write_u32(&mut w, v.video_id.len())?;
        w.write_all(v.video_id.as_bytes())?;
        write_u32(&mut w, v.len())?;
        write_u32(&mut w, v.height)?;
        write_u32(&mut w, v.width)?;
        w.write_all(&v.fps.to_le_bytes())?;
        match enc {
            FrameEncoding::F32 => {
                for x in &v.frames {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            FrameEncoding::U8 => {
                let bytes: Vec<u8> = v
                    .frames
                    .iter()
                    .map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect();
                w.write_all(&bytes)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a packed frame file. Events are attached from `annotations` when
/// given (matched by video id).
pub fn load_frames(path: &Path, annotations: Option<&[VideoAnnotations]>) -> Result<Vec<SyntheticVideo>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a packed frame file (bad magic)".into()));
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let enc = match flag[0] {
        0 => FrameEncoding::F32,
        1 => FrameEncoding::U8,
        f => return Err(Error::Format(format!("unknown dtype flag {f}"))),
    };
    let count = read_u32(&mut r)?;
    let by_id = annotations.map(events_by_video);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(&mut r)?;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let video_id =
            String::from_utf8(id).map_err(|_| Error::Format("video id is not utf-8".into()))?;
        let len = read_u32(&mut r)?;
        let height = read_u32(&mut r)?;
        let width = read_u32(&mut r)?;
        let mut fps = [0u8; 4];
        r.read_exact(&mut fps)?;
        let n = len * height * width * 3;
        let frames = match enc {
            FrameEncoding::F32 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect()
            }
            FrameEncoding::U8 => {
                let mut buf = vec![0u8; n];
                r.read_exact(&mut buf)?;
                buf.iter().map(|&b| b as f32 / 255.0).collect()
            }
        };
        let events = by_id
            .as_ref()
            .and_then(|m| m.get(&video_id).cloned())
            .unwrap_or_default();
        out.push(SyntheticVideo {
            video_id,
            height,
            width,
            frames,
            events,
            fps: f32::from_le_bytes(fps),
        });
    }
    Ok(out)
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

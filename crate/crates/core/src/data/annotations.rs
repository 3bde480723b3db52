//! JSON Lines annotation files, one clip per line:
//! `{clip_id, class_label, fps, frames: [{t, detections: [{label, bbox, conf}]}]}`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AccidentClass;
use crate::error::{Error, Result};
use crate::scene_graph::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedFrame {
    /// Seconds from clip start.
    pub t: f64,
    pub detections: Vec<Detection>,
}

/// Annotated ego-view frames of one clip plus its accident class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionClip {
    pub clip_id: String,
    pub class_label: AccidentClass,
    pub fps: f64,
    pub frames: Vec<AnnotatedFrame>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClip {
    clip_id: String,
    class_label: String,
    fps: f64,
    frames: Vec<AnnotatedFrame>,
}

fn validate(raw: RawClip) -> std::result::Result<DetectionClip, String> {
    let class_label = AccidentClass::ALL
        .iter()
        .copied()
        .find(|c| c.name() == raw.class_label)
        .ok_or_else(|| {
            format!(
                "unknown class label {:?}; valid labels are {:?}",
                raw.class_label,
                AccidentClass::names()
            )
        })?;
    if raw.clip_id.is_empty() {
        return Err("empty clip_id".into());
    }
    if !(raw.fps > 0.0 && raw.fps.is_finite()) {
        return Err(format!("fps must be positive, got {}", raw.fps));
    }
    if raw.frames.is_empty() {
        return Err(format!("clip {:?} has no frames", raw.clip_id));
    }
    for (fi, frame) in raw.frames.iter().enumerate() {
        if !frame.t.is_finite() {
            return Err(format!("frame {fi}: non-finite timestamp"));
        }
        if let Some((di, _)) = frame.detections.iter().enumerate().find(|(_, d)| !d.is_valid(None)) {
            return Err(format!(
                "frame {fi}, detection {di}: bbox must satisfy x_min < x_max, y_min < y_max with confidence in [0, 1]"
            ));
        }
    }
    Ok(DetectionClip {
        clip_id: raw.clip_id,
        class_label,
        fps: raw.fps,
        frames: raw.frames,
    })
}

/// Parse annotation text; `origin` is used in error messages.
pub fn parse_annotations(text: &str, origin: &Path) -> Result<Vec<DetectionClip>> {
    let mut clips = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Annotation {
            path: origin.to_path_buf(),
            line: line_no,
            message,
        };
        let raw: RawClip = serde_json::from_str(line).map_err(|e| err(format!("malformed record: {e}")))?;
        let clip = validate(raw).map_err(err)?;
        if !seen.insert(clip.clip_id.clone()) {
            return Err(err(format!("duplicate clip_id {:?}", clip.clip_id)));
        }
        clips.push(clip);
    }
    Ok(clips)
}

pub fn load_annotations(path: &Path) -> Result<Vec<DetectionClip>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn annotations_to_string(clips: &[DetectionClip]) -> String {
    let mut out = String::new();
    for c in clips {
        out.push_str(&serde_json::to_string(c).expect("clips serialize"));
        out.push('\n');
    }
    out
}

pub fn write_annotations(path: &Path, clips: &[DetectionClip]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(annotations_to_string(clips).as_bytes())
        .map_err(|e| Error::io(path, e))
}

//! Preprocessing rules applied to raw recordings: keyframe interpolation,
//! fixed-length clip segmentation and 16 → 8 bit depth conversion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RawRecording;
use crate::data_model::{ClipRecord, ObjectTrackSet};
use crate::error::{Error, Result};

/// `round(value * 255 / 65535)`, computed exactly in integers.
pub fn depth_16_to_8(value: u16) -> u8 {
    let v = value as u64;
    ((v * 255 * 2 + 65535) / (2 * 65535)) as u8
}

/// Linearly interpolates every track between its first and last keyframe.
///
/// Keyframe boxes are kept as-is; frames outside the keyframe span stay empty.
pub fn interpolate_keyframes(sparse: &ObjectTrackSet) -> Result<ObjectTrackSet> {
    let mut out = sparse.clone();
    for track in &mut out.tracks {
        let keys: Vec<usize> = track
            .keyframes
            .iter()
            .enumerate()
            .filter(|&(f, &k)| k && track.boxes[f].is_some())
            .map(|(f, _)| f)
            .collect();
        if keys.is_empty() {
            return Err(Error::NoKeyframes { track_id: track.track_id });
        }
        let (first, last) = (keys[0], keys[keys.len() - 1]);
        for f in (0..first).chain(last + 1..track.boxes.len()) {
            track.boxes[f] = None;
        }
        for pair in keys.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (ba, bb) = (track.boxes[a].unwrap(), track.boxes[b].unwrap());
            for f in a + 1..b {
                let t = (f - a) as f64 / (b - a) as f64;
                track.boxes[f] = Some(ba.lerp(&bb, t));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentWarning {
    pub code: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct Segmented {
    pub clips: Vec<(ClipRecord, ObjectTrackSet)>,
    pub warnings: Vec<SegmentWarning>,
}

/// Cuts each action interval into consecutive clips of `round(clip_seconds * fps)`
/// frames anchored at the interval start. Tails shorter than a clip are dropped;
/// intervals shorter than one clip yield an `EMPTY_INTERVAL` warning.
pub fn segment_clips(rec: &RawRecording, clip_seconds: f64) -> Result<Segmented> {
    if !(clip_seconds > 0.0) {
        return Err(Error::InvalidConfig(format!("clip_seconds must be positive, got {clip_seconds}")));
    }
    let clip_len = (clip_seconds * rec.fps).round() as usize;
    if clip_len == 0 {
        return Err(Error::InvalidConfig("clip length rounds to zero frames".into()));
    }
    let dense = interpolate_keyframes(&rec.annotations)?;
    let mut out = Segmented::default();
    for (ai, act) in rec.action_table.iter().enumerate() {
        let len = act.end - act.start;
        let n = len / clip_len;
        if n == 0 {
            out.warnings.push(SegmentWarning {
                code: "EMPTY_INTERVAL".into(),
                detail: format!("{}: interval {ai} has {len} frames < {clip_len}", rec.recording_id),
            });
            continue;
        }
        for k in 0..n {
            let s = act.start + k * clip_len;
            let e = s + clip_len;
            let modality_frames: BTreeMap<_, _> = rec.frames.iter().map(|(m, fr)| (*m, fr[s..e].to_vec())).collect();
            let record = ClipRecord {
                clip_id: format!("{}_a{ai}_k{k}", rec.recording_id),
                participant_id: rec.participant_id.clone(),
                modality_frames,
                fps: rec.fps,
                fine_label: act.fine_label,
                coarse_label: act.coarse_label,
                lighting: rec.lighting,
            };
            out.clips.push((record, dense.crop(s, e)));
        }
    }
    Ok(out)
}

//! Dataset directories.
//!
//! ```text
//! DIR/dataset_card.json          scenario, rule table, seed, counts, warnings
//! DIR/split.json                 participant split
//! DIR/annotations/<clip>.json    one AnnotationFile per clip
//! DIR/frames/<clip>/<modality>/<frame>.png
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    participant_split, validate_clip, ActionTaxonomy, AnnotationFile, ClipRecord, Frame, Modality, ObjectTaxonomy,
    ObjectTrackSet, RuleTable, SplitManifest, SplitName, ValidationReport,
};
use crate::error::{Error, Result};
use crate::synth::{build_dataset, ScenarioSpec, SegmentWarning};

pub const CARD_FILE: &str = "dataset_card.json";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCard {
    pub seed: u64,
    pub scenario: ScenarioSpec,
    pub action_object_rules: RuleTable,
    pub num_clips: usize,
    pub clips_per_split: BTreeMap<String, usize>,
    pub warnings: Vec<SegmentWarning>,
}

/// Clips plus their participant split, in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub action_taxonomy: ActionTaxonomy,
    pub object_taxonomy: ObjectTaxonomy,
    pub split: SplitManifest,
    pub clips: Vec<(ClipRecord, ObjectTrackSet)>,
}

impl Dataset {
    /// Generates `spec` and splits participants with the scenario seed.
    pub fn synthesize(spec: &ScenarioSpec) -> Result<(Self, Vec<SegmentWarning>)> {
        let built = build_dataset(spec)?;
        let split = participant_split(&spec.participant_ids(), spec.split_counts(), spec.seed)?;
        let ds = Self {
            action_taxonomy: spec.action_taxonomy.clone(),
            object_taxonomy: spec.object_taxonomy.clone(),
            split,
            clips: built.clips,
        };
        Ok((ds, built.warnings))
    }

    pub fn split_clips(&self, split: SplitName) -> Vec<&(ClipRecord, ObjectTrackSet)> {
        let ids = self.split.participants(split);
        self.clips.iter().filter(|(r, _)| ids.contains(&r.participant_id)).collect()
    }

    pub fn validate(&self) -> Vec<(String, ValidationReport)> {
        self.clips
            .iter()
            .map(|(r, t)| (r.clip_id.clone(), validate_clip(r, t, &self.action_taxonomy, &self.object_taxonomy)))
            .filter(|(_, rep)| !rep.is_empty())
            .collect()
    }
}

fn frame_path(clip: &str, m: Modality, f: usize) -> PathBuf {
    PathBuf::from("frames").join(clip).join(m.name()).join(format!("{f:04}.png"))
}

fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    let (w, h) = (frame.width as u32, frame.height as u32);
    let res = match frame.channels {
        1 => GrayImage::from_raw(w, h, frame.data.clone()).map(|i| i.save(path)),
        3 => RgbImage::from_raw(w, h, frame.data.clone()).map(|i| i.save(path)),
        c => return Err(Error::ShapeMismatch(format!("cannot store {c}-channel frame"))),
    };
    res.ok_or_else(|| Error::ShapeMismatch("frame buffer size".into()))?
        .map_err(|e| Error::Image { path: path.into(), source: e })
}

fn load_png(path: &Path, channels: usize) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data = match channels {
        1 => img.into_luma8().into_raw(),
        _ => img.into_rgb8().into_raw(),
    };
    Ok(Frame { width, height, channels, data })
}

pub fn write_dataset(spec: &ScenarioSpec, dir: &Path) -> Result<DatasetCard> {
    let (ds, warnings) = Dataset::synthesize(spec)?;
    std::fs::create_dir_all(dir.join("annotations")).map_err(|e| Error::io(dir, e))?;
    ds.clips.par_iter().try_for_each(|(rec, tracks)| -> Result<()> {
        let mut paths = BTreeMap::new();
        for (&m, frames) in &rec.modality_frames {
            let rel: Vec<PathBuf> = (0..frames.len()).map(|f| frame_path(&rec.clip_id, m, f)).collect();
            let sub = dir.join("frames").join(&rec.clip_id).join(m.name());
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (frame, p) in frames.iter().zip(&rel) {
                save_png(frame, &dir.join(p))?;
            }
            paths.insert(m, rel);
        }
        let ann = AnnotationFile::from_tracks(rec, tracks, &ds.object_taxonomy, paths);
        ann.save(&dir.join("annotations").join(format!("{}.json", rec.clip_id)))
    })?;
    ds.split.save(&dir.join(SPLIT_FILE))?;
    let clips_per_split = [SplitName::Train, SplitName::Val, SplitName::Test]
        .into_iter()
        .map(|s| (format!("{s:?}").to_lowercase(), ds.split_clips(s).len()))
        .collect();
    let card = DatasetCard {
        seed: spec.seed,
        scenario: spec.clone(),
        action_object_rules: spec.action_object_rules.clone(),
        num_clips: ds.clips.len(),
        clips_per_split,
        warnings,
    };
    let path = dir.join(CARD_FILE);
    let s = serde_json::to_string_pretty(&card).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    Ok(card)
}

pub fn read_card(dir: &Path) -> Result<DatasetCard> {
    let path = dir.join(CARD_FILE);
    let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(&path, e))
}

/// Loads every clip of `dir`, in clip-id order. `modalities` restricts which
/// frame streams are decoded.
pub fn load_dataset(dir: &Path, modalities: Option<&[Modality]>) -> Result<Dataset> {
    let card = read_card(dir)?;
    let split = SplitManifest::load(&dir.join(SPLIT_FILE))?;
    let ann_dir = dir.join("annotations");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&ann_dir)
        .map_err(|e| Error::io(&ann_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let tax_o = card.scenario.object_taxonomy.clone();
    let clips = files
        .par_iter()
        .map(|p| {
            let ann = AnnotationFile::load(p)?;
            let mut modality_frames = BTreeMap::new();
            for (&m, paths) in &ann.modalities {
                if modalities.is_some_and(|ms| !ms.contains(&m)) {
                    continue;
                }
                let frames = paths.iter().map(|f| load_png(&dir.join(f), m.channels())).collect::<Result<Vec<_>>>()?;
                modality_frames.insert(m, frames);
            }
            let tracks = ann.to_tracks(&tax_o);
            let rec = ClipRecord {
                clip_id: ann.clip_id,
                participant_id: ann.participant_id,
                modality_frames,
                fps: ann.fps,
                fine_label: ann.fine_label,
                coarse_label: ann.coarse_label,
                lighting: ann.lighting,
            };
            Ok((rec, tracks))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { action_taxonomy: card.scenario.action_taxonomy, object_taxonomy: tax_o, split, clips })
}

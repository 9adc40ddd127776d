//! Annotation schema, label taxonomies, box conventions and participant-wise
//! splitting.
//!
//! Boxes are stored normalized to `[0, 1]` as `(x1, y1, x2, y2)` so the same
//! annotation serves every modality resolution.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTaxonomy {
    fine_labels: Vec<String>,
    coarse_labels: Vec<String>,
    fine_to_coarse: Vec<usize>,
}

impl ActionTaxonomy {
    pub fn new(fine_labels: Vec<String>, coarse_labels: Vec<String>, fine_to_coarse: Vec<usize>) -> Result<Self> {
        let tax = Self { fine_labels, coarse_labels, fine_to_coarse };
        tax.check()?;
        Ok(tax)
    }

    /// Re-checks invariants; used after deserialization.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("action taxonomy: {m}")));
        if self.fine_labels.is_empty() || self.coarse_labels.is_empty() {
            return bad("empty label list".into());
        }
        if self.fine_to_coarse.len() != self.fine_labels.len() {
            return bad("fine_to_coarse must be total over fine labels".into());
        }
        if let Some(c) = self.fine_to_coarse.iter().find(|&&c| c >= self.coarse_labels.len()) {
            return bad(format!("coarse index {c} out of range"));
        }
        let hit: BTreeSet<_> = self.fine_to_coarse.iter().copied().collect();
        if hit.len() != self.coarse_labels.len() {
            return bad("fine_to_coarse is not surjective".into());
        }
        if !unique(&self.fine_labels) || !unique(&self.coarse_labels) {
            return bad("duplicate label names".into());
        }
        Ok(())
    }

    pub fn fine_labels(&self) -> &[String] {
        &self.fine_labels
    }

    pub fn coarse_labels(&self) -> &[String] {
        &self.coarse_labels
    }

    pub fn num_fine(&self) -> usize {
        self.fine_labels.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_labels.len()
    }

    pub fn coarse_of(&self, fine: usize) -> Option<usize> {
        self.fine_to_coarse.get(fine).copied()
    }

    pub fn fine_index(&self, name: &str) -> Option<usize> {
        self.fine_labels.iter().position(|l| l == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectTaxonomy {
    object_labels: Vec<String>,
    human_indices: Vec<usize>,
}

impl ObjectTaxonomy {
    pub fn new(object_labels: Vec<String>, human_indices: Vec<usize>) -> Result<Self> {
        let tax = Self { object_labels, human_indices };
        tax.check()?;
        Ok(tax)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("object taxonomy: {m}")));
        if self.human_indices.is_empty() {
            return bad("no human classes");
        }
        if self.human_indices.iter().any(|&i| i >= self.object_labels.len()) {
            return bad("human index out of range");
        }
        if !unique(&self.object_labels) {
            return bad("duplicate object names");
        }
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.object_labels
    }

    pub fn len(&self) -> usize {
        self.object_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.object_labels.is_empty()
    }

    pub fn human_indices(&self) -> &[usize] {
        &self.human_indices
    }

    pub fn is_human(&self, class_index: usize) -> bool {
        self.human_indices.contains(&class_index)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.object_labels.iter().position(|l| l == name)
    }
}

fn unique(names: &[String]) -> bool {
    let set: HashSet<&String> = names.iter().collect();
    set.len() == names.len()
}

/// One entry of the action → objects table: which object classes an action
/// involves and which motion pattern the synthetic renderer uses for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRule {
    pub objects: Vec<String>,
    pub motion: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTable {
    pub rules: BTreeMap<String, ActionRule>,
}

impl RuleTable {
    pub fn get(&self, action: &str) -> Option<&ActionRule> {
        self.rules.get(action)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "IR")]
    Ir,
    #[serde(rename = "Depth")]
    Depth,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Ir, Modality::Depth];

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Ir | Modality::Depth => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Ir => "IR",
            Modality::Depth => "Depth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Some(Modality::Rgb),
            "ir" => Some(Modality::Ir),
            "depth" => Some(Modality::Depth),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    Day,
    Night,
    Rain,
    Cloudy,
}

impl Lighting {
    pub const ALL: [Lighting; 4] = [Lighting::Day, Lighting::Night, Lighting::Rain, Lighting::Cloudy];
}

/// A single 8-bit image, row-major, channels interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Frame({}x{}x{})", self.width, self.height, self.channels)
    }
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0; width * height * channels] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub participant_id: String,
    /// Absent modalities are simply missing from the map.
    pub modality_frames: BTreeMap<Modality, Vec<Frame>>,
    pub fps: f64,
    pub fine_label: usize,
    pub coarse_label: usize,
    pub lighting: Lighting,
}

impl ClipRecord {
    /// Frame count of the first present modality (all are equal on valid records).
    pub fn num_frames(&self) -> usize {
        self.modality_frames.values().next().map_or(0, Vec::len)
    }
}

/// Normalized box `(x1, y1, x2, y2)` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl NormBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 < self.x2 && self.y1 < self.y2)
    }

    pub fn in_unit_range(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Horizontal reflection: `x1' = 1 - x2`, `x2' = 1 - x1`.
    pub fn hflip(&self) -> Self {
        Self { x1: 1.0 - self.x2, y1: self.y1, x2: 1.0 - self.x1, y2: self.y2 }
    }

    pub fn lerp(&self, other: &NormBox, t: f64) -> NormBox {
        let l = |a: f64, b: f64| a + (b - a) * t;
        NormBox {
            x1: l(self.x1, other.x1),
            y1: l(self.y1, other.y1),
            x2: l(self.x2, other.x2),
            y2: l(self.y2, other.y2),
        }
    }

    fn degenerate_error(&self) -> Error {
        Error::DegenerateBox { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: u32,
    pub class_index: usize,
    pub boxes: Vec<Option<NormBox>>,
    pub keyframes: Vec<bool>,
}

impl Track {
    pub fn new(track_id: u32, class_index: usize, num_frames: usize) -> Self {
        Self { track_id, class_index, boxes: vec![None; num_frames], keyframes: vec![false; num_frames] }
    }

    pub fn set_keyframe(&mut self, frame: usize, b: NormBox) {
        self.boxes[frame] = Some(b);
        self.keyframes[frame] = true;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectTrackSet {
    pub num_frames: usize,
    pub tracks: Vec<Track>,
}

impl ObjectTrackSet {
    pub fn new(num_frames: usize) -> Self {
        Self { num_frames, tracks: Vec::new() }
    }

    /// Crop to `[start, end)` and rebase frame indices to 0.
    pub fn crop(&self, start: usize, end: usize) -> Self {
        let tracks = self
            .tracks
            .iter()
            .map(|t| Track {
                track_id: t.track_id,
                class_index: t.class_index,
                boxes: t.boxes[start..end].to_vec(),
                keyframes: t.keyframes[start..end].to_vec(),
            })
            .filter(|t| t.boxes.iter().any(Option::is_some))
            .collect();
        Self { num_frames: end - start, tracks }
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tracks {
            for b in t.boxes.iter_mut().flatten() {
                *b = b.hflip();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    DegenerateBox,
    BoxOutOfRange,
    LabelMismatch,
    LabelOutOfRange,
    ModalityLengthMismatch,
    NoModalities,
    NonpositiveFps,
    KeyframeWithoutBox,
    UnknownObjectClass,
    TrackLengthMismatch,
    DuplicateTrackId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub code: IssueCode,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }

    fn push(&mut self, code: IssueCode, detail: impl Into<String>) {
        self.issues.push(Issue { code, detail: detail.into() });
    }
}

/// Checks every record/track invariant. Violations are collected, never raised.
pub fn validate_clip(
    record: &ClipRecord,
    tracks: &ObjectTrackSet,
    tax_a: &ActionTaxonomy,
    tax_o: &ObjectTaxonomy,
) -> ValidationReport {
    let mut report = ValidationReport::default();

    if !(record.fps > 0.0) {
        report.push(IssueCode::NonpositiveFps, format!("fps = {}", record.fps));
    }
    let lengths: BTreeSet<usize> = record.modality_frames.values().map(Vec::len).collect();
    if lengths.is_empty() {
        report.push(IssueCode::NoModalities, "no modality streams present");
    } else if lengths.len() > 1 {
        report.push(IssueCode::ModalityLengthMismatch, format!("lengths {lengths:?}"));
    }
    match tax_a.coarse_of(record.fine_label) {
        None => {
            report.push(IssueCode::LabelOutOfRange, format!("fine label {} of {}", record.fine_label, tax_a.num_fine()))
        }
        Some(c) if c != record.coarse_label => report.push(
            IssueCode::LabelMismatch,
            format!("fine {} maps to coarse {c}, record says {}", record.fine_label, record.coarse_label),
        ),
        Some(_) => {}
    }

    let num_frames = record.num_frames();
    let mut seen = HashSet::new();
    for t in &tracks.tracks {
        if !seen.insert(t.track_id) {
            report.push(IssueCode::DuplicateTrackId, format!("track {}", t.track_id));
        }
        if t.class_index >= tax_o.len() {
            report.push(IssueCode::UnknownObjectClass, format!("track {} class {}", t.track_id, t.class_index));
        }
        if t.boxes.len() != t.keyframes.len() || (!lengths.is_empty() && t.boxes.len() != num_frames) {
            report.push(
                IssueCode::TrackLengthMismatch,
                format!("track {} spans {} frames, clip has {num_frames}", t.track_id, t.boxes.len()),
            );
        }
        for (f, b) in t.boxes.iter().enumerate() {
            match b {
                Some(b) => {
                    if b.is_degenerate() {
                        report.push(IssueCode::DegenerateBox, format!("track {} frame {f}: {b:?}", t.track_id));
                    }
                    if !b.in_unit_range() {
                        report.push(IssueCode::BoxOutOfRange, format!("track {} frame {f}: {b:?}", t.track_id));
                    }
                }
                None => {
                    if t.keyframes.get(f).copied().unwrap_or(false) {
                        report.push(IssueCode::KeyframeWithoutBox, format!("track {} frame {f}", t.track_id));
                    }
                }
            }
        }
    }
    report
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitName::Train),
            "val" => Some(SplitName::Val),
            "test" => Some(SplitName::Test),
            _ => None,
        }
    }
}

impl SplitManifest {
    /// Split of a participant, if assigned.
    pub fn assignment(&self, participant: &str) -> Option<SplitName> {
        if self.train.contains(participant) {
            Some(SplitName::Train)
        } else if self.val.contains(participant) {
            Some(SplitName::Val)
        } else if self.test.contains(participant) {
            Some(SplitName::Test)
        } else {
            None
        }
    }

    pub fn participants(&self, split: SplitName) -> &BTreeSet<String> {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        self.train.is_disjoint(&self.val) && self.train.is_disjoint(&self.test) && self.val.is_disjoint(&self.test)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::json(path, e))
    }
}

/// Seeded participant-wise partition with exact `(train, val, test)` counts.
pub fn participant_split<S: AsRef<str>>(participants: &[S], counts: [usize; 3], seed: u64) -> Result<SplitManifest> {
    let mut ids: Vec<String> = participants.iter().map(|p| p.as_ref().to_string()).collect();
    ids.sort();
    ids.dedup();
    if counts.iter().sum::<usize>() != ids.len() {
        return Err(Error::CountMismatch { requested: counts, available: ids.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut it = ids.into_iter();
    let mut take = |n: usize| it.by_ref().take(n).collect::<BTreeSet<_>>();
    Ok(SplitManifest { train: take(counts[0]), val: take(counts[1]), test: take(counts[2]) })
}

/// Box in continuous token-grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

pub fn box_to_grid(b: &NormBox, grid_w: usize, grid_h: usize) -> Result<GridBox> {
    if grid_w == 0 || grid_h == 0 {
        return Err(Error::ShapeMismatch(format!("grid {grid_w}x{grid_h}")));
    }
    if b.is_degenerate() {
        return Err(b.degenerate_error());
    }
    let (w, h) = (grid_w as f64, grid_h as f64);
    Ok(GridBox { x1: b.x1 * w, y1: b.y1 * h, x2: b.x2 * w, y2: b.y2 * h })
}

pub fn grid_to_box(g: &GridBox, grid_w: usize, grid_h: usize) -> NormBox {
    let (w, h) = (grid_w as f64, grid_h as f64);
    NormBox { x1: g.x1 / w, y1: g.y1 / h, x2: g.x2 / w, y2: g.y2 / h }
}

// ---------------------------------------------------------------------------
// Annotation files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackAnnotation {
    pub track_id: u32,
    pub class: ClassRef,
    pub boxes: BTreeMap<usize, [f64; 4]>,
    #[serde(default)]
    pub keyframes: Vec<usize>,
}

/// On-disk annotation document, one per clip. Unknown fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub clip_id: String,
    pub participant_id: String,
    pub fps: f64,
    pub fine_label: usize,
    pub coarse_label: usize,
    pub lighting: Lighting,
    pub modalities: BTreeMap<Modality, Vec<PathBuf>>,
    pub tracks: Vec<TrackAnnotation>,
}

impl AnnotationFile {
    pub fn from_tracks(
        record: &ClipRecord,
        tracks: &ObjectTrackSet,
        tax_o: &ObjectTaxonomy,
        modalities: BTreeMap<Modality, Vec<PathBuf>>,
    ) -> Self {
        let tracks = tracks
            .tracks
            .iter()
            .map(|t| TrackAnnotation {
                track_id: t.track_id,
                class: match tax_o.labels().get(t.class_index) {
                    Some(n) => ClassRef::Name(n.clone()),
                    None => ClassRef::Index(t.class_index),
                },
                boxes: t
                    .boxes
                    .iter()
                    .enumerate()
                    .filter_map(|(f, b)| b.map(|b| (f, [b.x1, b.y1, b.x2, b.y2])))
                    .collect(),
                keyframes: t.keyframes.iter().enumerate().filter(|(_, &k)| k).map(|(f, _)| f).collect(),
            })
            .collect();
        Self {
            clip_id: record.clip_id.clone(),
            participant_id: record.participant_id.clone(),
            fps: record.fps,
            fine_label: record.fine_label,
            coarse_label: record.coarse_label,
            lighting: record.lighting,
            modalities,
            tracks,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.modalities.values().next().map_or(0, Vec::len)
    }

    /// Rebuilds the dense track set. Unknown class names map to an out-of-range
    /// index so `validate_clip` reports them.
    pub fn to_tracks(&self, tax_o: &ObjectTaxonomy) -> ObjectTrackSet {
        let n = self.num_frames();
        let mut set = ObjectTrackSet::new(n);
        for ta in &self.tracks {
            let class_index = match &ta.class {
                ClassRef::Index(i) => *i,
                ClassRef::Name(name) => tax_o.index_of(name).unwrap_or(usize::MAX),
            };
            let mut t = Track::new(ta.track_id, class_index, n);
            for (&f, b) in &ta.boxes {
                if f < n {
                    t.boxes[f] = Some(NormBox::new(b[0], b[1], b[2], b[3]));
                }
            }
            for &f in &ta.keyframes {
                if f < n {
                    t.keyframes[f] = true;
                }
            }
            set.tracks.push(t);
        }
        set
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::json(path, e))
    }
}

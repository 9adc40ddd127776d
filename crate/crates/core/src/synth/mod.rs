//! Procedural "cabin" recordings in the annotation format used by the rest of
//! the crate: a driver blob, flat-colored object blobs moving along scripted
//! motion patterns, and sparse keyframe annotations.

mod preprocess;
mod render;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use preprocess::{depth_16_to_8, interpolate_keyframes, segment_clips, SegmentWarning, Segmented};
pub use render::{class_color, MOTION_PATTERNS};

use crate::data_model::{
    ActionTaxonomy, ClipRecord, Frame, Lighting, Modality, ObjectTaxonomy, ObjectTrackSet, RuleTable, Track,
};
use crate::defaults;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub num_participants: usize,
    pub clips_per_participant: usize,
    /// (width, height) in pixels.
    pub frame_size: (usize, usize),
    pub fps: f64,
    pub action_taxonomy: ActionTaxonomy,
    pub object_taxonomy: ObjectTaxonomy,
    pub action_object_rules: RuleTable,
    /// Fine labels to draw recordings from; empty means every fine label.
    pub labels: Vec<String>,
    pub seed: u64,
    /// Maximum number of annotated tracks alive at once.
    pub max_tracks: usize,
    /// Inclusive range of action interval lengths in frames.
    pub interval_frames: (usize, usize),
    pub actions_per_recording: usize,
    /// Idle frames before, between and after action intervals.
    pub gap_frames: usize,
    /// Object edge length as a fraction of the frame.
    pub object_size: f64,
    /// Render an unannotated look-alike of the partner class next to the
    /// relevant object for labels that share a motion pattern.
    pub decoys: bool,
    /// Small annotated objects unrelated to the action.
    pub distractors: usize,
    pub modalities: Vec<Modality>,
    pub clip_seconds: f64,
    /// (train, val, test) participant counts; `None` uses a 60/20/20 split.
    pub split: Option<[usize; 3]>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            num_participants: 4,
            clips_per_participant: 3,
            frame_size: (112, 112),
            fps: 15.0,
            action_taxonomy: defaults::action_taxonomy(),
            object_taxonomy: defaults::object_taxonomy(),
            action_object_rules: defaults::rule_table(),
            labels: Vec::new(),
            seed: 0,
            max_tracks: 8,
            interval_frames: (45, 45),
            actions_per_recording: 1,
            gap_frames: 5,
            object_size: 0.14,
            decoys: false,
            distractors: 0,
            modalities: Modality::ALL.to_vec(),
            clip_seconds: 3.0,
            split: None,
        }
    }
}

impl ScenarioSpec {
    pub fn label_names(&self) -> Vec<String> {
        if self.labels.is_empty() {
            self.action_taxonomy.fine_labels().to_vec()
        } else {
            self.labels.clone()
        }
    }

    pub fn split_counts(&self) -> [usize; 3] {
        self.split.unwrap_or_else(|| {
            let n = self.num_participants;
            let val = n / 5;
            let test = n / 5;
            [n - val - test, val, test]
        })
    }

    pub fn participant_ids(&self) -> Vec<String> {
        (0..self.num_participants).map(participant_id).collect()
    }

    /// Checks the spec; `RULE_UNSATISFIABLE` when a rule cannot fit in `max_tracks`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        self.action_taxonomy.check()?;
        self.object_taxonomy.check()?;
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.frame_size.0 == 0 || self.frame_size.1 == 0 {
            return bad("empty frame size".into());
        }
        if self.interval_frames.0 == 0 || self.interval_frames.0 > self.interval_frames.1 {
            return bad(format!("bad interval range {:?}", self.interval_frames));
        }
        if self.actions_per_recording == 0 || self.modalities.is_empty() {
            return bad("need at least one action and one modality per recording".into());
        }
        if !(self.object_size > 0.0 && self.object_size < 0.5) {
            return bad(format!("object_size {} outside (0, 0.5)", self.object_size));
        }
        for label in self.label_names() {
            if self.action_taxonomy.fine_index(&label).is_none() {
                return bad(format!("label `{label}` not in taxonomy"));
            }
            let Some(rule) = self.action_object_rules.get(&label) else {
                return bad(format!("no rule for `{label}`"));
            };
            if rule.motion as usize >= MOTION_PATTERNS {
                return bad(format!("motion pattern {} of `{label}` is not defined", rule.motion));
            }
            for o in &rule.objects {
                if self.object_taxonomy.index_of(o).is_none() {
                    return bad(format!("rule `{label}` names unknown object `{o}`"));
                }
            }
            let required = self.required_tracks(&rule.objects);
            if required > self.max_tracks {
                return Err(Error::RuleUnsatisfiable { label, required, max_tracks: self.max_tracks });
            }
        }
        Ok(())
    }

    /// The driver is always annotated, so it counts even if the rule omits it.
    fn required_tracks(&self, objects: &[String]) -> usize {
        let non_human = objects
            .iter()
            .filter(|o| self.object_taxonomy.index_of(o).map_or(true, |i| !self.object_taxonomy.is_human(i)))
            .count();
        non_human + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionInterval {
    pub fine_label: usize,
    pub coarse_label: usize,
    /// First frame of the interval.
    pub start: usize,
    /// One past the last frame.
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct RawRecording {
    pub recording_id: String,
    pub participant_id: String,
    pub fps: f64,
    pub lighting: Lighting,
    pub frames: BTreeMap<Modality, Vec<Frame>>,
    pub action_table: Vec<ActionInterval>,
    /// Sparse keyframe annotations.
    pub annotations: ObjectTrackSet,
}

pub fn participant_id(p: usize) -> String {
    format!("P{p:02}")
}

/// Independent stream per `(seed, a, b)`, so parallel and serial generation agree.
pub fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ a) ^ b.rotate_left(17))
}

/// Labels assigned to recording `clip_index` of participant `p` (balanced per participant).
pub fn recording_labels(spec: &ScenarioSpec, p: usize, clip_index: usize) -> Vec<usize> {
    let names = spec.label_names();
    let k = spec.actions_per_recording;
    (0..k)
        .map(|j| {
            let name = &names[(clip_index * k + j + p) % names.len()];
            spec.action_taxonomy.fine_index(name).expect("validated label")
        })
        .collect()
}

/// Generates all `num_participants × clips_per_participant` recordings.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Vec<RawRecording>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..spec.num_participants).flat_map(|p| (0..spec.clips_per_participant).map(move |c| (p, c))).collect();
    jobs.into_par_iter().map(|(p, c)| generate_recording(spec, p, c, &recording_labels(spec, p, c))).collect()
}

struct PlannedTrack {
    track: Track,
    color: [u8; 3],
    depth: u16,
    annotated: bool,
}

/// Renders one recording with explicit labels. The random stream depends only
/// on `(seed, participant, clip_index)`, never on the labels, so two label
/// sequences render identical scenes apart from object identity.
pub fn generate_recording(
    spec: &ScenarioSpec,
    participant: usize,
    clip_index: usize,
    fine_labels: &[usize],
) -> Result<RawRecording> {
    let tax_o = &spec.object_taxonomy;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, participant as u64, clip_index as u64));
    let look = render::ParticipantLook::new(sub_seed(spec.seed, participant as u64, u64::MAX));

    // timeline
    let mut action_table = Vec::with_capacity(fine_labels.len());
    let mut cursor = spec.gap_frames;
    for &fine in fine_labels {
        let len = rng.gen_range(spec.interval_frames.0..=spec.interval_frames.1);
        let coarse = spec
            .action_taxonomy
            .coarse_of(fine)
            .ok_or_else(|| Error::InvalidScenario(format!("fine label {fine} out of range")))?;
        action_table.push(ActionInterval { fine_label: fine, coarse_label: coarse, start: cursor, end: cursor + len });
        cursor += len + spec.gap_frames;
    }
    let n = cursor;
    let lighting = Lighting::ALL[rng.gen_range(0..Lighting::ALL.len())];
    let size_jitter = rng.gen_range(0.9..1.1);

    let person = tax_o.human_indices()[0];
    let mut planned: Vec<PlannedTrack> = Vec::new();
    let mut driver = Track::new(0, person, n);
    let driver_box = look.driver_box;
    driver.set_keyframe(0, driver_box);
    driver.set_keyframe(n - 1, driver_box);
    let mut next_id = 1u32;

    let label_names = spec.label_names();
    for act in &action_table {
        let name = &spec.action_taxonomy.fine_labels()[act.fine_label];
        let rule = spec
            .action_object_rules
            .get(name)
            .ok_or_else(|| Error::InvalidScenario(format!("no rule for `{name}`")))?;
        let pattern = render::motion(rule.motion);
        let knots = knot_frames(act.start, act.end);
        let objects: Vec<usize> =
            rule.objects.iter().filter_map(|o| tax_o.index_of(o)).filter(|&i| !tax_o.is_human(i)).collect();

        // Anchors are drawn before looking at object identity.
        let base = spec.object_size * size_jitter;
        let slots = render::sample_anchors(&mut rng, objects.len().max(1) * 2 + spec.distractors, base);
        let decoy_class = if spec.decoys { partner_object(spec, &label_names, name) } else { None };

        if objects.is_empty() {
            for (k, &f) in knots.iter().enumerate() {
                let (dx, dy) = pattern.knots[k];
                driver.set_keyframe(f, render::shift_box(&driver_box, dx, dy));
            }
        } else {
            for &f in &knots {
                driver.set_keyframe(f, driver_box);
            }
        }

        for (rank, &cls) in objects.iter().enumerate() {
            let edge = base * (1.0 - 0.08 * rank as f64);
            let mut t = Track::new(next_id, cls, n);
            next_id += 1;
            for (k, &f) in knots.iter().enumerate() {
                let (dx, dy) = pattern.knots[k];
                t.set_keyframe(f, render::box_at(slots[2 * rank], edge, dx, dy));
            }
            planned.push(PlannedTrack {
                track: t,
                color: class_color(cls),
                depth: 12_000 + 1500 * rank as u16,
                annotated: true,
            });
            if rank == 0 {
                if let Some(dc) = decoy_class {
                    let mut d = Track::new(u32::MAX, dc, n);
                    for (k, &f) in knots.iter().enumerate() {
                        let (dx, dy) = pattern.knots[k];
                        d.set_keyframe(f, render::box_at(slots[1], edge, dx, dy));
                    }
                    planned.push(PlannedTrack { track: d, color: class_color(dc), depth: 12_000, annotated: false });
                }
            }
        }

        // distractors: annotated, small, static, classes unrelated to the rule
        let avail = spec.max_tracks.saturating_sub(spec.required_tracks(&rule.objects));
        let pool: Vec<usize> = (0..tax_o.len())
            .filter(|i| !tax_o.is_human(*i) && !objects.contains(i) && Some(*i) != decoy_class)
            .collect();
        for j in 0..spec.distractors.min(avail) {
            if pool.is_empty() {
                break;
            }
            let cls = pool[rng.gen_range(0..pool.len())];
            let mut t = Track::new(next_id, cls, n);
            next_id += 1;
            let slot = slots[objects.len().max(1) * 2 + j];
            for &f in &[knots[0], knots[knots.len() - 1]] {
                t.set_keyframe(f, render::box_at(slot, base * 0.5, 0.0, 0.0));
            }
            planned.push(PlannedTrack { track: t, color: class_color(cls), depth: 9_000, annotated: true });
        }
    }

    let mut annotations = ObjectTrackSet::new(n);
    annotations.tracks.push(driver);
    let mut items = Vec::new();
    for p in planned {
        if p.annotated {
            annotations.tracks.push(p.track.clone());
        }
        items.push(p);
    }

    let dense_driver =
        interpolate_keyframes(&ObjectTrackSet { num_frames: n, tracks: vec![annotations.tracks[0].clone()] })?;
    let mut scene = render::Scene::new(spec.frame_size, &look, lighting);
    scene.push(dense_driver.tracks[0].boxes.clone(), look.driver_color, 20_000);
    for p in &items {
        let dense = interpolate_keyframes(&ObjectTrackSet { num_frames: n, tracks: vec![p.track.clone()] })?;
        scene.push(dense.tracks[0].boxes.clone(), p.color, p.depth);
    }

    let mut frames = BTreeMap::new();
    for &m in &spec.modalities {
        frames.insert(m, (0..n).map(|f| scene.render(m, f)).collect());
    }

    Ok(RawRecording {
        recording_id: format!("{}_r{clip_index:03}", participant_id(participant)),
        participant_id: participant_id(participant),
        fps: spec.fps,
        lighting,
        frames,
        action_table,
        annotations,
    })
}

/// Interval frames carrying keyframes: five evenly spaced knots.
fn knot_frames(start: usize, end: usize) -> Vec<usize> {
    let last = end - 1 - start;
    let mut v: Vec<usize> = (0..5).map(|k| start + ((k * last) as f64 / 4.0).round() as usize).collect();
    v.dedup();
    if v.len() < 5 {
        // very short intervals: collapse to the endpoints
        v = vec![start, end - 1];
        v.dedup();
    }
    v
}

/// Primary object of the next label (cyclically) sharing this label's motion
/// pattern but not its primary object.
fn partner_object(spec: &ScenarioSpec, labels: &[String], name: &str) -> Option<usize> {
    let tax_o = &spec.object_taxonomy;
    let primary = |l: &str| -> Option<(u32, usize)> {
        let r = spec.action_object_rules.get(l)?;
        let obj = r.objects.iter().filter_map(|o| tax_o.index_of(o)).find(|&i| !tax_o.is_human(i))?;
        Some((r.motion, obj))
    };
    let (motion, own) = primary(name)?;
    let pos = labels.iter().position(|l| l == name)?;
    (1..labels.len())
        .map(|k| &labels[(pos + k) % labels.len()])
        .filter_map(|l| primary(l))
        .find(|&(m, o)| m == motion && o != own)
        .map(|(_, o)| o)
}

/// Generated recordings segmented into labeled clips.
#[derive(Debug, Clone, Default)]
pub struct SyntheticDataset {
    pub clips: Vec<(ClipRecord, ObjectTrackSet)>,
    pub warnings: Vec<SegmentWarning>,
}

pub fn build_dataset(spec: &ScenarioSpec) -> Result<SyntheticDataset> {
    let recs = generate_scenario(spec)?;
    let segmented: Vec<Segmented> =
        recs.par_iter().map(|r| segment_clips(r, spec.clip_seconds)).collect::<Result<_>>()?;
    let mut out = SyntheticDataset::default();
    for s in segmented {
        out.clips.extend(s.clips);
        out.warnings.extend(s.warnings);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::validate_clip;

    fn small_spec() -> ScenarioSpec {
        ScenarioSpec { num_participants: 2, clips_per_participant: 3, frame_size: (32, 32), ..ScenarioSpec::default() }
    }

    #[test]
    fn recordings_are_deterministic() {
        let spec = small_spec();
        let a = generate_scenario(&spec).unwrap();
        let b = generate_scenario(&spec).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frames, y.frames);
            assert_eq!(x.annotations, y.annotations);
            assert_eq!(x.action_table, y.action_table);
        }
    }

    #[test]
    fn serial_and_parallel_agree() {
        let spec = small_spec();
        let par = generate_scenario(&spec).unwrap();
        for (i, r) in par.iter().enumerate() {
            let (p, c) = (i / 3, i % 3);
            let s = generate_recording(&spec, p, c, &recording_labels(&spec, p, c)).unwrap();
            assert_eq!(s.frames, r.frames);
        }
    }

    #[test]
    fn drinking_intervals_have_person_and_bottle() {
        let spec = ScenarioSpec { labels: vec!["drinking from a bottle".into()], ..small_spec() };
        let (person, bottle) = (0, spec.object_taxonomy.index_of("bottle").unwrap());
        for rec in generate_scenario(&spec).unwrap() {
            let dense = interpolate_keyframes(&rec.annotations).unwrap();
            for act in &rec.action_table {
                let ok = (act.start..act.end).any(|f| {
                    let has = |c: usize| dense.tracks.iter().any(|t| t.class_index == c && t.boxes[f].is_some());
                    has(person) && has(bottle)
                });
                assert!(ok);
            }
        }
    }

    #[test]
    fn unsatisfiable_rule() {
        let mut spec = small_spec();
        spec.max_tracks = 2;
        spec.labels = vec!["cleaning glasses".into()];
        assert_eq!(spec.validate().unwrap_err().code(), "RULE_UNSATISFIABLE");
    }

    #[test]
    fn generated_clips_pass_validation() {
        let spec = ScenarioSpec { distractors: 2, decoys: true, ..small_spec() };
        let ds = build_dataset(&spec).unwrap();
        assert_eq!(ds.clips.len(), 6);
        for (rec, tracks) in &ds.clips {
            let r = validate_clip(rec, tracks, &spec.action_taxonomy, &spec.object_taxonomy);
            assert!(r.is_empty(), "{r:?}");
        }
    }

    #[test]
    fn segmentation_frame_total_matches_floor_rule() {
        let spec = ScenarioSpec { interval_frames: (30, 100), actions_per_recording: 2, ..small_spec() };
        let recs = generate_scenario(&spec).unwrap();
        let clip_len = 45;
        let expected: usize =
            recs.iter().flat_map(|r| r.action_table.iter()).map(|a| (a.end - a.start) / clip_len * clip_len).sum();
        let got: usize = build_dataset(&spec).unwrap().clips.iter().map(|(c, _)| c.num_frames()).sum();
        assert_eq!(got, expected);
    }

    /// Image-diff oracle: same scene, two labels sharing a motion pattern,
    /// pixels may only differ inside the relevant object's box.
    #[test]
    fn object_distinguishable_pair_differs_only_in_object_region() {
        let spec = ScenarioSpec { modalities: vec![Modality::Rgb, Modality::Ir], ..small_spec() };
        let ta = &spec.action_taxonomy;
        let a = ta.fine_index("drinking from a bottle").unwrap();
        let b = ta.fine_index("drinking from a cup").unwrap();
        let ra = generate_recording(&spec, 1, 2, &[a]).unwrap();
        let rb = generate_recording(&spec, 1, 2, &[b]).unwrap();
        let dense = interpolate_keyframes(&ra.annotations).unwrap();
        let obj = dense.tracks.iter().find(|t| t.class_index != 0).unwrap();
        let (w, h) = spec.frame_size;
        let mut differing = 0;
        for m in [Modality::Rgb, Modality::Ir] {
            for (f, (fa, fb)) in ra.frames[&m].iter().zip(&rb.frames[&m]).enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        let same = (0..fa.channels).all(|c| fa.get(x, y, c) == fb.get(x, y, c));
                        if !same {
                            differing += 1;
                            let b = obj.boxes[f].expect("diff outside object lifetime");
                            let (cx, cy) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                            assert!(cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2);
                        }
                    }
                }
            }
        }
        assert!(differing > 0);
        assert_eq!(ra.annotations.tracks.len(), rb.annotations.tracks.len());
    }

    #[test]
    fn decoy_uses_partner_class() {
        let spec = ScenarioSpec {
            labels: vec!["drinking from a bottle".into(), "making a phone call".into()],
            decoys: true,
            ..small_spec()
        };
        let names = spec.label_names();
        let phone = spec.object_taxonomy.index_of("phone").unwrap();
        assert_eq!(partner_object(&spec, &names, "drinking from a bottle"), Some(phone));
    }
}

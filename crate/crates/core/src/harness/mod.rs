//! Training, evaluation, ablation and inspection.

mod ablation;
mod attention;
mod metrics;
mod train;

pub use ablation::{apply_axis, run_ablation, AblationRow, AblationTable, Axis};
pub use attention::{export_attention, AttentionExport, FrameHeatmap};
pub use metrics::{predict, rank_of, EvalReport};
pub use train::{evaluate, evaluate_with_records, lr_at, train, EpochLog, TrainConfig, TrainOutcome};

use candle_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{plan_sampling, sample_with_plan};
use crate::bank::fnv1a;
use crate::coa::CoaPlan;
use crate::data_model::{ClipRecord, ObjectTaxonomy, ObjectTrackSet};
use crate::error::Result;
use crate::model::{ModelConfig, ModelInput};
use crate::nn::{device, DTYPE};
use crate::synth::sub_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelLevel {
    #[default]
    Fine,
    Coarse,
}

impl LabelLevel {
    pub fn label(self, rec: &ClipRecord) -> usize {
        match self {
            LabelLevel::Fine => rec.fine_label,
            LabelLevel::Coarse => rec.coarse_label,
        }
    }
}

/// One clip sampled and planned for a model config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub clip_id: String,
    pub label: usize,
    /// Per configured modality, `(C, T, S, S)` row-major.
    pub pixels: Vec<Vec<f64>>,
    pub plan: CoaPlan,
    /// Source frame of each sampled frame.
    pub frame_indices: Vec<usize>,
}

/// Per-clip seed, independent of the clip's position in the split.
pub fn clip_seed(seed: u64, epoch: usize, clip_id: &str) -> u64 {
    sub_seed(seed, epoch as u64, fnv1a(clip_id.as_bytes()))
}

pub fn prepare(
    rec: &ClipRecord,
    tracks: &ObjectTrackSet,
    cfg: &ModelConfig,
    tax_o: &ObjectTaxonomy,
    level: LabelLevel,
    train_mode: bool,
    seed: u64,
) -> Result<Prepared> {
    let plan = plan_sampling(&rec.clip_id, rec.num_frames(), cfg.encoder.frames, train_mode, seed)?;
    let pixels = cfg
        .modalities
        .iter()
        .map(|&m| sample_with_plan(rec, m, &plan, cfg.encoder.image_size).map(|s| s.pixels))
        .collect::<Result<Vec<_>>>()?;
    let coa = CoaPlan::build(tracks, &plan.indices, plan.flip, cfg.encoder.layout(), &cfg.coa, tax_o)?;
    Ok(Prepared {
        clip_id: rec.clip_id.clone(),
        label: level.label(rec),
        pixels,
        plan: coa,
        frame_indices: plan.indices,
    })
}

/// Deterministic evaluation-mode preparation of a whole split.
pub fn prepare_eval(
    clips: &[&(ClipRecord, ObjectTrackSet)],
    cfg: &ModelConfig,
    tax_o: &ObjectTaxonomy,
    level: LabelLevel,
) -> Result<Vec<Prepared>> {
    clips.par_iter().map(|(r, t)| prepare(r, t, cfg, tax_o, level, false, 0)).collect()
}

pub fn collate(batch: &[&Prepared], cfg: &ModelConfig) -> Result<ModelInput> {
    let (t, s, b) = (cfg.encoder.frames, cfg.encoder.image_size, batch.len());
    let mut pixels = Vec::new();
    for (k, m) in cfg.modalities.iter().enumerate() {
        let data: Vec<f64> = batch.iter().flat_map(|p| p.pixels[k].iter().copied()).collect();
        pixels.push(Tensor::from_vec(data, (b, m.channels(), t, s, s), &device())?.to_dtype(DTYPE)?);
    }
    Ok(ModelInput { pixels, plans: batch.iter().map(|p| p.plan.clone()).collect() })
}

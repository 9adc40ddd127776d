use std::path::Path;

use candle_core::{IndexOp, D};
use image::{imageops, GrayImage, Luma};
use serde::{Deserialize, Serialize};

use super::{collate, prepare, LabelLevel};
use crate::bank::PrototypeBank;
use crate::checkpoint::write_atomic;
use crate::data_model::{ClipRecord, ObjectTaxonomy, ObjectTrackSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::mot::AlignControl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameHeatmap {
    pub modality: String,
    /// Position among the sampled frames.
    pub sampled: usize,
    pub source_frame: usize,
    pub token_slice: usize,
    /// Sum of the head-averaged class-token attention row, class column included.
    pub row_sum: f64,
    /// `H × W`, min-max normalized to `[0, 1]`.
    pub heatmap: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPrototypes {
    pub modality: String,
    pub action: Option<String>,
    pub objects: Vec<Option<String>>,
    pub relations: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub clip_id: String,
    pub frames: Vec<FrameHeatmap>,
    pub prototypes: Vec<BranchPrototypes>,
    /// Slot weights; empty for the base variant.
    pub weights: Vec<f64>,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Last-block class-token attention per sampled frame, the chosen prototype
/// texts and the slot weights for one clip. With `out_dir`, writes one PNG
/// per (modality, frame) and `attention.json`.
pub fn export_attention(
    model: &Model,
    bank: Option<&PrototypeBank>,
    clip: &(ClipRecord, ObjectTrackSet),
    tax_o: &ObjectTaxonomy,
    out_dir: Option<&Path>,
) -> Result<AttentionExport> {
    let cfg = model.config();
    let prep = prepare(&clip.0, &clip.1, cfg, tax_o, LabelLevel::Fine, false, 0)?;
    let input = collate(&[&prep], cfg)?;
    let tensors = bank.map(|b| b.tensors()).transpose()?;
    let out = model.forward(&input, tensors.as_ref(), false, AlignControl::default())?;

    let (t, h, w) = cfg.encoder.layout();
    let t_f = cfg.encoder.frames;
    let mut frames = Vec::new();
    for (m, attn) in cfg.modalities.iter().zip(&out.last_attention) {
        let row = attn.i((0, .., 0, ..))?.mean(0)?;
        let row_sum = row.sum(D::Minus1)?.to_scalar::<f64>()?;
        let spatial = row.to_vec1::<f64>()?[1..].to_vec();
        for s in 0..t_f {
            let slice = s * t / t_f;
            let cells = normalize(&spatial[slice * h * w..(slice + 1) * h * w]);
            let heatmap = cells.chunks(w).map(<[f64]>::to_vec).collect();
            frames.push(FrameHeatmap {
                modality: m.name().to_string(),
                sampled: s,
                source_frame: prep.frame_indices[s],
                token_slice: slice,
                row_sum,
                heatmap,
            });
        }
    }

    let mut prototypes = Vec::new();
    if let (Some(mot), Some(bank)) = (&out.mot, bank) {
        let rec = mot.record(0, &prep.clip_id, &out.branches)?;
        let text =
            |idx: &[crate::bank::PrototypeRef], i: Option<usize>| i.and_then(|i| idx.get(i)).map(|r| r.text.clone());
        for (m, b) in cfg.modalities.iter().zip(&rec.branches) {
            prototypes.push(BranchPrototypes {
                modality: m.name().to_string(),
                action: text(&bank.action_index, b.action),
                objects: b.objects.iter().map(|&i| text(&bank.object_index, i)).collect(),
                relations: b.relations.iter().map(|&i| text(&bank.relation_index, i)).collect(),
            });
        }
    }
    let weights = match &out.weights {
        Some(w) => w.get(0)?.to_vec1::<f64>()?,
        None => Vec::new(),
    };
    let export = AttentionExport { clip_id: prep.clip_id.clone(), frames, prototypes, weights };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let size = cfg.encoder.image_size as u32;
        for f in &export.frames {
            let small = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                Luma([(f.heatmap[y as usize][x as usize] * 255.0).round() as u8])
            });
            let big = imageops::resize(&small, size, size, imageops::FilterType::Nearest);
            let p = dir.join(format!("{}_{}_f{:02}.png", export.clip_id, f.modality, f.sampled));
            big.save(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
        }
        let p = dir.join("attention.json");
        let json = serde_json::to_vec_pretty(&export).map_err(|e| Error::json(&p, e))?;
        write_atomic(&p, &json)?;
    }
    Ok(export)
}

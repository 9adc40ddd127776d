//! Chain-of-action stages: object tokens from tracked boxes, joint
//! action/object self-attention, human–object pairing, the relation encoder
//! and relation cross-attention.
//!
//! Per-sample geometry (which tracks, which boxes, which pairs) is planned on
//! the host as plain data in [`CoaPlan`]; the tensor stages consume the plan.

mod roi;

use candle_core::{Module, Tensor, D};
use serde::{Deserialize, Serialize};

pub use roi::{bilinear_weights, bin_samples, roi_align, roi_matrix, SAMPLING_RATIO};

use crate::backbone::Encoded;
use crate::data_model::{box_to_grid, NormBox, ObjectTaxonomy, ObjectTrackSet};
use crate::error::{Error, Result};
use crate::nn::{bool_mask, device, zero_masked, LayerNorm, Mlp, MultiHeadAttention, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoaConfig {
    pub o_max: usize,
    pub r_max: usize,
    pub out_res: usize,
    pub relation_layers: usize,
    pub relation_hidden: usize,
    pub heads: usize,
}

impl CoaConfig {
    pub fn new(o_max: usize, relation_hidden: usize, heads: usize) -> Self {
        Self { o_max, r_max: default_r_max(o_max), out_res: 3, relation_layers: 5, relation_hidden, heads }
    }

    pub fn full() -> Self {
        Self::new(6, 512, 12)
    }

    pub fn toy() -> Self {
        Self::new(6, 64, 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.o_max == 0 || self.r_max == 0 || self.out_res == 0 || self.relation_layers == 0 {
            return Err(Error::InvalidConfig(format!("chain-of-action config {self:?}")));
        }
        Ok(())
    }
}

/// One human against every other slot: `2·(o_max − 1)`, at least 1.
pub fn default_r_max(o_max: usize) -> usize {
    (2 * o_max.saturating_sub(1)).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedObject {
    pub track_id: u32,
    pub class_index: usize,
    /// One entry per sampled frame.
    pub boxes: Vec<Option<NormBox>>,
}

/// Up to `o_max` tracks in `track_id` order; the remaining slots are masked.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSelection {
    pub o_max: usize,
    pub slots: Vec<SelectedObject>,
}

impl ObjectSelection {
    pub fn mask(&self) -> Vec<bool> {
        (0..self.o_max).map(|i| i < self.slots.len()).collect()
    }

    pub fn classes(&self) -> Vec<Option<usize>> {
        (0..self.o_max).map(|i| self.slots.get(i).map(|s| s.class_index)).collect()
    }

    /// Per-slot, per-frame validity, `o_max × T_f` row-major.
    pub fn frame_mask(&self, frames: usize) -> Vec<bool> {
        let mut m = vec![false; self.o_max * frames];
        for (o, s) in self.slots.iter().enumerate() {
            for (t, b) in s.boxes.iter().enumerate().take(frames) {
                m[o * frames + t] = b.is_some();
            }
        }
        m
    }
}

/// Keeps the `o_max` tracks with the largest mean box area over the sampled
/// frames (missing boxes count as zero, ties to the lower `track_id`).
pub fn select_objects(tracks: &ObjectTrackSet, frame_index_map: &[usize], o_max: usize) -> ObjectSelection {
    let mut cands: Vec<(f64, SelectedObject)> = tracks
        .tracks
        .iter()
        .filter_map(|tr| {
            let boxes: Vec<Option<NormBox>> =
                frame_index_map.iter().map(|&f| tr.boxes.get(f).copied().flatten()).collect();
            if boxes.iter().all(Option::is_none) {
                return None;
            }
            let mean = boxes.iter().flatten().map(NormBox::area).sum::<f64>() / frame_index_map.len() as f64;
            Some((mean, SelectedObject { track_id: tr.track_id, class_index: tr.class_index, boxes }))
        })
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.track_id.cmp(&b.1.track_id)));
    cands.truncate(o_max);
    let mut slots: Vec<SelectedObject> = cands.into_iter().map(|c| c.1).collect();
    slots.sort_by_key(|s| s.track_id);
    ObjectSelection { o_max, slots }
}

/// Ordered human–object pairs over valid slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationPlan {
    pub r_max: usize,
    pub pairs: Vec<(usize, usize)>,
    /// Pairs dropped by the `r_max` cap.
    pub dropped: usize,
}

impl RelationPlan {
    pub fn mask(&self) -> Vec<bool> {
        (0..self.r_max).map(|i| i < self.pairs.len()).collect()
    }
}

/// Every `(human slot, non-human slot)` pair, ordered by `(h, o)`, capped at `r_max`.
pub fn plan_relations(classes: &[Option<usize>], is_human: impl Fn(usize) -> bool, r_max: usize) -> RelationPlan {
    let mut pairs = Vec::new();
    for (h, ch) in classes.iter().enumerate() {
        let Some(ch) = ch else { continue };
        if !is_human(*ch) {
            continue;
        }
        for (o, co) in classes.iter().enumerate() {
            if matches!(co, Some(c) if !is_human(*c)) {
                pairs.push((h, o));
            }
        }
    }
    let dropped = pairs.len().saturating_sub(r_max);
    if dropped > 0 {
        log::warn!("{} human-object pairs exceed r_max={r_max}; keeping the first {r_max}", pairs.len());
        pairs.truncate(r_max);
    }
    RelationPlan { r_max, pairs, dropped }
}

/// Host-side geometry for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CoaPlan {
    pub selection: ObjectSelection,
    pub frames: usize,
    pub out_res: usize,
    /// `(o_max·T_f·out_res², T·H·W)` RoIAlign weights against the token grid.
    pub roi: Vec<f64>,
    pub relations: RelationPlan,
}

impl CoaPlan {
    /// `tracks` are in clip-frame indexing; `flip` mirrors boxes to match a
    /// flipped sample.
    pub fn build(
        tracks: &ObjectTrackSet,
        frame_index_map: &[usize],
        flip: bool,
        layout: (usize, usize, usize),
        cfg: &CoaConfig,
        tax_o: &ObjectTaxonomy,
    ) -> Result<Self> {
        let tracks = if flip { tracks.hflip() } else { tracks.clone() };
        let selection = select_objects(&tracks, frame_index_map, cfg.o_max);
        let relations = plan_relations(&selection.classes(), |c| tax_o.is_human(c), cfg.r_max);
        Self::from_selection(selection, relations, frame_index_map.len(), layout, cfg.out_res)
    }

    pub fn from_selection(
        selection: ObjectSelection,
        relations: RelationPlan,
        frames: usize,
        layout: (usize, usize, usize),
        out_res: usize,
    ) -> Result<Self> {
        let (t, h, w) = layout;
        let hw = h * w;
        let bins = out_res * out_res;
        let mut roi = vec![0.0; selection.o_max * frames * bins * t * hw];
        for (o, s) in selection.slots.iter().enumerate() {
            for (ft, b) in s.boxes.iter().enumerate() {
                let Some(b) = b else { continue };
                let m = roi_matrix(h, w, &box_to_grid(b, w, h)?, out_res)?;
                let slice = ft * t / frames;
                for bin in 0..bins {
                    let row = ((o * frames + ft) * bins + bin) * t * hw + slice * hw;
                    roi[row..row + hw].copy_from_slice(&m[bin * hw..(bin + 1) * hw]);
                }
            }
        }
        Ok(Self { selection, frames, out_res, roi, relations })
    }
}

fn stack_masks(rows: impl Iterator<Item = Vec<bool>>, shape: &[usize]) -> Result<Tensor> {
    let flat: Vec<bool> = rows.flatten().collect();
    bool_mask(&flat, shape)
}

/// RoIAlign → flatten → MLP₂ → max over valid frames. Returns `(B, O, d)`
/// with masked slots zero, and the `(B, O)` slot mask.
pub fn object_tokens(tokens: &Tensor, plans: &[CoaPlan], mlp: &Mlp) -> Result<(Tensor, Tensor)> {
    let (b, n, d) = tokens.dims3()?;
    let Some(first) = plans.first() else {
        return Err(Error::ShapeMismatch("empty batch".into()));
    };
    let (o, tf, bins) = (first.selection.o_max, first.frames, first.out_res * first.out_res);
    if plans.len() != b || plans.iter().any(|p| p.roi.len() != o * tf * bins * n) {
        return Err(Error::ShapeMismatch(format!("{} plans for a batch of {b} with {n} tokens", plans.len())));
    }
    if mlp.in_dim() != bins * d {
        return Err(Error::DimMismatch(format!("object MLP takes {}, RoI features are {}", mlp.in_dim(), bins * d)));
    }
    let p: Vec<f64> = plans.iter().flat_map(|p| p.roi.iter().copied()).collect();
    let p = Tensor::from_vec(p, (b, o * tf * bins, n), &device())?;
    let feats = p.matmul(tokens)?.reshape((b, o, tf, bins * d))?;
    let feats = mlp.forward(&feats)?;
    let out_d = feats.dim(D::Minus1)?;
    let fmask = stack_masks(plans.iter().map(|p| p.selection.frame_mask(tf)), &[b, o, tf, 1])?
        .broadcast_as((b, o, tf, out_d))?;
    let floor = feats.zeros_like()?.affine(0.0, -1e30)?;
    let pooled = fmask.where_cond(&feats, &floor)?.max(2)?;
    let mask = stack_masks(plans.iter().map(|p| p.selection.mask()), &[b, o])?;
    Ok((zero_masked(&pooled, &mask)?, mask))
}

/// Pre-norm self-attention over `[class; spatial tokens; object tokens]`.
#[derive(Debug, Clone)]
pub struct JointRefiner {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

pub struct JointOutput {
    pub action_tokens: Tensor,
    pub class_token: Tensor,
    pub object_tokens: Tensor,
    pub weights: Tensor,
}

impl JointRefiner {
    pub fn new(p: &mut Params<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(&mut p.sub("ln"), dim)?,
            attn: MultiHeadAttention::new(&mut p.sub("attn"), dim, heads)?,
        })
    }

    /// Value/output projections at zero: passes inputs through unchanged.
    pub fn identity(p: &mut Params<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(&mut p.sub("ln"), dim)?,
            attn: MultiHeadAttention::zero_value_output(&mut p.sub("attn"), dim, heads)?,
        })
    }

    /// `class_token: (B, d)`, `action_tokens: (B, N, d)`, `objects: (B, O, d)`,
    /// `object_mask: (B, O)`. `O` may be zero.
    pub fn forward(
        &self,
        class_token: &Tensor,
        action_tokens: &Tensor,
        objects: &Tensor,
        object_mask: &Tensor,
    ) -> Result<JointOutput> {
        let (b, n, d) = action_tokens.dims3()?;
        let (b2, o, d2) = objects.dims3()?;
        if class_token.dims() != [b, d] || b2 != b || d2 != d || d != self.attn.dim() {
            return Err(Error::DimMismatch(format!(
                "class {:?}, action {:?}, objects {:?} for width {}",
                class_token.dims(),
                action_tokens.dims(),
                objects.dims(),
                self.attn.dim()
            )));
        }
        let cls = class_token.unsqueeze(1)?;
        let (x, key_mask) = if o == 0 {
            (Tensor::cat(&[&cls, action_tokens], 1)?, None)
        } else {
            let live = Tensor::ones((b, 1 + n), candle_core::DType::U8, &device())?;
            (Tensor::cat(&[&cls, action_tokens, objects], 1)?, Some(Tensor::cat(&[&live, object_mask], 1)?))
        };
        let h = self.ln.forward(&x)?;
        let a = self.attn.forward(&h, &h, key_mask.as_ref())?;
        let y = (x + a.output)?;
        let object_tokens = if o == 0 { objects.clone() } else { zero_masked(&y.narrow(1, 1 + n, o)?, object_mask)? };
        Ok(JointOutput {
            class_token: y.narrow(1, 0, 1)?.squeeze(1)?,
            action_tokens: y.narrow(1, 1, n)?,
            object_tokens,
            weights: a.weights,
        })
    }
}

/// Gathers `[V_H; V_Obj]` per planned pair: `(B, R, 2d)` plus the `(B, R)` mask.
pub fn pair_features(objects: &Tensor, plans: &[RelationPlan]) -> Result<(Tensor, Tensor)> {
    let (b, o, d) = objects.dims3()?;
    let r = plans.first().map(|p| p.r_max).unwrap_or(0);
    if plans.len() != b || plans.iter().any(|p| p.r_max != r || p.pairs.iter().any(|&(h, x)| h >= o || x >= o)) {
        return Err(Error::ShapeMismatch(format!("relation plans do not fit {b}×{o} object slots")));
    }
    let mut hi = Vec::with_capacity(b * r);
    let mut oi = Vec::with_capacity(b * r);
    for (bi, p) in plans.iter().enumerate() {
        for k in 0..r {
            let (h, x) = p.pairs.get(k).copied().unwrap_or((0, 0));
            hi.push((bi * o + h) as u32);
            oi.push((bi * o + x) as u32);
        }
    }
    let flat = objects.reshape((b * o, d))?;
    let take = |idx: Vec<u32>| -> Result<Tensor> {
        let idx = Tensor::from_vec(idx, b * r, &device())?;
        Ok(flat.index_select(&idx, 0)?.reshape((b, r, d))?)
    };
    let feats = Tensor::cat(&[take(hi)?, take(oi)?], 2)?;
    let mask = stack_masks(plans.iter().map(RelationPlan::mask), &[b, r])?;
    Ok((zero_masked(&feats, &mask)?, mask))
}

/// `L` linear layers from `2d` to `d` with GELU between them.
#[derive(Debug, Clone)]
pub struct RelationEncoder {
    mlp: Mlp,
}

impl RelationEncoder {
    pub fn new(p: &mut Params<'_>, dim: usize, layers: usize, hidden: usize) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(p, &relation_dims(dim, layers, hidden))? })
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn depth(&self) -> usize {
        self.mlp.depth()
    }

    /// `pairs: (B, R, 2d)` → `(B, R, d)`, masked rows zero.
    pub fn forward(&self, pairs: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let w = pairs.dim(D::Minus1)?;
        if w != self.mlp.in_dim() {
            return Err(Error::DimMismatch(format!("relation encoder takes {}, got {w}", self.mlp.in_dim())));
        }
        zero_masked(&self.mlp.forward(pairs)?, mask)
    }
}

pub fn relation_dims(dim: usize, layers: usize, hidden: usize) -> Vec<usize> {
    let mut dims = vec![2 * dim];
    dims.extend(std::iter::repeat(hidden).take(layers.saturating_sub(1)));
    dims.push(dim);
    dims
}

/// Relation queries attending over valid object tokens, with residual.
#[derive(Debug, Clone)]
pub struct RelationRefiner {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
}

pub struct RelationOutput {
    pub relation_tokens: Tensor,
    /// `(B, heads, R, O)`
    pub weights: Tensor,
    /// Samples whose attention was skipped for lack of valid objects.
    pub no_valid_objects: Vec<bool>,
}

impl RelationRefiner {
    pub fn new(p: &mut Params<'_>, dim: usize, heads: usize) -> Result<Self> {
        Self::build(p, dim, heads, false)
    }

    pub fn identity(p: &mut Params<'_>, dim: usize, heads: usize) -> Result<Self> {
        Self::build(p, dim, heads, true)
    }

    fn build(p: &mut Params<'_>, dim: usize, heads: usize, zero: bool) -> Result<Self> {
        let ln_q = LayerNorm::new(&mut p.sub("ln_q"), dim)?;
        let ln_kv = LayerNorm::new(&mut p.sub("ln_kv"), dim)?;
        let attn = if zero {
            MultiHeadAttention::zero_value_output(&mut p.sub("attn"), dim, heads)?
        } else {
            MultiHeadAttention::new(&mut p.sub("attn"), dim, heads)?
        };
        Ok(Self { ln_q, ln_kv, attn })
    }

    pub fn forward(
        &self,
        relations: &Tensor,
        objects: &Tensor,
        object_mask: &Tensor,
        relation_mask: &Tensor,
    ) -> Result<RelationOutput> {
        let (b, _, _) = relations.dims3()?;
        let live: Vec<u8> = object_mask.max(1)?.to_vec1()?;
        let no_valid_objects: Vec<bool> = live.iter().map(|&v| v == 0).collect();
        let a = self.attn.forward(&self.ln_q.forward(relations)?, &self.ln_kv.forward(objects)?, Some(object_mask))?;
        let gate = Tensor::from_vec(live, (b, 1, 1), &device())?;
        let update = gate.broadcast_as(a.output.shape())?.where_cond(&a.output, &a.output.zeros_like()?)?;
        let refined = zero_masked(&(relations + update)?, relation_mask)?;
        Ok(RelationOutput { relation_tokens: refined, weights: a.weights, no_valid_objects })
    }
}

/// Per-sample chain-of-action state as plain data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoaState {
    /// Class row first, then the spatial tokens.
    pub action_tokens: Vec<Vec<f64>>,
    pub class_token: Vec<f64>,
    pub object_tokens: Vec<Vec<f64>>,
    pub object_mask: Vec<bool>,
    pub object_classes: Vec<Option<usize>>,
    pub relation_tokens: Vec<Vec<f64>>,
    pub relation_mask: Vec<bool>,
    pub relation_pairs: Vec<Option<(usize, usize)>>,
}

/// Batched stack output.
pub struct CoaOutput {
    pub class_token: Tensor,
    pub action_tokens: Tensor,
    pub object_tokens: Tensor,
    pub object_mask: Tensor,
    pub relation_tokens: Tensor,
    pub relation_mask: Tensor,
    pub no_valid_objects: Vec<bool>,
}

impl CoaOutput {
    pub fn state(&self, i: usize, plan: &CoaPlan) -> Result<CoaState> {
        let cls = self.class_token.get(i)?.to_vec1::<f64>()?;
        let mut action_tokens = vec![cls.clone()];
        action_tokens.extend(self.action_tokens.get(i)?.to_vec2::<f64>()?);
        Ok(CoaState {
            action_tokens,
            class_token: cls,
            object_tokens: self.object_tokens.get(i)?.to_vec2()?,
            object_mask: plan.selection.mask(),
            object_classes: plan.selection.classes(),
            relation_tokens: self.relation_tokens.get(i)?.to_vec2()?,
            relation_mask: plan.relations.mask(),
            relation_pairs: (0..plan.relations.r_max).map(|k| plan.relations.pairs.get(k).copied()).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct CoaStack {
    cfg: CoaConfig,
    object_mlp: Mlp,
    joint: JointRefiner,
    encoder: RelationEncoder,
    refiner: RelationRefiner,
}

impl CoaStack {
    pub fn new(p: &mut Params<'_>, dim: usize, cfg: &CoaConfig) -> Result<Self> {
        cfg.validate()?;
        let bins = cfg.out_res * cfg.out_res;
        Ok(Self {
            cfg: cfg.clone(),
            object_mlp: Mlp::new(&mut p.sub("object_mlp"), &[bins * dim, dim, dim])?,
            joint: JointRefiner::new(&mut p.sub("joint"), dim, cfg.heads)?,
            encoder: RelationEncoder::new(
                &mut p.sub("relation_encoder"),
                dim,
                cfg.relation_layers,
                cfg.relation_hidden,
            )?,
            refiner: RelationRefiner::new(&mut p.sub("relation_refiner"), dim, cfg.heads)?,
        })
    }

    pub fn config(&self) -> &CoaConfig {
        &self.cfg
    }

    pub fn object_mlp(&self) -> &Mlp {
        &self.object_mlp
    }

    pub fn joint(&self) -> &JointRefiner {
        &self.joint
    }

    pub fn relation_encoder(&self) -> &RelationEncoder {
        &self.encoder
    }

    pub fn relation_refiner(&self) -> &RelationRefiner {
        &self.refiner
    }

    pub fn forward(&self, enc: &Encoded, plans: &[CoaPlan]) -> Result<CoaOutput> {
        let (objects, object_mask) = object_tokens(&enc.tokens, plans, &self.object_mlp)?;
        self.forward_from_objects(&enc.class_token, &enc.tokens, &objects, &object_mask, plans)
    }

    /// The stack after object pooling; lets callers inspect or perturb the
    /// object slots in between.
    pub fn forward_from_objects(
        &self,
        class_token: &Tensor,
        tokens: &Tensor,
        objects: &Tensor,
        object_mask: &Tensor,
        plans: &[CoaPlan],
    ) -> Result<CoaOutput> {
        let j = self.joint.forward(class_token, tokens, objects, object_mask)?;
        let rel: Vec<RelationPlan> = plans.iter().map(|p| p.relations.clone()).collect();
        let (pairs, relation_mask) = pair_features(&j.object_tokens, &rel)?;
        let v_r = self.encoder.forward(&pairs, &relation_mask)?;
        let r = self.refiner.forward(&v_r, &j.object_tokens, object_mask, &relation_mask)?;
        Ok(CoaOutput {
            class_token: j.class_token,
            action_tokens: j.action_tokens,
            object_tokens: j.object_tokens,
            object_mask: object_mask.clone(),
            relation_tokens: r.relation_tokens,
            relation_mask,
            no_valid_objects: r.no_valid_objects,
        })
    }
}

//! Mixture-of-thoughts head: per-level visual/text similarity, straight-through
//! prototype selection, residual text fusion, dynamic slot weights, weighted
//! aggregation and classification.

use candle_core::{Module, Tensor, D};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::bank::BankTensors;
use crate::error::{Error, Result};
use crate::nn::{device, masked_softmax, zero_masked, Linear, Mlp, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub temperature: f64,
    pub gumbel_noise: bool,
    pub straight_through: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { temperature: 5.0, gumbel_noise: true, straight_through: true }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// `M = normalize(V) · Tᵀ` for `v: (B, N, d)`, `t: (P, d)` → `(B, N, P)`.
/// Zero rows of `v` stay zero.
pub fn similarity(v: &Tensor, t: &Tensor) -> Result<Tensor> {
    let d = v.dim(D::Minus1)?;
    let (_, dt) = t.dims2()?;
    if d != dt {
        return Err(Error::DimMismatch(format!("visual rows are {d}-dim, prototypes {dt}-dim")));
    }
    let norm = (v.sqr()?.sum_keepdim(D::Minus1)?.sqrt()? + 1e-12)?;
    Ok(v.broadcast_div(&norm)?.broadcast_matmul(&t.t()?)?)
}

/// Standard Gumbel samples `-ln(-ln U)`.
pub fn gumbel(shape: &[usize], rng: &mut dyn RngCore) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

/// Output of [`differentiable_one_hot`].
#[derive(Debug, Clone)]
pub struct OneHot {
    /// Forward value: exact one-hot rows. Gradient: that of `soft`.
    pub value: Tensor,
    /// `softmax(M/τ + g)`.
    pub soft: Tensor,
    /// Chosen column per row.
    pub index: Vec<usize>,
}

/// First maximum of each row.
pub fn argmax_rows(x: &Tensor) -> Result<Vec<usize>> {
    let p = x.dim(D::Minus1)?;
    let flat = x.flatten_all()?.to_vec1::<f64>()?;
    Ok(flat
        .chunks(p.max(1))
        .map(|r| r.iter().enumerate().fold(0, |best, (i, &v)| if v > r[best] { i } else { best }))
        .collect())
}

pub fn one_hot_rows(index: &[usize], shape: &[usize]) -> Result<Tensor> {
    let p = *shape.last().expect("non-scalar shape");
    let mut data = vec![0.0; index.len() * p];
    for (r, &i) in index.iter().enumerate() {
        data[r * p + i] = 1.0;
    }
    Ok(Tensor::from_vec(data, shape, &device())?)
}

/// Straight-through one-hot over the last dimension.
///
/// `noise`, when given, is added to `M/τ` before the softmax.
pub fn differentiable_one_hot(m: &Tensor, cfg: &AlignmentConfig, noise: Option<&Tensor>) -> Result<OneHot> {
    let mut logits = (m / cfg.temperature)?;
    if let Some(g) = noise {
        logits = (logits + g)?;
    }
    let soft = masked_softmax(&logits, None)?;
    let index = argmax_rows(&soft)?;
    if !cfg.straight_through {
        return Ok(OneHot { value: soft.clone(), soft, index });
    }
    let hard = one_hot_rows(&index, soft.dims())?;
    let value = (hard + (&soft - soft.detach())?)?;
    Ok(OneHot { value, soft, index })
}

/// Same forward value as a prior selection, with gradient through the current
/// soft path: `hard + soft − soft_ref`, with `hard` and `soft_ref` constants.
/// Finite differences of this surrogate are smooth in the inputs.
pub fn frozen_one_hot(m: &Tensor, cfg: &AlignmentConfig, prior: &OneHot) -> Result<OneHot> {
    let soft = masked_softmax(&(m / cfg.temperature)?, None)?;
    let hard = one_hot_rows(&prior.index, soft.dims())?;
    let value = (hard + (&soft - prior.soft.detach())?)?;
    Ok(OneHot { value, soft, index: prior.index.clone() })
}

/// `F = V + MLP(M̂ · T)`; masked rows come out zero whatever `V` holds there.
pub fn align_fuse(v: &Tensor, m_hat: &Tensor, t: &Tensor, mlp: &Mlp, mask: Option<&Tensor>) -> Result<Tensor> {
    let retrieved = m_hat.broadcast_matmul(t)?;
    if retrieved.dims() != v.dims() || mlp.in_dim() != t.dim(1)? || mlp.out_dim() != v.dim(D::Minus1)? {
        return Err(Error::DimMismatch(format!(
            "align_fuse: V {:?}, M̂ {:?}, T {:?}",
            v.dims(),
            m_hat.dims(),
            t.dims()
        )));
    }
    let f = (v + mlp.forward(&retrieved)?)?;
    match mask {
        Some(m) => zero_masked(&f, m),
        None => Ok(f),
    }
}

/// `W = masked_softmax(MLP(flatten(slots)))` for `slots: (B, S, d)`, `live: (B, S)`.
pub fn dynamic_weights(slots: &Tensor, live: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    let (b, s, d) = slots.dims3()?;
    if mlp.in_dim() != s * d || mlp.out_dim() != s {
        return Err(Error::DimMismatch(format!("weight MLP {}→{} for {s} slots of {d}", mlp.in_dim(), mlp.out_dim())));
    }
    let logits = mlp.forward(&slots.reshape((b, s * d))?)?;
    masked_softmax(&logits, Some(live))
}

/// `A_final = Σ_s W_s · F_s`.
pub fn fuse_final(w: &Tensor, slots: &Tensor) -> Result<Tensor> {
    Ok(w.unsqueeze(1)?.matmul(slots)?.squeeze(1)?)
}

/// Label-smoothed cross-entropy: the target puts `1 − ε + ε/C` on the label
/// and `ε/C` elsewhere; mean over the batch.
pub fn smoothed_cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label: bad, num_classes: c });
    }
    let off = smoothing / c as f64;
    let mut target = vec![off; b * c];
    for (i, &l) in labels.iter().enumerate() {
        target[i * c + l] += 1.0 - smoothing;
    }
    let target = Tensor::from_vec(target, (b, c), &device())?;
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    Ok((logp * target)?.sum_all()?.neg()?.affine(1.0 / b as f64, 0.0)?)
}

pub fn classify_and_loss(a_final: &Tensor, labels: &[usize], fc: &Linear, smoothing: f64) -> Result<(Tensor, Tensor)> {
    let logits = fc.forward(a_final)?;
    let loss = smoothed_cross_entropy(&logits, labels, smoothing)?;
    Ok((logits, loss))
}

/// One modality's chain-of-action output as seen by the head.
pub struct BranchState {
    /// `(B, d)`
    pub class_token: Tensor,
    /// `(B, O, d)` and `(B, O)`
    pub objects: Tensor,
    pub object_mask: Tensor,
    /// `(B, R, d)` and `(B, R)`
    pub relations: Tensor,
    pub relation_mask: Tensor,
}

impl BranchState {
    pub fn slots(&self) -> Result<usize> {
        Ok(1 + self.objects.dim(1)? + self.relations.dim(1)?)
    }
}

/// Concatenates every branch's slots (action, objects, relations per branch)
/// and its live mask.
pub fn concat_slots(fused: &[(Tensor, Tensor, Tensor)], branches: &[BranchState]) -> Result<(Tensor, Tensor)> {
    let mut rows = Vec::new();
    let mut masks = Vec::new();
    for ((fa, fo, fr), br) in fused.iter().zip(branches) {
        let b = fa.dim(0)?;
        rows.push(fa.unsqueeze(1)?);
        rows.push(fo.clone());
        rows.push(fr.clone());
        masks.push(Tensor::ones((b, 1), candle_core::DType::U8, &device())?);
        masks.push(br.object_mask.clone());
        masks.push(br.relation_mask.clone());
    }
    Ok((Tensor::cat(&rows, 1)?, Tensor::cat(&masks, 1)?))
}

/// Single global masked softmax over every branch's slots, then the weighted sum.
pub fn multimodal_fuse(slots: &Tensor, live: &Tensor, mlp: &Mlp) -> Result<(Tensor, Tensor)> {
    let w = dynamic_weights(slots, live, mlp)?;
    let a = fuse_final(&w, slots)?;
    Ok((w, a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Action,
    Object,
    Relation,
}

/// Chosen prototypes for one branch.
#[derive(Debug, Clone)]
pub struct BranchAlignment {
    pub action: Option<OneHot>,
    pub object: Option<OneHot>,
    pub relation: Option<OneHot>,
}

pub struct MotOutput {
    /// `(B, S)` over all branch slots.
    pub weights: Tensor,
    pub slots: Tensor,
    pub live: Tensor,
    pub a_final: Tensor,
    pub logits: Tensor,
    pub alignments: Vec<BranchAlignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotConfig {
    pub alignment: AlignmentConfig,
    /// One projection MLP for all three levels instead of one per level.
    pub share_projection: bool,
    pub weight_hidden: usize,
    pub smoothing: f64,
}

impl Default for MotConfig {
    fn default() -> Self {
        Self { alignment: AlignmentConfig::default(), share_projection: false, weight_hidden: 64, smoothing: 0.1 }
    }
}

/// Noise and selection controls for one forward pass.
#[derive(Default)]
pub struct AlignControl<'a> {
    /// Gumbel source; noise is drawn only when given and enabled in config.
    pub rng: Option<&'a mut dyn RngCore>,
    /// Reuse these selections through [`frozen_one_hot`].
    pub frozen: Option<&'a [BranchAlignment]>,
}

#[derive(Debug, Clone)]
pub struct MotHead {
    cfg: MotConfig,
    proj: Vec<Mlp>,
    weight_mlp: Mlp,
    classifier: Linear,
    slots: usize,
}

impl MotHead {
    /// `text_dim` is the prototype width, `slots` the total slot count over branches.
    pub fn new(
        p: &mut Params<'_>,
        dim: usize,
        text_dim: usize,
        slots: usize,
        num_classes: usize,
        cfg: &MotConfig,
    ) -> Result<Self> {
        cfg.alignment.validate()?;
        let n = if cfg.share_projection { 1 } else { 3 };
        let proj =
            (0..n).map(|i| Mlp::new(&mut p.sub(format!("proj.{i}")), &[text_dim, dim, dim])).collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            proj,
            weight_mlp: Mlp::new(&mut p.sub("weights"), &[slots * dim, cfg.weight_hidden, slots])?,
            classifier: Linear::new(&mut p.sub("classifier"), dim, num_classes)?,
            slots,
        })
    }

    pub fn config(&self) -> &MotConfig {
        &self.cfg
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn weight_mlp(&self) -> &Mlp {
        &self.weight_mlp
    }

    pub fn projection(&self, level: Level) -> &Mlp {
        if self.proj.len() == 1 {
            return &self.proj[0];
        }
        &self.proj[level as usize]
    }

    fn align(
        &self,
        v: &Tensor,
        t: &Tensor,
        mask: Option<&Tensor>,
        level: Level,
        train: bool,
        ctl: &mut AlignControl<'_>,
        prior: Option<&OneHot>,
    ) -> Result<(Tensor, Option<OneHot>)> {
        if t.dim(0)? == 0 || v.dim(1)? == 0 {
            return Ok((v.clone(), None));
        }
        let m = similarity(v, t)?;
        let oh = match prior {
            Some(p) => frozen_one_hot(&m, &self.cfg.alignment, p)?,
            None => {
                let noise = match (&mut ctl.rng, train && self.cfg.alignment.gumbel_noise) {
                    (Some(rng), true) => Some(gumbel(m.dims(), &mut **rng)?),
                    _ => None,
                };
                differentiable_one_hot(&m, &self.cfg.alignment, noise.as_ref())?
            }
        };
        let f = align_fuse(v, &oh.value, t, self.projection(level), mask)?;
        Ok((f, Some(oh)))
    }

    pub fn forward(
        &self,
        branches: &[BranchState],
        bank: &BankTensors,
        train: bool,
        mut ctl: AlignControl<'_>,
    ) -> Result<MotOutput> {
        if branches.is_empty() || branches.len() > 3 {
            return Err(Error::BranchDimMismatch(format!("{} branches", branches.len())));
        }
        let d = branches[0].class_token.dim(1)?;
        let mut total = 0;
        for br in branches {
            if br.class_token.dim(1)? != d || br.objects.dim(2)? != d || br.relations.dim(2)? != d {
                return Err(Error::BranchDimMismatch(format!("branch width {} vs {d}", br.class_token.dim(1)?)));
            }
            total += br.slots()?;
        }
        if total != self.slots {
            return Err(Error::BranchDimMismatch(format!("head built for {} slots, got {total}", self.slots)));
        }
        let frozen = ctl.frozen;
        let mut fused = Vec::new();
        let mut alignments = Vec::new();
        for (bi, br) in branches.iter().enumerate() {
            let prior = frozen.map(|f| &f[bi]);
            let cls = br.class_token.unsqueeze(1)?;
            let (fa, a) = self.align(
                &cls,
                &bank.t_a,
                None,
                Level::Action,
                train,
                &mut ctl,
                prior.and_then(|p| p.action.as_ref()),
            )?;
            let (fo, o) = self.align(
                &br.objects,
                &bank.t_o,
                Some(&br.object_mask),
                Level::Object,
                train,
                &mut ctl,
                prior.and_then(|p| p.object.as_ref()),
            )?;
            let (fr, r) = self.align(
                &br.relations,
                &bank.t_r,
                Some(&br.relation_mask),
                Level::Relation,
                train,
                &mut ctl,
                prior.and_then(|p| p.relation.as_ref()),
            )?;
            fused.push((fa.squeeze(1)?, fo, fr));
            alignments.push(BranchAlignment { action: a, object: o, relation: r });
        }
        let (slots, live) = concat_slots(&fused, branches)?;
        let (weights, a_final) = multimodal_fuse(&slots, &live, &self.weight_mlp)?;
        let logits = self.classifier.forward(&a_final)?;
        Ok(MotOutput { weights, slots, live, a_final, logits, alignments })
    }
}

/// Per-sample alignment record for inspection tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub clip_id: String,
    /// Per branch: chosen prototype row for the action slot, each live object
    /// slot and each live relation slot.
    pub branches: Vec<BranchChoice>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchChoice {
    pub action: Option<usize>,
    pub objects: Vec<Option<usize>>,
    pub relations: Vec<Option<usize>>,
}

impl MotOutput {
    /// Alignment record of batch row `i`; masked slots report `None`.
    pub fn record(&self, i: usize, clip_id: &str, branches: &[BranchState]) -> Result<AlignmentRecord> {
        let mut out = Vec::new();
        for (al, br) in self.alignments.iter().zip(branches) {
            let pick = |oh: &Option<OneHot>, mask: Option<&Tensor>, n: usize| -> Result<Vec<Option<usize>>> {
                let live: Vec<u8> = match mask {
                    Some(m) => m.get(i)?.to_vec1()?,
                    None => vec![1; n],
                };
                Ok((0..n)
                    .map(|k| match oh {
                        Some(oh) if live[k] == 1 => Some(oh.index[i * n + k]),
                        _ => None,
                    })
                    .collect())
            };
            let (o, r) = (br.objects.dim(1)?, br.relations.dim(1)?);
            out.push(BranchChoice {
                action: pick(&al.action, None, 1)?[0],
                objects: pick(&al.object, Some(&br.object_mask), o)?,
                relations: pick(&al.relation, Some(&br.relation_mask), r)?,
            });
        }
        Ok(AlignmentRecord { clip_id: clip_id.to_string(), branches: out, weights: self.weights.get(i)?.to_vec1()? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bool_mask, ParamStore};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &device()).unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut s = ParamStore::new(seed);
        s.root().uniform("x", shape, 1.0).unwrap().detach()
    }

    fn vals(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1().unwrap()
    }

    fn no_noise() -> AlignmentConfig {
        AlignmentConfig { gumbel_noise: false, ..Default::default() }
    }

    #[test]
    fn one_hot_examples() {
        let cfg = no_noise();
        assert_eq!(vals(&differentiable_one_hot(&t(&[0.2, 0.8], &[1, 2]), &cfg, None).unwrap().value), [0.0, 1.0]);
        assert_eq!(vals(&differentiable_one_hot(&t(&[0.5, 0.5], &[1, 2]), &cfg, None).unwrap().value), [1.0, 0.0]);
    }

    #[test]
    fn similarity_examples() {
        let bank = t(&[0.6, 0.8, 0.0, 0.0, 0.0, 1.0], &[2, 3]);
        let v = t(&[1.2, 1.6, 0.0], &[1, 1, 3]);
        let m = vals(&similarity(&v, &bank).unwrap());
        assert!((m[0] - 1.0).abs() < 1e-12 && m[0] > m[1]);
        let orth = t(&[0.8, -0.6, 0.0], &[1, 1, 3]);
        assert!(vals(&similarity(&orth, &bank).unwrap()).iter().all(|v| v.abs() < 1e-12));
        let zero = t(&[0.0; 3], &[1, 1, 3]);
        assert_eq!(vals(&similarity(&zero, &bank).unwrap()), [0.0, 0.0]);
    }

    #[test]
    fn align_fuse_identity_and_selection() {
        let mut s = ParamStore::new(0);
        let zero = Mlp::zero_output(&mut s.root().sub("z"), &[3, 4, 3]).unwrap();
        let v = rand(&[1, 2, 3], 1);
        let bank = rand(&[4, 3], 2);
        let mh = one_hot_rows(&[2, 0], &[1, 2, 4]).unwrap();
        assert_eq!(vals(&align_fuse(&v, &mh, &bank, &zero, None).unwrap()), vals(&v));
        assert_eq!(
            vals(&mh.broadcast_matmul(&bank).unwrap().get(0).unwrap().get(0).unwrap()),
            vals(&bank.get(2).unwrap())
        );
    }

    #[test]
    fn weights_examples() {
        let mut s = ParamStore::new(0);
        let mlp = Mlp::zero_output(&mut s.root(), &[4 * 2, 3, 4]).unwrap();
        let slots = rand(&[1, 4, 2], 3);
        let w =
            vals(&dynamic_weights(&slots, &bool_mask(&[true, false, false, false], &[1, 4]).unwrap(), &mlp).unwrap());
        assert_eq!(w, [1.0, 0.0, 0.0, 0.0]);
        let w = vals(&dynamic_weights(&slots, &bool_mask(&[true; 4], &[1, 4]).unwrap(), &mlp).unwrap());
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn fuse_final_examples() {
        let slots = rand(&[1, 3, 4], 1);
        let a = fuse_final(&t(&[1.0, 0.0, 0.0], &[1, 3]), &slots).unwrap();
        assert_eq!(vals(&a), vals(&slots.get(0).unwrap().get(0).unwrap()));
        let same = t(&[0.5, -1.0, 0.5, -1.0, 0.5, -1.0], &[1, 3, 2]);
        let a = vals(&fuse_final(&t(&[0.2, 0.3, 0.5], &[1, 3]), &same).unwrap());
        assert!((a[0] - 0.5).abs() < 1e-12 && (a[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let logits = t(&[1.0, 2.0, 0.5], &[1, 3]);
        let p = 2.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 0.5f64.exp());
        let l = smoothed_cross_entropy(&logits, &[1], 0.0).unwrap().to_scalar::<f64>().unwrap();
        assert!((l + p.ln()).abs() < 1e-12);
        let l = smoothed_cross_entropy(&t(&[0.0; 5], &[1, 5]), &[3], 0.0).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        // hand oracle: ε=0.1, C=4, logits [2,0,0,0], label 0
        let z = 2f64.exp() + 3.0;
        let logp = [2.0 - z.ln(), -z.ln(), -z.ln(), -z.ln()];
        let target = [0.925, 0.025, 0.025, 0.025];
        let want: f64 = -logp.iter().zip(target).map(|(a, b)| a * b).sum::<f64>();
        let l =
            smoothed_cross_entropy(&t(&[2.0, 0.0, 0.0, 0.0], &[1, 4]), &[0], 0.1).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - want).abs() < 1e-6);
        assert_eq!(smoothed_cross_entropy(&logits, &[3], 0.1).unwrap_err().code(), "LABEL_OUT_OF_RANGE");
    }

    #[test]
    fn head_single_branch_and_records() {
        let (d, o, r) = (8, 3, 2);
        let mut s = ParamStore::new(5);
        let head = MotHead::new(&mut s.root(), d, d, 1 + o + r, 4, &MotConfig::default()).unwrap();
        let bank = BankTensors { t_a: rand(&[6, d], 1), t_o: rand(&[5, d], 2), t_r: rand(&[4, d], 3) };
        let om = bool_mask(&[true, false, true, false, false, false], &[2, o]).unwrap();
        let rm = bool_mask(&[true, false, false, false], &[2, r]).unwrap();
        let br = BranchState {
            class_token: rand(&[2, d], 4),
            objects: zero_masked(&rand(&[2, o, d], 5), &om).unwrap(),
            object_mask: om,
            relations: zero_masked(&rand(&[2, r, d], 6), &rm).unwrap(),
            relation_mask: rm,
        };
        let out = head.forward(std::slice::from_ref(&br), &bank, false, AlignControl::default()).unwrap();
        let w = out.weights.to_vec2::<f64>().unwrap();
        assert_eq!(&w[1][1..], [0.0; 5]);
        assert_eq!(w[1][0], 1.0);
        assert!((w[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let rec = out.record(0, "c", std::slice::from_ref(&br)).unwrap();
        assert_eq!(rec.branches[0].objects.iter().map(Option::is_some).collect::<Vec<_>>(), [true, false, true]);
        assert_eq!(rec.branches[0].relations[1], None);
        let again = head.forward(std::slice::from_ref(&br), &bank, false, AlignControl::default()).unwrap();
        assert_eq!(vals(&again.logits), vals(&out.logits));
    }
}

use std::io::Write;
use std::path::Path;

use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{clip_seed, collate, prepare, prepare_eval, EvalReport, LabelLevel, Prepared};
use crate::bank::{BankTensors, PrototypeBank};
use crate::checkpoint::write_atomic;
use crate::data_model::{Modality, SplitName};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::mot::{AlignControl, AlignmentRecord};
use crate::synth::sub_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `(start_epoch, lr)` steps.
    pub lr_schedule: Vec<(usize, f64)>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub level: LabelLevel,
    /// Random frame sampling and flips on training clips; off means training
    /// clips are sampled like evaluation clips.
    #[serde(default = "yes")]
    pub augment: bool,
    pub model: ModelConfig,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn reference_schedule() -> Vec<(usize, f64)> {
        vec![(0, 1e-4), (15, 1e-5), (25, 1e-6)]
    }

    pub fn full(num_classes: usize) -> Self {
        Self {
            epochs: 30,
            lr_schedule: Self::reference_schedule(),
            weight_decay: 0.05,
            batch_size: 16,
            seed: 0,
            level: LabelLevel::Fine,
            augment: true,
            model: ModelConfig::full(num_classes),
        }
    }

    /// Small-scale preset for from-scratch training on synthetic data.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            epochs: 60,
            lr_schedule: vec![(0, 1e-3), (40, 1e-4)],
            weight_decay: 0.01,
            batch_size: 8,
            seed: 0,
            level: LabelLevel::Fine,
            augment: true,
            model: ModelConfig::toy(num_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.lr_schedule.first().map(|s| s.0) != Some(0) {
            return bad("lr schedule must start at epoch 0");
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("lr schedule epochs must be strictly increasing");
        }
        if self.lr_schedule.iter().any(|s| !(s.1 > 0.0 && s.1.is_finite())) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        self.model.validate()
    }
}

pub fn lr_at(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule.iter().take_while(|s| s.0 <= epoch).last().map_or(schedule[0].1, |s| s.1)
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub val_mean1: Option<f64>,
}

pub struct TrainOutcome {
    /// Holds the best-epoch weights.
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: Option<EvalReport>,
}

/// Logits for every prepared sample, in order, with noise off.
pub fn evaluate(
    model: &Model,
    samples: &[Prepared],
    bank: Option<&BankTensors>,
    batch_size: usize,
) -> Result<EvalReport> {
    Ok(evaluate_with_records(model, samples, bank, batch_size)?.0)
}

/// [`evaluate`] plus one alignment record per sample when the model has a
/// prototype head.
pub fn evaluate_with_records(
    model: &Model,
    samples: &[Prepared],
    bank: Option<&BankTensors>,
    batch_size: usize,
) -> Result<(EvalReport, Vec<AlignmentRecord>)> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut logits = Vec::with_capacity(samples.len());
    let mut records = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let input = collate(&refs, model.config())?;
        let out = model.forward(&input, bank, false, AlignControl::default())?;
        logits.extend(out.logits.to_vec2::<f64>()?);
        if let Some(mot) = &out.mot {
            for (i, p) in chunk.iter().enumerate() {
                records.push(mot.record(i, &p.clip_id, &out.branches)?);
            }
        }
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok((EvalReport::from_logits(&logits, &labels, model.config().num_classes)?, records))
}

fn check_labels(samples: &[Prepared], num_classes: usize) -> Result<()> {
    match samples.iter().find(|s| s.label >= num_classes) {
        Some(s) => Err(Error::LabelOutOfRange { label: s.label, num_classes }),
        None => Ok(()),
    }
}

/// Trains on the train split, tracking the val split when it is non-empty.
/// With `out_dir`, writes `config.resolved.json`, `metrics.jsonl` and
/// `best.ckpt`.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    bank: Option<&PrototypeBank>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = &cfg.model;
    if let Some(b) = bank {
        b.check()?;
        if b.dim() != mcfg.text_dim {
            return Err(Error::EncoderDimMismatch { expected: mcfg.text_dim, got: b.dim() });
        }
    }
    let tensors = bank.map(|b| b.tensors()).transpose()?;
    if mcfg.variant == Variant::Full && tensors.is_none() {
        return Err(Error::InvalidConfig("the full variant needs a prototype bank".into()));
    }
    let tax_o = &data.object_taxonomy;
    let train_clips = data.split_clips(SplitName::Train);
    if train_clips.is_empty() {
        return Err(Error::EmptySplit);
    }
    let have: Vec<Modality> = train_clips[0].0.modality_frames.keys().copied().collect();
    if let Some(m) = mcfg.modalities.iter().find(|m| !have.contains(m)) {
        return Err(Error::InvalidConfig(format!("dataset has no {m} stream")));
    }
    let val = prepare_eval(&data.split_clips(SplitName::Val), mcfg, tax_o, cfg.level)?;
    check_labels(&val, mcfg.num_classes)?;

    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let snap = serde_json::to_vec_pretty(cfg).map_err(|e| Error::json(dir, e))?;
            write_atomic(&dir.join("config.resolved.json"), &snap)?;
            let p = dir.join("metrics.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let model = Model::new(mcfg, cfg.seed)?;
    let mut opt = AdamW::new(
        model.store().all_vars(),
        ParamsAdamW { lr: cfg.lr_schedule[0].1, weight_decay: cfg.weight_decay, ..ParamsAdamW::default() },
    )?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::checkpoint::Checkpoint, Option<EvalReport>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(&cfg.lr_schedule, epoch);
        opt.set_learning_rate(lr);
        let mut order: Vec<usize> = (0..train_clips.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1, epoch as u64)));
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Prepared> = idx
                .par_iter()
                .map(|&i| {
                    let (r, t) = train_clips[i];
                    prepare(r, t, mcfg, tax_o, cfg.level, cfg.augment, clip_seed(cfg.seed, epoch, &r.clip_id))
                })
                .collect::<Result<_>>()?;
            check_labels(&batch, mcfg.num_classes)?;
            let refs: Vec<&Prepared> = batch.iter().collect();
            let input = collate(&refs, mcfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2, ((epoch as u64) << 32) | bi as u64));
            let out =
                model.forward(&input, tensors.as_ref(), true, AlignControl { rng: Some(&mut rng), frozen: None })?;
            let labels: Vec<usize> = batch.iter().map(|p| p.label).collect();
            let loss = model.loss(&out.logits, &labels)?;
            let lv = loss.to_scalar::<f64>()?;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            opt.backward_step(&loss)?;
            loss_sum += lv * batch.len() as f64;
            for (row, &y) in out.logits.to_vec2::<f64>()?.iter().zip(&labels) {
                hits += (super::predict(row) == y) as usize;
            }
        }
        let n = train_clips.len() as f64;
        let report =
            if val.is_empty() { None } else { Some(evaluate(&model, &val, tensors.as_ref(), cfg.batch_size)?) };
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_top1: 100.0 * hits as f64 / n,
            val_top1: report.as_ref().map(|r| r.top1),
            val_top5: report.as_ref().map(|r| r.top5),
            val_mean1: report.as_ref().map(|r| r.mean1),
        };
        log::info!("epoch {epoch}: loss {:.4} train {:.1} val {:?}", log.train_loss, log.train_top1, log.val_top1);
        if let Some((f, p)) = metrics.as_mut() {
            let line = serde_json::to_string(&log).map_err(|e| Error::json(p.as_path(), e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        let score = log.val_top1.unwrap_or(log.train_top1);
        if best.as_ref().map_or(true, |b| score > b.0) {
            let ck = model.checkpoint(serde_json::json!({ "epoch": epoch, "level": cfg.level }))?;
            best = Some((score, epoch, ck, report));
        }
        history.push(log);
    }

    let Some((_, best_epoch, ck, best_val)) = best else {
        return Err(Error::InvalidConfig("zero epochs".into()));
    };
    ck.apply_to(model.store())?;
    if let Some(dir) = out_dir {
        ck.save(&dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome { model, history, best_epoch, best_val })
}

//! Full recognizer: one encoder (and chain-of-action stack) per modality and
//! one of three heads.
//!
//! - `base`: mean of branch class tokens, linear classifier.
//! - `coa`: chain-of-action stack, uniform mean over live slots, linear classifier.
//! - `full`: chain-of-action stack plus the mixture-of-thoughts head.

use std::path::Path;

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderConfig, VideoEncoder};
use crate::bank::BankTensors;
use crate::checkpoint::Checkpoint;
use crate::coa::{CoaConfig, CoaPlan, CoaStack};
use crate::data_model::Modality;
use crate::error::{Error, Result};
use crate::mot::{fuse_final, smoothed_cross_entropy, AlignControl, BranchState, MotConfig, MotHead, MotOutput};
use crate::nn::{device, Linear, ParamStore, DTYPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Coa,
    Full,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(' ', "").as_str() {
            "base" => Some(Variant::Base),
            "coa" | "+coa" => Some(Variant::Coa),
            "full" | "coa+mot" | "+coa+mot" => Some(Variant::Full),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::Coa => "+ CoA",
            Variant::Full => "+ CoA + MoT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub coa: CoaConfig,
    pub mot: MotConfig,
    pub modalities: Vec<Modality>,
    pub variant: Variant,
    pub num_classes: usize,
    /// Prototype width; the bank must match.
    pub text_dim: usize,
}

impl ModelConfig {
    pub fn toy(num_classes: usize) -> Self {
        let encoder = EncoderConfig::toy();
        Self {
            text_dim: encoder.dim,
            encoder,
            coa: CoaConfig::toy(),
            mot: MotConfig::default(),
            modalities: vec![Modality::Rgb],
            variant: Variant::Full,
            num_classes,
        }
    }

    pub fn full(num_classes: usize) -> Self {
        let encoder = EncoderConfig::full();
        Self {
            text_dim: encoder.dim,
            encoder,
            coa: CoaConfig::full(),
            mot: MotConfig { weight_hidden: 768, ..MotConfig::default() },
            modalities: vec![Modality::Rgb],
            variant: Variant::Full,
            num_classes,
        }
    }

    pub fn slots_per_branch(&self) -> usize {
        1 + self.coa.o_max + self.coa.r_max
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.coa.validate()?;
        self.mot.alignment.validate()?;
        if self.modalities.is_empty() || self.modalities.len() > 3 {
            return Err(Error::InvalidConfig(format!("{} modalities", self.modalities.len())));
        }
        let mut m = self.modalities.clone();
        m.sort();
        m.dedup();
        if m.len() != self.modalities.len() {
            return Err(Error::InvalidConfig("duplicate modality".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("no classes".into()));
        }
        Ok(())
    }
}

struct Branch {
    modality: Modality,
    encoder: VideoEncoder,
    coa: Option<CoaStack>,
}

enum Head {
    Linear(Linear),
    Mot(MotHead),
}

/// One batch: per-branch pixels `(B, C, T, S, S)` in config modality order
/// and one plan per sample.
pub struct ModelInput {
    pub pixels: Vec<Tensor>,
    pub plans: Vec<CoaPlan>,
}

pub struct ModelOutput {
    pub logits: Tensor,
    /// `(B, S)` slot weights; uniform over live slots for `coa`, absent for `base`.
    pub weights: Option<Tensor>,
    pub mot: Option<MotOutput>,
    pub branches: Vec<BranchState>,
    /// Last encoder block attention per branch.
    pub last_attention: Vec<Tensor>,
}

pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    branches: Vec<Branch>,
    head: Head,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let d = cfg.encoder.dim;
        let mut branches = Vec::new();
        for &m in &cfg.modalities {
            let mut root = store.root();
            let mut p = root.sub(format!("branch.{}", m.name()));
            let encoder = VideoEncoder::new(&mut p.sub("encoder"), &cfg.encoder, m.channels())?;
            let coa = match cfg.variant {
                Variant::Base => None,
                _ => Some(CoaStack::new(&mut p.sub("coa"), d, &cfg.coa)?),
            };
            branches.push(Branch { modality: m, encoder, coa });
        }
        let head = {
            let mut root = store.root();
            let mut p = root.sub("head");
            match cfg.variant {
                Variant::Full => {
                    let slots = cfg.slots_per_branch() * cfg.modalities.len();
                    Head::Mot(MotHead::new(&mut p, d, cfg.text_dim, slots, cfg.num_classes, &cfg.mot)?)
                }
                _ => Head::Linear(Linear::new(&mut p.sub("classifier"), d, cfg.num_classes)?),
            }
        };
        Ok(Self { cfg: cfg.clone(), store, branches, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.branches.iter().map(|b| b.modality).collect()
    }

    pub fn forward(
        &self,
        input: &ModelInput,
        bank: Option<&BankTensors>,
        train: bool,
        ctl: AlignControl<'_>,
    ) -> Result<ModelOutput> {
        if input.pixels.len() != self.branches.len() {
            return Err(Error::BranchDimMismatch(format!(
                "{} pixel tensors for {} branches",
                input.pixels.len(),
                self.branches.len()
            )));
        }
        let mut states = Vec::new();
        let mut attn = Vec::new();
        let mut class_tokens = Vec::new();
        for (br, px) in self.branches.iter().zip(&input.pixels) {
            let enc = br.encoder.forward(px)?;
            attn.push(enc.last_attention.clone());
            match &br.coa {
                None => class_tokens.push(enc.class_token),
                Some(coa) => {
                    let out = coa.forward(&enc, &input.plans)?;
                    states.push(BranchState {
                        class_token: out.class_token,
                        objects: out.object_tokens,
                        object_mask: out.object_mask,
                        relations: out.relation_tokens,
                        relation_mask: out.relation_mask,
                    });
                }
            }
        }
        match (&self.head, self.cfg.variant) {
            (Head::Linear(fc), Variant::Base) => {
                let cls = Tensor::stack(&class_tokens, 0)?.mean(0)?;
                Ok(ModelOutput {
                    logits: fc.forward(&cls)?,
                    weights: None,
                    mot: None,
                    branches: states,
                    last_attention: attn,
                })
            }
            (Head::Linear(fc), _) => {
                let fused: Vec<(Tensor, Tensor, Tensor)> =
                    states.iter().map(|s| (s.class_token.clone(), s.objects.clone(), s.relations.clone())).collect();
                let (slots, live) = crate::mot::concat_slots(&fused, &states)?;
                let live_f = live.to_dtype(DTYPE)?;
                let w = live_f.broadcast_div(&live_f.sum_keepdim(1)?)?;
                let a = fuse_final(&w, &slots)?;
                Ok(ModelOutput {
                    logits: fc.forward(&a)?,
                    weights: Some(w),
                    mot: None,
                    branches: states,
                    last_attention: attn,
                })
            }
            (Head::Mot(head), _) => {
                let bank =
                    bank.ok_or_else(|| Error::InvalidConfig("the full variant needs a prototype bank".into()))?;
                let out = head.forward(&states, bank, train, ctl)?;
                Ok(ModelOutput {
                    logits: out.logits.clone(),
                    weights: Some(out.weights.clone()),
                    mot: Some(out),
                    branches: states,
                    last_attention: attn,
                })
            }
        }
    }

    pub fn loss(&self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        smoothed_cross_entropy(logits, labels, self.cfg.mot.smoothing)
    }

    pub fn checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = serde_json::json!({ "model": self.cfg, "extra": extra });
        Checkpoint::from_store(&self.store, meta)
    }

    /// Rebuilds a model from a checkpoint's embedded config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
            .map_err(|e| Error::ConfigMismatch(format!("checkpoint model config: {e}")))?;
        let model = Self::new(&cfg, 0)?;
        ck.apply_to(&model.store)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loads `path` if it exists and matches `cfg`, otherwise initializes from `seed`.
    pub fn load_or_init(cfg: &ModelConfig, seed: u64, path: Option<&Path>) -> Result<Self> {
        let model = Self::new(cfg, seed)?;
        if let Some(p) = path.filter(|p| p.exists()) {
            let ck = Checkpoint::load(p)?;
            let stored: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
                .map_err(|e| Error::ConfigMismatch(format!("checkpoint model config: {e}")))?;
            if &stored != cfg {
                return Err(Error::ConfigMismatch(format!(
                    "{} was trained with a different model config",
                    p.display()
                )));
            }
            ck.apply_to(&model.store)?;
        }
        Ok(model)
    }
}

/// Zero pixels for every branch of `cfg`; handy for shape probes.
pub fn blank_input(cfg: &ModelConfig, plans: Vec<CoaPlan>) -> Result<ModelInput> {
    let b = plans.len();
    let (t, s) = (cfg.encoder.frames, cfg.encoder.image_size);
    let pixels = cfg
        .modalities
        .iter()
        .map(|m| Tensor::zeros((b, m.channels(), t, s, s), DTYPE, &device()))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(ModelInput { pixels, plans })
}

//! Video encoder producing a token grid: one class token plus a `T×H×W`
//! lattice of spatio-temporal patch tokens.

mod sampling;

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

pub use sampling::{eval_indices, plan_sampling, resize, sample_clip, sample_with_plan, SamplePlan, SampledClip};

use crate::error::{Error, Result};
use crate::nn::{device, LayerNorm, Mlp, MultiHeadAttention, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub frames: usize,
    pub image_size: usize,
    /// Patch extent `(frames, height, width)`.
    pub tubelet: [usize; 3],
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// 8 frames at 224², `(2, 16, 16)` patches, width 768.
    pub fn full() -> Self {
        Self { frames: 8, image_size: 224, tubelet: [2, 16, 16], dim: 768, depth: 12, heads: 12, mlp_ratio: 4 }
    }

    /// Desk-scale preset: 8 frames at 32², `(4, 8, 8)` patches → layout `(2, 4, 4)`, width 64.
    pub fn toy() -> Self {
        Self { frames: 8, image_size: 32, tubelet: [4, 8, 8], dim: 64, depth: 2, heads: 4, mlp_ratio: 2 }
    }

    pub fn layout(&self) -> (usize, usize, usize) {
        (self.frames / self.tubelet[0], self.image_size / self.tubelet[1], self.image_size / self.tubelet[2])
    }

    pub fn num_tokens(&self) -> usize {
        let (t, h, w) = self.layout();
        t * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let [tt, ph, pw] = self.tubelet;
        if tt == 0
            || ph == 0
            || pw == 0
            || self.frames % tt != 0
            || self.image_size % ph != 0
            || self.image_size % pw != 0
        {
            return Err(Error::ShapeMismatch(format!(
                "{} frames at {}² do not tile into {:?} patches",
                self.frames, self.image_size, self.tubelet
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::DimMismatch(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// Per-sample encoder output as plain data.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub class_token: Vec<f64>,
    /// `T·H·W` rows of `dim`, time-major then row-major.
    pub tokens: Vec<f64>,
    pub layout: (usize, usize, usize),
    pub dim: usize,
}

impl TokenGrid {
    pub fn token(&self, t: usize, y: usize, x: usize) -> &[f64] {
        let (_, h, w) = self.layout;
        let i = (t * h + y) * w + x;
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.class_token.iter().chain(&self.tokens).all(|v| v.is_finite())
    }
}

/// Batched encoder output.
pub struct Encoded {
    /// `(B, d)`
    pub class_token: Tensor,
    /// `(B, T·H·W, d)`
    pub tokens: Tensor,
    /// Last block attention `(B, heads, 1+THW, 1+THW)`.
    pub last_attention: Tensor,
}

impl Encoded {
    pub fn grid(&self, i: usize, layout: (usize, usize, usize)) -> Result<TokenGrid> {
        let class_token = self.class_token.get(i)?.to_vec1::<f64>()?;
        let tokens = self.tokens.get(i)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(TokenGrid { dim: class_token.len(), class_token, tokens, layout })
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(p: &mut Params<'_>, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut p.sub("ln1"), cfg.dim)?,
            attn: MultiHeadAttention::new(&mut p.sub("attn"), cfg.dim, cfg.heads)?,
            ln2: LayerNorm::new(&mut p.sub("ln2"), cfg.dim)?,
            mlp: Mlp::new(&mut p.sub("mlp"), &[cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.dim])?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.ln1.forward(x)?;
        let a = self.attn.forward(&h, &h, None)?;
        let x = (x + a.output)?;
        let x = (&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?;
        Ok((x, a.weights))
    }
}

/// Pre-norm transformer over tubelet patches with learned positional embeddings.
#[derive(Debug, Clone)]
pub struct VideoEncoder {
    cfg: EncoderConfig,
    channels: usize,
    patch: crate::nn::Linear,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl VideoEncoder {
    pub fn new(p: &mut Params<'_>, cfg: &EncoderConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        let [tt, ph, pw] = cfg.tubelet;
        let patch = crate::nn::Linear::new(&mut p.sub("patch"), channels * tt * ph * pw, cfg.dim)?;
        let cls = p.normal("cls", &[1, 1, cfg.dim], 0.02)?;
        let pos = p.normal("pos", &[1, cfg.num_tokens() + 1, cfg.dim], 0.02)?;
        let blocks =
            (0..cfg.depth).map(|i| Block::new(&mut p.sub(format!("blocks.{i}")), cfg)).collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut p.sub("norm"), cfg.dim)?;
        Ok(Self { cfg: cfg.clone(), channels, patch, cls, pos, blocks, norm })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn layout(&self) -> (usize, usize, usize) {
        self.cfg.layout()
    }

    /// Stacks sampled clips into `(B, C, T, S, S)`.
    pub fn batch_pixels(&self, clips: &[&SampledClip]) -> Result<Tensor> {
        let (c, t, s) = (self.channels, self.cfg.frames, self.cfg.image_size);
        let mut data = Vec::with_capacity(clips.len() * c * t * s * s);
        for clip in clips {
            if clip.channels != c || clip.frame_count != t || clip.size != s {
                return Err(Error::ShapeMismatch(format!(
                    "encoder expects {c}×{t}×{s}² input, clip is {}×{}×{}²",
                    clip.channels, clip.frame_count, clip.size
                )));
            }
            data.extend_from_slice(&clip.pixels);
        }
        Ok(Tensor::from_vec(data, (clips.len(), c, t, s, s), &device())?)
    }

    /// `pixels: (B, C, T, S, S)`.
    pub fn forward(&self, pixels: &Tensor) -> Result<Encoded> {
        let (b, c, t, s, s2) = pixels.dims5()?;
        if c != self.channels || t != self.cfg.frames || s != self.cfg.image_size || s2 != s {
            return Err(Error::ShapeMismatch(format!("encoder input {:?}", pixels.dims())));
        }
        let [tt, ph, pw] = self.cfg.tubelet;
        let (gt, gh, gw) = self.cfg.layout();
        let patches = pixels
            .reshape(vec![b, c, gt, tt, gh, ph, gw, pw])?
            .permute(vec![0, 2, 4, 6, 1, 3, 5, 7])?
            .contiguous()?
            .reshape((b, gt * gh * gw, c * tt * ph * pw))?;
        let x = self.patch.forward(&patches)?;
        let cls = self.cls.broadcast_as((b, 1, self.cfg.dim))?;
        let mut x = Tensor::cat(&[&cls, &x], 1)?.broadcast_add(&self.pos)?;
        let mut last = None;
        for blk in &self.blocks {
            let (y, w) = blk.forward(&x)?;
            x = y;
            last = Some(w);
        }
        let x = self.norm.forward(&x)?;
        let n = gt * gh * gw;
        let last_attention = match last {
            Some(w) => w,
            None => Tensor::zeros((b, 1, n + 1, n + 1), crate::nn::DTYPE, &device())?,
        };
        Ok(Encoded { class_token: x.narrow(1, 0, 1)?.squeeze(1)?, tokens: x.narrow(1, 1, n)?, last_attention })
    }

    /// Single-clip convenience wrapper.
    pub fn encode(&self, clip: &SampledClip) -> Result<TokenGrid> {
        let out = self.forward(&self.batch_pixels(&[clip])?)?;
        out.grid(0, self.layout())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Modality;
    use crate::nn::ParamStore;

    fn tiny() -> EncoderConfig {
        EncoderConfig { frames: 4, image_size: 8, tubelet: [2, 4, 4], dim: 16, depth: 2, heads: 2, mlp_ratio: 2 }
    }

    fn clip(cfg: &EncoderConfig, seed: u64) -> SampledClip {
        let n = 3 * cfg.frames * cfg.image_size * cfg.image_size;
        let mut s = ParamStore::new(seed);
        let pixels = s.root().uniform("x", &[n], 1.0).unwrap().to_vec1::<f64>().unwrap();
        SampledClip {
            modality: Modality::Rgb,
            channels: 3,
            frame_count: cfg.frames,
            size: cfg.image_size,
            pixels,
            frame_index_map: (0..cfg.frames).collect(),
            flipped: false,
            augmentation_log: vec![],
        }
    }

    #[test]
    fn layouts_of_presets() {
        assert_eq!(EncoderConfig::full().layout(), (4, 14, 14));
        assert_eq!(EncoderConfig::full().dim, 768);
        assert_eq!(EncoderConfig::toy().layout(), (2, 4, 4));
        assert_eq!(EncoderConfig::toy().dim, 64);
    }

    #[test]
    fn zero_input_gives_finite_tokens() {
        let cfg = EncoderConfig::toy();
        let mut store = ParamStore::new(0);
        let enc = VideoEncoder::new(&mut store.root(), &cfg, 3).unwrap();
        let mut c = clip(&cfg, 0);
        c.pixels.iter_mut().for_each(|v| *v = 0.0);
        let g = enc.encode(&c).unwrap();
        assert!(g.is_finite());
        assert_eq!(g.tokens.len(), 32 * 64);
    }

    #[test]
    fn batched_equals_one_by_one() {
        let cfg = tiny();
        let mut store = ParamStore::new(1);
        let enc = VideoEncoder::new(&mut store.root(), &cfg, 3).unwrap();
        let clips: Vec<SampledClip> = (0..3).map(|i| clip(&cfg, 10 + i)).collect();
        let refs: Vec<&SampledClip> = clips.iter().rev().collect();
        let batched = enc.forward(&enc.batch_pixels(&refs).unwrap()).unwrap();
        for (bi, c) in refs.iter().enumerate() {
            let one = enc.encode(c).unwrap();
            let g = batched.grid(bi, cfg.layout()).unwrap();
            for (a, b) in one.tokens.iter().zip(&g.tokens).chain(one.class_token.iter().zip(&g.class_token)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = tiny();
        let mut store = ParamStore::new(1);
        let enc = VideoEncoder::new(&mut store.root(), &cfg, 3).unwrap();
        let mut c = clip(&cfg, 0);
        c.size = 16;
        assert_eq!(enc.batch_pixels(&[&c]).unwrap_err().code(), "SHAPE_MISMATCH");
    }

    /// Finite-difference check of d(w · class token)/d(pixel) for a fixed `w`.
    #[test]
    fn pixel_gradient_matches_finite_difference() {
        let cfg = tiny();
        let mut store = ParamStore::new(2);
        let enc = VideoEncoder::new(&mut store.root(), &cfg, 3).unwrap();
        let c = clip(&cfg, 3);
        let x = candle_core::Var::from_tensor(&enc.batch_pixels(&[&c]).unwrap()).unwrap();
        let w: Vec<f64> = (0..cfg.dim).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let w = Tensor::from_vec(w, (1, cfg.dim), &device()).unwrap();
        let probe = |t: &Tensor| enc.forward(t).unwrap().class_token.mul(&w).unwrap().sum_all().unwrap();
        let grads = probe(x.as_tensor()).backward().unwrap();
        let g = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = c.pixels.clone();
        for idx in [0usize, 77, 191, 300] {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[idx] += delta;
                let t = Tensor::from_vec(p, x.shape(), &device()).unwrap();
                probe(&t).to_scalar::<f64>().unwrap()
            };
            let h = 1e-5;
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-6);
            assert!(rel < 1e-3, "pixel {idx}: fd {fd} vs analytic {}", g[idx]);
        }
    }
}

use candle_core::{Module, Tensor};

use super::{key_masked_softmax, masked_softmax, Linear, Params};
use crate::error::{Error, Result};

pub struct AttentionOutput {
    /// `(B, Nq, d)`
    pub output: Tensor,
    /// `(B, heads, Nq, Nk)`; rows over live keys sum to 1.
    pub weights: Tensor,
}

/// Multi-head scaled dot-product attention with an optional key mask.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(p: &mut Params<'_>, dim: usize, heads: usize) -> Result<Self> {
        Self::build(p, dim, heads, false)
    }

    /// Value and output projections start at zero: the block is an identity
    /// under a residual connection until trained.
    pub fn zero_value_output(p: &mut Params<'_>, dim: usize, heads: usize) -> Result<Self> {
        Self::build(p, dim, heads, true)
    }

    fn build(p: &mut Params<'_>, dim: usize, heads: usize, zero_vo: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::DimMismatch(format!("{dim} not divisible by {heads} heads")));
        }
        let q = Linear::new(&mut p.sub("q"), dim, dim)?;
        let k = Linear::new(&mut p.sub("k"), dim, dim)?;
        let (v, o) = if zero_vo {
            (Linear::zeros(&mut p.sub("v"), dim, dim)?, Linear::zeros(&mut p.sub("o"), dim, dim)?)
        } else {
            (Linear::new(&mut p.sub("v"), dim, dim)?, Linear::new(&mut p.sub("o"), dim, dim)?)
        };
        Ok(Self { q, k, v, o, heads, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `query: (B, Nq, d)`, `kv: (B, Nk, d)`, `key_mask: (B, Nk)` u8.
    pub fn forward(&self, query: &Tensor, kv: &Tensor, key_mask: Option<&Tensor>) -> Result<AttentionOutput> {
        let (b, nq, d) = query.dims3()?;
        let (b2, nk, d2) = kv.dims3()?;
        if d != self.dim || d2 != self.dim || b != b2 {
            return Err(Error::DimMismatch(format!(
                "attention over d={} got query {:?} kv {:?}",
                self.dim,
                query.dims(),
                kv.dims()
            )));
        }
        let h = self.heads;
        let dh = d / h;
        let split =
            |x: Tensor, n: usize| -> Result<Tensor> { Ok(x.reshape((b, n, h, dh))?.transpose(1, 2)?.contiguous()?) };
        let q = split(self.q.forward(query)?, nq)?;
        let k = split(self.k.forward(kv)?, nk)?;
        let v = split(self.v.forward(kv)?, nk)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let mask = key_mask.map(|m| m.reshape((b, 1, 1, nk))).transpose()?;
        let weights = match &mask {
            Some(m) => key_masked_softmax(&scores, m)?,
            None => masked_softmax(&scores, None)?,
        };
        let ctx = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, nq, d))?;
        Ok(AttentionOutput { output: self.o.forward(&ctx)?, weights })
    }
}

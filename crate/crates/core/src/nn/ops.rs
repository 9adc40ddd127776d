use candle_core::{Tensor, D};

use crate::error::Result;

/// `u8` mask tensor of shape `shape` from booleans.
pub fn bool_mask(values: &[bool], shape: &[usize]) -> Result<Tensor> {
    let data: Vec<u8> = values.iter().map(|&b| b as u8).collect();
    Ok(Tensor::from_vec(data, shape, &super::device())?)
}

/// Softmax over the last dimension restricted to entries where `mask` is set.
///
/// Masked entries are exactly zero and never reach `exp`, so arbitrary
/// (finite or not) values stored there cannot leak into live outputs. Rows
/// with no live entry come out all-zero.
pub fn masked_softmax(logits: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let Some(mask) = mask else {
        let m = logits.max_keepdim(D::Minus1)?.detach();
        let e = logits.broadcast_sub(&m)?.exp()?;
        let s = e.sum_keepdim(D::Minus1)?;
        return Ok(e.broadcast_div(&s)?);
    };
    let mask = mask.broadcast_as(logits.shape())?;
    let floor = logits.zeros_like()?.affine(0.0, -1e30)?;
    let live = mask.where_cond(logits, &floor)?;
    let m = live.max_keepdim(D::Minus1)?.detach();
    let m_full = m.broadcast_as(logits.shape())?;
    let shifted = mask.where_cond(logits, &m_full)?.broadcast_sub(&m)?;
    let e = mask.where_cond(&shifted.exp()?, &logits.zeros_like()?)?;
    let s = e.sum_keepdim(D::Minus1)?;
    let empty = s.eq(0.0)?.to_dtype(s.dtype())?;
    Ok(e.broadcast_div(&(s + empty)?)?)
}

/// Softmax over the last dimension with a mask that broadcasts against
/// `scores` (e.g. a `(B, 1, 1, Nk)` key mask). Same contract as
/// [`masked_softmax`] for finite scores, at a fraction of the cost: the mask
/// enters as an additive bias and a multiplicative gate of its own size.
pub fn key_masked_softmax(scores: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let keep = mask.to_dtype(scores.dtype())?;
    let bias = keep.affine(1e30, -1e30)?;
    let live = scores.broadcast_add(&bias)?;
    let m = live.max_keepdim(D::Minus1)?.detach();
    let e = live.broadcast_sub(&m)?.exp()?.broadcast_mul(&keep)?;
    let s = e.sum_keepdim(D::Minus1)?;
    let empty = s.eq(0.0)?.to_dtype(s.dtype())?;
    Ok(e.broadcast_div(&(s + empty)?)?)
}

/// Replaces rows where `mask` (shape = `x` minus its last dim) is unset by zero.
pub fn zero_masked(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(D::Minus1)?.broadcast_as(x.shape())?;
    Ok(m.where_cond(x, &x.zeros_like()?)?)
}

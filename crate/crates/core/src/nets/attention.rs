//! Gated self-attention over spatial positions.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nets::ops::softmax_last_dim;

/// Learned 1×1 projections and the residual gate of one attention layer.
///
/// Query and key project to `max(1, C/8)` channels, value keeps `C`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query_weight: Tensor,
    pub query_bias: Tensor,
    pub key_weight: Tensor,
    pub key_bias: Tensor,
    pub value_weight: Tensor,
    pub value_bias: Tensor,
    /// Scalar residual mixing coefficient, shape `(1,)`.
    pub gate: Tensor,
}

pub fn reduced_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

fn project(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    // x: N×C×L, weight: C'×C
    let y = super::ops::weight_matmul(weight, x)?;
    let c = bias.dim(0)?;
    Ok(y.broadcast_add(&bias.reshape((1, c, 1))?)?)
}

impl AttentionParams {
    fn check(&self, channels: usize) -> Result<()> {
        let (qc, qin) = self.query_weight.dims2()?;
        let (kc, kin) = self.key_weight.dims2()?;
        let (vc, vin) = self.value_weight.dims2()?;
        if qin != channels || kin != channels || vin != channels || vc != channels || qc != kc {
            return Err(Error::ShapeMismatch(format!(
                "attention projections ({qc}x{qin}, {kc}x{kin}, {vc}x{vin}) do not fit {channels} channels"
            )));
        }
        Ok(())
    }
}

/// Row-stochastic `N×L×L` attention matrix; row `i` holds the weights position `i` puts on every key.
pub fn attention_matrix(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    params.check(c)?;
    let flat = x.reshape((n, c, h * w))?;
    let q = project(&flat, &params.query_weight, &params.query_bias)?;
    let k = project(&flat, &params.key_weight, &params.key_bias)?;
    let scores = q.transpose(1, 2)?.contiguous()?.matmul(&k.contiguous()?)?;
    softmax_last_dim(&scores)
}

/// `x + gate · (V · Aᵀ)`, shape preserving.
pub fn self_attention(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let attn = attention_matrix(x, params)?;
    let flat = x.reshape((n, c, h * w))?;
    let v = project(&flat, &params.value_weight, &params.value_bias)?;
    let mixed = v.contiguous()?.matmul(&attn.transpose(1, 2)?.contiguous()?)?;
    let out = flat.broadcast_add(&mixed.broadcast_mul(&params.gate.reshape((1, 1, 1))?)?)?;
    Ok(out.reshape((n, c, h, w))?)
}

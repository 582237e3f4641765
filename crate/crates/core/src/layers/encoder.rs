//! Encoder block: multi-head self-attention and a position-wise feed-forward
//! sublayer, each wrapped in residual + layer norm.

use rand_chacha::ChaCha8Rng;

use super::attention::{multi_head_self_attention, MultiHeadParams};
use super::init;
use crate::tensor::{Registrar, Tape, Tensor, TensorId};
use crate::{CoreError, Result};

#[derive(Clone, Debug)]
pub struct EncoderBlockParams<T> {
    pub mhsa: MultiHeadParams<T>,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

impl EncoderBlockParams<Tensor> {
    pub fn init(d_model: usize, n_heads: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(EncoderBlockParams {
            mhsa: MultiHeadParams::init(d_model, n_heads, rng)?,
            ffn_w1: init::xavier_uniform(&[d_model, d_ff], d_model, d_ff, rng),
            ffn_b1: init::zeros(&[d_ff]),
            ffn_w2: init::xavier_uniform(&[d_ff, d_model], d_ff, d_model, rng),
            ffn_b2: init::zeros(&[d_model]),
            ln1_gain: init::constant(&[d_model], 1.0),
            ln1_bias: init::zeros(&[d_model]),
            ln2_gain: init::constant(&[d_model], 1.0),
            ln2_bias: init::zeros(&[d_model]),
        })
    }

    pub fn register(&self, reg: &mut impl Registrar) -> EncoderBlockParams<TensorId> {
        EncoderBlockParams {
            mhsa: self.mhsa.register(reg),
            ffn_w1: reg.reg_param(&self.ffn_w1),
            ffn_b1: reg.reg_param(&self.ffn_b1),
            ffn_w2: reg.reg_param(&self.ffn_w2),
            ffn_b2: reg.reg_param(&self.ffn_b2),
            ln1_gain: reg.reg_param(&self.ln1_gain),
            ln1_bias: reg.reg_param(&self.ln1_bias),
            ln2_gain: reg.reg_param(&self.ln2_gain),
            ln2_bias: reg.reg_param(&self.ln2_bias),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .mhsa
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("mhsa.{n}"), t))
            .collect();
        out.push(("ffn.w1".into(), &self.ffn_w1));
        out.push(("ffn.b1".into(), &self.ffn_b1));
        out.push(("ffn.w2".into(), &self.ffn_w2));
        out.push(("ffn.b2".into(), &self.ffn_b2));
        out.push(("ln1.gain".into(), &self.ln1_gain));
        out.push(("ln1.bias".into(), &self.ln1_bias));
        out.push(("ln2.gain".into(), &self.ln2_gain));
        out.push(("ln2.bias".into(), &self.ln2_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .mhsa
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("mhsa.{n}"), t))
            .collect();
        out.push(("ffn.w1".into(), &mut self.ffn_w1));
        out.push(("ffn.b1".into(), &mut self.ffn_b1));
        out.push(("ffn.w2".into(), &mut self.ffn_w2));
        out.push(("ffn.b2".into(), &mut self.ffn_b2));
        out.push(("ln1.gain".into(), &mut self.ln1_gain));
        out.push(("ln1.bias".into(), &mut self.ln1_bias));
        out.push(("ln2.gain".into(), &mut self.ln2_gain));
        out.push(("ln2.bias".into(), &mut self.ln2_bias));
        out
    }
}

/// X ← layernorm(X + MHSA(X)); X ← layernorm(X + FFN(X)).
pub fn encoder_block(
    tape: &mut Tape,
    x: TensorId,
    p: &EncoderBlockParams<TensorId>,
    pad_mask: &[bool],
) -> Result<TensorId> {
    let attn = multi_head_self_attention(tape, x, &p.mhsa, pad_mask)?.output;
    let res = tape.add(x, attn)?;
    let x1 = tape.layer_norm_rows(res, p.ln1_gain, p.ln1_bias)?;

    let h = tape.matmul(x1, p.ffn_w1)?;
    let h = tape.add(h, p.ffn_b1)?;
    let h = tape.relu(h)?;
    let f = tape.matmul(h, p.ffn_w2)?;
    let f = tape.add(f, p.ffn_b2)?;
    let res2 = tape.add(x1, f)?;
    tape.layer_norm_rows(res2, p.ln2_gain, p.ln2_bias)
}

/// Apply every block in order; contextual output keeps the input shape.
pub fn encoder_forward(
    tape: &mut Tape,
    x: TensorId,
    blocks: &[EncoderBlockParams<TensorId>],
    pad_mask: &[bool],
) -> Result<TensorId> {
    if blocks.is_empty() {
        return Err(CoreError::contract("encoder_forward: needs at least one block".to_string()));
    }
    let mut cur = x;
    for block in blocks {
        cur = encoder_block(tape, cur, block, pad_mask)?;
    }
    Ok(cur)
}

//! Additive attention pooling and scaled dot-product multi-head attention.

use rand_chacha::ChaCha8Rng;

use super::init;
use crate::tensor::{Registrar, Tape, Tensor, TensorId};
use crate::{CoreError, Result};

/// Attention pooling parameters.
///
/// Scores are u_t = tanh(W_g·H_t + b_g) reduced to a scalar by the learned
/// context vector v (stored att×1).
#[derive(Clone, Debug)]
pub struct AttnPoolParams<T> {
    pub w_g: T,
    pub b_g: T,
    pub v: T,
}

impl AttnPoolParams<Tensor> {
    pub fn init(att: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        AttnPoolParams {
            w_g: init::xavier_uniform(&[att, hidden], hidden, att, rng),
            b_g: init::zeros(&[att]),
            v: init::xavier_uniform(&[att, 1], att, 1, rng),
        }
    }

    pub fn register(&self, reg: &mut impl Registrar) -> AttnPoolParams<TensorId> {
        AttnPoolParams {
            w_g: reg.reg_param(&self.w_g),
            b_g: reg.reg_param(&self.b_g),
            v: reg.reg_param(&self.v),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w_g", &self.w_g), ("b_g", &self.b_g), ("v", &self.v)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("w_g", &mut self.w_g), ("b_g", &mut self.b_g), ("v", &mut self.v)]
    }
}

pub struct AttnPoolOut {
    /// Weighted sum R = Σ a_t·H_t, 1×d.
    pub pooled: TensorId,
    /// The weight distribution a, 1×T.
    pub weights: TensorId,
}

/// Pool a sequence H (T×d) into one vector by learned attention weights:
/// u_t = tanh(W_g·H_t + b_g), s_t = v·u_t, a = softmax(s), R = Σ a_t·H_t.
pub fn attention_pool(tape: &mut Tape, h: TensorId, p: &AttnPoolParams<TensorId>) -> Result<AttnPoolOut> {
    if tape.shape(h)[0] == 0 {
        return Err(CoreError::contract("attention_pool: empty sequence".to_string()));
    }
    let proj = tape.matmul_nt(h, p.w_g)?;
    let proj = tape.add(proj, p.b_g)?;
    let u = tape.tanh(proj)?;
    let scores = tape.matmul(u, p.v)?; // T×1
    let scores = tape.transpose(scores)?; // 1×T
    let weights = tape.softmax_rows(scores)?;
    let pooled = tape.matmul(weights, h)?;
    Ok(AttnPoolOut { pooled, weights })
}

/// One attention head's projections, each d_model×d_k.
#[derive(Clone, Debug)]
pub struct HeadParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
}

/// Multi-head self-attention parameters: n per-head projection triples and
/// the output projection W_O (d_model×d_model). d_k = d_model / n.
#[derive(Clone, Debug)]
pub struct MultiHeadParams<T> {
    pub heads: Vec<HeadParams<T>>,
    pub w_o: T,
}

impl MultiHeadParams<Tensor> {
    pub fn init(d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(CoreError::config(format!(
                "{n_heads} heads do not divide d_model {d_model}"
            )));
        }
        let d_k = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|_| HeadParams {
                w_q: init::xavier_uniform(&[d_model, d_k], d_model, d_k, rng),
                w_k: init::xavier_uniform(&[d_model, d_k], d_model, d_k, rng),
                w_v: init::xavier_uniform(&[d_model, d_k], d_model, d_k, rng),
            })
            .collect();
        Ok(MultiHeadParams {
            heads,
            w_o: init::xavier_uniform(&[d_model, d_model], d_model, d_model, rng),
        })
    }

    pub fn d_k(&self) -> usize {
        self.heads[0].w_q.shape()[1]
    }

    pub fn register(&self, reg: &mut impl Registrar) -> MultiHeadParams<TensorId> {
        MultiHeadParams {
            heads: self
                .heads
                .iter()
                .map(|h| HeadParams {
                    w_q: reg.reg_param(&h.w_q),
                    w_k: reg.reg_param(&h.w_k),
                    w_v: reg.reg_param(&h.w_v),
                })
                .collect(),
            w_o: reg.reg_param(&self.w_o),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("head{i}.w_q"), &h.w_q));
            out.push((format!("head{i}.w_k"), &h.w_k));
            out.push((format!("head{i}.w_v"), &h.w_v));
        }
        out.push(("w_o".to_string(), &self.w_o));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{i}.w_q"), &mut h.w_q));
            out.push((format!("head{i}.w_k"), &mut h.w_k));
            out.push((format!("head{i}.w_v"), &mut h.w_v));
        }
        out.push(("w_o".to_string(), &mut self.w_o));
        out
    }
}

pub struct MhsaOut {
    pub output: TensorId,
    /// Per-head attention weight matrices (T×T), for inspection.
    pub weights: Vec<TensorId>,
}

/// Scaled dot-product self-attention over every head, heads concatenated and
/// projected by W_O. `pad_mask[t] == true` marks a real token; padded
/// positions receive zero attention weight (the −∞-score convention).
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: TensorId,
    p: &MultiHeadParams<TensorId>,
    pad_mask: &[bool],
) -> Result<MhsaOut> {
    let t_len = tape.shape(x)[0];
    if pad_mask.len() != t_len {
        return Err(CoreError::contract(format!(
            "multi_head_self_attention: mask length {} != sequence length {t_len}",
            pad_mask.len()
        )));
    }
    let d_model = tape.shape(x)[1];
    let n = p.heads.len();
    if n == 0 || d_model % n != 0 {
        return Err(CoreError::config(format!(
            "{n} heads do not divide d_model {d_model}"
        )));
    }
    let d_k = d_model / n;
    let inv_sqrt_dk = 1.0 / (d_k as f64).sqrt();

    let mut weights = Vec::with_capacity(n);
    let mut concat: Option<TensorId> = None;
    for head in &p.heads {
        let q = tape.matmul(x, head.w_q)?;
        let k = tape.matmul(x, head.w_k)?;
        let v = tape.matmul(x, head.w_v)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, inv_sqrt_dk)?;
        let w = tape.masked_softmax_rows(scores, pad_mask)?;
        let ctx = tape.matmul(w, v)?;
        weights.push(w);
        concat = Some(match concat {
            None => ctx,
            Some(acc) => tape.concat_last(acc, ctx)?,
        });
    }
    let output = tape.matmul(concat.expect("at least one head"), p.w_o)?;
    Ok(MhsaOut { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;
    use rand::SeedableRng;

    #[test]
    fn pool_of_single_row_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttnPoolParams::init(3, 2, &mut rng);
        let mut tape = Tape::new(Mode::Eval);
        let ids = p.register(&mut tape);
        let h = tape.constant(Tensor::new(&[1, 2], vec![0.7, -1.3]).unwrap());
        let out = attention_pool(&mut tape, h, &ids).unwrap();
        assert_eq!(tape.values(out.weights), &[1.0]);
        assert_eq!(tape.values(out.pooled), tape.values(h));
    }

    #[test]
    fn identical_rows_pool_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = AttnPoolParams::init(4, 3, &mut rng);
        let mut tape = Tape::new(Mode::Eval);
        let ids = p.register(&mut tape);
        let row = [0.4, -0.9, 1.2];
        let flat: Vec<f64> = row.iter().cycle().take(12).copied().collect();
        let h = tape.constant(Tensor::new(&[4, 3], flat).unwrap());
        let out = attention_pool(&mut tape, h, &ids).unwrap();
        for &w in tape.values(out.weights) {
            assert!((w - 0.25).abs() < 1e-12);
        }
        for (got, want) in tape.values(out.pooled).iter().zip(&row) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = AttnPoolParams::init(2, 2, &mut rng);
        let rows = [[0.3, -0.8], [1.4, 0.2], [-0.6, 0.9]];

        // scalar evaluation of u_t = tanh(W_g·H_t + b_g), s_t = v·u_t,
        // a = softmax(s), R = Σ a_t H_t
        let wg = p.w_g.values();
        let bg = p.b_g.values();
        let v = p.v.values();
        let mut scores = [0.0f64; 3];
        for (t, row) in rows.iter().enumerate() {
            for a in 0..2 {
                let u = (wg[a * 2] * row[0] + wg[a * 2 + 1] * row[1] + bg[a]).tanh();
                scores[t] += v[a] * u;
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let a: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let mut want = [0.0f64; 2];
        for (t, row) in rows.iter().enumerate() {
            want[0] += a[t] * row[0];
            want[1] += a[t] * row[1];
        }

        let mut tape = Tape::new(Mode::Eval);
        let ids = p.register(&mut tape);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let h = tape.constant(Tensor::new(&[3, 2], flat).unwrap());
        let out = attention_pool(&mut tape, h, &ids).unwrap();
        for (got, want) in tape.values(out.weights).iter().zip(&a) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in tape.values(out.pooled).iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_weights_form_probability_vector_and_r_in_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = AttnPoolParams::init(5, 4, &mut rng);
        let mut tape = Tape::new(Mode::Eval);
        let ids = p.register(&mut tape);
        let flat: Vec<f64> = (0..20).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.6).collect();
        let h = tape.constant(Tensor::new(&[5, 4], flat.clone()).unwrap());
        let out = attention_pool(&mut tape, h, &ids).unwrap();
        let w = tape.values(out.weights);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let pooled = tape.values(out.pooled);
        for d in 0..4 {
            let col: Vec<f64> = (0..5).map(|t| flat[t * 4 + d]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(pooled[d] >= lo - 1e-12 && pooled[d] <= hi + 1e-12);
        }
    }

    #[test]
    fn head_width_at_paper_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MultiHeadParams::init(768, 12, &mut rng).unwrap();
        assert_eq!(p.d_k(), 64);
        assert_eq!(p.heads.len(), 12);
    }

    #[test]
    fn singleton_sequence_attends_fully_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = MultiHeadParams::init(4, 2, &mut rng).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        let ids = p.register(&mut tape);
        let x = tape.constant(Tensor::new(&[1, 4], vec![0.3, -0.2, 0.8, 0.1]).unwrap());
        let out = multi_head_self_attention(&mut tape, x, &ids, &[true]).unwrap();
        for &w in &out.weights {
            assert_eq!(tape.values(w), &[1.0]);
        }
    }

    #[test]
    fn weight_rows_sum_to_one_and_masked_columns_are_dead() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = MultiHeadParams::init(4, 2, &mut rng).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        let ids = p.register(&mut tape);
        let flat: Vec<f64> = (0..16).map(|i| (i as f64 * 0.23).sin()).collect();
        let x = tape.constant(Tensor::new(&[4, 4], flat).unwrap());
        let mask = [true, true, false, true];
        let out = multi_head_self_attention(&mut tape, x, &ids, &mask).unwrap();
        for w in &out.weights {
            let v = tape.values(*w);
            for r in 0..4 {
                let row = &v[r * 4..(r + 1) * 4];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row[2] < 1e-12);
            }
        }
    }

    #[test]
    fn mask_length_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = MultiHeadParams::init(4, 2, &mut rng).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        let ids = p.register(&mut tape);
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(multi_head_self_attention(&mut tape, x, &ids, &[true, true]).is_err());
    }

    #[test]
    fn unmasked_attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = MultiHeadParams::init(6, 3, &mut rng).unwrap();
        let flat: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let perm = [2usize, 0, 3, 1];

        let mut tape = Tape::new(Mode::Eval);
        let ids = p.register(&mut tape);
        let x = tape.constant(Tensor::new(&[4, 6], flat.clone()).unwrap());
        let base = multi_head_self_attention(&mut tape, x, &ids, &[true; 4]).unwrap();
        let base_v = tape.values(base.output).to_vec();

        let mut permuted = vec![0.0; 24];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 6..(dst + 1) * 6].copy_from_slice(&flat[src * 6..(src + 1) * 6]);
        }
        let mut tape2 = Tape::new(Mode::Eval);
        let ids2 = p.register(&mut tape2);
        let x2 = tape2.constant(Tensor::new(&[4, 6], permuted).unwrap());
        let out2 = multi_head_self_attention(&mut tape2, x2, &ids2, &[true; 4]).unwrap();
        let v2 = tape2.values(out2.output);

        for (dst, &src) in perm.iter().enumerate() {
            for d in 0..6 {
                assert!((v2[dst * 6 + d] - base_v[src * 6 + d]).abs() < 1e-9);
            }
        }
    }
}

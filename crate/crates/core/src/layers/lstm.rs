//! LSTM cell and the bidirectional sequence wrapper.

use rand_chacha::ChaCha8Rng;

use super::init;
use crate::tensor::{Registrar, Tape, Tensor, TensorId};
use crate::{CoreError, Result};

/// Gate parameters of one LSTM direction.
///
/// Each weight matrix is hidden×(hidden+input) and acts on the concatenated
/// `[h_{t-1}, x_t]` (hidden section first). Biases have length `hidden`.
#[derive(Clone, Debug)]
pub struct LstmParams<T> {
    pub w_i: T,
    pub w_f: T,
    pub w_c: T,
    pub w_o: T,
    pub b_i: T,
    pub b_f: T,
    pub b_c: T,
    pub b_o: T,
}

impl LstmParams<Tensor> {
    /// Xavier weights; forget-gate bias starts at 1.0, the others at zero.
    pub fn init(hidden: usize, input: usize, rng: &mut ChaCha8Rng) -> Self {
        let cat = hidden + input;
        let w = |rng: &mut ChaCha8Rng| init::xavier_uniform(&[hidden, cat], cat, hidden, rng);
        LstmParams {
            w_i: w(rng),
            w_f: w(rng),
            w_c: w(rng),
            w_o: w(rng),
            b_i: init::zeros(&[hidden]),
            b_f: init::constant(&[hidden], 1.0),
            b_c: init::zeros(&[hidden]),
            b_o: init::zeros(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_i.shape()[0]
    }

    pub fn register(&self, reg: &mut impl Registrar) -> LstmParams<TensorId> {
        LstmParams {
            w_i: reg.reg_param(&self.w_i),
            w_f: reg.reg_param(&self.w_f),
            w_c: reg.reg_param(&self.w_c),
            w_o: reg.reg_param(&self.w_o),
            b_i: reg.reg_param(&self.b_i),
            b_f: reg.reg_param(&self.b_f),
            b_c: reg.reg_param(&self.b_c),
            b_o: reg.reg_param(&self.b_o),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_i", &self.w_i),
            ("w_f", &self.w_f),
            ("w_c", &self.w_c),
            ("w_o", &self.w_o),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_c", &self.b_c),
            ("b_o", &self.b_o),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_i", &mut self.w_i),
            ("w_f", &mut self.w_f),
            ("w_c", &mut self.w_c),
            ("w_o", &mut self.w_o),
            ("b_i", &mut self.b_i),
            ("b_f", &mut self.b_f),
            ("b_c", &mut self.b_c),
            ("b_o", &mut self.b_o),
        ]
    }
}

/// One LSTM cell update:
///
/// i = σ(W_i[h,x]+b_i), f = σ(W_f[h,x]+b_f), c̃ = tanh(W_c[h,x]+b_c),
/// c' = f⊙c + i⊙c̃, o = σ(W_o[h,x]+b_o), h' = o⊙tanh(c').
///
/// Inputs are rank-2 (B×input, B×hidden); returns (h', c').
pub fn lstm_step(
    tape: &mut Tape,
    x_t: TensorId,
    h_prev: TensorId,
    c_prev: TensorId,
    p: &LstmParams<TensorId>,
) -> Result<(TensorId, TensorId)> {
    let hx = tape.concat_last(h_prev, x_t)?;
    let i = gate_sigmoid(tape, hx, p.w_i, p.b_i)?;
    let f = gate_sigmoid(tape, hx, p.w_f, p.b_f)?;
    let o = gate_sigmoid(tape, hx, p.w_o, p.b_o)?;
    let pre_c = affine_nt(tape, hx, p.w_c, p.b_c)?;
    let c_tilde = tape.tanh(pre_c)?;

    let keep = tape.hadamard(f, c_prev)?;
    let write = tape.hadamard(i, c_tilde)?;
    let c_t = tape.add(keep, write)?;
    let c_act = tape.tanh(c_t)?;
    let h_t = tape.hadamard(o, c_act)?;
    Ok((h_t, c_t))
}

fn affine_nt(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let wx = tape.matmul_nt(x, w)?;
    tape.add(wx, b)
}

fn gate_sigmoid(tape: &mut Tape, hx: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let pre = affine_nt(tape, hx, w, b)?;
    tape.sigmoid(pre)
}

/// Run a single direction over `x` (T×input rows, in scan order) from zero
/// initial states. Returns the hidden state after each step, each 1×hidden.
pub fn lstm_forward(tape: &mut Tape, x: TensorId, p: &LstmParams<TensorId>) -> Result<Vec<TensorId>> {
    let steps = tape.shape(x)[0];
    if steps == 0 {
        return Err(CoreError::contract("lstm_forward: empty sequence".to_string()));
    }
    let hidden = tape.shape(p.b_i)[0];
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = tape.slice_rows(x, t, 1)?;
        let (nh, nc) = lstm_step(tape, x_t, h, c, p)?;
        h = nh;
        c = nc;
        states.push(h);
    }
    Ok(states)
}

pub struct BilstmOut {
    /// Spliced sequence H[t] = concat(h_fwd[t], h_bwd[t]), T×2·hidden.
    pub sequence: TensorId,
    /// concat of each direction's state after its full scan, 1×2·hidden.
    pub final_states: TensorId,
}

/// Bidirectional LSTM: H[t] = concat(h_fwd[t], h_bwd[t]) where the backward
/// pass scans the reversed sequence. Output is T×2·hidden.
pub fn bilstm(
    tape: &mut Tape,
    x: TensorId,
    fwd: &LstmParams<TensorId>,
    bwd: &LstmParams<TensorId>,
) -> Result<TensorId> {
    Ok(bilstm_full(tape, x, fwd, bwd)?.sequence)
}

/// [`bilstm`] plus the final-state readout used when no pooling follows.
pub fn bilstm_full(
    tape: &mut Tape,
    x: TensorId,
    fwd: &LstmParams<TensorId>,
    bwd: &LstmParams<TensorId>,
) -> Result<BilstmOut> {
    let steps = tape.shape(x)[0];
    if steps == 0 {
        return Err(CoreError::contract("bilstm: empty sequence".to_string()));
    }
    let h_f = tape.shape(fwd.b_i)[0];
    let h_b = tape.shape(bwd.b_i)[0];
    if h_f != h_b {
        return Err(CoreError::ShapeMismatch {
            op: "bilstm",
            lhs: vec![h_f],
            rhs: vec![h_b],
        });
    }

    let fwd_states = lstm_forward(tape, x, fwd)?;

    // backward scan, collected back into input order
    let hidden = h_b;
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut bwd_states = vec![None; steps];
    for t in (0..steps).rev() {
        let x_t = tape.slice_rows(x, t, 1)?;
        let (nh, nc) = lstm_step(tape, x_t, h, c, bwd)?;
        h = nh;
        c = nc;
        bwd_states[t] = Some(h);
    }

    let mut rows = Vec::with_capacity(steps);
    for t in 0..steps {
        let spliced = tape.concat_last(fwd_states[t], bwd_states[t].unwrap())?;
        rows.push(spliced);
    }
    let sequence = tape.stack_rows(&rows)?;
    // forward finishes at t = T−1; backward finishes at t = 0
    let final_states = tape.concat_last(fwd_states[steps - 1], bwd_states[0].unwrap())?;
    Ok(BilstmOut { sequence, final_states })
}

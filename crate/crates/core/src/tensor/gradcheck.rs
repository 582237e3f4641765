//! Central-difference gradient verification.

use super::{Mode, Tape, Tensor, TensorId};
use crate::{CoreError, Result};

/// Compare analytic gradients of a scalar objective against central
/// differences, returning the worst relative error over every parameter
/// entry:
///
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`
///
/// `f` must rebuild the same graph on every call; two evaluations at the
/// same point are compared bitwise and any disagreement is an oracle error.
/// Tapes run in eval mode, so dropout never participates.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(CoreError::contract(format!(
            "grad_check: eps {eps} outside (0, 1e-3]"
        )));
    }

    let base = eval_scalar(&f, params)?;
    let again = eval_scalar(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(CoreError::Oracle(format!(
            "objective is not deterministic: {base} vs {again} at the same point"
        )));
    }

    // analytic gradients
    let mut tape = Tape::new(Mode::Eval);
    let ids: Vec<TensorId> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &ids)?;
    if tape.tensor(loss).numel() != 1 {
        return Err(CoreError::contract(format!(
            "grad_check: objective must be scalar, got shape {:?}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("param grad populated").to_vec())
        .collect();

    // central differences, one entry at a time
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err = 0.0f64;
    for pi in 0..work.len() {
        for j in 0..work[pi].numel() {
            let orig = work[pi].values()[j];
            work[pi].values_mut()[j] = orig + eps;
            let plus = eval_scalar(&f, &work)?;
            work[pi].values_mut()[j] = orig - eps;
            let minus = eval_scalar(&f, &work)?;
            work[pi].values_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][j];
            let err = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new(Mode::Eval);
    let ids: Vec<TensorId> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &ids)?;
    if tape.tensor(loss).numel() != 1 {
        return Err(CoreError::contract(format!(
            "grad_check: objective must be scalar, got shape {:?}",
            tape.shape(loss)
        )));
    }
    Ok(tape.values(loss)[0])
}

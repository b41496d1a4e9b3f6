//! Training objectives: SI-SDR loss, fixed-stream dual extraction loss,
//! AAD binary cross-entropy, the joint fine-tune combination, and the
//! permutation-invariant baseline loss.
//!
//! Each loss exists twice: a plain `f64` function (the contract the tests
//! pin down) and a tape variant used inside the training graph. The tape
//! variant smooths the degenerate branches with the shared `EPS` so it stays
//! differentiable; away from degenerate points the two agree to well below
//! test tolerances.

use crate::error::Result;
use crate::signals::{si_sdr_slice, CAP_DB, EPS};
use crate::nn::tape::{Tape, Var};

/// Clamp bound for predicted probabilities in the BCE.
pub const PROB_CLAMP: f64 = 1e-7;

/// Negative SI-SDR (dB); same guards as `signals::si_sdr`.
pub fn si_sdr_loss(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    Ok(-si_sdr_slice(reference, estimate)?)
}

/// Fixed-stream dual extraction loss: mean of the two per-stream SI-SDR
/// losses, target on stream 0 and interferer on stream 1, never permuted.
pub fn se_loss(
    target: &[f64],
    interferer: &[f64],
    s_hat: &[f64],
    b_hat: &[f64],
) -> Result<f64> {
    Ok(0.5 * (si_sdr_loss(target, s_hat)? + si_sdr_loss(interferer, b_hat)?))
}

/// Binary cross-entropy with the prediction clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn aad_loss(y: u8, y_hat: f64) -> f64 {
    debug_assert!(y <= 1);
    let p = y_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Joint fine-tune loss value with its breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub se: f64,
    pub aad: f64,
    pub alpha: f64,
}

/// `se + alpha * aad`, keeping the components for logging.
pub fn finetune_loss(se: f64, aad: f64, alpha: f64) -> LossValue {
    LossValue {
        value: se + alpha * aad,
        se,
        aad,
        alpha,
    }
}

/// Output-to-target pairing chosen by the PIT loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Permutation {
    Identity,
    Swapped,
}

/// Permutation-invariant loss: minimum over the two pairings of the mean
/// per-stream SI-SDR loss, with the argmin pairing.
pub fn pit_loss(
    target: &[f64],
    interferer: &[f64],
    out0: &[f64],
    out1: &[f64],
) -> Result<(f64, Permutation)> {
    let identity = se_loss(target, interferer, out0, out1)?;
    let swapped = se_loss(target, interferer, out1, out0)?;
    if identity <= swapped {
        Ok((identity, Permutation::Identity))
    } else {
        Ok((swapped, Permutation::Swapped))
    }
}

// ---- tape variants ----

/// SI-SDR loss of a waveform estimate (`T x 1` var) against a constant
/// reference; EPS-smoothed and capped so the value stays finite and the
/// gradient defined everywhere.
pub fn si_sdr_loss_t(tape: &Tape, reference: &[f64], estimate: Var) -> Var {
    debug_assert_eq!(estimate.cols(), 1);
    debug_assert_eq!(estimate.rows(), reference.len());
    let ref_col = ndarray::Array2::from_shape_vec((reference.len(), 1), reference.to_vec())
        .expect("reference column");
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();

    let dot = tape.sum_all(tape.mul_const(estimate, &ref_col));
    let alpha = tape.scale(dot, 1.0 / ref_energy);
    let proj = tape.broadcast_mul_scalar(alpha, &ref_col);
    let err = tape.sub(estimate, proj);
    let err_energy = tape.sum_all(tape.mul(err, err));
    let proj_energy = tape.scale(tape.mul(alpha, alpha), ref_energy);
    let ratio = tape.div(
        tape.add_scalar(proj_energy, EPS),
        tape.add_scalar(err_energy, EPS),
    );
    let db = tape.scale(tape.ln(ratio), 10.0 / std::f64::consts::LN_10);
    tape.neg(tape.clamp(db, -CAP_DB, CAP_DB))
}

/// Tape version of the fixed-stream extraction loss.
pub fn se_loss_t(
    tape: &Tape,
    target: &[f64],
    interferer: &[f64],
    s_hat: Var,
    b_hat: Var,
) -> Var {
    let l0 = si_sdr_loss_t(tape, target, s_hat);
    let l1 = si_sdr_loss_t(tape, interferer, b_hat);
    tape.scale(tape.add(l0, l1), 0.5)
}

/// Tape BCE against a constant label.
pub fn aad_loss_t(tape: &Tape, y: u8, y_hat: Var) -> Var {
    debug_assert!(y <= 1);
    let p = tape.clamp(y_hat, PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        tape.neg(tape.ln(p))
    } else {
        tape.neg(tape.ln(tape.add_scalar(tape.neg(p), 1.0)))
    }
}

/// Tape PIT loss: both pairings are evaluated and the smaller one (by value)
/// is returned for backward, together with the chosen permutation.
pub fn pit_loss_t(
    tape: &Tape,
    target: &[f64],
    interferer: &[f64],
    out0: Var,
    out1: Var,
) -> (Var, Permutation) {
    let identity = se_loss_t(tape, target, interferer, out0, out1);
    let swapped = se_loss_t(tape, target, interferer, out1, out0);
    if tape.scalar(identity) <= tape.scalar(swapped) {
        (identity, Permutation::Identity)
    } else {
        (swapped, Permutation::Swapped)
    }
}

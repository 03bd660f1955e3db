//! Label-smoothed NLL, token-level KL distillation and their λ-mixture.
//!
//! Every loss sums over target positions. The `*_on` variants build the loss
//! on a tape for training; the plain variants evaluate it on fixed tensors.

use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const TEACHER_ROW_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kd: f64,
    #[serde(rename = "final")]
    pub final_loss: f64,
    pub token_count: usize,
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(
            "lambda",
            format!("{lambda} is outside [0, 1]"),
        ));
    }
    Ok(())
}

pub fn check_smoothing(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config(
            "label_smoothing",
            format!("{eps} is outside [0, 1)"),
        ));
    }
    Ok(())
}

/// Rows `(1 - ε)·onehot(gold_t) + ε/V`.
pub fn smoothed_targets(gold: &[TokenId], vocab_size: usize, eps: f64) -> Result<Tensor> {
    check_smoothing(eps)?;
    let off = eps / vocab_size as f64;
    let mut values = vec![off; gold.len() * vocab_size];
    for (t, &g) in gold.iter().enumerate() {
        if g as usize >= vocab_size {
            return Err(Error::TokenOutOfRange { id: g, vocab_size });
        }
        values[t * vocab_size + g as usize] = 1.0 - eps + off;
    }
    Tensor::new(vec![gold.len(), vocab_size], values)
}

fn check_rows(log_probs: &[usize], rows: usize, what: &str) -> Result<usize> {
    match log_probs {
        [t, v] if *t == rows => Ok(*v),
        s => Err(Error::shape(
            "loss",
            format!("{what} of shape {s:?} does not have {rows} rows"),
        )),
    }
}

/// `-Σ_t Σ_v q_t(v) log p_t(v)` with label-smoothed targets `q_t`.
pub fn nll_loss_on(tape: &mut Tape, log_probs: Var, gold: &[TokenId], eps: f64) -> Result<Var> {
    let vocab = check_rows(tape.shape(log_probs), gold.len(), "log-probabilities")?;
    let q = tape.constant(smoothed_targets(gold, vocab, eps)?);
    let weighted = tape.mul(log_probs, q)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0)
}

/// `Σ_t KL(teacher_t ‖ student_t)`. The teacher enters as a constant.
pub fn kd_loss_on(tape: &mut Tape, teacher_probs: &Tensor, student_log_probs: Var) -> Result<Var> {
    let vocab = check_rows(
        tape.shape(student_log_probs),
        teacher_probs.rows(),
        "student log-probabilities",
    )?;
    if teacher_probs.cols() != vocab {
        return Err(Error::shape(
            "kd_loss",
            "teacher and student vocabularies differ",
        ));
    }
    let mut entropy_term = 0.0;
    for r in 0..teacher_probs.rows() {
        let row = teacher_probs.row(r);
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > TEACHER_ROW_TOLERANCE || row.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidInput(format!(
                "teacher row {r} is not a distribution (sums to {total})"
            )));
        }
        entropy_term += row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>();
    }
    let p = tape.constant(teacher_probs.clone());
    let cross = tape.mul(student_log_probs, p)?;
    let cross = tape.sum(cross)?;
    let neg = tape.scale(cross, -1.0)?;
    tape.add_scalar(neg, entropy_term)
}

/// `(1 - λ)·nll + λ·kd`.
pub fn final_loss_on(tape: &mut Tape, nll: Var, kd: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = tape.scale(nll, 1.0 - lambda)?;
    let b = tape.scale(kd, lambda)?;
    tape.add(a, b)
}

pub fn nll_loss(log_probs: &Tensor, gold: &[TokenId], eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let lp = tape.constant(log_probs.clone());
    let loss = nll_loss_on(&mut tape, lp, gold, eps)?;
    tape.value(loss).item()
}

pub fn kd_loss(teacher_probs: &Tensor, student_log_probs: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let lp = tape.constant(student_log_probs.clone());
    let loss = kd_loss_on(&mut tape, teacher_probs, lp)?;
    tape.value(loss).item()
}

pub fn final_loss(nll: f64, kd: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((1.0 - lambda) * nll + lambda * kd)
}

//! Task heads: counting regression, open-ended classification, and pairwise
//! hinge scoring for multiple choice.

use super::binder::ParamBinder;
use crate::data::{Answer, TaskKind};
use crate::error::{MasnError, Result};
use crate::tensor::{Tape, TensorId};

#[derive(Clone, Copy, Debug)]
pub struct LinearHead {
    pub w: TensorId,
    pub b: TensorId,
}

impl LinearHead {
    pub fn bind(tape: &mut Tape, binder: &mut ParamBinder, name: &str) -> Result<Self> {
        Ok(LinearHead {
            w: binder.bind(tape, &format!("head.{name}.w"))?,
            b: binder.bind(tape, &format!("head.{name}.b"))?,
        })
    }
}

/// Raw scores produced by a head before prediction.
#[derive(Clone, Debug, PartialEq)]
pub enum RawScores {
    /// Count regression output.
    Scalar(f64),
    /// Open-ended class logits.
    Logits(Vec<f64>),
    /// Per-candidate scores.
    Choices(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutput {
    pub task: TaskKind,
    pub raw: RawScores,
    pub prediction: Answer,
    pub loss: f64,
}

/// Linear regression score for counting: w^T f + b as a scalar node.
pub fn count_score(tape: &mut Tape, f_row: TensorId, head: &LinearHead) -> Result<TensorId> {
    let s = tape.matmul(f_row, head.w)?;
    let s = tape.add_row(s, head.b)?;
    tape.reshape(s, vec![1])
}

/// Squared-error loss node against an integer target.
pub fn count_loss(tape: &mut Tape, raw: TensorId, target: i64) -> Result<TensorId> {
    let diff = tape.add_const(raw, -(target as f64))?;
    tape.mul(diff, diff)
}

/// Round half away from zero, then clamp into the configured answer range.
pub fn count_prediction(raw: f64, range: (i64, i64)) -> i64 {
    (raw.round() as i64).clamp(range.0, range.1)
}

/// Class logits for the open-ended head.
pub fn open_ended_logits(tape: &mut Tape, f_row: TensorId, head: &LinearHead) -> Result<TensorId> {
    let logits = tape.matmul(f_row, head.w)?;
    let logits = tape.add_row(logits, head.b)?;
    let n = tape.value(logits).numel();
    tape.reshape(logits, vec![n])
}

/// Candidate score node for one multiple-choice forward pass.
pub fn choice_score(tape: &mut Tape, f_row: TensorId, head: &LinearHead) -> Result<TensorId> {
    count_score(tape, f_row, head)
}

/// Pairwise hinge over (correct, each incorrect): sum of
/// max(0, 1 + s_n - s_p).
pub fn hinge_loss(tape: &mut Tape, scores: &[TensorId], correct: usize) -> Result<TensorId> {
    if scores.len() < 2 {
        return Err(MasnError::InvalidArgument("hinge needs at least two candidates".into()));
    }
    if correct >= scores.len() {
        return Err(MasnError::InvalidArgument("correct index out of range".into()));
    }
    let s_p = scores[correct];
    let mut total: Option<TensorId> = None;
    for (i, &s_n) in scores.iter().enumerate() {
        if i == correct {
            continue;
        }
        let margin = tape.sub(s_n, s_p)?;
        let shifted = tape.add_const(margin, 1.0)?;
        let term = tape.relu(shifted)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one incorrect candidate"))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

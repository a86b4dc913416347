//! Scalar loss primitives over probability vectors.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax of `logits / tau`, computed with max-subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, tau, &mut out);
    Ok(out)
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!("temperature must be positive, got {tau}")))
    }
}

pub(crate) fn softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise tempered softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_into(logits.row(r), tau, out.row_mut(r));
    }
    Ok(out)
}

/// `-ln(probs[label])`, floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::Param(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Mean cross-entropy over the rows of a probability matrix.
pub fn cross_entropy_mean(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        total += cross_entropy(probs.row(r), y)?;
    }
    Ok(total / labels.len() as f64)
}

/// `Σ_c teacher_c · ln(teacher_c / student_c)`.
///
/// Both arguments are floored at [`PROB_FLOOR`] inside the logarithm; a
/// teacher entry of exactly zero contributes nothing.
pub fn kl_divergence(teacher: &[f64], student: &[f64]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "kl between vectors of length {} and {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(kl_unchecked(teacher, student))
}

pub(crate) fn kl_unchecked(teacher: &[f64], student: &[f64]) -> f64 {
    let kl: f64 = teacher
        .iter()
        .zip(student)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &s)| t * (t.max(PROB_FLOOR).ln() - s.max(PROB_FLOOR).ln()))
        .sum();
    // rounding can leave a tiny negative residue when teacher == student
    kl.max(0.0)
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(q: &[f64]) -> f64 {
    q.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

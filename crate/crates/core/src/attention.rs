//! Single-head scaled dot-product attention over a cache view.

use alloc::vec::Vec;

use crate::matrix::{dot, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub output: Vec<f64>,
    /// Post-softmax weight of every cache row.
    pub probs: Vec<f64>,
}

/// `q·K[i] / sqrt(d)` for every key row.
pub fn scaled_scores(q: &[f64], keys: &Matrix) -> Result<Vec<f64>> {
    if keys.rows() == 0 {
        return Err(Error::Empty("key matrix"));
    }
    if q.len() != keys.cols() {
        return Err(Error::DimensionMismatch { expected: keys.cols(), found: q.len() });
    }
    let inv_sqrt_d = 1.0 / libm::sqrt(q.len() as f64);
    Ok(keys.iter_rows().map(|k| dot(q, k) * inv_sqrt_d).collect())
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| libm::exp(x - max)).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

fn weighted_sum(probs: &[f64], values: &Matrix, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = alloc::vec![0.0; values.cols()];
    for (i, (&p, v)) in probs.iter().zip(values.iter_rows()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += p * x;
        }
    }
    out
}

fn check_kv(q: &[f64], keys: &Matrix, values: &Matrix) -> Result<()> {
    if keys.rows() != values.rows() {
        return Err(Error::DimensionMismatch { expected: keys.rows(), found: values.rows() });
    }
    if keys.cols() != q.len() {
        return Err(Error::DimensionMismatch { expected: q.len(), found: keys.cols() });
    }
    Ok(())
}

pub fn attend(q: &[f64], keys: &Matrix, values: &Matrix) -> Result<AttentionResult> {
    check_kv(q, keys, values)?;
    let probs = softmax(&scaled_scores(q, keys)?)?;
    let output = weighted_sum(&probs, values, None);
    Ok(AttentionResult { output, probs })
}

/// Attention restricted to rows whose mask entry is `true`. Masked rows get a
/// weight of exactly zero, and the result matches [`attend`] over the visible
/// rows alone.
pub fn masked_attend(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    visible: &[bool],
) -> Result<AttentionResult> {
    check_kv(q, keys, values)?;
    if visible.len() != keys.rows() {
        return Err(Error::DimensionMismatch { expected: keys.rows(), found: visible.len() });
    }
    if !visible.iter().any(|&v| v) {
        return Err(Error::AllMasked);
    }
    let scores = scaled_scores(q, keys)?;
    let visible_scores: Vec<f64> =
        scores.iter().zip(visible).filter(|(_, &v)| v).map(|(&s, _)| s).collect();
    let visible_probs = softmax(&visible_scores)?;
    let mut probs = alloc::vec![0.0; keys.rows()];
    let mut it = visible_probs.into_iter();
    for (p, &v) in probs.iter_mut().zip(visible) {
        if v {
            *p = it.next().expect("one probability per visible row");
        }
    }
    let output = weighted_sum(&probs, values, Some(visible));
    Ok(AttentionResult { output, probs })
}

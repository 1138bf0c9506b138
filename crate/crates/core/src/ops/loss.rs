//! Softmax cross-entropy over `(N,K)` logits, stabilized by max-subtraction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

/// Row-wise softmax probabilities.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(logits, 2, "softmax logits")?;
    let (n, k) = (logits.dim(0), logits.dim(1));
    let mut probs = Tensor::zeros(&[n, k]);
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let prow = &mut probs.data_mut()[ni * k..(ni + 1) * k];
        for (p, e) in prow.iter_mut().zip(exps.iter()) {
            *p = T::from_f64(e / sum);
        }
    }
    Ok(probs)
}

pub struct SceCache<T: Scalar> {
    probs: Tensor<T>,
    labels: Vec<usize>,
}

/// Mean negative log-probability of the true class.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, SceCache<T>)> {
    expect_rank(logits, 2, "softmax logits")?;
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    for &l in labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }
    let probs = softmax_rows(logits)?;
    let mut loss = 0.0f64;
    for (ni, &l) in labels.iter().enumerate() {
        // Non-finite probabilities must surface in the loss, not be clamped
        // away; the trainer aborts on them.
        loss -= probs.data()[ni * k + l].as_f64().ln();
    }
    loss /= n as f64;
    Ok((T::from_f64(loss), SceCache { probs, labels: labels.to_vec() }))
}

/// `(softmax - one_hot) / N`.
pub fn softmax_cross_entropy_backward<T: Scalar>(cache: &SceCache<T>) -> Tensor<T> {
    let (n, k) = (cache.probs.dim(0), cache.probs.dim(1));
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut grad = cache.probs.clone();
    for (ni, &l) in cache.labels.iter().enumerate() {
        let v = grad.data()[ni * k + l];
        grad.data_mut()[ni * k + l] = v - T::one();
    }
    for v in grad.data_mut() {
        *v = *v * inv_n;
    }
    grad
}

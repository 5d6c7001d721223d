//! Numerically stable softmax / cross-entropy primitives on logit matrices.

use super::Scalar;
use ndarray::Array2;

/// Row-wise softmax of a `(N, K)` logit matrix.
pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax, computed without forming intermediate exponentials
/// larger than one.
pub fn log_softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let logsum = row
            .fold(T::zero(), |acc, &v| acc + (v - max).exp())
            .ln()
            + max;
        for v in row.iter_mut() {
            *v -= logsum;
        }
    }
    out
}

/// Mean cross-entropy of integer labels against logits, together with the
/// gradient w.r.t. the logits (softmax minus one-hot, divided by batch size).
pub fn cross_entropy_from_logits<T: Scalar>(
    logits: &Array2<T>,
    labels: &[usize],
) -> (T, Array2<T>) {
    let (n, k) = logits.dim();
    assert_eq!(n, labels.len(), "one label per row");
    let log_p = log_softmax_rows(logits);
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < k, "label {y} out of range for {k} classes");
        loss -= log_p[(i, y)];
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    loss *= inv_n;
    let mut grad = log_p.mapv(|lp| lp.exp() * inv_n);
    for (i, &y) in labels.iter().enumerate() {
        grad[(i, y)] -= inv_n;
    }
    (loss, grad)
}

/// Label-smoothed cross-entropy: the target distribution puts `1 - eps + eps/K`
/// on the true class and `eps/K` elsewhere, which caps the optimal logit gap
/// at `ln((1 - eps + eps/K) / (eps/K))` and keeps trained classifiers from
/// drifting into astronomically confident predictions.
pub fn cross_entropy_smoothed<T: Scalar>(
    logits: &Array2<T>,
    labels: &[usize],
    eps: T,
) -> (T, Array2<T>) {
    let (n, k) = logits.dim();
    assert_eq!(n, labels.len(), "one label per row");
    assert!(eps >= T::zero() && eps < T::one(), "smoothing in [0,1)");
    let log_p = log_softmax_rows(logits);
    let off = eps / T::from_f64(k as f64);
    let on = T::one() - eps + off;
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < k, "label {y} out of range for {k} classes");
        for j in 0..k {
            let q = if j == y { on } else { off };
            loss -= q * log_p[(i, j)];
        }
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    loss *= inv_n;
    let mut grad = log_p.mapv(|lp| (lp.exp() - off) * inv_n);
    for (i, &y) in labels.iter().enumerate() {
        grad[(i, y)] -= (on - off) * inv_n;
    }
    (loss, grad)
}

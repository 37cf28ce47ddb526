//! Loss functions returning both the value and `dL/dinput`.

use crate::{Mat, Real};

/// Numerically stable softmax of one row.
pub fn softmax_row<S: Real>(logits: &[S], out: &mut [S]) {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (*l - max).exp();
        sum += *o;
    }
    let inv = S::one() / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

pub fn softmax_rows<S: Real>(logits: &Mat<S>) -> Mat<S> {
    let mut out = Mat::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_row(logits.row(r), out.row_mut(r));
    }
    out
}

/// Cross-entropy summed over rows and multiplied by `weight` (pass `1/N`
/// for a mean). The gradient carries the same weight.
pub fn cross_entropy<S: Real>(logits: &Mat<S>, targets: &[usize], weight: S) -> (S, Mat<S>) {
    assert_eq!(logits.rows(), targets.len(), "one target per row");
    let mut grad = softmax_rows(logits);
    let mut loss = S::zero();
    for (r, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(r);
        // log p_t from the normalised probabilities, clamped away from zero
        let p = row[t].max(S::min_positive_value());
        loss += -p.ln();
        row[t] -= S::one();
        row.iter_mut().for_each(|g| *g *= weight);
    }
    (loss * weight, grad)
}

/// Exact cross-entropy value using log-sum-exp (no gradient).
pub fn cross_entropy_value<S: Real>(logits: &[S], target: usize) -> S {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = logits.iter().map(|l| (*l - max).exp()).sum::<S>().ln() + max;
    lse - logits[target]
}

/// Squared error summed over all entries and multiplied by `weight`.
pub fn squared_error<S: Real>(pred: &Mat<S>, target: &Mat<S>, weight: S) -> (S, Mat<S>) {
    assert_eq!(pred.shape(), target.shape(), "prediction/target shape mismatch");
    let mut grad = Mat::zeros(pred.rows(), pred.cols());
    let mut loss = S::zero();
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = *p - *t;
        loss += d * d;
        *g = S::of(2.0) * d * weight;
    }
    (loss * weight, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Mat::<f64>::zeros(3, 64);
        let (loss, _) = cross_entropy(&logits, &[0, 5, 63], 1.0 / 3.0);
        assert!((loss - (64f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp() {
        let logits = Mat::<f64>::from_vec(1, 4, vec![0.3, -1.2, 2.5, 0.0]);
        let (loss, _) = cross_entropy(&logits, &[1], 1.0);
        assert!((loss - cross_entropy_value(logits.row(0), 1)).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Mat::<f64>::from_fn(2, 5, |r, c| (r + 2 * c) as f64 * 0.3);
        let (_, g) = cross_entropy(&logits, &[2, 4], 0.5);
        for r in 0..2 {
            assert!(g.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
    }
}

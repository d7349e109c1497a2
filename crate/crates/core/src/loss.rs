//! Row-wise losses on `n×classes` logits. Every function returns the batch
//! mean and its gradient with respect to the logits.

use crate::tensor::{Scalar, Tensor};

/// Numerically stable log-softmax of one row at temperature `t`.
pub fn log_softmax<T: Scalar>(row: &[T], t: f64) -> Vec<T> {
    let inv = 1.0 / t;
    let m = row.iter().map(|v| v.re() * inv).fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<T> = row.iter().map(|&v| v.scale(inv) - T::from_f64(m)).collect();
    let lse = shifted.iter().map(|&v| v.exp()).sum::<T>().ln();
    shifted.into_iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64], t: f64) -> Vec<f64> {
    log_softmax(row, t).into_iter().map(f64::exp).collect()
}

pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let (n, k) = (logits.n(), logits.c());
    assert_eq!(n, labels.len(), "one label per row");
    let inv_n = 1.0 / n as f64;
    let mut total = T::zero();
    let mut grad = Tensor::zeros(logits.shape());
    for (s, &y) in labels.iter().enumerate() {
        let row = &logits.data()[s * k..(s + 1) * k];
        let ls = log_softmax(row, 1.0);
        total -= ls[y];
        let g = &mut grad.data_mut()[s * k..(s + 1) * k];
        for c in 0..k {
            let p = ls[c].exp();
            g[c] = (if c == y { p - T::one() } else { p }).scale(inv_n);
        }
    }
    (total.scale(inv_n), grad)
}

/// Per-row cross entropy without reduction.
pub fn cross_entropy_rows(logits: &[f64], classes: usize, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(s, &y)| -log_softmax(&logits[s * classes..(s + 1) * classes], 1.0)[y])
        .collect()
}

/// Mean `KL(softmax(targets/t) ‖ softmax(logits/t))` over rows.
pub fn kl_divergence(targets: &[f64], logits: &Tensor, t: f64) -> (f64, Tensor) {
    let (n, k) = (logits.n(), logits.c());
    assert_eq!(targets.len(), n * k, "one target row per logit row");
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for s in 0..n {
        let lq = log_softmax(&targets[s * k..(s + 1) * k], t);
        let lp = log_softmax(&logits.data()[s * k..(s + 1) * k], t);
        let g = &mut grad.data_mut()[s * k..(s + 1) * k];
        for c in 0..k {
            let q = lq[c].exp();
            if q > 0.0 {
                total += q * (lq[c] - lp[c]);
            }
            g[c] = (lp[c].exp() - q) * inv_n / t;
        }
    }
    (total * inv_n, grad)
}

pub fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.c();
    labels
        .iter()
        .enumerate()
        .filter(|(s, &y)| {
            let row = &logits.data()[s * k..(s + 1) * k];
            let best = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y
        })
        .count()
}

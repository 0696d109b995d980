//! Multinomial negative log-likelihood on logit matrices.

use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Mean over rows of `-(l_y - logsumexp(l))` and its gradient with respect
/// to the logits (already divided by the number of rows).
pub fn nll_and_grad(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    debug_assert_eq!(n, labels.len());
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[labels[i]];
        let mut g = grad.row_mut(i);
        for (k, &v) in row.iter().enumerate() {
            g[k] = (v - lse).exp() * inv_n;
        }
        g[labels[i]] -= inv_n;
    }
    (loss * inv_n, grad)
}

pub fn nll(logits: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let mut loss = 0.0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        loss += max + sum.ln() - row[labels[i]];
    }
    loss / logits.nrows() as f64
}

pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise argmax, ties resolved toward the lowest index.
pub fn argmax_rows(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// `X W^T + b` for a batch of rows.
pub fn affine(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    out += b;
    out
}

//! Stateless numeric building blocks.

use ndarray::{Array2, ArrayView1, ArrayViewMut1, Axis, Zip};

/// Floor applied to the target probability before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_inplace(ArrayViewMut1::from(out.as_mut_slice()));
    out
}

pub(crate) fn softmax_inplace(mut row: ArrayViewMut1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    row.mapv_inplace(|v| (v - max).exp());
    let sum = row.sum();
    row.mapv_inplace(|v| v / sum);
}

/// Row-wise softmax of a batch of logits.
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for row in out.axis_iter_mut(Axis(0)) {
        softmax_inplace(row);
    }
    out
}

/// `-ln(probs[target])` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], target: usize) -> f64 {
    -probs[target].max(PROB_FLOOR).ln()
}

pub(crate) fn cross_entropy_row(probs: ArrayView1<f64>, target: usize) -> f64 {
    -probs[target].max(PROB_FLOOR).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Infer,
}

/// Inverted dropout: dropped units become 0, kept units are scaled by
/// `1 / (1 - rate)`. `keep` holds the drawn mask and is ignored at inference.
pub fn dropout_forward(x: &[f64], rate: f64, mode: DropoutMode, keep: &[bool]) -> Vec<f64> {
    if mode == DropoutMode::Infer || rate == 0.0 {
        return x.to_vec();
    }
    let scale = 1.0 / (1.0 - rate);
    x.iter()
        .zip(keep)
        .map(|(&v, &k)| if k { v * scale } else { 0.0 })
        .collect()
}

/// One RMSprop update:
/// `v <- rho * v + (1 - rho) * g^2`, `p <- p - lr * g / (sqrt(v) + eps)`.
pub fn rmsprop_step(param: &mut [f64], grad: &[f64], accum: &mut [f64], lr: f64, rho: f64, eps: f64) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), accum.len());
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(accum.iter_mut()) {
        *v = rho * *v + (1.0 - rho) * g * g;
        *p -= lr * g / (v.sqrt() + eps);
    }
}

pub(crate) fn relu_inplace(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the post-activation value is not positive.
pub(crate) fn relu_backward(grad: &mut Array2<f64>, activated: &Array2<f64>) {
    Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

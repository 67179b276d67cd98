//! Dense and convolutional layers with hand-written backward passes.
//!
//! All layers work on batches: dense inputs are `rows x in`, image tensors
//! are `batch x height x width x channels`.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{relu_backward, relu_inplace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// Fully connected layer, `y = act(x W^T + b)`, weights stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub l2_lambda: f64,
}

pub(crate) struct DenseGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation, l2_lambda: f64) -> Self {
        DenseLayer {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
            activation,
            l2_lambda,
        }
    }

    /// He-uniform weights for ReLU layers, Glorot-uniform otherwise; zero bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, activation: Activation, l2_lambda: f64, rng: &mut R) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / inputs as f64).sqrt(),
            Activation::None => (6.0 / (inputs + outputs) as f64).sqrt(),
        };
        let weights = Array2::from_shape_simple_fn((outputs, inputs), || rng.random_range(-limit..limit));
        DenseLayer {
            weights,
            bias: Array1::zeros(outputs),
            activation,
            l2_lambda,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights.t());
        z += &self.bias;
        if self.activation == Activation::Relu {
            relu_inplace(&mut z);
        }
        z
    }

    /// `grad_out` is the gradient w.r.t. this layer's output (post
    /// activation); it is consumed. Returns the parameter gradients and,
    /// when asked for, the gradient w.r.t. the input.
    pub(crate) fn backward(
        &self,
        input: &Array2<f64>,
        output: &Array2<f64>,
        mut grad_out: Array2<f64>,
        need_input_grad: bool,
    ) -> (DenseGrads, Option<Array2<f64>>) {
        if self.activation == Activation::Relu {
            relu_backward(&mut grad_out, output);
        }
        let weights = grad_out.t().dot(input);
        let bias = grad_out.sum_axis(Axis(0));
        let grad_in = need_input_grad.then(|| grad_out.dot(&self.weights));
        (DenseGrads { weights, bias }, grad_in)
    }

    pub fn l2_penalty(&self) -> f64 {
        if self.l2_lambda == 0.0 {
            return 0.0;
        }
        self.l2_lambda * self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// 3x3 convolution, stride 1, zero padding 1, followed by ReLU.
/// Weights are `out x (3 * 3 * in)` with kernel index `(ky * 3 + kx) * in + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

pub(crate) struct ConvCache {
    /// im2col matrix of the input; absent when no gradient is needed.
    pub cols: Option<Array2<f64>>,
    /// Post-ReLU output, `(batch * h * w) x out`.
    pub output: Array2<f64>,
    pub in_dims: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn init<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let fan_in = 9 * in_channels;
        let limit = (6.0 / fan_in as f64).sqrt();
        Conv2d {
            weights: Array2::from_shape_simple_fn((out_channels, fan_in), || rng.random_range(-limit..limit)),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weights.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weights.nrows()
    }

    pub(crate) fn forward(&self, x: &Array4<f64>, keep_cols: bool) -> (Array4<f64>, ConvCache) {
        let (n, h, w, _) = x.dim();
        let cols = im2col(x);
        let mut z = cols.dot(&self.weights.t());
        z += &self.bias;
        relu_inplace(&mut z);
        let out = z
            .clone()
            .into_shape_with_order((n, h, w, self.out_channels()))
            .expect("conv output is contiguous");
        let cache = ConvCache {
            cols: keep_cols.then_some(cols),
            output: z,
            in_dims: x.dim(),
        };
        (out, cache)
    }

    pub(crate) fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &Array4<f64>,
        need_input_grad: bool,
    ) -> (DenseGrads, Option<Array4<f64>>) {
        let cols = cache.cols.as_ref().expect("conv cache kept for backward");
        let rows = cache.output.nrows();
        let mut g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, self.out_channels()))
            .expect("conv grad reshape");
        relu_backward(&mut g, &cache.output);
        let weights = g.t().dot(cols);
        let bias = g.sum_axis(Axis(0));
        let grad_in = need_input_grad.then(|| col2im(&g.dot(&self.weights), cache.in_dims));
        (DenseGrads { weights, bias }, grad_in)
    }
}

fn im2col(x: &Array4<f64>) -> Array2<f64> {
    let (n, h, w, c) = x.dim();
    let mut cols = Array2::zeros((n * h * w, 9 * c));
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = (b * h + y) * w + xx;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            cols[[row, base + ch]] = x[[b, sy as usize, sx as usize, ch]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, dims: (usize, usize, usize, usize)) -> Array4<f64> {
    let (n, h, w, c) = dims;
    let mut out = Array4::zeros(dims);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = (b * h + y) * w + xx;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            out[[b, sy as usize, sx as usize, ch]] += dcols[[row, base + ch]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled tensor and the flat input offset of each maximum.
pub(crate) fn max_pool(x: &Array4<f64>) -> (Array4<f64>, Vec<usize>) {
    let (n, h, w, c) = x.dim();
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Array4::zeros((n, ph, pw, c));
    let mut argmax = Vec::with_capacity(n * ph * pw * c);
    for b in 0..n {
        for y in 0..ph {
            for xx in 0..pw {
                for ch in 0..c {
                    let mut best = (2 * y, 2 * xx);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = (2 * y + dy, 2 * xx + dx);
                        if x[[b, cand.0, cand.1, ch]] > x[[b, best.0, best.1, ch]] {
                            best = cand;
                        }
                    }
                    out[[b, y, xx, ch]] = x[[b, best.0, best.1, ch]];
                    argmax.push(((b * h + best.0) * w + best.1) * c + ch);
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool_backward(
    grad_out: &Array4<f64>,
    argmax: &[usize],
    in_dims: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut grad_in = Array4::zeros(in_dims);
    let flat = grad_in.as_slice_mut().expect("fresh array is contiguous");
    for (g, &idx) in grad_out.iter().zip(argmax) {
        flat[idx] += g;
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dense_forward_matches_hand_arithmetic() {
        let layer = DenseLayer {
            weights: array![[1.0, -1.0], [0.5, 2.0]],
            bias: array![0.0, -10.0],
            activation: Activation::Relu,
            l2_lambda: 0.5,
        };
        let y = layer.forward(&array![[3.0, 1.0]]);
        assert_eq!(y, array![[2.0, 0.0]]);
        // 0.5 * (1 + 1 + 0.25 + 4)
        assert!((layer.l2_penalty() - 3.125).abs() < 1e-15);
    }

    #[test]
    fn l2_single_row_example() {
        let layer = DenseLayer {
            weights: array![[1.0, 2.0]],
            bias: array![100.0],
            activation: Activation::None,
            l2_lambda: 0.5,
        };
        assert_eq!(layer.l2_penalty(), 2.5);
    }

    #[test]
    fn im2col_roundtrip_counts_overlaps() {
        // col2im of an all-ones column matrix counts how many 3x3 windows
        // cover each pixel: 4 in corners, 6 on edges, 9 inside.
        let x = Array4::<f64>::zeros((1, 4, 4, 1));
        let ones = Array2::<f64>::ones(im2col(&x).dim());
        let counts = col2im(&ones, (1, 4, 4, 1));
        assert_eq!(counts[[0, 0, 0, 0]], 4.0);
        assert_eq!(counts[[0, 0, 1, 0]], 6.0);
        assert_eq!(counts[[0, 1, 1, 0]], 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut conv = Conv2d {
            weights: Array2::zeros((1, 9)),
            bias: array![0.0],
        };
        conv.weights[[0, 4]] = 1.0; // centre tap
        let x = Array4::from_shape_fn((1, 3, 3, 1), |(_, y, x, _)| (y * 3 + x) as f64);
        let (out, _) = conv.forward(&x, false);
        assert_eq!(out, x);
    }

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let x = Array4::from_shape_vec((1, 2, 2, 1), vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (out, idx) = max_pool(&x);
        assert_eq!(out[[0, 0, 0, 0]], 5.0);
        let g = Array4::from_elem((1, 1, 1, 1), 7.0);
        let back = max_pool_backward(&g, &idx, x.dim());
        assert_eq!(back.as_slice().unwrap(), &[0.0, 7.0, 0.0, 0.0]);
    }
}

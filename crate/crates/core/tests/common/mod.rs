#![allow(dead_code)]

use gaplab::autodiff::backward;
use gaplab::model::{Layer, ModelSpec, ParamVector};
use gaplab::rng::Rng;
use gaplab::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// One small model per layer type, each under 500 parameters.
pub fn layer_cases() -> Vec<(&'static str, ModelSpec)> {
    use Layer::*;
    let conv = |i, o| Conv3x3 {
        in_channels: i,
        out_channels: o,
    };
    let dense = |i, o| Dense { input: i, output: o };
    vec![
        ("dense", ModelSpec::new(vec![6], vec![dense(6, 4)], 4).unwrap()),
        ("relu", ModelSpec::new(vec![6], vec![dense(6, 8), Relu, dense(8, 3)], 3).unwrap()),
        (
            "conv3x3",
            ModelSpec::new(vec![2, 5, 5], vec![conv(2, 3), Flatten, dense(75, 3)], 3).unwrap(),
        ),
        (
            "maxpool2x2",
            ModelSpec::new(vec![1, 5, 5], vec![conv(1, 2), MaxPool2x2, Flatten, dense(8, 3)], 3).unwrap(),
        ),
        ("flatten", ModelSpec::new(vec![2, 3], vec![Flatten, dense(6, 3)], 3).unwrap()),
    ]
}

pub fn random_params(spec: &ModelSpec, rng: &mut Rng) -> ParamVector {
    let values = (0..spec.n_params()).map(|_| 0.5 * rng.standard_normal()).collect();
    ParamVector::from_values(spec, values).unwrap()
}

pub fn random_batch(spec: &ModelSpec, rows: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let mut shape = vec![rows];
    shape.extend_from_slice(spec.input_shape());
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.standard_normal()).collect();
    let labels = (0..rows).map(|_| rng.below(spec.n_classes() as u64) as usize).collect();
    (Tensor::new(shape, data).unwrap(), labels)
}

/// Largest relative error between the analytic gradient and central differences.
pub fn max_fd_error(spec: &ModelSpec, seed: u64, h: f64) -> f64 {
    let mut rng = Rng::new(seed);
    let params = random_params(spec, &mut rng);
    let rows = 1 + rng.below(8) as usize;
    let (batch, labels) = random_batch(spec, rows, &mut rng);
    let analytic = backward(spec, &params, &batch, &labels).unwrap().grads;
    let loss_at = |p: &ParamVector| backward(spec, p, &batch, &labels).unwrap().loss;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.values_mut()[i] += h;
        let mut minus = params.clone();
        minus.values_mut()[i] -= h;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let a = analytic.values()[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

//! Reverse-mode differentiation over the fixed layer vocabulary.
//!
//! The forward pass records every layer input on a tape; the backward pass
//! walks the tape in reverse, applying each layer's vector-Jacobian product
//! and accumulating parameter gradients into a vector with the same canonical
//! layout as the parameters.

use crate::error::{GapError, Result};
use crate::loss::softmax_cross_entropy;
use crate::model::{Layer, ModelSpec, ParamSlot, ParamVector};
use crate::tensor::Tensor;

/// Output of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub grads: ParamVector,
    pub logits: Tensor,
}

fn check_batch(spec: &ModelSpec, params: &ParamVector, batch: &Tensor) -> Result<()> {
    params.check_bound(spec)?;
    let shape = batch.shape();
    if shape.len() != spec.input_shape().len() + 1 || &shape[1..] != spec.input_shape() {
        return Err(GapError::Shape(format!(
            "batch shape {shape:?} does not match [B] ++ {:?}",
            spec.input_shape()
        )));
    }
    Ok(())
}

fn layer_forward(spec: &ModelSpec, i: usize, params: &[f64], x: &Tensor) -> Tensor {
    let b = x.rows();
    let out_shape = spec.shape_at(i + 1);
    let mut shape = vec![b];
    shape.extend_from_slice(out_shape);
    match spec.layers()[i] {
        Layer::Dense { input, output } => {
            let slot = spec.slot(i).unwrap();
            let w = &params[slot.weights.clone()];
            let bias = &params[slot.biases.clone()];
            let mut y = Vec::with_capacity(b * output);
            for r in 0..b {
                let xr = x.row(r);
                for o in 0..output {
                    let wr = &w[o * input..(o + 1) * input];
                    y.push(bias[o] + dot(xr, wr));
                }
            }
            Tensor::new(shape, y).unwrap()
        }
        Layer::Relu => {
            let data = x.data().iter().map(|&v| v.max(0.0)).collect();
            Tensor::new(shape, data).unwrap()
        }
        Layer::Conv3x3 {
            in_channels,
            out_channels,
        } => {
            let slot = spec.slot(i).unwrap();
            conv_forward(x, &params[slot.weights.clone()], &params[slot.biases.clone()], in_channels, out_channels, shape)
        }
        Layer::MaxPool2x2 => {
            let (c, h, w) = dims3(spec.shape_at(i));
            let (oh, ow) = (h / 2, w / 2);
            let mut y = Vec::with_capacity(b * c * oh * ow);
            for r in 0..b {
                let xr = x.row(r);
                for ch in 0..c {
                    for py in 0..oh {
                        for px in 0..ow {
                            let src = pool_argmax(xr, ch, h, w, py, px);
                            y.push(xr[src]);
                        }
                    }
                }
            }
            Tensor::new(shape, y).unwrap()
        }
        Layer::Flatten => Tensor::new(shape, x.data().to_vec()).unwrap(),
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    (s[0], s[1], s[2])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flat index (within one sample) of the window maximum; first maximum wins.
fn pool_argmax(xr: &[f64], ch: usize, h: usize, w: usize, py: usize, px: usize) -> usize {
    let base = ch * h * w;
    let mut best = base + (2 * py) * w + 2 * px;
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let idx = base + (2 * py + dy) * w + 2 * px + dx;
        if xr[idx] > xr[best] {
            best = idx;
        }
    }
    best
}

fn conv_forward(
    x: &Tensor,
    weights: &[f64],
    bias: &[f64],
    ic: usize,
    oc: usize,
    shape: Vec<usize>,
) -> Tensor {
    let (h, w) = (shape[2], shape[3]);
    let b = x.rows();
    let plane = h * w;
    let mut y = vec![0.0; b * oc * plane];
    for r in 0..b {
        let xr = x.row(r);
        let yr = &mut y[r * oc * plane..(r + 1) * oc * plane];
        for o in 0..oc {
            let yo = &mut yr[o * plane..(o + 1) * plane];
            yo.fill(bias[o]);
            for c in 0..ic {
                let xc = &xr[c * plane..(c + 1) * plane];
                let k = &weights[(o * ic + c) * 9..(o * ic + c) * 9 + 9];
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            let sy = yy as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += k[ky * 3 + kx] * xc[sy as usize * w + sx as usize];
                            }
                        }
                        yo[yy * w + xx] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(shape, y).unwrap()
}

/// Logits `[B, n_classes]` for a batch of shape `[B] ++ input_shape`.
pub fn forward(spec: &ModelSpec, params: &ParamVector, batch: &Tensor) -> Result<Tensor> {
    check_batch(spec, params, batch)?;
    let p = params.values();
    let mut x = batch.clone();
    for i in 0..spec.layers().len() {
        x = layer_forward(spec, i, p, &x);
    }
    x.check_finite()?;
    Ok(x)
}

/// Mean cross-entropy loss, its gradient in canonical parameter order, and the logits.
pub fn backward(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Tensor,
    labels: &[usize],
) -> Result<Backward> {
    check_batch(spec, params, batch)?;
    let p = params.values();
    let n_layers = spec.layers().len();
    let mut tape: Vec<Tensor> = Vec::with_capacity(n_layers + 1);
    tape.push(batch.clone());
    for i in 0..n_layers {
        let next = layer_forward(spec, i, p, &tape[i]);
        tape.push(next);
    }
    let logits = tape.pop().unwrap();
    logits.check_finite()?;
    let (loss, mut upstream) = softmax_cross_entropy(&logits, labels)?;

    let mut grads = ParamVector::zeros(spec);
    for i in (0..n_layers).rev() {
        let x = &tape[i];
        let need_input_grad = i > 0;
        upstream = layer_backward(spec, i, p, x, &upstream, grads.values_mut(), need_input_grad);
    }
    if !grads.values().iter().all(|g| g.is_finite()) || !loss.is_finite() {
        return Err(GapError::Divergence { iteration: None });
    }
    Ok(Backward {
        loss,
        grads,
        logits,
    })
}

/// Accumulates parameter gradients for layer `i` and returns the gradient with respect to its input.
fn layer_backward(
    spec: &ModelSpec,
    i: usize,
    params: &[f64],
    x: &Tensor,
    gy: &Tensor,
    grads: &mut [f64],
    need_input_grad: bool,
) -> Tensor {
    let b = x.rows();
    match spec.layers()[i] {
        Layer::Dense { input, output } => {
            let ParamSlot { weights, biases, .. } = spec.slot(i).unwrap().clone();
            let w = &params[weights.clone()];
            {
                let (gw, gb) = grads[weights.start..biases.end].split_at_mut(weights.len());
                for r in 0..b {
                    let xr = x.row(r);
                    let gr = gy.row(r);
                    for o in 0..output {
                        let g = gr[o];
                        gb[o] += g;
                        if g != 0.0 {
                            for (gwi, &xi) in gw[o * input..(o + 1) * input].iter_mut().zip(xr) {
                                *gwi += g * xi;
                            }
                        }
                    }
                }
            }
            let mut gx = Tensor::zeros(x.shape().to_vec());
            if need_input_grad {
                for r in 0..b {
                    let gr = gy.row(r);
                    let gxr = &mut gx.data_mut()[r * input..(r + 1) * input];
                    for o in 0..output {
                        let g = gr[o];
                        if g != 0.0 {
                            for (gxi, &wi) in gxr.iter_mut().zip(&w[o * input..(o + 1) * input]) {
                                *gxi += g * wi;
                            }
                        }
                    }
                }
            }
            gx
        }
        Layer::Relu => {
            let data = x
                .data()
                .iter()
                .zip(gy.data())
                .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
                .collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        }
        Layer::Conv3x3 {
            in_channels: ic,
            out_channels: oc,
        } => {
            let ParamSlot { weights, biases, .. } = spec.slot(i).unwrap().clone();
            let wts = &params[weights.clone()];
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let plane = h * w;
            let mut gx = Tensor::zeros(x.shape().to_vec());
            let (gw, gb) = grads[weights.start..biases.end].split_at_mut(weights.len());
            for r in 0..b {
                let xr = x.row(r);
                let gr = gy.row(r);
                for o in 0..oc {
                    let go = &gr[o * plane..(o + 1) * plane];
                    gb[o] += go.iter().sum::<f64>();
                    for c in 0..ic {
                        let xc = &xr[c * plane..(c + 1) * plane];
                        let kbase = (o * ic + c) * 9;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let mut acc = 0.0;
                                let kw = wts[kbase + ky * 3 + kx];
                                for yy in 0..h {
                                    let sy = yy as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    let sy = sy as usize;
                                    for xx in 0..w {
                                        let sx = xx as isize + kx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        let g = go[yy * w + xx];
                                        let src = sy * w + sx as usize;
                                        acc += g * xc[src];
                                        if need_input_grad {
                                            gx.data_mut()[r * ic * plane + c * plane + src] += g * kw;
                                        }
                                    }
                                }
                                gw[kbase + ky * 3 + kx] += acc;
                            }
                        }
                    }
                }
            }
            gx
        }
        Layer::MaxPool2x2 => {
            let (c, h, w) = dims3(spec.shape_at(i));
            let (oh, ow) = (h / 2, w / 2);
            let mut gx = Tensor::zeros(x.shape().to_vec());
            let row = c * h * w;
            for r in 0..b {
                let xr = x.row(r);
                let gr = gy.row(r);
                for ch in 0..c {
                    for py in 0..oh {
                        for px in 0..ow {
                            let src = pool_argmax(xr, ch, h, w, py, px);
                            gx.data_mut()[r * row + src] += gr[(ch * oh + py) * ow + px];
                        }
                    }
                }
            }
            gx
        }
        Layer::Flatten => Tensor::new(x.shape().to_vec(), gy.data().to_vec()).unwrap(),
    }
}

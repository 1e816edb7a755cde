//! Model descriptions and the flat parameter vector they bind to.

use std::fmt;
use std::ops::Range;

use sha2::{Digest, Sha256};

use crate::error::{GapError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Dense { input: usize, output: usize },
    Relu,
    /// Stride 1, zero padding 1.
    Conv3x3 { in_channels: usize, out_channels: usize },
    /// Stride 2; odd trailing rows/columns are dropped.
    MaxPool2x2,
    Flatten,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Dense { input, output } => write!(f, "dense({input},{output})"),
            Layer::Relu => f.write_str("relu"),
            Layer::Conv3x3 {
                in_channels,
                out_channels,
            } => write!(f, "conv3x3({in_channels},{out_channels})"),
            Layer::MaxPool2x2 => f.write_str("maxpool2x2"),
            Layer::Flatten => f.write_str("flatten"),
        }
    }
}

/// Location of one layer's weights and biases inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub weights: Range<usize>,
    pub biases: Range<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// A validated feed-forward architecture.
///
/// Shapes exclude the batch dimension. Parameters are laid out in layer
/// order; within a layer the weights come first in row-major order
/// (`[out, in]` for dense, `[out, in, 3, 3]` for convolutions), then the biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    n_classes: usize,
    shapes: Vec<Vec<usize>>,
    slots: Vec<Option<ParamSlot>>,
    n_params: usize,
    digest: [u8; 32],
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, n_classes: usize) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(GapError::Shape(format!("invalid input shape {input_shape:?}")));
        }
        if n_classes < 2 {
            return Err(GapError::Argument("a classifier needs at least 2 classes".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        let mut slots = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            let cur = shapes.last().unwrap();
            let mismatch = || GapError::Shape(format!("layer {i} ({layer}) cannot take input {cur:?}"));
            let (next, slot) = match *layer {
                Layer::Dense { input, output } => {
                    if cur.as_slice() != [input] || output == 0 {
                        return Err(mismatch());
                    }
                    let w = offset..offset + input * output;
                    let b = w.end..w.end + output;
                    offset = b.end;
                    (
                        vec![output],
                        Some(ParamSlot {
                            weights: w,
                            biases: b,
                            fan_in: input,
                            fan_out: output,
                        }),
                    )
                }
                Layer::Relu => (cur.clone(), None),
                Layer::Conv3x3 {
                    in_channels,
                    out_channels,
                } => {
                    if cur.len() != 3 || cur[0] != in_channels || out_channels == 0 {
                        return Err(mismatch());
                    }
                    let w = offset..offset + out_channels * in_channels * 9;
                    let b = w.end..w.end + out_channels;
                    offset = b.end;
                    (
                        vec![out_channels, cur[1], cur[2]],
                        Some(ParamSlot {
                            weights: w,
                            biases: b,
                            fan_in: in_channels * 9,
                            fan_out: out_channels * 9,
                        }),
                    )
                }
                Layer::MaxPool2x2 => {
                    if cur.len() != 3 || cur[1] < 2 || cur[2] < 2 {
                        return Err(mismatch());
                    }
                    (vec![cur[0], cur[1] / 2, cur[2] / 2], None)
                }
                Layer::Flatten => (vec![cur.iter().product()], None),
            };
            shapes.push(next);
            slots.push(slot);
        }
        if shapes.last().unwrap().as_slice() != [n_classes] {
            return Err(GapError::Shape(format!(
                "model output {:?} does not match {n_classes} classes",
                shapes.last().unwrap()
            )));
        }
        let mut spec = Self {
            layers,
            input_shape,
            n_classes,
            shapes,
            slots,
            n_params: offset,
            digest: [0; 32],
        };
        spec.digest = Sha256::digest(spec.describe().as_bytes()).into();
        Ok(spec)
    }

    /// Dense stack with ReLU between hidden layers. Multi-dimensional inputs are flattened first.
    pub fn mlp(input_shape: Vec<usize>, hidden: &[usize], n_classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width: usize = input_shape.iter().product();
        if input_shape.len() > 1 {
            layers.push(Layer::Flatten);
        }
        for &h in hidden {
            layers.push(Layer::Dense {
                input: width,
                output: h,
            });
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense {
            input: width,
            output: n_classes,
        });
        Self::new(input_shape, layers, n_classes)
    }

    /// `[conv3x3 -> relu -> maxpool]` per entry of `channels`, then flatten and a dense head.
    pub fn small_cnn(input_shape: Vec<usize>, channels: &[usize], n_classes: usize) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(GapError::Shape(format!(
                "smallcnn needs [channels, height, width] input, got {input_shape:?}"
            )));
        }
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = (input_shape[0], input_shape[1], input_shape[2]);
        for &oc in channels {
            layers.push(Layer::Conv3x3 {
                in_channels: c,
                out_channels: oc,
            });
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2x2);
            c = oc;
            h /= 2;
            w /= 2;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense {
            input: c * h * w,
            output: n_classes,
        });
        Self::new(input_shape, layers, n_classes)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.digest
    }

    /// Per-sample shape entering layer `i`; index `layers().len()` is the output shape.
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn slot(&self, layer: usize) -> Option<&ParamSlot> {
        self.slots[layer].as_ref()
    }

    /// Canonical text form; its SHA-256 is the spec digest.
    pub fn describe(&self) -> String {
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        let layers: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        format!(
            "input=[{}];classes={};{}",
            dims.join(","),
            self.n_classes,
            layers.join(";")
        )
    }
}

/// Flat parameters in canonical order, tagged with the digest of their model spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    digest: [u8; 32],
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.n_params()],
            digest: *spec.digest(),
        }
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.n_params() {
            return Err(GapError::Shape(format!(
                "model has {} parameters, got {}",
                spec.n_params(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            digest: *spec.digest(),
        })
    }

    pub(crate) fn from_raw(values: Vec<f64>, digest: [u8; 32]) -> Self {
        Self { values, digest }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.digest
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_bound_to(&self, spec: &ModelSpec) -> bool {
        &self.digest == spec.digest() && self.values.len() == spec.n_params()
    }

    pub fn check_bound(&self, spec: &ModelSpec) -> Result<()> {
        if self.is_bound_to(spec) {
            Ok(())
        } else {
            Err(GapError::SpecMismatch)
        }
    }

    pub fn check_combinable(&self, other: &ParamVector) -> Result<()> {
        if self.digest == other.digest && self.values.len() == other.values.len() {
            Ok(())
        } else {
            Err(GapError::SpecMismatch)
        }
    }

    /// Splits the flat vector into per-layer `(weights, biases)` blocks; `None` for parameter-free layers.
    pub fn unflatten(&self, spec: &ModelSpec) -> Result<Vec<Option<(Vec<f64>, Vec<f64>)>>> {
        self.check_bound(spec)?;
        Ok((0..spec.layers().len())
            .map(|i| {
                spec.slot(i).map(|s| {
                    (
                        self.values[s.weights.clone()].to_vec(),
                        self.values[s.biases.clone()].to_vec(),
                    )
                })
            })
            .collect())
    }

    pub fn flatten(spec: &ModelSpec, blocks: &[Option<(Vec<f64>, Vec<f64>)>]) -> Result<Self> {
        let mut values = Vec::with_capacity(spec.n_params());
        for (w, b) in blocks.iter().flatten() {
            values.extend_from_slice(w);
            values.extend_from_slice(b);
        }
        Self::from_values(spec, values)
    }
}

/// Uniform(-b, b) weights with `b = sqrt(6 / (fan_in + fan_out))` per layer, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = Rng::new(seed);
    let mut params = ParamVector::zeros(spec);
    for slot in spec.slots.iter().flatten() {
        let bound = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
        for w in &mut params.values[slot.weights.clone()] {
            *w = rng.uniform(-bound, bound);
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_biases_start_at_zero() {
        let spec = ModelSpec::new(vec![2], vec![Layer::Dense { input: 2, output: 2 }], 2).unwrap();
        let p = init_params(&spec, 9);
        assert_eq!(&p.values()[4..6], &[0.0, 0.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::mlp(vec![5], &[7], 3).unwrap();
        assert_eq!(init_params(&spec, 1), init_params(&spec, 1));
        assert_ne!(init_params(&spec, 1), init_params(&spec, 2));
    }

    #[test]
    fn init_respects_fan_bound() {
        // Dense(3, 1) with 2 output classes is not a classifier; use a 2-way head and check the first layer.
        let spec = ModelSpec::new(
            vec![3],
            vec![
                Layer::Dense { input: 3, output: 1 },
                Layer::Relu,
                Layer::Dense { input: 1, output: 2 },
            ],
            2,
        )
        .unwrap();
        let bound = (6.0f64 / 4.0).sqrt();
        assert!((bound - 1.2247).abs() < 1e-4);
        for seed in 0..200 {
            let p = init_params(&spec, seed);
            for &w in &p.values()[0..3] {
                assert!(w > -bound && w < bound);
            }
        }
    }

    #[test]
    fn layout_counts() {
        let spec = ModelSpec::mlp(vec![32], &[128, 64], 8).unwrap();
        assert_eq!(spec.n_params(), 32 * 128 + 128 + 128 * 64 + 64 + 64 * 8 + 8);
        let cnn = ModelSpec::small_cnn(vec![3, 8, 8], &[4, 6], 10).unwrap();
        assert_eq!(cnn.shape_at(cnn.layers().len() - 1), &[6 * 2 * 2]);
        assert_eq!(cnn.n_params(), 4 * 3 * 9 + 4 + 6 * 4 * 9 + 6 + 24 * 10 + 10);
    }

    #[test]
    fn rejects_incompatible_layers() {
        let r = ModelSpec::new(
            vec![4],
            vec![Layer::Dense { input: 3, output: 2 }],
            2,
        );
        assert!(matches!(r, Err(GapError::Shape(_))));
        let r = ModelSpec::new(vec![4], vec![Layer::MaxPool2x2], 2);
        assert!(matches!(r, Err(GapError::Shape(_))));
    }

    #[test]
    fn digest_tracks_architecture() {
        let a = ModelSpec::mlp(vec![4], &[8], 3).unwrap();
        let b = ModelSpec::mlp(vec![4], &[9], 3).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), ModelSpec::mlp(vec![4], &[8], 3).unwrap().digest());
        assert!(init_params(&a, 0).check_combinable(&init_params(&b, 0)).is_err());
    }

    #[test]
    fn flatten_unflatten_identity() {
        let spec = ModelSpec::small_cnn(vec![2, 4, 4], &[3], 4).unwrap();
        let p = init_params(&spec, 5);
        let blocks = p.unflatten(&spec).unwrap();
        assert_eq!(ParamVector::flatten(&spec, &blocks).unwrap(), p);
    }
}

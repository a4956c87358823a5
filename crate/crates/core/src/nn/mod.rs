//! Layer stacks for the MLP and CNN architectures, with per-layer activation
//! capture so alignment penalties can be attached to any layer input.

mod checkpoint;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{maxpool_argmax, ConvGeometry, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply<S: Scalar>(self, z: &Var<S>) -> Var<S> {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.relu(),
            Activation::Identity => z.clone(),
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Fully connected; flattens non-batch axes of its input.
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
        activation: Activation,
    },
    /// Stride-1 square convolution over NCHW input.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        bias: bool,
        activation: Activation,
    },
    MaxPool2d {
        size: usize,
    },
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        !matches!(self, LayerSpec::MaxPool2d { .. })
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, bias, ..
            } => {
                let mut v = vec![vec![outputs, inputs]];
                if bias {
                    v.push(vec![outputs]);
                }
                v
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![vec![out_channels, in_channels, kernel, kernel]];
                if bias {
                    v.push(vec![out_channels]);
                }
                v
            }
            LayerSpec::MaxPool2d { .. } => vec![],
        }
    }

    /// (fan_in, fan_out) of the weight tensor.
    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => (inputs, outputs),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
            LayerSpec::MaxPool2d { .. } => (0, 0),
        }
    }
}

/// Named architectures plus free-form tanh/relu MLPs for experiments and tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arch {
    /// 784 → 600 → 300 → 10, tanh hidden layers, no biases.
    MlpFashion,
    /// conv 3→32 / pool / conv 32→32 / pool / 2048 → 1000 → 600 → 10.
    CnnCifar10,
    /// Dense stack over `dims`, with the given hidden activation.
    Mlp {
        dims: Vec<usize>,
        activation: Activation,
        bias: bool,
    },
}

impl Arch {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            Arch::MlpFashion => dense_stack(&[784, 600, 300, 10], Activation::Tanh, false),
            Arch::CnnCifar10 => vec![
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 32,
                    kernel: 3,
                    padding: 1,
                    bias: true,
                    activation: Activation::Relu,
                },
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Conv2d {
                    in_channels: 32,
                    out_channels: 32,
                    kernel: 3,
                    padding: 1,
                    bias: true,
                    activation: Activation::Relu,
                },
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Dense {
                    inputs: 2048,
                    outputs: 1000,
                    bias: false,
                    activation: Activation::Tanh,
                },
                LayerSpec::Dense {
                    inputs: 1000,
                    outputs: 600,
                    bias: false,
                    activation: Activation::Tanh,
                },
                LayerSpec::Dense {
                    inputs: 600,
                    outputs: 10,
                    bias: false,
                    activation: Activation::Identity,
                },
            ],
            Arch::Mlp { dims, activation, bias } => dense_stack(dims, *activation, *bias),
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Arch::MlpFashion => vec![1, 28, 28],
            Arch::CnnCifar10 => vec![3, 32, 32],
            Arch::Mlp { dims, .. } => vec![dims.first().copied().unwrap_or(0)],
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Arch::MlpFashion | Arch::CnnCifar10 => 10,
            Arch::Mlp { dims, .. } => dims.last().copied().unwrap_or(0),
        }
    }

    /// Parameterized layers eligible for the alignment penalty in the
    /// multi-layer strategy.
    pub fn deep_gfa_layers(&self) -> Vec<usize> {
        match self {
            Arch::CnnCifar10 => vec![0, 1, 2],
            _ => vec![0, 1],
        }
    }
}

fn dense_stack(dims: &[usize], hidden: Activation, bias: bool) -> Vec<LayerSpec> {
    let n = dims.len().saturating_sub(1);
    (0..n)
        .map(|i| LayerSpec::Dense {
            inputs: dims[i],
            outputs: dims[i + 1],
            bias,
            activation: if i + 1 == n { Activation::Identity } else { hidden },
        })
        .collect()
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::MlpFashion => f.write_str("mlp_fashion"),
            Arch::CnnCifar10 => f.write_str("cnn_cifar10"),
            Arch::Mlp { dims, activation, bias } => {
                let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
                write!(f, "mlp:{}", dims.join("-"))?;
                if *activation != Activation::Tanh {
                    f.write_str(":relu")?;
                }
                if *bias {
                    f.write_str(":bias")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    /// `mlp_fashion`, `cnn_cifar10`, or `mlp:D0-D1-..-Dn[:relu][:bias]`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp_fashion" => return Ok(Arch::MlpFashion),
            "cnn_cifar10" => return Ok(Arch::CnnCifar10),
            _ => {}
        }
        let unknown = || Error::UnknownArch(s.to_string());
        let rest = s.strip_prefix("mlp:").ok_or_else(unknown)?;
        let mut parts = rest.split(':');
        let dims = parts
            .next()
            .ok_or_else(unknown)?
            .split('-')
            .map(|d| d.parse::<usize>().map_err(|_| unknown()))
            .collect::<Result<Vec<_>>>()?;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(unknown());
        }
        let mut activation = Activation::Tanh;
        let mut bias = false;
        for flag in parts {
            match flag {
                "relu" => activation = Activation::Relu,
                "bias" => bias = true,
                _ => return Err(unknown()),
            }
        }
        Ok(Arch::Mlp { dims, activation, bias })
    }
}

impl Serialize for Arch {
    fn serialize<Z: serde::Serializer>(&self, s: Z) -> std::result::Result<Z::Ok, Z::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Arch {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Values captured during one forward pass.
pub struct ForwardTrace<S: Scalar> {
    /// Input of each parameterized layer, `h^(l)`; entry 0 is the model input.
    pub layer_inputs: Vec<Var<S>>,
    /// Pre-activation output of each parameterized layer.
    pub pre_activations: Vec<Var<S>>,
    /// Logits, `[B, classes]`.
    pub output: Var<S>,
}

/// An architecture and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S: Scalar> {
    pub arch: Arch,
    pub layers: Vec<LayerSpec>,
    /// Weight then (optional) bias for each parameterized layer, in order.
    pub params: Vec<Tensor<S>>,
    pub seed: u64,
}

impl<S: Scalar> ModelState<S> {
    /// Fresh model with Glorot-uniform weights and zero biases.
    pub fn build(arch: Arch, seed: u64) -> Self {
        let layers = arch.layers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &layers {
            let (fan_in, fan_out) = layer.fans();
            for (i, shape) in layer.param_shapes().into_iter().enumerate() {
                if i == 0 {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    params.push(Tensor::from_fn(&shape, |_| S::of(rng.random_range(-bound..bound))));
                } else {
                    params.push(Tensor::zeros(&shape));
                }
            }
        }
        Self {
            arch,
            layers,
            params,
            seed,
        }
    }

    /// Model whose parameters are supplied explicitly (shapes are checked).
    pub fn with_params(arch: Arch, params: Vec<Tensor<S>>, seed: u64) -> Result<Self> {
        let layers = arch.layers();
        let expected: Vec<Vec<usize>> = layers.iter().flat_map(LayerSpec::param_shapes).collect();
        if expected.len() != params.len() {
            return Err(Error::invalid(
                "model",
                format!(
                    "{arch} needs {} parameter tensors, got {}",
                    expected.len(),
                    params.len()
                ),
            ));
        }
        for (e, p) in expected.iter().zip(&params) {
            if e.as_slice() != p.shape() {
                return Err(Error::shape("model parameters", e, p.shape()));
            }
        }
        Ok(Self {
            arch,
            layers,
            params,
            seed,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Number of layers carrying weights (the layers GFA can be attached to).
    pub fn parameterized_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_parameterized()).count()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.arch.input_shape()
    }

    /// Every parameter as a fresh differentiable leaf.
    pub fn param_leaves(&self) -> Vec<Var<S>> {
        self.params.iter().cloned().map(Var::leaf).collect()
    }

    fn param_constants(&self) -> Vec<Var<S>> {
        self.params.iter().cloned().map(Var::constant).collect()
    }

    /// Forward pass with the stored parameters held constant.
    pub fn forward(&self, x: &Var<S>) -> Result<ForwardTrace<S>> {
        self.forward_with(&self.param_constants(), x)
    }

    /// Forward pass using `params` (same layout as [`ModelState::params`]).
    pub fn forward_with(&self, params: &[Var<S>], x: &Var<S>) -> Result<ForwardTrace<S>> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(
                "forward",
                format!("expected {} parameters, got {}", self.params.len(), params.len()),
            ));
        }
        self.check_input(x.value())?;
        let mut layer_inputs = Vec::new();
        let mut pre_activations = Vec::new();
        let mut h = x.clone();
        let mut next_param = 0;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Dense {
                    outputs,
                    bias,
                    activation,
                    ..
                } => {
                    layer_inputs.push(h.clone());
                    let w = &params[next_param];
                    let mut z = h.flatten_rows()?.matmul_t(w, false, true)?;
                    next_param += 1;
                    if bias {
                        let b = params[next_param].reshape(&[1, outputs])?;
                        z = z.add(&b.broadcast_rows(z.shape()[0])?)?;
                        next_param += 1;
                    }
                    h = activation.apply(&z);
                    pre_activations.push(z);
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                    bias,
                    activation,
                } => {
                    layer_inputs.push(h.clone());
                    let geom = ConvGeometry::new(h.shape(), kernel, padding)?;
                    if geom.channels != in_channels {
                        return Err(Error::shape(
                            "conv2d",
                            h.shape(),
                            &[geom.batch, in_channels, geom.height, geom.width],
                        ));
                    }
                    let w = params[next_param].reshape(&[out_channels, in_channels * kernel * kernel])?;
                    next_param += 1;
                    let mut z = h.im2col(geom)?.matmul_t(&w, false, true)?;
                    if bias {
                        let b = params[next_param].reshape(&[1, out_channels])?;
                        z = z.add(&b.broadcast_rows(z.shape()[0])?)?;
                        next_param += 1;
                    }
                    let z = rows_to_nchw(&z, geom.batch, out_channels, geom.out_height, geom.out_width)?;
                    h = activation.apply(&z);
                    pre_activations.push(z);
                }
                LayerSpec::MaxPool2d { size } => {
                    let (idx, shape) = maxpool_argmax(h.value(), size)?;
                    h = h.gather(Arc::new(idx), &shape)?;
                }
            }
        }
        Ok(ForwardTrace {
            layer_inputs,
            pre_activations,
            output: h,
        })
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let expected = self.input_shape();
        let per_sample: usize = expected.iter().product();
        let ok = match self.layers.first() {
            Some(LayerSpec::Conv2d { .. }) => x.rank() == 4 && x.shape()[1..] == expected[..],
            _ => x.rank() >= 2 && x.row_len() == per_sample,
        };
        if !ok {
            let mut want = vec![x.rows()];
            want.extend(expected);
            return Err(Error::shape("forward", x.shape(), &want));
        }
        Ok(())
    }

    /// Logits without recording a graph.
    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        no_grad(|| Ok(self.forward(&Var::constant(x.clone()))?.output.value().clone()))
    }

    /// Predicted class per sample (argmax, lowest index on ties).
    pub fn predict(&self, x: &Tensor<S>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

/// `[B·H·W, C]` row-per-pixel matrix to NCHW.
fn rows_to_nchw<S: Scalar>(z: &Var<S>, b: usize, c: usize, h: usize, w: usize) -> Result<Var<S>> {
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..h * w {
                idx.push((bi * h * w + p) * c + ci);
            }
        }
    }
    z.gather(Arc::new(idx), &[b, c, h, w])
}

/// Mean over batch and classes of the squared error between logits and
/// one-hot targets.
pub fn mse_loss<S: Scalar>(logits: &Var<S>, targets: &Var<S>) -> Result<Var<S>> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape("mse_loss", logits.shape(), targets.shape()));
    }
    Ok(logits.sub(targets)?.square().mean())
}

/// One-hot rows for `labels` over `classes`.
pub fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<S>> {
    let mut data = vec![S::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(
                "one_hot",
                format!("label {l} out of range for {classes} classes"),
            ));
        }
        data[i * classes + l] = S::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}

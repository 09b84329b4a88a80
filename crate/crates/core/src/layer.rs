use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::ops::{self, Padding};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inference,
}

/// Gradients of a scalar loss with respect to a layer's input and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub grad_input: Tensor<T>,
    /// Aligned 1:1 with [`Layer::params`].
    pub grad_params: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(kernel: usize, in_channels: usize, filters: usize, stride: usize, padding: Padding) -> Self {
        Self {
            kernels: Tensor::zeros(&[kernel, kernel, in_channels, filters]),
            bias: Tensor::zeros(&[filters]),
            stride,
            padding,
        }
    }

    pub fn filters(&self) -> usize {
        self.bias.len()
    }
}

/// Sequence of layers whose output is added to its input before a final relu.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual<T> {
    pub body: Vec<Layer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    Relu,
    MaxPool2d { window: usize, stride: usize },
    Dropout { rate: f64 },
    GlobalMaxPool,
    Residual(Residual<T>),
}

/// Forward-pass state the backward pass needs.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Conv { input: Tensor<T> },
    Relu { input: Tensor<T> },
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Dropout { mask: Option<Tensor<T>> },
    Residual { body: Vec<Cache<T>>, sum: Tensor<T> },
}

/// Architecture of a layer without its parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        kernel_shape: [usize; 4],
        stride: usize,
        padding: Padding,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Dropout {
        rate: f64,
    },
    GlobalMaxPool,
    Residual {
        body: Vec<LayerSpec>,
    },
}

impl<T: Scalar> Layer<T> {
    pub fn forward<R: Rng + ?Sized>(&self, input: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<(Tensor<T>, Cache<T>)> {
        match self {
            Layer::Conv2d(conv) => {
                let out = ops::conv2d(input, &conv.kernels, &conv.bias, conv.stride, conv.padding)?;
                Ok((out, Cache::Conv { input: input.clone() }))
            }
            Layer::Relu => Ok((ops::relu(input), Cache::Relu { input: input.clone() })),
            Layer::MaxPool2d { window, stride } => {
                let (out, argmax) = ops::max_pool2d_with_indices(input, *window, *stride)?;
                Ok((
                    out,
                    Cache::Pool {
                        input_shape: input.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            Layer::Dropout { rate } => {
                let (out, mask) = ops::dropout_with_mask(input, *rate, mode == Mode::Training, rng)?;
                Ok((out, Cache::Dropout { mask }))
            }
            Layer::GlobalMaxPool => {
                let (out, argmax) = ops::global_max_pool_with_indices(input)?;
                Ok((
                    out,
                    Cache::Pool {
                        input_shape: input.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            Layer::Residual(block) => {
                let (mut sum, body) = forward_all(&block.body, input, mode, rng)?;
                sum.add_assign(input)
                    .map_err(|_| dim_err!("residual skip: block output {:?} vs input {:?}", sum.shape(), input.shape()))?;
                Ok((ops::relu(&sum), Cache::Residual { body, sum }))
            }
        }
    }

    /// Inference-only forward without caching.
    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(conv) => ops::conv2d(input, &conv.kernels, &conv.bias, conv.stride, conv.padding),
            Layer::Relu => Ok(ops::relu(input)),
            Layer::MaxPool2d { window, stride } => ops::max_pool2d(input, *window, *stride),
            Layer::Dropout { rate } => {
                ops::check_dropout_rate(*rate)?;
                Ok(input.clone())
            }
            Layer::GlobalMaxPool => ops::global_max_pool(input),
            Layer::Residual(block) => {
                let mut sum = apply_all(&block.body, input)?;
                sum.add_assign(input)?;
                Ok(ops::relu(&sum))
            }
        }
    }

    pub fn backward(&self, cache: &Cache<T>, grad_out: &Tensor<T>) -> Result<LayerGrads<T>> {
        match (self, cache) {
            (Layer::Conv2d(conv), Cache::Conv { input }) => {
                let (gx, gk, gb) = ops::conv2d_backward(input, &conv.kernels, grad_out, conv.stride, conv.padding)?;
                Ok(LayerGrads {
                    grad_input: gx,
                    grad_params: vec![gk, gb],
                })
            }
            (Layer::Relu, Cache::Relu { input }) => Ok(LayerGrads {
                grad_input: ops::relu_backward(input, grad_out)?,
                grad_params: vec![],
            }),
            (Layer::MaxPool2d { .. } | Layer::GlobalMaxPool, Cache::Pool { input_shape, argmax }) => Ok(LayerGrads {
                grad_input: ops::scatter_argmax(input_shape, argmax, grad_out)?,
                grad_params: vec![],
            }),
            (Layer::Dropout { .. }, Cache::Dropout { mask }) => Ok(LayerGrads {
                grad_input: ops::dropout_backward(mask.as_ref(), grad_out)?,
                grad_params: vec![],
            }),
            (Layer::Residual(block), Cache::Residual { body, sum }) => {
                let g_sum = ops::relu_backward(sum, grad_out)?;
                let mut grads = backward_all(&block.body, body, &g_sum)?;
                grads.grad_input.add_assign(&g_sum)?;
                Ok(grads)
            }
            _ => Err(Error::Config("cache does not belong to this layer".into())),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv2d(conv) => vec![&conv.kernels, &conv.bias],
            Layer::Residual(block) => block.body.iter().flat_map(|l| l.params()).collect(),
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv2d(conv) => vec![&mut conv.kernels, &mut conv.bias],
            Layer::Residual(block) => block.body.iter_mut().flat_map(|l| l.params_mut()).collect(),
            _ => vec![],
        }
    }

    /// Output shape for a given input shape, without running the layer.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let hwc = |s: &[usize]| match *s {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(dim_err!("expected rank-3 HxWxC input, got {:?}", s)),
        };
        match self {
            Layer::Conv2d(conv) => {
                let (h, w, c) = hwc(input)?;
                let [kh, kw, kc, f] = <[usize; 4]>::try_from(conv.kernels.shape())
                    .map_err(|_| dim_err!("kernels must be rank 4, got {:?}", conv.kernels.shape()))?;
                if kc != c {
                    return Err(dim_err!("channel axis: input has {c} channels, kernels expect {kc}"));
                }
                let oh = ops::window_extent(h, kh, conv.stride, conv.padding.amount(kh))
                    .ok_or_else(|| dim_err!("height axis: kernel {kh} does not fit height {h}"))?;
                let ow = ops::window_extent(w, kw, conv.stride, conv.padding.amount(kw))
                    .ok_or_else(|| dim_err!("width axis: kernel {kw} does not fit width {w}"))?;
                Ok(vec![oh, ow, f])
            }
            Layer::Relu | Layer::Dropout { .. } => Ok(input.to_vec()),
            Layer::MaxPool2d { window, stride } => {
                let (h, w, c) = hwc(input)?;
                let oh = ops::window_extent(h, *window, *stride, 0)
                    .ok_or_else(|| dim_err!("height axis: pool window {window} exceeds height {h}"))?;
                let ow = ops::window_extent(w, *window, *stride, 0)
                    .ok_or_else(|| dim_err!("width axis: pool window {window} exceeds width {w}"))?;
                Ok(vec![oh, ow, c])
            }
            Layer::GlobalMaxPool => {
                let (_, _, c) = hwc(input)?;
                Ok(vec![c])
            }
            Layer::Residual(block) => {
                let mut shape = input.to_vec();
                for layer in &block.body {
                    shape = layer.output_shape(&shape)?;
                }
                if shape != input {
                    return Err(dim_err!("residual skip: block output {:?} vs input {:?}", shape, input));
                }
                Ok(shape)
            }
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(conv) => {
                let s = conv.kernels.shape();
                LayerSpec::Conv2d {
                    kernel_shape: [s[0], s[1], s[2], s[3]],
                    stride: conv.stride,
                    padding: conv.padding,
                }
            }
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool2d { window, stride } => LayerSpec::MaxPool2d {
                window: *window,
                stride: *stride,
            },
            Layer::Dropout { rate } => LayerSpec::Dropout { rate: *rate },
            Layer::GlobalMaxPool => LayerSpec::GlobalMaxPool,
            Layer::Residual(block) => LayerSpec::Residual {
                body: block.body.iter().map(Layer::spec).collect(),
            },
        }
    }

    /// Builds a layer with zero-valued parameters from its spec.
    pub fn from_spec(spec: &LayerSpec) -> Self {
        match spec {
            LayerSpec::Conv2d {
                kernel_shape,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d {
                kernels: Tensor::zeros(kernel_shape),
                bias: Tensor::zeros(&[kernel_shape[3]]),
                stride: *stride,
                padding: *padding,
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool2d { window, stride } => Layer::MaxPool2d {
                window: *window,
                stride: *stride,
            },
            LayerSpec::Dropout { rate } => Layer::Dropout { rate: *rate },
            LayerSpec::GlobalMaxPool => Layer::GlobalMaxPool,
            LayerSpec::Residual { body } => Layer::Residual(Residual {
                body: body.iter().map(Layer::from_spec).collect(),
            }),
        }
    }
}

pub fn forward_all<T: Scalar, R: Rng + ?Sized>(
    layers: &[Layer<T>],
    input: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut x = input.clone();
    for layer in layers {
        let (out, cache) = layer.forward(&x, mode, rng)?;
        caches.push(cache);
        x = out;
    }
    Ok((x, caches))
}

pub fn apply_all<T: Scalar>(layers: &[Layer<T>], input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut x = input.clone();
    for layer in layers {
        x = layer.apply(&x)?;
    }
    Ok(x)
}

/// Backpropagates through a layer sequence. Parameter gradients come back in
/// the same order as the sequence's flattened parameters.
pub fn backward_all<T: Scalar>(layers: &[Layer<T>], caches: &[Cache<T>], grad_out: &Tensor<T>) -> Result<LayerGrads<T>> {
    if layers.len() != caches.len() {
        return Err(Error::Config(format!(
            "{} caches for {} layers",
            caches.len(),
            layers.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut g = grad_out.clone();
    for (layer, cache) in layers.iter().zip(caches).rev() {
        let grads = layer.backward(cache, &g)?;
        g = grads.grad_input;
        per_layer.push(grads.grad_params);
    }
    let grad_params = per_layer.into_iter().rev().flatten().collect();
    Ok(LayerGrads { grad_input: g, grad_params })
}

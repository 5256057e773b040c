//! Differentiable CNN building blocks and the two CNN tower architectures.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::seed::Rng;
use crate::tensor::ops::conv_out;
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// He-uniform initialization: `U(-√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("element count matches shape")
}

/// Declarative description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    LeakyRelu {
        leak: f64,
    },
    Sigmoid,
    Flatten,
}

/// 2-D convolution with weights `[out, in, kh, kw]` and bias `[out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv2d {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            weight,
            bias,
        }
    }

    /// Output `(H, W)` for an input of spatial size `h × w`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        conv_out(h, w, self.kernel.0, self.kernel.1, self.stride, self.padding)
    }

    /// Forward over `x: [N, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied();
        if c != Some(self.in_channels) {
            return Err(shape_err!(
                "conv2d expects {} input channels, got input {:?}",
                self.in_channels,
                tape.shape(x)
            ));
        }
        let w = tape.param(self.weight, store.get(self.weight));
        let b = tape.param(self.bias, store.get(self.bias));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Fully connected layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub inputs: usize,
    pub units: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, units: usize, rng: &mut Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(&[inputs, units], inputs, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[units]));
        Dense {
            inputs,
            units,
            weight,
            bias,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(self.weight, store.get(self.weight));
        let b = tape.param(self.bias, store.get(self.bias));
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(Conv2d),
    Pool { window: usize, stride: usize },
    Dense(Dense),
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Flatten,
}

/// An ordered stack of layers forming one network tower.
///
/// Shapes exclude the batch axis. Construction validates every layer
/// against the declared input shape.
#[derive(Clone, Debug)]
pub struct LayerStack {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
}

impl LayerStack {
    /// Builds the stack, registering its parameters in `store` under `prefix`.
    pub fn build(
        input_shape: &[usize],
        specs: &[LayerSpec],
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let layer = match *spec {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(shape_err!("layer {i}: conv2d needs [C,H,W], have {shape:?}"));
                    };
                    let conv = Conv2d::new(store, &name, c, out_channels, kernel, stride, padding, rng);
                    let (ho, wo) = conv.output_hw(h, w).map_err(|e| e.context(format!("layer {i}")))?;
                    shape = vec![out_channels, ho, wo];
                    Layer::Conv(conv)
                }
                LayerSpec::MaxPool { window, stride } => {
                    let [c, h, w] = shape[..] else {
                        return Err(shape_err!("layer {i}: max pool needs [C,H,W], have {shape:?}"));
                    };
                    if window == 0 || stride == 0 || window > h || window > w {
                        return Err(shape_err!(
                            "layer {i}: pool window {window} does not fit {h}x{w}"
                        ));
                    }
                    shape = vec![c, (h - window) / stride + 1, (w - window) / stride + 1];
                    Layer::Pool { window, stride }
                }
                LayerSpec::Dense { units } => {
                    let [inputs] = shape[..] else {
                        return Err(shape_err!("layer {i}: dense needs a flat input, have {shape:?}"));
                    };
                    shape = vec![units];
                    Layer::Dense(Dense::new(store, &name, inputs, units, rng))
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::LeakyRelu { leak } => Layer::LeakyRelu(leak),
                LayerSpec::Sigmoid => Layer::Sigmoid,
            };
            if shape.iter().any(|&d| d == 0) {
                return Err(shape_err!("layer {i} produces an empty shape {shape:?}"));
            }
            layers.push(layer);
        }
        Ok(LayerStack {
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            specs: specs.to_vec(),
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Forward over a batch `x: [N, ...input_shape]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(shape_err!(
                "stack expects [N, {:?}], got {:?}",
                self.input_shape,
                shape
            ));
        }
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(conv) => conv.forward(tape, store, h)?,
                Layer::Pool { window, stride } => tape.maxpool2d(h, *window, *stride)?,
                Layer::Dense(dense) => dense.forward(tape, store, h)?,
                Layer::Relu => tape.relu(h)?,
                Layer::LeakyRelu(a) => tape.leaky_relu(h, *a)?,
                Layer::Sigmoid => tape.sigmoid(h)?,
                Layer::Flatten => {
                    let n = tape.shape(h)[0];
                    let rest: usize = tape.shape(h)[1..].iter().product();
                    tape.reshape(h, &[n, rest])?
                }
            };
        }
        Ok(h)
    }
}

/// Configuration of a plain CNN tower: convolutions (ReLU after each), max
/// pooling after selected convolutions, then dense layers with ReLU between
/// them and a linear last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Zero-based indices of convolutions followed by a pooling layer.
    pub pool_after: Vec<usize>,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub dense: Vec<usize>,
}

impl CnnConfig {
    /// conv32-conv32-pool-conv64-conv64-pool, dense128, dense2.
    pub fn merged(input_shape: &[usize]) -> Self {
        CnnConfig {
            input_shape: input_shape.to_vec(),
            conv_filters: vec![32, 32, 64, 64],
            kernel: 3,
            stride: 1,
            padding: 0,
            pool_after: vec![1, 3],
            pool_window: 2,
            pool_stride: 2,
            dense: vec![128, 2],
        }
    }

    /// conv4-conv8-conv8, dense500, dense500, dense5.
    pub fn siamese(input_shape: &[usize]) -> Self {
        CnnConfig {
            input_shape: input_shape.to_vec(),
            conv_filters: vec![4, 8, 8],
            kernel: 3,
            stride: 1,
            padding: 0,
            pool_after: vec![],
            pool_window: 2,
            pool_stride: 2,
            dense: vec![500, 500, 5],
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for (i, &f) in self.conv_filters.iter().enumerate() {
            specs.push(LayerSpec::Conv2d {
                out_channels: f,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            });
            specs.push(LayerSpec::Relu);
            if self.pool_after.contains(&i) {
                specs.push(LayerSpec::MaxPool {
                    window: self.pool_window,
                    stride: self.pool_stride,
                });
            }
        }
        specs.push(LayerSpec::Flatten);
        for (i, &units) in self.dense.iter().enumerate() {
            specs.push(LayerSpec::Dense { units });
            if i + 1 < self.dense.len() {
                specs.push(LayerSpec::Relu);
            }
        }
        specs
    }

    pub fn build(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<LayerStack> {
        if self.input_shape.len() != 3 {
            return Err(shape_err!(
                "CNN input shape must be [C,H,W], got {:?}",
                self.input_shape
            ));
        }
        LayerStack::build(&self.input_shape, &self.layer_specs(), store, prefix, rng)
    }
}

/// The merged-image classifier for a post-merge `[C, H, W]` input.
pub fn build_merged_cnn(
    input_shape: &[usize],
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<LayerStack> {
    CnnConfig::merged(input_shape).build(store, "merged", rng)
}

/// One siamese embedding tower for a `[1, H, W]` input.
pub fn build_siamese_tower(
    input_shape: &[usize],
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<LayerStack> {
    CnnConfig::siamese(input_shape).build(store, "tower", rng)
}

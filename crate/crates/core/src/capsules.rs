//! Capsule network: primary capsules from convolutional feature maps,
//! squashing, dynamic routing to high-level capsules, and the
//! reconstruction decoder.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::{self, Image};
use crate::layers::{he_uniform, Conv2d, LayerSpec, LayerStack};
use crate::params::ParamStore;
use crate::seed::{self, Rng};
use crate::tensor::ops::squash_values;
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// Capsule network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsNetConfig {
    /// `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    /// Feature maps of the second convolution (`n_m`).
    pub feature_maps: usize,
    pub conv2_kernel: usize,
    pub conv2_stride: usize,
    /// Values per primary capsule (`n_p`).
    pub primary_dim: usize,
    /// High-level capsule count (`J`).
    pub capsules: usize,
    /// High-level capsule length.
    pub capsule_dim: usize,
    pub routing_iters: usize,
    pub leak: f64,
    pub decoder_hidden: Vec<usize>,
}

impl CapsNetConfig {
    pub fn new(input_shape: &[usize]) -> Self {
        CapsNetConfig {
            input_shape: input_shape.to_vec(),
            conv1_channels: 256,
            conv1_kernel: 9,
            conv1_stride: 1,
            feature_maps: 256,
            conv2_kernel: 9,
            conv2_stride: 2,
            primary_dim: 8,
            capsules: 10,
            capsule_dim: 16,
            routing_iters: 3,
            leak: 0.01,
            decoder_hidden: vec![512, 1024],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.len() != 3 {
            return Err(shape_err!(
                "capsule net input must be [C,H,W], got {:?}",
                self.input_shape
            ));
        }
        if self.routing_iters < 1 {
            return Err(Error::Config("routing needs at least one iteration".into()));
        }
        if self.capsules == 0 || self.capsule_dim == 0 {
            return Err(Error::Config("capsule count and length must be positive".into()));
        }
        PrimaryCapsuleLayer::new(self.feature_maps, self.primary_dim, 1, 1)?;
        Ok(())
    }
}

/// Grouping of `n_m` feature maps of size `h_m × w_m` into capsules of
/// `n_p` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrimaryCapsuleLayer {
    pub feature_maps: usize,
    pub capsule_dim: usize,
    pub height: usize,
    pub width: usize,
}

impl PrimaryCapsuleLayer {
    pub fn new(feature_maps: usize, capsule_dim: usize, height: usize, width: usize) -> Result<Self> {
        if capsule_dim == 0 || feature_maps % capsule_dim != 0 {
            return Err(Error::Config(format!(
                "primary capsule length {capsule_dim} must divide the feature map count {feature_maps}"
            )));
        }
        Ok(PrimaryCapsuleLayer {
            feature_maps,
            capsule_dim,
            height,
            width,
        })
    }

    /// Number of primary capsules, `h_m · w_m · n_m / n_p`.
    pub fn count(&self) -> usize {
        self.height * self.width * (self.feature_maps / self.capsule_dim)
    }

    /// Regroups `[N, n_m, h_m, w_m]` feature maps into squashed capsules
    /// `[N, N_p, n_p]`. A capsule is `n_p` consecutive maps at one location.
    pub fn forward(&self, tape: &mut Tape, maps: Var) -> Result<Var> {
        let s = tape.shape(maps).to_vec();
        if s.len() != 4 || s[1..] != [self.feature_maps, self.height, self.width] {
            return Err(shape_err!(
                "primary capsules expect [N, {}, {}, {}], got {s:?}",
                self.feature_maps,
                self.height,
                self.width
            ));
        }
        let nhwc = tape.channels_last(maps)?;
        let caps = tape.reshape(nhwc, &[s[0], self.count(), self.capsule_dim])?;
        tape.squash(caps)
    }
}

/// Routing logits and couplings of one forward pass.
#[derive(Clone, Debug)]
pub struct RoutingState {
    /// Final logits `b_ij`, `[B, N_p, J]`.
    pub logits: Tensor,
    /// Final couplings `c_ij`, `[B, N_p, J]`.
    pub couplings: Tensor,
    pub iterations: usize,
    /// Couplings after each iteration's softmax.
    pub coupling_history: Vec<Tensor>,
}

/// Runs dynamic routing on the tape over predictions `u_hat: [B, N_p, J, D]`,
/// returning `v: [B, J, D]`. Gradients flow through every unrolled
/// iteration, couplings included.
pub fn route(tape: &mut Tape, u_hat: Var, iterations: usize) -> Result<(Var, RoutingState)> {
    if iterations < 1 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let s = tape.shape(u_hat).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("routing expects [B, N_p, J, D], got {s:?}"));
    }
    let mut logits = tape.constant(Tensor::zeros(&s[..3]));
    let mut history = Vec::with_capacity(iterations);
    let mut out = None;
    let mut couplings = None;
    for it in 0..iterations {
        let c = tape.softmax(logits, 2)?;
        history.push(tape.value(c).clone());
        let weighted = tape.route_sum(c, u_hat)?;
        let v = tape.squash(weighted)?;
        if it + 1 < iterations {
            let agreement = tape.agreement(u_hat, v)?;
            logits = tape.add(logits, agreement)?;
        }
        out = Some(v);
        couplings = Some(c);
    }
    let state = RoutingState {
        logits: tape.value(logits).clone(),
        couplings: tape.value(couplings.expect("at least one iteration")).clone(),
        iterations,
        coupling_history: history,
    };
    Ok((out.expect("at least one iteration"), state))
}

/// Dynamic routing on plain values. Accepts `[N_p, J, D]` (one sample) or
/// `[B, N_p, J, D]`; the output drops the batch axis when the input had none.
pub fn dynamic_route(u_hat: &Tensor, iterations: usize) -> Result<(Tensor, RoutingState)> {
    let unbatched = u_hat.rank() == 3;
    let input = if unbatched {
        let mut shape = vec![1];
        shape.extend_from_slice(u_hat.shape());
        u_hat.clone().reshape(&shape)?
    } else {
        u_hat.clone()
    };
    let mut tape = Tape::new();
    let u = tape.constant(input);
    let (v, mut state) = route(&mut tape, u, iterations)?;
    let mut v = tape.value(v).clone();
    if unbatched {
        let vs = v.shape()[1..].to_vec();
        v = v.reshape(&vs)?;
        let ls = state.logits.shape()[1..].to_vec();
        state.logits = state.logits.reshape(&ls)?;
        state.couplings = state.couplings.clone().reshape(&ls)?;
        state.coupling_history = state
            .coupling_history
            .into_iter()
            .map(|c| c.reshape(&ls))
            .collect::<Result<_>>()?;
    }
    Ok((v, state))
}

/// Squash over the last axis of plain values.
pub fn squash(g: &Tensor) -> Result<Tensor> {
    squash_values(g)
}

/// Fully connected capsule layer: one `D × n_p` matrix per (i, j), no bias.
#[derive(Clone, Debug)]
pub struct HighLevelCapsuleLayer {
    pub inputs: usize,
    pub capsules: usize,
    pub capsule_dim: usize,
    pub input_dim: usize,
    pub weight: ParamId,
}

impl HighLevelCapsuleLayer {
    pub fn new(
        store: &mut ParamStore,
        inputs: usize,
        input_dim: usize,
        capsules: usize,
        capsule_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let shape = [inputs, capsules, capsule_dim, input_dim];
        let weight = store.add("caps.weight", he_uniform(&shape, input_dim, rng));
        HighLevelCapsuleLayer {
            inputs,
            capsules,
            capsule_dim,
            input_dim,
            weight,
        }
    }

    /// Predictions `u_hat: [B, N_p, J, D]` from primary capsules `[B, N_p, n_p]`.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        let w = tape.param(self.weight, store.get(self.weight));
        tape.capsule_predict(u, w)
    }
}

/// Dense decoder from masked capsule outputs to a flattened image.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub stack: LayerStack,
    /// `[C, H, W]` of the reconstructed image.
    pub image_shape: Vec<usize>,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        capsules: usize,
        capsule_dim: usize,
        hidden: &[usize],
        image_shape: &[usize],
        leak: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let pixels: usize = image_shape.iter().product();
        let mut specs = Vec::new();
        for &units in hidden {
            specs.push(LayerSpec::Dense { units });
            specs.push(LayerSpec::LeakyRelu { leak });
        }
        specs.push(LayerSpec::Dense { units: pixels });
        specs.push(LayerSpec::Sigmoid);
        let stack = LayerStack::build(&[capsules * capsule_dim], &specs, store, "decoder", rng)?;
        Ok(Decoder {
            stack,
            image_shape: image_shape.to_vec(),
        })
    }

    /// Zeroes every capsule but `mask[n]` in sample `n` of `v: [N, J, D]`,
    /// then decodes to `[N, pixels]` in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, v: Var, mask: &[usize]) -> Result<Var> {
        let s = tape.shape(v).to_vec();
        if s.len() != 3 || s[0] != mask.len() {
            return Err(shape_err!(
                "decoder expects [N, J, D] capsules with N masks, got {s:?} and {}",
                mask.len()
            ));
        }
        let (n, j, d) = (s[0], s[1], s[2]);
        if let Some(&bad) = mask.iter().find(|&&m| m >= j) {
            return Err(Error::Index(format!("mask capsule {bad} outside 0..{j}")));
        }
        let mut m = Tensor::zeros(&[n, j, d]);
        for (row, &keep) in mask.iter().enumerate() {
            m.data_mut()[(row * j + keep) * d..][..d].fill(1.0);
        }
        let m = tape.constant(m);
        let masked = tape.mul(v, m)?;
        let flat = tape.reshape(masked, &[n, j * d])?;
        self.stack.forward(tape, store, flat)
    }
}

/// Output of one capsule encoding pass.
pub struct Encoded {
    /// High-level capsule vectors `[N, J, D]`.
    pub capsules: Var,
    pub routing: RoutingState,
}

/// Convolutions, primary capsules, routed high-level capsules and decoder.
#[derive(Clone, Debug)]
pub struct CapsNet {
    config: CapsNetConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    primary: PrimaryCapsuleLayer,
    high: HighLevelCapsuleLayer,
    decoder: Decoder,
    /// Mean reconstruction loss reached by the last reconstruction training.
    reconstruction_loss: Option<f64>,
}

impl CapsNet {
    pub fn build(config: &CapsNetConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let [c, h, w] = config.input_shape[..] else {
            unreachable!("validated above")
        };
        let conv1 = Conv2d::new(
            store,
            "conv1",
            c,
            config.conv1_channels,
            config.conv1_kernel,
            config.conv1_stride,
            0,
            rng,
        );
        let (h1, w1) = conv1.output_hw(h, w).map_err(|e| e.context("conv1"))?;
        let conv2 = Conv2d::new(
            store,
            "conv2",
            config.conv1_channels,
            config.feature_maps,
            config.conv2_kernel,
            config.conv2_stride,
            0,
            rng,
        );
        let (h2, w2) = conv2.output_hw(h1, w1).map_err(|e| e.context("conv2"))?;
        let primary = PrimaryCapsuleLayer::new(config.feature_maps, config.primary_dim, h2, w2)?;
        let high = HighLevelCapsuleLayer::new(
            store,
            primary.count(),
            config.primary_dim,
            config.capsules,
            config.capsule_dim,
            rng,
        );
        let decoder = Decoder::new(
            store,
            config.capsules,
            config.capsule_dim,
            &config.decoder_hidden,
            &config.input_shape,
            config.leak,
            rng,
        )?;
        Ok(CapsNet {
            config: config.clone(),
            conv1,
            conv2,
            primary,
            high,
            decoder,
            reconstruction_loss: None,
        })
    }

    pub fn config(&self) -> &CapsNetConfig {
        &self.config
    }

    pub fn primary(&self) -> &PrimaryCapsuleLayer {
        &self.primary
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn reconstruction_loss(&self) -> Option<f64> {
        self.reconstruction_loss
    }

    pub fn set_reconstruction_loss(&mut self, loss: Option<f64>) {
        self.reconstruction_loss = loss;
    }

    /// Length of the pairwise embedding: all capsule vectors concatenated.
    pub fn embedding_dim(&self) -> usize {
        self.config.capsules * self.config.capsule_dim
    }

    /// Encodes `x: [N, C, H, W]` into high-level capsules.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Encoded> {
        let leak = self.config.leak;
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.leaky_relu(h, leak)?;
        let h = self.conv2.forward(tape, store, h)?;
        let h = tape.leaky_relu(h, leak)?;
        let u = self.primary.forward(tape, h)?;
        let u_hat = self.high.predict(tape, store, u)?;
        let (capsules, routing) = route(tape, u_hat, self.config.routing_iters)?;
        Ok(Encoded { capsules, routing })
    }

    /// Flattened capsule vectors `[N, J·D]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let enc = self.encode(tape, store, x)?;
        let n = tape.shape(enc.capsules)[0];
        tape.reshape(enc.capsules, &[n, self.embedding_dim()])
    }

    /// Reconstruction `[N, pixels]` masked to the given capsule per sample.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, capsules: Var, mask: &[usize]) -> Result<Var> {
        self.decoder.forward(tape, store, capsules, mask)
    }

    /// Decodes one `[J, D]` capsule set masked to capsule `mask` into an image.
    pub fn decode_values(&self, store: &ParamStore, v: &Tensor, mask: usize) -> Result<Image> {
        let (j, d) = (self.config.capsules, self.config.capsule_dim);
        if v.shape() != [j, d] {
            return Err(shape_err!("decode expects [{j}, {d}] capsules, got {:?}", v.shape()));
        }
        let mut tape = Tape::new();
        let cv = tape.constant(v.clone().reshape(&[1, j, d])?);
        let out = self.decode(&mut tape, store, cv, &[mask])?;
        let [c, h, w] = self.config.input_shape[..] else {
            unreachable!("validated at build")
        };
        Image::from_chw(h, w, c, tape.value(out).data())
    }

    /// Capsule vectors `[J, D]` of one image.
    pub fn capsules_of(&self, store: &ParamStore, img: &Image) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image::batch(&[img])?);
        let enc = self.encode(&mut tape, store, x)?;
        let (j, d) = (self.config.capsules, self.config.capsule_dim);
        tape.value(enc.capsules).clone().reshape(&[j, d])
    }
}

/// Capsule lengths `‖v_j‖` of `[.., J, D]` values, used as class scores.
pub fn capsule_lengths(v: &Tensor) -> Result<Tensor> {
    let d = *v
        .shape()
        .last()
        .ok_or_else(|| shape_err!("capsule_lengths of a scalar"))?;
    let data = v
        .data()
        .chunks(d)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    Tensor::new(v.shape()[..v.rank() - 1].to_vec(), data)
}

/// Index of the longest capsule in a `[J, D]` set (first on ties).
pub fn longest_capsule(v: &Tensor) -> Result<usize> {
    let lengths = capsule_lengths(v)?;
    let mut best = 0;
    for (i, &l) in lengths.data().iter().enumerate() {
        if l > lengths.data()[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Settings for decoder-based image generation.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    /// Per-dimension half-width of the uniform perturbation.
    pub noise_scale: f64,
    /// Largest acceptable recorded reconstruction loss.
    pub loss_threshold: f64,
    pub seed: u64,
}

/// Generates `count` images by encoding seed images round-robin, perturbing
/// the longest capsule with seeded uniform noise and decoding.
pub fn generate_images(
    net: &CapsNet,
    store: &ParamStore,
    seeds: &[Image],
    count: usize,
    config: &GenerateConfig,
) -> Result<Vec<Image>> {
    match net.reconstruction_loss() {
        Some(l) if l <= config.loss_threshold => {}
        Some(l) => {
            return Err(Error::State(format!(
                "reconstruction loss {l} exceeds the generation threshold {}",
                config.loss_threshold
            )))
        }
        None => {
            return Err(Error::State(
                "capsule decoder has not been trained for reconstruction".into(),
            ))
        }
    }
    if seeds.is_empty() && count > 0 {
        return Err(Error::Data("no seed images to generate from".into()));
    }
    let d = net.config().capsule_dim;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let src = &seeds[k % seeds.len()];
        let mut v = net.capsules_of(store, src)?;
        let mask = longest_capsule(&v)?;
        if config.noise_scale > 0.0 {
            let mut rng = seed::derived_rng(config.seed, "generate", k as u64);
            for x in &mut v.data_mut()[mask * d..(mask + 1) * d] {
                *x += rng.random_range(-config.noise_scale..=config.noise_scale);
            }
        }
        let mut img = net.decode_values(store, &v, mask)?;
        img.clamp01();
        out.push(img);
    }
    Ok(out)
}

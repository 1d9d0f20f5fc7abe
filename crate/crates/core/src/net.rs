//! Dual-encoder / single-decoder network with hand-written backpropagation.
//!
//! * image encoder: standardized pixels -> three ReLU layers -> (mean, log variance)
//! * Gaussian encoder: per-Gaussian attributes with positional encoding -> embedding
//! * deformation decoder: `[z, embedding_n]` -> `(dd, ds, dp)` for Gaussian `n`
//!
//! All matrices hold one sample per row.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Deformation, GaussianModel, Image};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer, `weights` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Array2<T>,
    pub biases: Array1<T>,
    pub activation: Activation,
}

/// Parameter gradients of one [`DenseLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weights: Array2<T>,
    pub biases: Array1<T>,
}

impl<T: Real> LayerGrad<T> {
    fn zeros_like(layer: &DenseLayer<T>) -> Self {
        LayerGrad {
            weights: Array2::zeros(layer.weights.raw_dim()),
            biases: Array1::zeros(layer.biases.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.weights += &other.weights;
        self.biases += &other.biases;
    }
}

impl<T: Real> DenseLayer<T> {
    pub fn new(weights: Array2<T>, biases: Array1<T>, activation: Activation) -> Result<Self> {
        if weights.nrows() != biases.len() {
            return Err(Error::config(format!(
                "layer has {} output rows but {} biases",
                weights.nrows(),
                biases.len()
            )));
        }
        if weights.iter().chain(biases.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("layer parameters must be finite"));
        }
        Ok(DenseLayer {
            weights: weights.as_standard_layout().into_owned(),
            biases,
            activation,
        })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Array2::zeros((output, input)),
            biases: Array1::zeros(output),
            activation,
        }
    }

    /// Uniform `+-sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weights = Array2::from_shape_fn((output, input), |_| T::lit(rng.random_range(-bound..bound)));
        DenseLayer {
            weights,
            biases: Array1::zeros(output),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, Array2<T>) {
        let mut pre = x.dot(&self.weights.t());
        pre += &self.biases;
        let out = match self.activation {
            Activation::Relu => pre.mapv(|v| v.max(T::zero())),
            Activation::Identity => pre.clone(),
        };
        (pre, out)
    }

    /// Gradients given the layer input, its pre-activation and `dL/d output`.
    pub fn backward(
        &self,
        x: ArrayView2<T>,
        pre: ArrayView2<T>,
        grad_out: ArrayView2<T>,
        need_input_grad: bool,
    ) -> (LayerGrad<T>, Option<Array2<T>>) {
        let grad_pre = match self.activation {
            Activation::Relu => {
                let mut g = grad_out.to_owned();
                g.zip_mut_with(&pre, |g, p| {
                    if *p <= T::zero() {
                        *g = T::zero();
                    }
                });
                g
            }
            Activation::Identity => grad_out.to_owned(),
        };
        let grads = LayerGrad {
            weights: grad_pre.t().dot(&x),
            biases: grad_pre.sum_axis(Axis(0)),
        };
        let grad_in = need_input_grad.then(|| grad_pre.dot(&self.weights));
        (grads, grad_in)
    }

    fn param_slices_mut(&mut self) -> [&mut [T]; 2] {
        [
            self.weights.as_slice_mut().expect("standard layout"),
            self.biases.as_slice_mut().expect("contiguous"),
        ]
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<DenseLayer<T>>,
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

impl<T: Real> Mlp<T> {
    /// ReLU hidden layers of the given widths followed by an identity output layer.
    pub fn glorot<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for &h in hidden {
            layers.push(DenseLayer::glorot(fan_in, h, Activation::Relu, rng));
            fan_in = h;
        }
        layers.push(DenseLayer::glorot(fan_in, output, Activation::Identity, rng));
        Mlp { layers }
    }

    pub fn zeros(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for &h in hidden {
            layers.push(DenseLayer::zeros(fan_in, h, Activation::Relu));
            fan_in = h;
        }
        layers.push(DenseLayer::zeros(fan_in, output, Activation::Identity));
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }

    fn check_chain(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::config(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut cur = x.to_owned();
        for layer in &self.layers {
            cur = layer.forward(cur.view()).1;
        }
        cur
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, MlpCache<T>) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let (pre, out) = layer.forward(cur.view());
            cache.inputs.push(cur);
            cache.pre.push(pre);
            cur = out;
        }
        (cur, cache)
    }

    /// Smallest `|pre-activation|` over the ReLU units of a cached pass, i.e.
    /// the distance of the evaluation point from the nearest kink.
    pub fn relu_margin(&self, cache: &MlpCache<T>) -> Option<T> {
        self.layers
            .iter()
            .zip(&cache.pre)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, pre)| pre.iter().map(|v| v.abs()))
            .reduce(|a, b| if b < a { b } else { a })
    }

    pub fn backward(
        &self,
        cache: &MlpCache<T>,
        grad_out: ArrayView2<T>,
        need_input_grad: bool,
    ) -> (Vec<LayerGrad<T>>, Option<Array2<T>>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut grad = grad_out.to_owned();
        let mut grad_in = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let want = i > 0 || need_input_grad;
            let (g, gi) = layer.backward(cache.inputs[i].view(), cache.pre[i].view(), grad.view(), want);
            grads.push(g);
            match gi {
                Some(gi) if i > 0 => grad = gi,
                other => grad_in = other,
            }
        }
        grads.reverse();
        (grads, grad_in)
    }

    fn zero_grads(&self) -> Vec<LayerGrad<T>> {
        self.layers.iter().map(LayerGrad::zeros_like).collect()
    }
}

/// Layout and hyper-parameters of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub image_encoder_hidden: Vec<usize>,
    pub gaussian_encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub pe_bands: usize,
    pub kl_weight: f64,
    pub variational: bool,
    /// Displacement bound as a fraction of the box size (tanh-limited).
    pub max_displacement_fraction: f64,
    pub density_gain: f64,
    pub scale_gain: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            latent_dim: 8,
            embedding_dim: 32,
            image_encoder_hidden: vec![256, 256, 256],
            gaussian_encoder_hidden: vec![128, 128],
            decoder_hidden: vec![128, 128],
            pe_bands: 6,
            kl_weight: 1e-4,
            variational: false,
            max_displacement_fraction: 0.25,
            density_gain: 1.0,
            scale_gain: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::config("latent and embedding dimensions must be >= 1"));
        }
        if self.image_encoder_hidden.len() != 3 {
            return Err(Error::config("the image encoder has exactly three hidden layers"));
        }
        let widths = self
            .image_encoder_hidden
            .iter()
            .chain(&self.gaussian_encoder_hidden)
            .chain(&self.decoder_hidden);
        if widths.clone().any(|w| *w == 0) {
            return Err(Error::config("hidden widths must be >= 1"));
        }
        if !(self.kl_weight >= 0.0 && self.max_displacement_fraction > 0.0) {
            return Err(Error::config("kl weight must be >= 0 and displacement bound > 0"));
        }
        Ok(())
    }

    /// Width of the per-Gaussian encoder input `[d, s, PE(p), p]`.
    pub fn gaussian_feature_dim(&self) -> usize {
        2 + 6 * self.pe_bands + 3
    }
}

/// Which deformation channels the decoder may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelFlags {
    pub density: bool,
    pub scale: bool,
    pub position: bool,
}

impl ChannelFlags {
    pub const ALL: ChannelFlags = ChannelFlags {
        density: true,
        scale: true,
        position: true,
    };
    pub const NONE: ChannelFlags = ChannelFlags {
        density: false,
        scale: false,
        position: false,
    };
    pub const POSITION: ChannelFlags = ChannelFlags {
        density: false,
        scale: false,
        position: true,
    };

    fn mask<T: Real>(&self) -> [T; 5] {
        let f = |b: bool| if b { T::one() } else { T::zero() };
        [
            f(self.density),
            f(self.scale),
            f(self.position),
            f(self.position),
            f(self.position),
        ]
    }
}

/// Encoder output for one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub mean: Vec<T>,
    pub log_variance: Vec<T>,
    pub sample: Vec<T>,
}

/// Embedding of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmbedding<T> {
    pub values: Vec<T>,
}

/// `[sin(2^l pi p_a), cos(2^l pi p_a)]` for `l < bands`, axis-major within a band.
pub fn positional_encode<T: Real>(p: [T; 3], bands: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(6 * bands);
    for l in 0..bands {
        let freq = T::lit(2f64.powi(l as i32)) * T::PI();
        for a in p {
            let (s, c) = (freq * a).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}

/// Gaussian encoder inputs, one row per Gaussian.
pub fn gaussian_features<T: Real>(model: &GaussianModel<T>, bands: usize) -> Array2<T> {
    let half = model.half_box();
    let dim = 2 + 6 * bands + 3;
    let mut feats = Array2::zeros((model.len(), dim));
    for (i, g) in model.gaussians().iter().enumerate() {
        let p = g.position.map(|v| v / half);
        let mut row = feats.row_mut(i);
        row[0] = g.density;
        row[1] = g.scale;
        for (k, v) in positional_encode(p, bands).into_iter().enumerate() {
            row[2 + k] = v;
        }
        for a in 0..3 {
            row[dim - 3 + a] = p[a];
        }
    }
    feats
}

/// Zero-mean, unit-variance copy of the image pixels.
pub fn standardize<T: Real>(image: &Image<T>) -> Vec<T> {
    let n = T::lit(image.data.len() as f64);
    let mean = image.sum() / n;
    let var = image.data.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
    let std = var.sqrt();
    let inv = if std > T::zero() { T::one() / std } else { T::one() };
    image.data.iter().map(|v| (*v - mean) * inv).collect()
}

/// Image encoder forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ImageEncoding<T> {
    pub mean: Array2<T>,
    pub log_variance: Array2<T>,
    pub sample: Array2<T>,
    noise: Option<Array2<T>>,
    trunk: MlpCache<T>,
    hidden: Array2<T>,
}

impl<T: Real> ImageEncoding<T> {
    pub fn latent(&self, row: usize) -> LatentCode<T> {
        LatentCode {
            mean: self.mean.row(row).to_vec(),
            log_variance: self.log_variance.row(row).to_vec(),
            sample: self.sample.row(row).to_vec(),
        }
    }
}

/// Gaussian encoder forward pass.
#[derive(Debug, Clone)]
pub struct GaussianEncoding<T> {
    pub embeddings: Array2<T>,
    cache: MlpCache<T>,
}

/// Decoder forward pass over `batch x gaussians` rows.
#[derive(Debug, Clone)]
pub struct DecodeTrace<T> {
    pub deformations: Vec<Deformation<T>>,
    raw: Array2<T>,
    cache: MlpCache<T>,
    batch: usize,
    gaussians: usize,
    flags: ChannelFlags,
    max_disp: T,
}

/// Forward activations required by [`NetworkState::network_backward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace<T> {
    pub encoding: Option<ImageEncoding<T>>,
    pub gaussian: Option<GaussianEncoding<T>>,
    pub decode: Option<DecodeTrace<T>>,
}

/// Upstream gradients entering the network.
#[derive(Debug, Clone, Default)]
pub struct Upstream<T> {
    /// `dL/d deformation`, one per decoded particle.
    pub deformations: Vec<Deformation<T>>,
    /// Extra `dL/d mean` and `dL/d log_variance` (e.g. from the KL term).
    pub mean: Option<Array2<T>>,
    pub log_variance: Option<Array2<T>>,
    /// Extra `dL/d embeddings` (e.g. from the embedding smoothness term).
    pub embeddings: Option<Array2<T>>,
}

/// Gradients of every parameter plus the latent and embedding inputs of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads<T> {
    pub image_trunk: Vec<LayerGrad<T>>,
    pub mean_head: LayerGrad<T>,
    pub log_variance_head: LayerGrad<T>,
    pub gaussian_encoder: Vec<LayerGrad<T>>,
    pub decoder: Vec<LayerGrad<T>>,
    /// `dL/dz` per particle (before the reparameterization).
    pub latent: Array2<T>,
    /// `dL/d embeddings`, decoder contribution plus any extra upstream term.
    pub embeddings: Array2<T>,
}

impl<T: Real> NetworkGrads<T> {
    pub fn zeros_like(net: &NetworkState<T>) -> Self {
        NetworkGrads {
            image_trunk: net.image_trunk.zero_grads(),
            mean_head: LayerGrad::zeros_like(&net.mean_head),
            log_variance_head: LayerGrad::zeros_like(&net.log_variance_head),
            gaussian_encoder: net.gaussian_encoder.zero_grads(),
            decoder: net.decoder.zero_grads(),
            latent: Array2::zeros((0, net.config.latent_dim)),
            embeddings: Array2::zeros((0, net.config.embedding_dim)),
        }
    }

    fn layer_slices(grads: &[LayerGrad<T>]) -> impl Iterator<Item = &[T]> {
        grads.iter().flat_map(|g| {
            [
                g.weights.as_slice().expect("standard layout"),
                g.biases.as_slice().expect("contiguous"),
            ]
        })
    }

    /// Gradients in the order of [`NetworkState::main_params_mut`].
    pub fn main_slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Self::layer_slices(&self.image_trunk).collect();
        out.extend(Self::layer_slices(std::slice::from_ref(&self.mean_head)));
        out.extend(Self::layer_slices(std::slice::from_ref(&self.log_variance_head)));
        out.extend(Self::layer_slices(&self.decoder));
        out
    }

    /// Gradients in the order of [`NetworkState::gaussian_params_mut`].
    pub fn gaussian_slices(&self) -> Vec<&[T]> {
        Self::layer_slices(&self.gaussian_encoder).collect()
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T> {
    pub config: NetworkConfig,
    /// Number of pixels of the (square) input images.
    pub image_side: usize,
    pub image_trunk: Mlp<T>,
    pub mean_head: DenseLayer<T>,
    pub log_variance_head: DenseLayer<T>,
    pub gaussian_encoder: Mlp<T>,
    pub decoder: Mlp<T>,
}

fn hidden_stack<T: Real, R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Mlp<T> {
    let mut layers = Vec::with_capacity(hidden.len());
    let mut fan_in = input;
    for &h in hidden {
        layers.push(DenseLayer::glorot(fan_in, h, Activation::Relu, rng));
        fan_in = h;
    }
    Mlp { layers }
}

impl<T: Real> NetworkState<T> {
    /// Randomly initialized network; the decoder output layer starts at zero so
    /// the first render equals the consensus.
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, image_side: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let pixels = image_side * image_side;
        let image_trunk = hidden_stack(pixels, &config.image_encoder_hidden, rng);
        let last = *config.image_encoder_hidden.last().expect("three hidden layers");
        let mean_head = DenseLayer::glorot(last, config.latent_dim, Activation::Identity, rng);
        let log_variance_head = DenseLayer::glorot(last, config.latent_dim, Activation::Identity, rng);
        let gaussian_encoder = Mlp::glorot(
            config.gaussian_feature_dim(),
            &config.gaussian_encoder_hidden,
            config.embedding_dim,
            rng,
        );
        let mut decoder = Mlp::glorot(
            config.latent_dim + config.embedding_dim,
            &config.decoder_hidden,
            5,
            rng,
        );
        let out = decoder.layers.last_mut().expect("output layer");
        out.weights.fill(T::zero());
        out.biases.fill(T::zero());
        Ok(NetworkState {
            config,
            image_side,
            image_trunk,
            mean_head,
            log_variance_head,
            gaussian_encoder,
            decoder,
        })
    }

    /// Network with every parameter set to zero.
    pub fn zeros(config: NetworkConfig, image_side: usize) -> Result<Self> {
        config.validate()?;
        let pixels = image_side * image_side;
        let mut fan_in = pixels;
        let mut layers = Vec::new();
        for &h in &config.image_encoder_hidden {
            layers.push(DenseLayer::zeros(fan_in, h, Activation::Relu));
            fan_in = h;
        }
        Ok(NetworkState {
            image_trunk: Mlp { layers },
            mean_head: DenseLayer::zeros(fan_in, config.latent_dim, Activation::Identity),
            log_variance_head: DenseLayer::zeros(fan_in, config.latent_dim, Activation::Identity),
            gaussian_encoder: Mlp::zeros(
                config.gaussian_feature_dim(),
                &config.gaussian_encoder_hidden,
                config.embedding_dim,
            ),
            decoder: Mlp::zeros(
                config.latent_dim + config.embedding_dim,
                &config.decoder_hidden,
                5,
            ),
            config,
            image_side,
        })
    }

    /// Checks that every layer shape is consistent with the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        self.image_trunk.check_chain()?;
        self.gaussian_encoder.check_chain()?;
        self.decoder.check_chain()?;
        let trunk_out = self.image_trunk.out_dim();
        let ok = self.image_trunk.in_dim() == self.image_side * self.image_side
            && self.image_trunk.layers.len() == 3
            && self.mean_head.in_dim() == trunk_out
            && self.log_variance_head.in_dim() == trunk_out
            && self.mean_head.out_dim() == c.latent_dim
            && self.log_variance_head.out_dim() == c.latent_dim
            && self.gaussian_encoder.in_dim() == c.gaussian_feature_dim()
            && self.gaussian_encoder.out_dim() == c.embedding_dim
            && self.decoder.in_dim() == c.latent_dim + c.embedding_dim
            && self.decoder.out_dim() == 5;
        if !ok {
            return Err(Error::config("network layer shapes do not match the configuration"));
        }
        Ok(())
    }

    /// Stacks standardized images into an encoder input matrix.
    pub fn image_matrix(&self, images: &[&Image<T>]) -> Result<Array2<T>> {
        let pixels = self.image_side * self.image_side;
        let mut x = Array2::zeros((images.len(), pixels));
        for (i, img) in images.iter().enumerate() {
            if img.data.len() != pixels {
                return Err(Error::config(format!(
                    "image has {} pixels, encoder expects {pixels}",
                    img.data.len()
                )));
            }
            x.row_mut(i).assign(&Array1::from(standardize(img)));
        }
        Ok(x)
    }

    /// Encodes a batch of images. `noise` (batch x latent) enables the
    /// reparameterized sample `mean + exp(lv / 2) * noise`; otherwise the
    /// sample is the mean.
    pub fn encode_images(&self, x: ArrayView2<T>, noise: Option<Array2<T>>) -> Result<ImageEncoding<T>> {
        if x.ncols() != self.image_trunk.in_dim() {
            return Err(Error::config("encoder input width mismatch"));
        }
        let (hidden, trunk) = self.image_trunk.forward(x);
        let mean = self.mean_head.forward(hidden.view()).1;
        let log_variance = self.log_variance_head.forward(hidden.view()).1;
        let sample = match &noise {
            Some(eps) => {
                if eps.dim() != mean.dim() {
                    return Err(Error::input("noise shape must match the latent batch"));
                }
                let mut s = log_variance.mapv(|lv| (lv * T::lit(0.5)).exp());
                s *= eps;
                s += &mean;
                s
            }
            None => mean.clone(),
        };
        Ok(ImageEncoding {
            mean,
            log_variance,
            sample,
            noise,
            trunk,
            hidden,
        })
    }

    /// Encodes one image; draws a reparameterized sample when the network is
    /// variational and an rng is provided.
    pub fn image_encode<R: Rng + ?Sized>(&self, image: &Image<T>, rng: Option<&mut R>) -> Result<LatentCode<T>> {
        let x = self.image_matrix(&[image])?;
        let noise = match (self.config.variational, rng) {
            (true, Some(rng)) => Some(Array2::from_shape_fn((1, self.config.latent_dim), |_| {
                T::lit(StandardNormal.sample(rng))
            })),
            _ => None,
        };
        Ok(self.encode_images(x.view(), noise)?.latent(0))
    }

    pub fn encode_gaussians(&self, features: ArrayView2<T>) -> Result<GaussianEncoding<T>> {
        if features.ncols() != self.gaussian_encoder.in_dim() {
            return Err(Error::config("gaussian feature width mismatch"));
        }
        let (embeddings, cache) = self.gaussian_encoder.forward(features);
        Ok(GaussianEncoding { embeddings, cache })
    }

    /// One embedding per Gaussian of the (consensus) model.
    pub fn gaussian_encode(&self, model: &GaussianModel<T>) -> Result<Vec<GaussianEmbedding<T>>> {
        let feats = gaussian_features(model, self.config.pe_bands);
        let enc = self.encode_gaussians(feats.view())?;
        Ok(enc
            .embeddings
            .rows()
            .into_iter()
            .map(|r| GaussianEmbedding { values: r.to_vec() })
            .collect())
    }

    fn max_displacement(&self, box_size: usize) -> T {
        T::lit(self.config.max_displacement_fraction * box_size as f64)
    }

    /// Decodes `batch` latents against `gaussians` embeddings.
    pub fn decode_batch(
        &self,
        latents: ArrayView2<T>,
        embeddings: ArrayView2<T>,
        flags: ChannelFlags,
        box_size: usize,
    ) -> Result<DecodeTrace<T>> {
        let (i, j) = (self.config.latent_dim, self.config.embedding_dim);
        if latents.ncols() != i {
            return Err(Error::input(format!("latent width {} != {i}", latents.ncols())));
        }
        if embeddings.ncols() != j {
            return Err(Error::input(format!("embedding width {} != {j}", embeddings.ncols())));
        }
        let (b, n) = (latents.nrows(), embeddings.nrows());
        let mut input = Array2::zeros((b * n, i + j));
        for bi in 0..b {
            let mut block = input.slice_mut(s![bi * n..(bi + 1) * n, ..]);
            block.slice_mut(s![.., ..i]).assign(&latents.row(bi).broadcast((n, i)).expect("broadcast"));
            block.slice_mut(s![.., i..]).assign(&embeddings);
        }
        let (raw, cache) = self.decoder.forward(input.view());
        let mask = flags.mask::<T>();
        let max_disp = self.max_displacement(box_size);
        let dg = T::lit(self.config.density_gain);
        let sg = T::lit(self.config.scale_gain);
        let deformations = (0..b)
            .map(|bi| {
                let mut d = Deformation::zeros(n);
                for g in 0..n {
                    let row = raw.row(bi * n + g);
                    d.delta_density[g] = mask[0] * dg * row[0];
                    d.delta_scale[g] = mask[1] * sg * row[1];
                    d.delta_position[g] = [
                        mask[2] * max_disp * row[2].tanh(),
                        mask[3] * max_disp * row[3].tanh(),
                        mask[4] * max_disp * row[4].tanh(),
                    ];
                }
                d
            })
            .collect();
        Ok(DecodeTrace {
            deformations,
            raw,
            cache,
            batch: b,
            gaussians: n,
            flags,
            max_disp,
        })
    }

    /// Deformation of every Gaussian for latent `z`.
    pub fn decode_deformation(
        &self,
        z: &[T],
        embeddings: &[GaussianEmbedding<T>],
        flags: ChannelFlags,
        box_size: usize,
    ) -> Result<Deformation<T>> {
        let j = self.config.embedding_dim;
        if embeddings.iter().any(|e| e.values.len() != j) {
            return Err(Error::input(format!("every embedding must have length {j}")));
        }
        let emb = Array2::from_shape_fn((embeddings.len(), j), |(r, c)| embeddings[r].values[c]);
        let lat = Array2::from_shape_vec((1, z.len()), z.to_vec()).map_err(|e| Error::input(e.to_string()))?;
        let mut trace = self.decode_batch(lat.view(), emb.view(), flags, box_size)?;
        Ok(trace.deformations.remove(0))
    }

    /// Smallest `|pre-activation|` over every ReLU unit recorded in `trace`.
    pub fn relu_margin(&self, trace: &ForwardTrace<T>) -> Option<T> {
        let parts = [
            trace.encoding.as_ref().and_then(|e| self.image_trunk.relu_margin(&e.trunk)),
            trace.gaussian.as_ref().and_then(|g| self.gaussian_encoder.relu_margin(&g.cache)),
            trace.decode.as_ref().and_then(|d| self.decoder.relu_margin(&d.cache)),
        ];
        parts.into_iter().flatten().reduce(|a, b| if b < a { b } else { a })
    }

    /// Reverse-mode pass through whichever parts of the network `trace` covers.
    ///
    /// Deformation gradients require the decoder trace; gradients reaching the
    /// latent or the embeddings are propagated further when the encoder traces
    /// are present.
    pub fn network_backward(&self, trace: &ForwardTrace<T>, upstream: &Upstream<T>) -> Result<NetworkGrads<T>> {
        let mut grads = NetworkGrads::zeros_like(self);
        let (i, j) = (self.config.latent_dim, self.config.embedding_dim);

        let mut grad_latent: Option<Array2<T>> = None;
        let mut grad_emb: Option<Array2<T>> = upstream.embeddings.clone();

        if !upstream.deformations.is_empty() {
            let dec = trace
                .decode
                .as_ref()
                .ok_or_else(|| Error::Usage("decoder forward pass was not cached".into()))?;
            if upstream.deformations.len() != dec.batch {
                return Err(Error::input("deformation gradient count != decoded batch"));
            }
            let (b, n) = (dec.batch, dec.gaussians);
            let mask = dec.flags.mask::<T>();
            let dg = T::lit(self.config.density_gain);
            let sg = T::lit(self.config.scale_gain);
            let mut grad_raw = Array2::zeros(dec.raw.raw_dim());
            for (bi, gd) in upstream.deformations.iter().enumerate() {
                if gd.len() != n {
                    return Err(Error::input("deformation gradient length mismatch"));
                }
                for g in 0..n {
                    let r = bi * n + g;
                    grad_raw[[r, 0]] = mask[0] * dg * gd.delta_density[g];
                    grad_raw[[r, 1]] = mask[1] * sg * gd.delta_scale[g];
                    for a in 0..3 {
                        let t = dec.raw[[r, 2 + a]].tanh();
                        grad_raw[[r, 2 + a]] =
                            mask[2 + a] * dec.max_disp * (T::one() - t * t) * gd.delta_position[g][a];
                    }
                }
            }
            let (dgrads, gin) = self.decoder.backward(&dec.cache, grad_raw.view(), true);
            grads.decoder = dgrads;
            let gin = gin.expect("requested input gradient");
            let mut gl = Array2::zeros((b, i));
            let mut ge = Array2::zeros((n, j));
            for bi in 0..b {
                let block = gin.slice(s![bi * n..(bi + 1) * n, ..]);
                gl.row_mut(bi).assign(&block.slice(s![.., ..i]).sum_axis(Axis(0)));
                ge += &block.slice(s![.., i..]);
            }
            grad_latent = Some(gl);
            grad_emb = Some(match grad_emb {
                Some(extra) => extra + &ge,
                None => ge,
            });
        }

        // image encoder
        let needs_encoder = grad_latent.is_some() || upstream.mean.is_some() || upstream.log_variance.is_some();
        if needs_encoder {
            if let Some(enc) = trace.encoding.as_ref() {
                let b = enc.mean.nrows();
                let gz = grad_latent.clone().unwrap_or_else(|| Array2::zeros((b, i)));
                if gz.nrows() != b {
                    return Err(Error::input("latent gradient batch mismatch"));
                }
                let mut g_mean = gz.clone();
                let mut g_lv = Array2::zeros((b, i));
                if let Some(eps) = &enc.noise {
                    // sample = mean + exp(lv/2) * eps
                    let mut d = enc.log_variance.mapv(|lv| T::lit(0.5) * (lv * T::lit(0.5)).exp());
                    d *= eps;
                    d *= &gz;
                    g_lv += &d;
                }
                if let Some(m) = &upstream.mean {
                    g_mean += m;
                }
                if let Some(lv) = &upstream.log_variance {
                    g_lv += lv;
                }
                let (hm, gh_m) = self.mean_head.backward(
                    enc.hidden.view(),
                    enc.mean.view(),
                    g_mean.view(),
                    true,
                );
                let (hl, gh_l) = self.log_variance_head.backward(
                    enc.hidden.view(),
                    enc.log_variance.view(),
                    g_lv.view(),
                    true,
                );
                let gh = gh_m.expect("input grad") + &gh_l.expect("input grad");
                let (tg, _) = self.image_trunk.backward(&enc.trunk, gh.view(), false);
                grads.image_trunk = tg;
                grads.mean_head = hm;
                grads.log_variance_head = hl;
            } else if grad_latent.is_none() {
                return Err(Error::Usage("image encoder forward pass was not cached".into()));
            }
        }

        if let Some(ge) = &grad_emb {
            if let Some(genc) = trace.gaussian.as_ref() {
                if ge.dim() != genc.embeddings.dim() {
                    return Err(Error::input("embedding gradient shape mismatch"));
                }
                let (gg, _) = self.gaussian_encoder.backward(&genc.cache, ge.view(), false);
                grads.gaussian_encoder = gg;
            } else if upstream.embeddings.is_some() {
                return Err(Error::Usage("gaussian encoder forward pass was not cached".into()));
            }
        }

        if let Some(gl) = grad_latent {
            grads.latent = gl;
        }
        if let Some(ge) = grad_emb {
            grads.embeddings = ge;
        }
        Ok(grads)
    }

    fn mlp_slices_mut(mlp: &mut Mlp<T>) -> impl Iterator<Item = &mut [T]> {
        mlp.layers.iter_mut().flat_map(|l| l.param_slices_mut())
    }

    /// Image encoder and decoder parameters (updated every batch).
    pub fn main_params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Self::mlp_slices_mut(&mut self.image_trunk).collect();
        out.extend(self.mean_head.param_slices_mut());
        out.extend(self.log_variance_head.param_slices_mut());
        out.extend(Self::mlp_slices_mut(&mut self.decoder));
        out
    }

    /// Gaussian encoder parameters (updated once per epoch).
    pub fn gaussian_params_mut(&mut self) -> Vec<&mut [T]> {
        Self::mlp_slices_mut(&mut self.gaussian_encoder).collect()
    }

    pub fn parameter_count(&self) -> usize {
        let mlp = |m: &Mlp<T>| m.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum::<usize>();
        mlp(&self.image_trunk)
            + mlp(&self.gaussian_encoder)
            + mlp(&self.decoder)
            + self.mean_head.weights.len()
            + self.mean_head.biases.len()
            + self.log_variance_head.weights.len()
            + self.log_variance_head.biases.len()
    }
}

/// Serializable form of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Serializable form of a [`NetworkState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSnapshot {
    pub config: NetworkConfig,
    pub image_side: usize,
    pub image_trunk: Vec<LayerSnapshot>,
    pub mean_head: LayerSnapshot,
    pub log_variance_head: LayerSnapshot,
    pub gaussian_encoder: Vec<LayerSnapshot>,
    pub decoder: Vec<LayerSnapshot>,
}

impl<T: Real> DenseLayer<T> {
    fn snapshot(&self) -> LayerSnapshot {
        LayerSnapshot {
            input: self.in_dim(),
            output: self.out_dim(),
            activation: self.activation,
            weights: self.weights.iter().map(|v| v.as_f64()).collect(),
            biases: self.biases.iter().map(|v| v.as_f64()).collect(),
        }
    }

    fn from_snapshot(s: &LayerSnapshot) -> Result<Self> {
        let w = Array2::from_shape_vec((s.output, s.input), s.weights.iter().map(|v| T::lit(*v)).collect())
            .map_err(|e| Error::config(format!("layer weights: {e}")))?;
        let b = Array1::from(s.biases.iter().map(|v| T::lit(*v)).collect::<Vec<_>>());
        DenseLayer::new(w, b, s.activation)
    }
}

impl<T: Real> NetworkState<T> {
    pub fn snapshot(&self) -> NetworkSnapshot {
        let mlp = |m: &Mlp<T>| m.layers.iter().map(DenseLayer::snapshot).collect();
        NetworkSnapshot {
            config: self.config.clone(),
            image_side: self.image_side,
            image_trunk: mlp(&self.image_trunk),
            mean_head: self.mean_head.snapshot(),
            log_variance_head: self.log_variance_head.snapshot(),
            gaussian_encoder: mlp(&self.gaussian_encoder),
            decoder: mlp(&self.decoder),
        }
    }

    pub fn from_snapshot(s: &NetworkSnapshot) -> Result<Self> {
        let mlp = |layers: &[LayerSnapshot]| -> Result<Mlp<T>> {
            Ok(Mlp {
                layers: layers.iter().map(DenseLayer::from_snapshot).collect::<Result<_>>()?,
            })
        };
        let net = NetworkState {
            config: s.config.clone(),
            image_side: s.image_side,
            image_trunk: mlp(&s.image_trunk)?,
            mean_head: DenseLayer::from_snapshot(&s.mean_head)?,
            log_variance_head: DenseLayer::from_snapshot(&s.log_variance_head)?,
            gaussian_encoder: mlp(&s.gaussian_encoder)?,
            decoder: mlp(&s.decoder)?,
        };
        net.validate()?;
        Ok(net)
    }
}

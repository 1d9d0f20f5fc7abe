//! Minibatch training loop, Adam, checkpoints and latent extraction.

use std::path::Path;
use std::sync::Arc;

use log::info;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, ModelFile};
use crate::model::{render_backward_with, render_with, Deformation, GaussianModel, Image, Pose, RenderSettings};
use crate::net::{
    gaussian_features, ChannelFlags, ForwardTrace, GaussianEncoding, LatentCode, NetworkConfig, NetworkGrads,
    NetworkSnapshot, NetworkState, Upstream,
};
use crate::objective::{total_loss, LossGraphs, LossInputs, LossTerms, LossWeights};
use crate::optics::{CtfCache, CtfGrid, CtfParams};
use crate::scalar::Real;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hyper-parameters of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub channels: ChannelFlags,
    pub weights: LossWeights,
    pub network: NetworkConfig,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_interval: usize,
    /// Splat cutoff in standard deviations (0 disables truncation).
    pub truncation: f64,
    pub scale_floor: f64,
    pub floor_sharpness: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            channels: ChannelFlags::ALL,
            weights: LossWeights::default(),
            network: NetworkConfig::default(),
            checkpoint_interval: 0,
            truncation: 4.0,
            scale_floor: 0.1,
            floor_sharpness: 20.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_widths(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps > 0"));
        }
        if !(self.truncation >= 0.0 && self.scale_floor >= 0.0 && self.floor_sharpness > 0.0) {
            return Err(Error::config("invalid render settings"));
        }
        self.weights.validate()?;
        self.network.validate()
    }

    pub fn render_settings(&self) -> RenderSettings<f64> {
        RenderSettings {
            truncation: (self.truncation > 0.0).then_some(self.truncation),
            scale_floor: self.scale_floor,
            floor_sharpness: self.floor_sharpness,
        }
    }

    /// Applies `key = value` overrides on top of the defaults.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in io::parse_key_values(text)? {
            let key = k.as_str();
            let v = v.as_str();
            match key {
                "epochs" => c.epochs = parse_num(key, v)?,
                "batch_size" => c.batch_size = parse_num(key, v)?,
                "learning_rate" => c.learning_rate = parse_num(key, v)?,
                "adam_beta1" => c.adam_beta1 = parse_num(key, v)?,
                "adam_beta2" => c.adam_beta2 = parse_num(key, v)?,
                "adam_eps" => c.adam_eps = parse_num(key, v)?,
                "seed" => c.seed = parse_num(key, v)?,
                "density" => c.channels.density = parse_bool(key, v)?,
                "scale" => c.channels.scale = parse_bool(key, v)?,
                "position" => c.channels.position = parse_bool(key, v)?,
                "lambda_emb" => c.weights.lambda_emb = parse_num(key, v)?,
                "lambda_geo1" => c.weights.lambda_geo1 = parse_num(key, v)?,
                "lambda_geo2" => c.weights.lambda_geo2 = parse_num(key, v)?,
                "lambda_omega" => c.weights.lambda_omega = parse_num(key, v)?,
                "kl_weight" => {
                    c.weights.kl_weight = parse_num(key, v)?;
                    c.network.kl_weight = c.weights.kl_weight;
                }
                "variational" => c.network.variational = parse_bool(key, v)?,
                "latent_dim" => c.network.latent_dim = parse_num(key, v)?,
                "embedding_dim" => c.network.embedding_dim = parse_num(key, v)?,
                "pe_bands" => c.network.pe_bands = parse_num(key, v)?,
                "image_encoder_hidden" => c.network.image_encoder_hidden = parse_widths(key, v)?,
                "gaussian_encoder_hidden" => c.network.gaussian_encoder_hidden = parse_widths(key, v)?,
                "decoder_hidden" => c.network.decoder_hidden = parse_widths(key, v)?,
                "max_displacement_fraction" => c.network.max_displacement_fraction = parse_num(key, v)?,
                "density_gain" => c.network.density_gain = parse_num(key, v)?,
                "scale_gain" => c.network.scale_gain = parse_num(key, v)?,
                "checkpoint_interval" => c.checkpoint_interval = parse_num(key, v)?,
                "truncation" => c.truncation = parse_num(key, v)?,
                "scale_floor" => c.scale_floor = parse_num(key, v)?,
                "floor_sharpness" => c.floor_sharpness = parse_num(key, v)?,
                other => return Err(Error::config(format!("unknown configuration key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// First and second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update over parameters split into slices.
pub fn adam_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::input("parameter and gradient group counts differ"));
    }
    let total: usize = params.iter().map(|p| p.len()).sum();
    if total != state.m.len() {
        return Err(Error::input(format!(
            "optimizer tracks {} values, parameters have {total}",
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::input("gradient shape differs from parameter shape"));
        }
    }
    state.step += 1;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let c1 = T::one() - T::lit(hyper.beta1.powi(state.step as i32));
    let c2 = T::one() - T::lit(hyper.beta2.powi(state.step as i32));
    let (lr, eps) = (T::lit(hyper.lr), T::lit(hyper.eps));
    let mut k = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, gi) in p.iter_mut().zip(g.iter()) {
            let m = b1 * state.m[k] + (T::one() - b1) * *gi;
            let v = b2 * state.v[k] + (T::one() - b2) * *gi * *gi;
            state.m[k] = m;
            state.v[k] = v;
            let mh = m / c1;
            let vh = v / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
            k += 1;
        }
    }
    Ok(())
}

/// Particles with fixed poses and optics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image<f64>>,
    pub poses: Vec<Pose<f64>>,
    pub ctfs: Vec<CtfParams>,
}

impl Dataset {
    pub fn new(images: Vec<Image<f64>>, poses: Vec<Pose<f64>>, ctfs: Vec<CtfParams>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::input("empty dataset"));
        }
        if poses.len() != images.len() || ctfs.len() != images.len() {
            return Err(Error::input("images, poses and CTFs differ in count"));
        }
        let first = &images[0];
        if first.height != first.width || images.iter().any(|i| !i.same_shape(first)) {
            return Err(Error::input("images must be square and equally sized"));
        }
        Ok(Dataset { images, poses, ctfs })
    }

    /// Loads an MRCS stack and its metadata CSV.
    pub fn load(stack: &Path, meta: &Path) -> Result<Self> {
        let images = io::read_stack(stack)?;
        let rows = io::read_meta(meta)?;
        if rows.len() != images.len() {
            return Err(Error::format(
                meta,
                format!("{} metadata rows for {} images", rows.len(), images.len()),
            ));
        }
        let poses = rows.iter().map(|r| r.pose()).collect::<Result<_>>()?;
        let ctfs = rows.iter().map(|r| r.ctf()).collect();
        Dataset::new(images, poses, ctfs)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn box_size(&self) -> usize {
        self.images[0].height
    }
}

/// Per-epoch mean loss terms (per particle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub terms: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub network: NetworkState<f64>,
    pub adam_main: AdamState<f64>,
    pub adam_gaussian: AdamState<f64>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Serialized training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub consensus: ModelFile,
    pub network: NetworkSnapshot,
    pub adam_main: AdamState<f64>,
    pub adam_gaussian: AdamState<f64>,
    pub rng: RngState,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = io::read_json(path)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", c.version),
            ));
        }
        Ok(c)
    }

    pub fn network(&self) -> Result<NetworkState<f64>> {
        NetworkState::from_snapshot(&self.network)
    }

    pub fn consensus(&self) -> Result<GaussianModel<f64>> {
        self.consensus.to_model()
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: TrainState,
    pub latents: Vec<LatentCode<f64>>,
}

/// Inputs shared by every minibatch of a run.
pub struct BatchProblem<'a, T> {
    pub consensus: &'a GaussianModel<T>,
    pub graphs: &'a LossGraphs<T>,
    pub weights: &'a LossWeights,
    pub channels: ChannelFlags,
    pub settings: &'a RenderSettings<T>,
}

/// One minibatch: standardized encoder inputs, observations and optics.
pub struct BatchData<'a, T: Real> {
    pub inputs: ArrayView2<'a, T>,
    pub observed: &'a [&'a Image<T>],
    pub poses: &'a [Pose<T>],
    pub ctfs: &'a [Option<&'a CtfGrid<T>>],
    /// Reparameterization noise (variational networks only).
    pub noise: Option<Array2<T>>,
}

/// Loss terms and gradients of one minibatch.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub terms: LossTerms,
    /// Image encoder and decoder gradients (Gaussian encoder entries are zero).
    pub network: NetworkGrads<T>,
    /// Total `dL/d embeddings` (decoder path plus embedding smoothness).
    pub embeddings: Array2<T>,
}

/// Forward and backward pass of the full pipeline for one minibatch, with
/// the Gaussian embeddings held fixed.
pub fn batch_gradients<T: Real>(
    net: &NetworkState<T>,
    problem: &BatchProblem<'_, T>,
    data: BatchData<'_, T>,
    genc: &GaussianEncoding<T>,
) -> Result<BatchGradients<T>> {
    let b = data.inputs.nrows();
    if data.observed.len() != b || data.poses.len() != b || data.ctfs.len() != b {
        return Err(Error::input("batch inputs differ in length"));
    }
    let consensus = problem.consensus;
    let settings = problem.settings;
    let enc = net.encode_images(data.inputs, data.noise)?;
    let dec = net.decode_batch(enc.sample.view(), genc.embeddings.view(), problem.channels, consensus.box_size())?;

    let rendered = (0..b)
        .into_par_iter()
        .map(|k| render_with(consensus, &dec.deformations[k], &data.poses[k], data.ctfs[k], settings))
        .collect::<Result<Vec<_>>>()?;
    let latent = net
        .config
        .variational
        .then(|| (enc.mean.view(), enc.log_variance.view()));
    let inputs = LossInputs {
        rendered: &rendered,
        observed: data.observed,
        deformations: &dec.deformations,
        consensus,
        embeddings: genc.embeddings.view(),
        latent,
    };
    let (terms, lgrads) = total_loss(&inputs, problem.graphs, problem.weights)?;
    if let Some(name) = terms.non_finite() {
        return Err(Error::Numerical(format!("loss term {name} became non-finite")));
    }

    let gdefs = (0..b)
        .into_par_iter()
        .map(|k| -> Result<Deformation<T>> {
            let mut g = render_backward_with(
                consensus,
                &dec.deformations[k],
                &data.poses[k],
                data.ctfs[k],
                &lgrads.images[k],
                settings,
            )?;
            for (a, e) in g.delta_position.iter_mut().zip(&lgrads.deformations[k].delta_position) {
                for i in 0..3 {
                    a[i] += e[i];
                }
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;

    let trace = ForwardTrace {
        encoding: Some(enc),
        gaussian: None,
        decode: Some(dec),
    };
    let upstream = Upstream {
        deformations: gdefs,
        mean: lgrads.mean,
        log_variance: lgrads.log_variance,
        embeddings: None,
    };
    let network = net.network_backward(&trace, &upstream)?;
    if network.main_slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite network gradient".into()));
    }
    let embeddings = &network.embeddings + &lgrads.embeddings;
    Ok(BatchGradients {
        terms,
        network,
        embeddings,
    })
}

/// Stateful training driver.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    consensus: GaussianModel<f64>,
    config: TrainConfig,
    settings: RenderSettings<f64>,
    graphs: LossGraphs<f64>,
    ctf_grids: Vec<Option<Arc<CtfGrid<f64>>>>,
    features: Array2<f64>,
    inputs: Array2<f64>,
    rng: ChaCha8Rng,
    state: TrainState,
}

fn standardized_inputs(net: &NetworkState<f64>, images: &[Image<f64>]) -> Result<Array2<f64>> {
    let refs: Vec<&Image<f64>> = images.iter().collect();
    net.image_matrix(&refs)
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, consensus: GaussianModel<f64>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut net_config = config.network.clone();
        net_config.kl_weight = config.weights.kl_weight;
        let network = NetworkState::new(net_config, dataset.box_size(), &mut rng)?;
        let state = TrainState {
            adam_main: AdamState::new(Self::main_len(&network)),
            adam_gaussian: AdamState::new(Self::gaussian_len(&network)),
            network,
            epoch: 0,
            history: Vec::new(),
        };
        Self::assemble(dataset, consensus, config, rng, state)
    }

    /// Continues from a checkpoint taken at an epoch boundary.
    pub fn resume(dataset: &'a Dataset, checkpoint: &Checkpoint) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(checkpoint.rng.seed);
        rng.set_word_pos(checkpoint.rng.word_pos);
        let network = checkpoint.network()?;
        if network.image_side != dataset.box_size() {
            return Err(Error::input("checkpoint image size differs from the dataset"));
        }
        let state = TrainState {
            network,
            adam_main: checkpoint.adam_main.clone(),
            adam_gaussian: checkpoint.adam_gaussian.clone(),
            epoch: checkpoint.epoch,
            history: checkpoint.history.clone(),
        };
        if state.adam_main.m.len() != Self::main_len(&state.network)
            || state.adam_gaussian.m.len() != Self::gaussian_len(&state.network)
        {
            return Err(Error::input("optimizer moments do not match the network"));
        }
        Self::assemble(dataset, checkpoint.consensus()?, checkpoint.config.clone(), rng, state)
    }

    fn main_len(net: &NetworkState<f64>) -> usize {
        let mut n = net.clone();
        n.main_params_mut().iter().map(|s| s.len()).sum()
    }

    fn gaussian_len(net: &NetworkState<f64>) -> usize {
        let mut n = net.clone();
        n.gaussian_params_mut().iter().map(|s| s.len()).sum()
    }

    fn assemble(
        dataset: &'a Dataset,
        consensus: GaussianModel<f64>,
        config: TrainConfig,
        rng: ChaCha8Rng,
        state: TrainState,
    ) -> Result<Self> {
        if consensus.box_size() != dataset.box_size() {
            return Err(Error::input(format!(
                "model box {} differs from image box {}",
                consensus.box_size(),
                dataset.box_size()
            )));
        }
        let graphs = LossGraphs::for_model(&consensus, config.weights.lambda_omega)?;
        let px = dataset.images[0].pixel_size;
        let mut cache = CtfCache::new(dataset.box_size(), px)?;
        let ctf_grids = dataset.ctfs.iter().map(|c| cache.get(c)).collect::<Result<_>>()?;
        let features = gaussian_features(&consensus, config.network.pe_bands);
        let inputs = standardized_inputs(&state.network, &dataset.images)?;
        Ok(Trainer {
            dataset,
            settings: config.render_settings(),
            consensus,
            config,
            graphs,
            ctf_grids,
            features,
            inputs,
            rng,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn consensus(&self) -> &GaussianModel<f64> {
        &self.consensus
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            consensus: ModelFile::from_model(&self.consensus),
            network: self.state.network.snapshot(),
            adam_main: self.state.adam_main.clone(),
            adam_gaussian: self.state.adam_gaussian.clone(),
            rng: RngState {
                seed: self.config.seed,
                word_pos: self.rng.get_word_pos(),
            },
            epoch: self.state.epoch,
            history: self.state.history.clone(),
        }
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.config.learning_rate,
            beta1: self.config.adam_beta1,
            beta2: self.config.adam_beta2,
            eps: self.config.adam_eps,
        }
    }

    /// One pass over the shuffled dataset; returns the per-particle mean terms.
    pub fn run_epoch(&mut self) -> Result<LossTerms> {
        let n = self.dataset.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);

        let genc: GaussianEncoding<f64> = self.state.network.encode_gaussians(self.features.view())?;
        let mut grad_emb = Array2::<f64>::zeros(genc.embeddings.raw_dim());
        let mut sums = LossTerms::default();

        let batch_size = self.config.batch_size;
        for batch in order.chunks(batch_size) {
            let terms = self.run_batch(batch, &genc, &mut grad_emb)?;
            sums.add(&terms);
        }

        // Gaussian encoder: one update from the gradient accumulated over the epoch
        let trace = ForwardTrace {
            gaussian: Some(genc),
            ..Default::default()
        };
        let upstream = Upstream {
            embeddings: Some(grad_emb),
            ..Default::default()
        };
        let grads = self.state.network.network_backward(&trace, &upstream)?;
        let hyper = self.hyper();
        let g = grads.gaussian_slices();
        let mut params = self.state.network.gaussian_params_mut();
        adam_step(&mut params, &g, &mut self.state.adam_gaussian, hyper)?;

        let inv = 1.0 / n as f64;
        let mean = LossTerms {
            rec: sums.rec * inv,
            emb: sums.emb * inv,
            geo1: sums.geo1 * inv,
            geo2: sums.geo2 * inv,
            kl: sums.kl * inv,
            total: sums.total * inv,
        };
        self.state.epoch += 1;
        self.state.history.push(EpochRecord {
            epoch: self.state.epoch,
            terms: mean,
        });
        info!(
            "epoch {}: total {:.6e} rec {:.6e} emb {:.3e} geo1 {:.3e} geo2 {:.3e} kl {:.3e}",
            self.state.epoch, mean.total, mean.rec, mean.emb, mean.geo1, mean.geo2, mean.kl
        );
        Ok(mean)
    }

    fn run_batch(&mut self, batch: &[usize], genc: &GaussianEncoding<f64>, grad_emb: &mut Array2<f64>) -> Result<LossTerms> {
        let net = &self.state.network;
        let latent_dim = net.config.latent_dim;
        let noise = net.config.variational.then(|| {
            Array2::from_shape_fn((batch.len(), latent_dim), |_| StandardNormal.sample(&mut self.rng))
        });
        let x = self.inputs.select(Axis(0), batch);
        let observed: Vec<&Image<f64>> = batch.iter().map(|&i| &self.dataset.images[i]).collect();
        let poses: Vec<Pose<f64>> = batch.iter().map(|&i| self.dataset.poses[i]).collect();
        let ctfs: Vec<Option<&CtfGrid<f64>>> = batch.iter().map(|&i| self.ctf_grids[i].as_deref()).collect();
        let problem = BatchProblem {
            consensus: &self.consensus,
            graphs: &self.graphs,
            weights: &self.config.weights,
            channels: self.config.channels,
            settings: &self.settings,
        };
        let data = BatchData {
            inputs: x.view(),
            observed: &observed,
            poses: &poses,
            ctfs: &ctfs,
            noise,
        };
        let out = batch_gradients(net, &problem, data, genc).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("{msg} (epoch {})", self.state.epoch + 1)),
            other => other,
        })?;
        *grad_emb += &out.embeddings;

        let hyper = self.hyper();
        let g = out.network.main_slices();
        let mut params = self.state.network.main_params_mut();
        adam_step(&mut params, &g, &mut self.state.adam_main, hyper)?;
        Ok(out.terms)
    }

    /// Runs the remaining epochs, writing checkpoints and the loss history
    /// into `out_dir` when given.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        while self.state.epoch < self.config.epochs {
            self.run_epoch()?;
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_interval;
                let last = self.state.epoch == self.config.epochs;
                if last || (every > 0 && self.state.epoch.is_multiple_of(every)) {
                    self.checkpoint()
                        .save(&dir.join(format!("checkpoint_{:04}.json", self.state.epoch)))?;
                }
                write_history(&dir.join("loss_history.csv"), &self.state.history)?;
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("checkpoint.json"))?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<TrainOutput> {
        let latents = extract_latents(&self.state.network, &self.dataset.images)?;
        Ok(TrainOutput {
            state: self.state,
            latents,
        })
    }
}

/// Writes `epoch, rec, emb, geo1, geo2, kl, total` rows.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let rows: Vec<Vec<f64>> = history
        .iter()
        .map(|h| {
            let t = h.terms;
            vec![h.epoch as f64, t.rec, t.emb, t.geo1, t.geo2, t.kl, t.total]
        })
        .collect();
    io::write_table(path, &["epoch", "rec", "emb", "geo1", "geo2", "kl", "total"], &rows)
}

/// Trains from scratch and returns the final state and per-particle latents.
pub fn train(dataset: &Dataset, model: &GaussianModel<f64>, config: &TrainConfig) -> Result<TrainOutput> {
    let mut t = Trainer::new(dataset, model.clone(), config.clone())?;
    t.run(None)?;
    t.finish()
}

const LATENT_BATCH: usize = 256;

/// Deterministic encoder outputs (sample = mean) for every image, in order.
pub fn extract_latents(net: &NetworkState<f64>, images: &[Image<f64>]) -> Result<Vec<LatentCode<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(LATENT_BATCH) {
        let refs: Vec<&Image<f64>> = chunk.iter().collect();
        let x = net.image_matrix(&refs)?;
        let enc = net.encode_images(x.view(), None)?;
        out.extend((0..chunk.len()).map(|r| enc.latent(r)));
    }
    Ok(out)
}

/// Latent means as plain vectors.
pub fn latent_means(latents: &[LatentCode<f64>]) -> Vec<Vec<f64>> {
    latents.iter().map(|l| l.mean.clone()).collect()
}

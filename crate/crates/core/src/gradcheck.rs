//! Central finite-difference check of the full training gradient: image
//! encoder, Gaussian encoder, decoder, renderer, CTF and every loss term.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{render_with, Deformation, Gaussian, GaussianModel, Image, Pose, RenderSettings};
use crate::net::{gaussian_features, standardize, Activation, ChannelFlags, DenseLayer, ForwardTrace, NetworkConfig, NetworkState, Upstream};
use crate::objective::{LossGraphs, LossWeights, DIRECTION_EPS};
use crate::optics::{CtfGrid, CtfParams};
use crate::trainer::{batch_gradients, BatchData, BatchProblem};

/// A small randomized training problem.
#[derive(Debug, Clone)]
pub struct Scene {
    pub consensus: GaussianModel<f64>,
    pub network: NetworkState<f64>,
    pub observed: Vec<Image<f64>>,
    pub poses: Vec<Pose<f64>>,
    pub ctfs: Vec<CtfParams>,
    pub noise: Array2<f64>,
    pub weights: LossWeights,
    pub settings: RenderSettings<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub parameters: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_error: f64,
    /// Error floor: `1e-3` times the largest numeric gradient magnitude.
    pub floor: f64,
    /// Flat index, analytic and numeric value of the worst parameter.
    pub worst: (usize, f64, f64),
}

fn random_pose(rng: &mut ChaCha8Rng) -> Result<Pose<f64>> {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let shift = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    Pose::from_quaternion(q, shift)
}

/// Builds a scene with `3..=10` Gaussians in a `box_size` box, `batch`
/// particles, every channel enabled, CTF on and a variational encoder.
pub fn random_scene(seed: u64, box_size: usize, batch: usize) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=10);
    let half = box_size as f64 / 4.0;
    let gaussians = (0..n)
        .map(|_| {
            Gaussian::new(
                rng.random_range(0.5..1.5),
                rng.random_range(0.8..2.0),
                std::array::from_fn(|_| rng.random_range(-half..half)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let consensus = GaussianModel::new(gaussians, box_size, 3.0)?;

    let config = NetworkConfig {
        latent_dim: 2,
        embedding_dim: 3,
        image_encoder_hidden: vec![6, 5, 4],
        gaussian_encoder_hidden: vec![5],
        decoder_hidden: vec![6],
        pe_bands: 1,
        kl_weight: 0.1,
        variational: true,
        max_displacement_fraction: 0.1,
        density_gain: 0.5,
        scale_gain: 0.3,
    };
    let mut network = NetworkState::new(config, box_size, &mut rng)?;
    // The production decoder starts at zero; randomize it so every path is
    // exercised.
    let last = network.decoder.layers.last_mut().expect("decoder has an output layer");
    *last = DenseLayer::glorot(last.in_dim(), last.out_dim(), Activation::Identity, &mut rng);

    let settings = RenderSettings::untruncated();
    let mut poses = Vec::with_capacity(batch);
    let mut ctfs = Vec::with_capacity(batch);
    let mut observed = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pose = random_pose(&mut rng)?;
        let ctf = CtfParams {
            defocus_u_a: rng.random_range(8000.0..20000.0),
            defocus_v_a: rng.random_range(8000.0..20000.0),
            astigmatism_angle_deg: rng.random_range(0.0..180.0),
            ..CtfParams::default()
        };
        let mut def = Deformation::zeros(n);
        for g in 0..n {
            def.delta_density[g] = rng.random_range(-0.2..0.2);
            def.delta_position[g] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        }
        let grid = CtfGrid::new(&ctf, box_size, box_size, consensus.pixel_size())?;
        let mut img = render_with(&consensus, &def, &pose, Some(&grid), &settings)?;
        for v in img.data.iter_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
        poses.push(pose);
        ctfs.push(ctf);
        observed.push(img);
    }
    let noise = Array2::from_shape_fn((batch, network.config.latent_dim), |_| rng.sample(StandardNormal));
    // Zero biases put dead-row activations and decoded displacements exactly
    // on a kink; random biases are redrawn until every ReLU unit and the
    // direction-term cut-off are at least KINK_MARGIN away.
    let inputs = standardized_inputs(&observed, box_size);
    let features = gaussian_features(&consensus, network.config.pe_bands);
    let mut attempt = 0;
    loop {
        randomize_biases(&mut network, &mut rng);
        if kink_margin(&network, &inputs, &features, &noise, box_size)? >= KINK_MARGIN {
            break;
        }
        attempt += 1;
        if attempt == MAX_ATTEMPTS {
            return Err(Error::Numerical(format!("seed {seed}: no bias draw clears the kinks")));
        }
    }
    let weights = LossWeights {
        lambda_emb: 0.1,
        lambda_geo1: 1.0,
        lambda_geo2: 0.5,
        lambda_omega: 0.1,
        kl_weight: 0.1,
    };
    Ok(Scene {
        consensus,
        network,
        observed,
        poses,
        ctfs,
        noise,
        weights,
        settings,
    })
}

/// Minimum distance of the evaluation point from a non-differentiable point.
const KINK_MARGIN: f64 = 1e-4;
const MAX_ATTEMPTS: usize = 100;

fn randomize_biases(network: &mut NetworkState<f64>, rng: &mut ChaCha8Rng) {
    let layers = network
        .image_trunk
        .layers
        .iter_mut()
        .chain([&mut network.mean_head, &mut network.log_variance_head])
        .chain(network.gaussian_encoder.layers.iter_mut())
        .chain(network.decoder.layers.iter_mut());
    for layer in layers {
        layer.biases.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
}

fn standardized_inputs(observed: &[Image<f64>], n: usize) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = observed.iter().map(standardize).collect();
    Array2::from_shape_fn((rows.len(), n * n), |(r, c)| rows[r][c])
}

/// Distance to the nearest ReLU kink or direction-term cut-off.
fn kink_margin(
    network: &NetworkState<f64>,
    inputs: &Array2<f64>,
    features: &Array2<f64>,
    noise: &Array2<f64>,
    box_size: usize,
) -> Result<f64> {
    let encoding = network.encode_images(inputs.view(), Some(noise.clone()))?;
    let gaussian = network.encode_gaussians(features.view())?;
    let decode = network.decode_batch(encoding.sample.view(), gaussian.embeddings.view(), ChannelFlags::ALL, box_size)?;
    let cutoff = decode
        .deformations
        .iter()
        .flat_map(|d| d.delta_position.iter())
        .map(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - DIRECTION_EPS).abs())
        .fold(f64::INFINITY, f64::min);
    let trace = ForwardTrace {
        encoding: Some(encoding),
        gaussian: Some(gaussian),
        decode: Some(decode),
    };
    Ok(network.relu_margin(&trace).unwrap_or(f64::INFINITY).min(cutoff))
}

fn params(net: &mut NetworkState<f64>, group: usize) -> Vec<&mut [f64]> {
    if group == 0 {
        net.main_params_mut()
    } else {
        net.gaussian_params_mut()
    }
}

struct Prepared {
    inputs: Array2<f64>,
    grids: Vec<CtfGrid<f64>>,
    graphs: LossGraphs<f64>,
    features: Array2<f64>,
}

impl Scene {
    fn prepare(&self) -> Result<Prepared> {
        let n = self.consensus.box_size();
        let inputs = standardized_inputs(&self.observed, n);
        let grids = self
            .ctfs
            .iter()
            .map(|c| CtfGrid::new(c, n, n, self.consensus.pixel_size()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            inputs,
            grids,
            graphs: LossGraphs::for_model(&self.consensus, self.weights.lambda_omega)?,
            features: gaussian_features(&self.consensus, self.network.config.pe_bands),
        })
    }

    fn evaluate(&self, net: &NetworkState<f64>, prep: &Prepared) -> Result<(f64, Vec<f64>)> {
        let observed: Vec<&Image<f64>> = self.observed.iter().collect();
        let ctfs: Vec<Option<&CtfGrid<f64>>> = prep.grids.iter().map(Some).collect();
        let problem = BatchProblem {
            consensus: &self.consensus,
            graphs: &prep.graphs,
            weights: &self.weights,
            channels: ChannelFlags::ALL,
            settings: &self.settings,
        };
        let data = BatchData {
            inputs: prep.inputs.view(),
            observed: &observed,
            poses: &self.poses,
            ctfs: &ctfs,
            noise: Some(self.noise.clone()),
        };
        let genc = net.encode_gaussians(prep.features.view())?;
        let out = batch_gradients(net, &problem, data, &genc)?;
        let trace = ForwardTrace {
            gaussian: Some(genc),
            ..Default::default()
        };
        let upstream = Upstream {
            embeddings: Some(out.embeddings),
            ..Default::default()
        };
        let ggrads = net.network_backward(&trace, &upstream)?;
        let flat = out
            .network
            .main_slices()
            .into_iter()
            .chain(ggrads.gaussian_slices())
            .flat_map(|s| s.iter().copied())
            .collect();
        Ok((out.terms.total, flat))
    }

    /// Total loss and the analytic gradient of every parameter, ordered as
    /// `main_params_mut` followed by `gaussian_params_mut`.
    pub fn loss_and_gradient(&self) -> Result<(f64, Vec<f64>)> {
        self.evaluate(&self.network, &self.prepare()?)
    }

    /// Compares every analytic parameter gradient with a central difference
    /// of step `h`.
    pub fn check(&self, h: f64) -> Result<GradCheckReport> {
        let prep = self.prepare()?;
        let (_, analytic) = self.evaluate(&self.network, &prep)?;
        let mut net = self.network.clone();
        let mut numeric = Vec::with_capacity(analytic.len());
        for group in 0..2 {
            let lens: Vec<usize> = params(&mut net, group).iter().map(|s| s.len()).collect();
            for (si, len) in lens.into_iter().enumerate() {
                for e in 0..len {
                    let orig = params(&mut net, group)[si][e];
                    params(&mut net, group)[si][e] = orig + h;
                    let (plus, _) = self.evaluate(&net, &prep)?;
                    params(&mut net, group)[si][e] = orig - h;
                    let (minus, _) = self.evaluate(&net, &prep)?;
                    params(&mut net, group)[si][e] = orig;
                    numeric.push((plus - minus) / (2.0 * h));
                }
            }
        }
        let floor = 1e-3 * numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut max_error = 0.0;
        let mut worst = (0, 0.0, 0.0);
        for (i, (a, f)) in analytic.iter().zip(&numeric).enumerate() {
            let err = (a - f).abs() / a.abs().max(f.abs()).max(floor).max(f64::MIN_POSITIVE);
            if err > max_error {
                max_error = err;
                worst = (i, *a, *f);
            }
        }
        Ok(GradCheckReport {
            parameters: analytic.len(),
            max_error,
            floor,
            worst,
        })
    }
}

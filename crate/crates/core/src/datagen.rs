//! Synthetic toy structures, particle simulation and Gaussian initialization
//! from a density map.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::MetaRow;
use crate::model::{render_with, render_volume, Deformation, Gaussian, GaussianModel, Image, Pose, RenderSettings, Volume};
use crate::optics::{CtfGrid, CtfParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    /// A rigid arm rotating about a hinge axis through a full turn.
    Dihedral1d,
    /// The arm is present (state 0) or absent (state 1).
    TwoStateComposition,
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub kind: MotionKind,
    pub n_conformations: usize,
    pub n_particles: usize,
    pub box_size: usize,
    /// Å per voxel.
    pub pixel_size: f64,
    /// Signal-to-noise power ratio.
    pub snr: f64,
    pub ctf_enabled: bool,
    /// Defocus range in Å (uniform).
    pub defocus_min: f64,
    pub defocus_max: f64,
    /// In-plane shifts are uniform in `[-max_shift, max_shift]` pixels.
    pub max_shift: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            kind: MotionKind::Dihedral1d,
            n_conformations: 100,
            n_particles: 2000,
            box_size: 64,
            pixel_size: 3.0,
            snr: 0.5,
            ctf_enabled: true,
            defocus_min: 10000.0,
            defocus_max: 25000.0,
            max_shift: 2.0,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_conformations == 0 || self.n_particles < self.n_conformations {
            return Err(Error::config("need n_particles >= n_conformations >= 1"));
        }
        if self.kind == MotionKind::TwoStateComposition && self.n_conformations != 2 {
            return Err(Error::config("the two-state dataset has exactly two conformations"));
        }
        if !(self.snr > 0.0) {
            return Err(Error::config("snr must be > 0"));
        }
        if !self.box_size.is_power_of_two() || self.box_size < 32 {
            return Err(Error::config("box size must be a power of two >= 32"));
        }
        if !(self.pixel_size > 0.0 && self.max_shift >= 0.0 && self.defocus_min <= self.defocus_max) {
            return Err(Error::config("invalid pixel size, shift or defocus range"));
        }
        Ok(())
    }
}

/// Ground-truth Gaussian models of a toy dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyStructure {
    /// Zero-angle (dihedral) or full (two-state) model.
    pub consensus: GaussianModel<f64>,
    pub conformations: Vec<GaussianModel<f64>>,
    /// Arm angle per conformation (radians); zeros for the two-state set.
    pub angles: Vec<f64>,
    /// Indices of the moving / removable Gaussians.
    pub arm: Vec<usize>,
}

const BODY_CENTER: [f64; 3] = [-6.0, 0.0, 0.0];
const BODY_AXES: [f64; 3] = [9.0, 6.0, 5.5];
/// Arm center: `x` along the hinge axis and distance from it.
const ARM_X: f64 = 9.0;
const ARM_RADIUS: f64 = 7.0;
/// Semi-axes along the hinge axis, radially and tangentially.
const ARM_AXES: [f64; 3] = [3.5, 7.0, 3.5];
const LATTICE: f64 = 2.0;

/// Lattice points inside the ellipsoid, each displaced uniformly within its
/// cell so the pseudo-atoms do not sit on the voxel grid.
fn jittered_ellipsoid(axes: [f64; 3], rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let half = 0.5 * LATTICE;
    ellipsoid_lattice(axes)
        .into_iter()
        .map(|p| p.map(|v| v + rng.random_range(-half..half)))
        .collect()
}

fn ellipsoid_lattice(axes: [f64; 3]) -> Vec<[f64; 3]> {
    let steps = axes.map(|a| (a / LATTICE).floor() as i64);
    let mut pts = Vec::new();
    for i in -steps[0]..=steps[0] {
        for j in -steps[1]..=steps[1] {
            for k in -steps[2]..=steps[2] {
                let p = [i as f64 * LATTICE, j as f64 * LATTICE, k as f64 * LATTICE];
                let r: f64 = (0..3).map(|a| (p[a] / axes[a]).powi(2)).sum();
                if r <= 1.0 {
                    pts.push(p);
                }
            }
        }
    }
    pts
}

/// Arm pseudo-atoms (given in arm-local axial, radial, tangential
/// coordinates) rotated by `angle` about the hinge axis.
fn arm_positions(local: &[[f64; 3]], angle: f64) -> Vec<[f64; 3]> {
    let (s, c) = angle.sin_cos();
    local
        .iter()
        .map(|&[a, r, t]| {
            let radial = ARM_RADIUS + r;
            [ARM_X + a, radial * c - t * s, radial * s + t * c]
        })
        .collect()
}

/// Body plus arm for the requested motion.
pub fn make_toy_structure(spec: &ToySpec) -> Result<ToyStructure> {
    spec.validate()?;
    // stream 0 of the seed; particles use streams 1..
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let body: Vec<Gaussian<f64>> = jittered_ellipsoid(BODY_AXES, &mut rng)
        .into_iter()
        .map(|p| Gaussian {
            density: 1.0,
            scale: 1.0,
            position: [p[0] + BODY_CENTER[0], p[1] + BODY_CENTER[1], p[2] + BODY_CENTER[2]],
        })
        .collect();
    let arm_local = jittered_ellipsoid(ARM_AXES, &mut rng);
    let build = |angle: f64, arm_density: f64| -> Result<GaussianModel<f64>> {
        let mut gs = body.clone();
        gs.extend(arm_positions(&arm_local, angle).into_iter().map(|p| Gaussian {
            density: arm_density,
            scale: 1.0,
            position: p,
        }));
        GaussianModel::new(gs, spec.box_size, spec.pixel_size)
    };
    let arm_len = arm_local.len();
    let arm: Vec<usize> = (body.len()..body.len() + arm_len).collect();
    let (conformations, angles) = match spec.kind {
        MotionKind::Dihedral1d => {
            let angles: Vec<f64> = (0..spec.n_conformations)
                .map(|c| 2.0 * PI * c as f64 / spec.n_conformations as f64)
                .collect();
            let models = angles.iter().map(|a| build(*a, 1.0)).collect::<Result<_>>()?;
            (models, angles)
        }
        MotionKind::TwoStateComposition => (vec![build(0.0, 1.0)?, build(0.0, 0.0)?], vec![0.0, 0.0]),
    };
    Ok(ToyStructure {
        consensus: build(0.0, 1.0)?,
        conformations,
        angles,
        arm,
    })
}

/// Voxels where the arm (at angle 0) dominates the density.
pub fn subunit_mask(structure: &ToyStructure) -> Result<Vec<bool>> {
    let model = &structure.consensus;
    let settings = RenderSettings::default();
    let mut arm_only = Deformation::zeros(model.len());
    let mut body_only = Deformation::zeros(model.len());
    for (i, g) in model.gaussians().iter().enumerate() {
        if structure.arm.contains(&i) {
            arm_only.delta_density[i] = 0.0;
            body_only.delta_density[i] = -g.density;
        } else {
            arm_only.delta_density[i] = -g.density;
        }
    }
    let arm = render_volume(model, &arm_only, &settings)?;
    let body = render_volume(model, &body_only, &settings)?;
    let peak = arm.data.iter().copied().fold(0.0, f64::max);
    Ok(arm
        .data
        .iter()
        .zip(&body.data)
        .map(|(a, b)| *a > 0.2 * peak && *a > *b)
        .collect())
}

/// A simulated particle stack with its ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub images: Vec<Image<f64>>,
    pub poses: Vec<Pose<f64>>,
    pub ctfs: Vec<CtfParams>,
    /// Conformation index per particle.
    pub labels: Vec<usize>,
    /// Arm angle per particle (dihedral motion only).
    pub angles: Option<Vec<f64>>,
    pub gt_volumes: Vec<Volume<f64>>,
}

impl SimulatedData {
    pub fn meta_rows(&self) -> Vec<MetaRow> {
        (0..self.images.len())
            .map(|i| {
                let mut row = MetaRow::new(i, &self.poses[i], &self.ctfs[i]);
                row.gt_label = Some(self.labels[i]);
                row.gt_angle_rad = self.angles.as_ref().map(|a| a[i]);
                row
            })
            .collect()
    }

    /// Population-weighted mean of the ground-truth volumes.
    pub fn mean_volume(&self) -> Result<Volume<f64>> {
        let first = self.gt_volumes.first().ok_or_else(|| Error::input("no ground-truth volumes"))?;
        let mut counts = vec![0usize; self.gt_volumes.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        let total = self.labels.len() as f64;
        let mut out = Volume::zeros(first.size, first.pixel_size);
        for (v, c) in self.gt_volumes.iter().zip(counts) {
            if c == 0 {
                continue;
            }
            let w = c as f64 / total;
            for (o, x) in out.data.iter_mut().zip(&v.data) {
                *o += w * x;
            }
        }
        Ok(out)
    }
}

/// Uniformly distributed rotation from three uniform deviates.
pub fn uniform_quaternion<R: Rng + ?Sized>(rng: &mut R) -> [f64; 4] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    [
        b * (2.0 * PI * u3).cos(),
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
    ]
}

/// Generator for particle `index`, independent of evaluation order.
pub fn particle_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

struct Particle {
    image: Image<f64>,
    pose: Pose<f64>,
    ctf: CtfParams,
    label: usize,
}

/// Noiseless render of `model` plus white noise of variance `mean(x^2) / snr`.
fn simulate_particle(
    spec: &ToySpec,
    structure: &ToyStructure,
    index: usize,
    settings: &RenderSettings<f64>,
) -> Result<Particle> {
    let mut rng = particle_rng(spec.seed, index);
    let label = rng.random_range(0..structure.conformations.len());
    let q = uniform_quaternion(&mut rng);
    let shift = if spec.max_shift > 0.0 {
        [
            rng.random_range(-spec.max_shift..=spec.max_shift),
            rng.random_range(-spec.max_shift..=spec.max_shift),
        ]
    } else {
        [0.0, 0.0]
    };
    let pose = Pose::from_quaternion(q, shift)?;
    let defocus = if spec.defocus_max > spec.defocus_min {
        rng.random_range(spec.defocus_min..spec.defocus_max)
    } else {
        spec.defocus_min
    };
    let ctf = CtfParams {
        enabled: spec.ctf_enabled,
        defocus_u_a: defocus,
        defocus_v_a: defocus,
        ..CtfParams::default()
    };
    let model = &structure.conformations[label];
    let grid = if ctf.enabled {
        Some(CtfGrid::new(&ctf, spec.box_size, spec.box_size, spec.pixel_size)?)
    } else {
        None
    };
    let zero = Deformation::zeros(model.len());
    let mut image = render_with(model, &zero, &pose, grid.as_ref(), settings)?;
    let power = image.data.iter().map(|v| v * v).sum::<f64>() / image.data.len() as f64;
    let sigma = (power / spec.snr).sqrt();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
        for v in image.data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(Particle {
        image,
        pose,
        ctf,
        label,
    })
}

/// Renders every particle and every ground-truth volume.
pub fn simulate_dataset(spec: &ToySpec, structure: &ToyStructure) -> Result<SimulatedData> {
    spec.validate()?;
    let settings = RenderSettings::default();
    let particles = (0..spec.n_particles)
        .into_par_iter()
        .map(|i| simulate_particle(spec, structure, i, &settings))
        .collect::<Result<Vec<_>>>()?;
    let gt_volumes = structure
        .conformations
        .par_iter()
        .map(|m| render_volume(m, &Deformation::zeros(m.len()), &settings))
        .collect::<Result<Vec<_>>>()?;
    let mut data = SimulatedData {
        images: Vec::with_capacity(particles.len()),
        poses: Vec::with_capacity(particles.len()),
        ctfs: Vec::with_capacity(particles.len()),
        labels: Vec::with_capacity(particles.len()),
        angles: None,
        gt_volumes,
    };
    for p in particles {
        data.images.push(p.image);
        data.poses.push(p.pose);
        data.ctfs.push(p.ctf);
        data.labels.push(p.label);
    }
    if spec.kind == MotionKind::Dihedral1d {
        data.angles = Some(data.labels.iter().map(|&l| structure.angles[l]).collect());
    }
    Ok(data)
}

/// Gaussians on a lattice of spacing `interval` wherever `volume >= contour`.
///
/// Scales are `interval / 2`; densities start at the voxel values and are
/// rescaled so the rendered model matches the source mean inside the contour.
pub fn init_gaussians_from_volume(volume: &Volume<f64>, contour: f64, interval: usize) -> Result<GaussianModel<f64>> {
    if !contour.is_finite() {
        return Err(Error::input("contour level must be finite"));
    }
    if interval == 0 {
        return Err(Error::input("sampling interval must be >= 1"));
    }
    let n = volume.size;
    let start = (n / 2) % interval;
    let scale = interval as f64 / 2.0;
    let mut gs = Vec::new();
    for z in (start..n).step_by(interval) {
        for y in (start..n).step_by(interval) {
            for x in (start..n).step_by(interval) {
                let v = volume.get(x, y, z);
                if v >= contour && v > 0.0 {
                    gs.push(Gaussian {
                        density: v,
                        scale,
                        position: [volume.coord(x), volume.coord(y), volume.coord(z)],
                    });
                }
            }
        }
    }
    if gs.is_empty() {
        let peak = volume.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::input(format!(
            "no positive voxel reaches contour {contour}; try a level below the maximum {peak}"
        )));
    }
    let model = GaussianModel::new(gs, n, volume.pixel_size)?;
    let rendered = render_volume(&model, &Deformation::zeros(model.len()), &RenderSettings::default())?;
    let (mut src, mut ren, mut count) = (0.0, 0.0, 0usize);
    for (s, r) in volume.data.iter().zip(&rendered.data) {
        if *s >= contour {
            src += s;
            ren += r;
            count += 1;
        }
    }
    if count == 0 || ren <= 0.0 {
        return Ok(model);
    }
    let k = src / ren;
    let gs = model
        .gaussians()
        .iter()
        .map(|g| Gaussian {
            density: g.density * k,
            ..*g
        })
        .collect();
    GaussianModel::new(gs, n, volume.pixel_size)
}

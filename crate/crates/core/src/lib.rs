//! Heterogeneous cryo-EM reconstruction with deformable isotropic 3D Gaussians.
//!
//! A consensus structure is represented by a set of Gaussians. A dual-encoder,
//! single-decoder network maps each particle image to per-Gaussian parameter
//! changes, which are rendered (rotate, project along z, splat, CTF) and
//! compared with the observed image. The crate also provides the evaluation
//! metrics (FSC family, captured variance), synthetic data generation and the
//! file formats used by the `gaussem` command line tool.
//!
//! The renderer, optics, network and loss modules are generic over [`Real`]
//! (`f32` or `f64`); analysis, data generation, training and file I/O work in
//! `f64`. Concrete aliases for both precisions are exported below.

pub mod analysis;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod net;
pub mod objective;
pub mod optics;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{
    Deformation, Gaussian, Gaussian2D, GaussianModel, Image, Pose, RenderSettings, Volume,
};
pub use optics::{CtfGrid, CtfParams};
pub use scalar::Real;

pub type GaussianModel64 = GaussianModel<f64>;
pub type GaussianModel32 = GaussianModel<f32>;
pub type Image64 = Image<f64>;
pub type Image32 = Image<f32>;
pub type Volume64 = Volume<f64>;
pub type Volume32 = Volume<f32>;
pub type Pose64 = Pose<f64>;
pub type Pose32 = Pose<f32>;
pub type Deformation64 = Deformation<f64>;
pub type Deformation32 = Deformation<f32>;
pub type NetworkState64 = net::NetworkState<f64>;
pub type NetworkState32 = net::NetworkState<f32>;

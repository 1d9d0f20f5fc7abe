//! Neighbor graphs and the training loss terms with their gradients.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dist2, Deformation, GaussianModel, Image};
use crate::scalar::Real;

/// Displacements shorter than this have no defined direction.
pub const DIRECTION_EPS: f64 = 1e-6;

/// Undirected edge between Gaussians `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge<T> {
    pub a: usize,
    pub b: usize,
    /// `exp(-lambda_omega * distance^2)`
    pub weight: T,
    /// Consensus distance in voxels.
    pub distance: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph<T> {
    pub edges: Vec<Edge<T>>,
    pub radius: T,
    pub nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_emb: f64,
    pub lambda_geo1: f64,
    pub lambda_geo2: f64,
    /// Edge weight decay in 1/voxel^2.
    pub lambda_omega: f64,
    pub kl_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_emb: 1e-3,
            lambda_geo1: 1.0,
            lambda_geo2: 0.1,
            lambda_omega: 0.1,
            kl_weight: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_emb: 0.0,
            lambda_geo1: 0.0,
            lambda_geo2: 0.0,
            lambda_omega: 0.0,
            kl_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_emb,
            self.lambda_geo1,
            self.lambda_geo2,
            self.lambda_omega,
            self.kl_weight,
        ];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

fn brute_nearest<T: Real>(points: &[[T; 3]], i: usize) -> T {
    points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, q)| dist2(points[i], *q))
        .fold(T::infinity(), T::min)
        .sqrt()
}

/// Mean distance from each point to its nearest other point.
pub fn mean_nn_distance_points<T: Real>(points: &[[T; 3]]) -> Result<T> {
    if points.len() < 2 {
        return Err(Error::input("need at least two Gaussians for a nearest-neighbor distance"));
    }
    let total: T = (0..points.len())
        .into_par_iter()
        .map(|i| brute_nearest(points, i))
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    Ok(total / T::lit(points.len() as f64))
}

/// Mean nearest-neighbor distance of the model's Gaussians (voxels).
pub fn mean_nn_distance<T: Real>(model: &GaussianModel<T>) -> Result<T> {
    mean_nn_distance_points(&model.positions())
}

type Cell = (i64, i64, i64);

fn cell_of<T: Real>(p: [T; 3], size: T) -> Cell {
    let c = |v: T| (v / size).floor().to_i64().unwrap_or(0);
    (c(p[0]), c(p[1]), c(p[2]))
}

/// All unordered pairs of points within `mu` of each other.
pub fn build_neighbor_graph_points<T: Real>(points: &[[T; 3]], mu: T, lambda_omega: T) -> Result<NeighborGraph<T>> {
    if !(mu > T::zero() && mu.is_finite()) {
        return Err(Error::config("neighbor radius must be > 0"));
    }
    if !(lambda_omega >= T::zero()) {
        return Err(Error::config("lambda_omega must be >= 0"));
    }
    let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(cell_of(*p, mu)).or_default().push(i);
    }
    let mu2 = mu * mu;
    let mut edges = Vec::new();
    for (a, p) in points.iter().enumerate() {
        let (cx, cy, cz) = cell_of(*p, mu);
        let mut found = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        found.extend(list.iter().copied().filter(|&b| b > a));
                    }
                }
            }
        }
        found.sort_unstable();
        for b in found {
            let d2 = dist2(*p, points[b]);
            if d2 <= mu2 {
                edges.push(Edge {
                    a,
                    b,
                    weight: (-lambda_omega * d2).exp(),
                    distance: d2.sqrt(),
                });
            }
        }
    }
    Ok(NeighborGraph {
        edges,
        radius: mu,
        nodes: points.len(),
    })
}

/// Neighbor graph over the consensus Gaussians.
pub fn build_neighbor_graph<T: Real>(model: &GaussianModel<T>, mu: T, lambda_omega: T) -> Result<NeighborGraph<T>> {
    build_neighbor_graph_points(&model.positions(), mu, lambda_omega)
}

fn check_nodes<T>(graph: &NeighborGraph<T>, n: usize, what: &str) -> Result<()> {
    if graph.nodes != n {
        return Err(Error::input(format!("{what} has {n} entries, graph has {} nodes", graph.nodes)));
    }
    Ok(())
}

/// Sum of absolute pixel differences and its subgradient (0 at ties).
pub fn loss_rec<T: Real>(rendered: &Image<T>, observed: &Image<T>) -> Result<(T, Image<T>)> {
    if !rendered.same_shape(observed) {
        return Err(Error::input(format!(
            "rendered {}x{} vs observed {}x{}",
            rendered.height, rendered.width, observed.height, observed.width
        )));
    }
    let mut grad = Image::zeros(rendered.height, rendered.width, rendered.pixel_size);
    let mut total = T::zero();
    for ((g, r), o) in grad.data.iter_mut().zip(&rendered.data).zip(&observed.data) {
        let d = *r - *o;
        total += d.abs();
        *g = if d > T::zero() {
            T::one()
        } else if d < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
    }
    Ok((total, grad))
}

/// `sum_edges w * |j_a - j_b|^2` over embeddings stored one per row.
pub fn loss_emb<T: Real>(embeddings: ArrayView2<T>, graph: &NeighborGraph<T>) -> Result<(T, Array2<T>)> {
    check_nodes(graph, embeddings.nrows(), "embedding matrix")?;
    let mut grad = Array2::zeros(embeddings.raw_dim());
    let mut total = T::zero();
    let two = T::lit(2.0);
    for e in &graph.edges {
        let (ra, rb) = (embeddings.row(e.a), embeddings.row(e.b));
        for k in 0..embeddings.ncols() {
            let d = ra[k] - rb[k];
            total += e.weight * d * d;
            grad[[e.a, k]] += two * e.weight * d;
            grad[[e.b, k]] -= two * e.weight * d;
        }
    }
    Ok((total, grad))
}

/// `sum_edges w * (|q_a - q_b| - d_ab)^2` with `d_ab` the consensus distance.
pub fn loss_geo1<T: Real>(deformed: &[[T; 3]], graph: &NeighborGraph<T>) -> Result<(T, Vec<[T; 3]>)> {
    check_nodes(graph, deformed.len(), "position list")?;
    let mut grad = vec![[T::zero(); 3]; deformed.len()];
    let mut total = T::zero();
    let two = T::lit(2.0);
    for e in &graph.edges {
        let (qa, qb) = (deformed[e.a], deformed[e.b]);
        let dh = dist2(qa, qb).sqrt();
        let r = dh - e.distance;
        total += e.weight * r * r;
        if dh > T::zero() {
            let c = two * e.weight * r / dh;
            for k in 0..3 {
                let g = c * (qa[k] - qb[k]);
                grad[e.a][k] += g;
                grad[e.b][k] -= g;
            }
        }
    }
    Ok((total, grad))
}

fn norm<T: Real>(v: [T; 3]) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `sum_edges w * (1 - cos(v_a, v_b))`, skipping pairs with a near-zero vector.
pub fn loss_geo2<T: Real>(displacements: &[[T; 3]], graph: &NeighborGraph<T>) -> Result<(T, Vec<[T; 3]>)> {
    check_nodes(graph, displacements.len(), "displacement list")?;
    let eps = T::lit(DIRECTION_EPS);
    let mut grad = vec![[T::zero(); 3]; displacements.len()];
    let mut total = T::zero();
    for e in &graph.edges {
        let (va, vb) = (displacements[e.a], displacements[e.b]);
        let (na, nb) = (norm(va), norm(vb));
        if na < eps || nb < eps {
            continue;
        }
        let dot = va[0] * vb[0] + va[1] * vb[1] + va[2] * vb[2];
        let cos = dot / (na * nb);
        total += e.weight * (T::one() - cos);
        for k in 0..3 {
            let dca = vb[k] / (na * nb) - cos * va[k] / (na * na);
            let dcb = va[k] / (na * nb) - cos * vb[k] / (nb * nb);
            grad[e.a][k] -= e.weight * dca;
            grad[e.b][k] -= e.weight * dcb;
        }
    }
    Ok((total, grad))
}

/// `1/2 sum(mu^2 + exp(lv) - lv - 1)` with gradients w.r.t. mean and log variance.
pub fn kl_divergence<T: Real>(mean: ArrayView2<T>, log_variance: ArrayView2<T>) -> Result<(T, Array2<T>, Array2<T>)> {
    if mean.dim() != log_variance.dim() {
        return Err(Error::input("mean and log variance shapes differ"));
    }
    let half = T::lit(0.5);
    let mut total = T::zero();
    let mut g_lv = Array2::zeros(log_variance.raw_dim());
    for ((m, lv), g) in mean.iter().zip(log_variance.iter()).zip(g_lv.iter_mut()) {
        let ev = lv.exp();
        total += half * (*m * *m + ev - *lv - T::one());
        *g = half * (ev - T::one());
    }
    Ok((total, mean.to_owned(), g_lv))
}

/// Graphs over the consensus model: `mu1` for embedding and direction
/// terms, `mu2` for distance preservation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGraphs<T> {
    pub mu1: NeighborGraph<T>,
    pub mu2: NeighborGraph<T>,
}

impl<T: Real> LossGraphs<T> {
    /// Radii `2.5 * d_mean` and `1.5 * d_mean`.
    pub fn for_model(model: &GaussianModel<T>, lambda_omega: f64) -> Result<Self> {
        let lw = T::lit(lambda_omega);
        if model.len() < 2 {
            let empty = NeighborGraph {
                edges: Vec::new(),
                radius: T::one(),
                nodes: model.len(),
            };
            return Ok(LossGraphs {
                mu1: empty.clone(),
                mu2: empty,
            });
        }
        let dm = mean_nn_distance(model)?;
        Ok(LossGraphs {
            mu1: build_neighbor_graph(model, T::lit(2.5) * dm, lw)?,
            mu2: build_neighbor_graph(model, T::lit(1.5) * dm, lw)?,
        })
    }
}

/// Per-term loss values (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub emb: f64,
    pub geo1: f64,
    pub geo2: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn add(&mut self, other: &LossTerms) {
        self.rec += other.rec;
        self.emb += other.emb;
        self.geo1 += other.geo1;
        self.geo2 += other.geo2;
        self.kl += other.kl;
        self.total += other.total;
    }

    /// Name of the first non-finite term.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("rec", self.rec),
            ("emb", self.emb),
            ("geo1", self.geo1),
            ("geo2", self.geo2),
            ("kl", self.kl),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Everything the loss needs for one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a, T> {
    pub rendered: &'a [Image<T>],
    pub observed: &'a [&'a Image<T>],
    pub deformations: &'a [Deformation<T>],
    pub consensus: &'a GaussianModel<T>,
    pub embeddings: ArrayView2<'a, T>,
    /// Latent means and log variances; the KL term is skipped when absent.
    pub latent: Option<(ArrayView2<'a, T>, ArrayView2<'a, T>)>,
}

/// Gradients of the weighted total loss.
#[derive(Debug, Clone)]
pub struct LossGradients<T> {
    /// `dL/d rendered image` per particle.
    pub images: Vec<Image<T>>,
    /// Geometric-term gradients w.r.t. each deformation (rendering path excluded).
    pub deformations: Vec<Deformation<T>>,
    pub embeddings: Array2<T>,
    pub mean: Option<Array2<T>>,
    pub log_variance: Option<Array2<T>>,
}

struct ParticleLoss<T> {
    rec: T,
    geo1: T,
    geo2: T,
    image: Image<T>,
    deformation: Deformation<T>,
}

/// `L_rec + l_emb L_emb + l_geo1 L_geo1 + l_geo2 L_geo2 + beta KL` summed over the batch.
pub fn total_loss<T: Real>(
    inputs: &LossInputs<'_, T>,
    graphs: &LossGraphs<T>,
    weights: &LossWeights,
) -> Result<(LossTerms, LossGradients<T>)> {
    weights.validate()?;
    let b = inputs.rendered.len();
    if inputs.observed.len() != b || inputs.deformations.len() != b {
        return Err(Error::input("rendered, observed and deformation counts differ"));
    }
    let consensus = inputs.consensus;
    let n = consensus.len();
    let (w1, w2) = (T::lit(weights.lambda_geo1), T::lit(weights.lambda_geo2));

    let per: Vec<ParticleLoss<T>> = (0..b)
        .into_par_iter()
        .map(|k| -> Result<ParticleLoss<T>> {
            let (rec, image) = loss_rec(&inputs.rendered[k], inputs.observed[k])?;
            let def = &inputs.deformations[k];
            if def.len() != n {
                return Err(Error::input("deformation length differs from the model"));
            }
            let mut deformation = Deformation::zeros(n);
            let (mut geo1, mut geo2) = (T::zero(), T::zero());
            if weights.lambda_geo1 > 0.0 {
                let deformed: Vec<[T; 3]> = consensus
                    .gaussians()
                    .iter()
                    .zip(&def.delta_position)
                    .map(|(g, d)| [g.position[0] + d[0], g.position[1] + d[1], g.position[2] + d[2]])
                    .collect();
                let (v, g) = loss_geo1(&deformed, &graphs.mu2)?;
                geo1 = v;
                for (acc, gi) in deformation.delta_position.iter_mut().zip(g) {
                    for a in 0..3 {
                        acc[a] += w1 * gi[a];
                    }
                }
            }
            if weights.lambda_geo2 > 0.0 {
                let (v, g) = loss_geo2(&def.delta_position, &graphs.mu1)?;
                geo2 = v;
                for (acc, gi) in deformation.delta_position.iter_mut().zip(g) {
                    for a in 0..3 {
                        acc[a] += w2 * gi[a];
                    }
                }
            }
            Ok(ParticleLoss {
                rec,
                geo1,
                geo2,
                image,
                deformation,
            })
        })
        .collect::<Result<_>>()?;

    let mut terms = LossTerms::default();
    let mut images = Vec::with_capacity(b);
    let mut deformations = Vec::with_capacity(b);
    for p in per {
        terms.rec += p.rec.as_f64();
        terms.geo1 += p.geo1.as_f64();
        terms.geo2 += p.geo2.as_f64();
        images.push(p.image);
        deformations.push(p.deformation);
    }

    let (emb, mut g_emb) = if weights.lambda_emb > 0.0 {
        loss_emb(inputs.embeddings, &graphs.mu1)?
    } else {
        (T::zero(), Array2::zeros(inputs.embeddings.raw_dim()))
    };
    g_emb.mapv_inplace(|v| v * T::lit(weights.lambda_emb));
    terms.emb = emb.as_f64();

    let (mut g_mean, mut g_lv) = (None, None);
    if let Some((mean, lv)) = inputs.latent {
        let (kl, gm, gl) = kl_divergence(mean, lv)?;
        terms.kl = kl.as_f64();
        let beta = T::lit(weights.kl_weight);
        g_mean = Some(gm.mapv(|v| v * beta));
        g_lv = Some(gl.mapv(|v| v * beta));
    }

    terms.total = terms.rec
        + weights.lambda_emb * terms.emb
        + weights.lambda_geo1 * terms.geo1
        + weights.lambda_geo2 * terms.geo2
        + weights.kl_weight * terms.kl;
    Ok((
        terms,
        LossGradients {
            images,
            deformations,
            embeddings: g_emb,
            mean: g_mean,
            log_variance: g_lv,
        },
    ))
}

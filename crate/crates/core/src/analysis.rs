//! Latent-space analysis and quantitative metrics.

use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{dist2, render_volume, Deformation, GaussianModel, Image, Pose, RenderSettings, Volume};
use crate::net::{ChannelFlags, NetworkState};
use crate::optics::{ctf_evaluate, freq_index, CtfParams};

/// Smallest cluster that [`cluster_fsc`] reconstructs.
pub const MIN_CLUSTER_IMAGES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
}

impl ClusterResult {
    pub fn sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.centers.len()];
        for &a in &self.assignments {
            n[a] += 1;
        }
        n
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::input("points differ in dimension"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::input("points must be finite"));
    }
    Ok(dim)
}

fn nearest_center(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations (at most 300).
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterResult> {
    let dim = check_points(points)?;
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::input(format!("k = {k} must lie in [1, {n}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if t < *w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            // all remaining points coincide with a center
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().expect("nonempty")));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..300 {
        let next: Vec<usize> = points.par_iter().map(|p| nearest_center(p, &centers).0).collect();
        let changed = next != assign;
        assign = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &centers[assign[i]]);
                        let dj = sq_dist(&points[j], &centers[assign[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .expect("nonempty");
                centers[c] = points[far].clone();
            }
        }
        if !changed {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest_center(p, &centers);
        assign[i] = c;
        inertia += d;
    }
    Ok(ClusterResult {
        assignments: assign,
        centers,
        inertia,
    })
}

/// Principal axes of a sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// Orthonormal components, one per row, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub mean: Vec<f64>,
}

impl Pca {
    /// Coordinates of `x` along the first `k` components.
    pub fn project(&self, x: &[f64], k: usize) -> Vec<f64> {
        self.components
            .iter()
            .take(k)
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, w) in self.components.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        out
    }
}

/// Mean-centered SVD of `samples` (one sample per entry).
pub fn pca(samples: &[Vec<f64>]) -> Result<Pca> {
    let dim = check_points(samples)?;
    let n = samples.len();
    if n < 2 {
        return Err(Error::input("PCA needs at least two samples"));
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, dim, |r, c| samples[r][c] - mean[c]);
    // eigen-decomposition of the dim x dim scatter matrix gives a full orthonormal basis
    let scatter = x.transpose() * &x;
    let eig = SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let components = order
        .iter()
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // sign convention: largest-magnitude entry positive
            let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if big < 0.0 {
                v.iter_mut().for_each(|e| *e = -*e);
            }
            v
        })
        .collect();
    let variances = order
        .iter()
        .map(|&k| eig.eigenvalues[k].max(0.0) / (n - 1) as f64)
        .collect();
    Ok(Pca {
        components,
        variances,
        mean,
    })
}

/// Angle of each point in the plane of the first two principal components.
pub fn pca_angles(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = pca(samples)?;
    if p.components.len() < 2 {
        return Err(Error::input("angular coordinate needs at least two latent dimensions"));
    }
    Ok(samples
        .iter()
        .map(|s| {
            let c = p.project(s, 2);
            c[1].atan2(c[0])
        })
        .collect())
}

fn circular_ranks(angles: &[f64]) -> Vec<f64> {
    let n = angles.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| angles[a].rem_euclid(2.0 * PI).total_cmp(&angles[b].rem_euclid(2.0 * PI)));
    let mut beta = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        beta[i] = 2.0 * PI * (rank + 1) as f64 / n as f64;
    }
    beta
}

/// Rank-based circular association in `[0, 1]`, invariant to a phase offset
/// and to reflection of either variable: the larger of
/// `|mean exp(i(b_x - b_y))|` and `|mean exp(i(b_x + b_y))|` where `b` are
/// uniform-score circular ranks.
pub fn circular_rank_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::input("need two equally long angle lists with >= 2 entries"));
    }
    let (bx, by) = (circular_ranks(x), circular_ranks(y));
    let n = x.len() as f64;
    let resultant = |sign: f64| {
        let (mut c, mut s) = (0.0, 0.0);
        for (a, b) in bx.iter().zip(&by) {
            let d = a - sign * b;
            c += d.cos();
            s += d.sin();
        }
        (c * c + s * s).sqrt() / n
    };
    Ok(resultant(1.0).max(resultant(-1.0)))
}

/// Decodes latent `z` into a volume on the consensus grid.
pub fn decode_volume_at(
    net: &NetworkState<f64>,
    z: &[f64],
    model: &GaussianModel<f64>,
    flags: ChannelFlags,
    settings: &RenderSettings<f64>,
) -> Result<Volume<f64>> {
    let emb = net.gaussian_encode(model)?;
    let def = net.decode_deformation(z, &emb, flags, model.box_size())?;
    render_volume(model, &def, settings)
}

/// Per-shell Fourier correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct FscCurve {
    pub shells: Vec<usize>,
    pub correlations: Vec<f64>,
}

struct Fft3 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft3 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft3 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    /// Unnormalized in-place transform of an `n^3` grid (x fastest).
    fn run(&self, data: &mut [Complex<f64>], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(data);
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for z in 0..n {
            for x in 0..n {
                for y in 0..n {
                    line[y] = data[(z * n + y) * n + x];
                }
                plan.process(&mut line);
                for y in 0..n {
                    data[(z * n + y) * n + x] = line[y];
                }
            }
        }
        for y in 0..n {
            for x in 0..n {
                for z in 0..n {
                    line[z] = data[(z * n + y) * n + x];
                }
                plan.process(&mut line);
                for z in 0..n {
                    data[(z * n + y) * n + x] = line[z];
                }
            }
        }
    }
}

fn spectrum3(v: &Volume<f64>) -> Vec<Complex<f64>> {
    let mut data: Vec<Complex<f64>> = v.data.iter().map(|x| Complex::new(*x, 0.0)).collect();
    Fft3::new(v.size).run(&mut data, false);
    data
}

/// Fourier shell correlation on unit-width integer shells `0 .. D/2`.
pub fn fsc(a: &Volume<f64>, b: &Volume<f64>) -> Result<FscCurve> {
    if a.size != b.size {
        return Err(Error::input(format!("volume sizes differ: {} vs {}", a.size, b.size)));
    }
    let n = a.size;
    let shells = n / 2;
    if shells == 0 {
        return Err(Error::input("volumes must be at least 2 voxels wide"));
    }
    let (fa, fb) = rayon::join(|| spectrum3(a), || spectrum3(b));
    let mut cross = vec![0.0; shells];
    let mut pa = vec![0.0; shells];
    let mut pb = vec![0.0; shells];
    for z in 0..n {
        let kz = freq_index(z, n) as f64;
        for y in 0..n {
            let ky = freq_index(y, n) as f64;
            for x in 0..n {
                let kx = freq_index(x, n) as f64;
                let r = (kx * kx + ky * ky + kz * kz).sqrt().round() as usize;
                if r >= shells {
                    continue;
                }
                let i = (z * n + y) * n + x;
                cross[r] += (fa[i] * fb[i].conj()).re;
                pa[r] += fa[i].norm_sqr();
                pb[r] += fb[i].norm_sqr();
            }
        }
    }
    let correlations = (0..shells)
        .map(|r| {
            let den = (pa[r] * pb[r]).sqrt();
            if den > 0.0 {
                (cross[r] / den).clamp(-1.0, 1.0)
            } else if pa[r] == 0.0 && pb[r] == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(FscCurve {
        shells: (0..shells).collect(),
        correlations,
    })
}

/// Trapezoidal area under the curve over normalized frequency `[0, 1]`.
pub fn fsc_auc(curve: &FscCurve) -> Result<f64> {
    let c = &curve.correlations;
    match c.len() {
        0 => Err(Error::input("empty FSC curve")),
        1 => Ok(c[0]),
        m => {
            let area: f64 = c.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
            Ok(area / (m - 1) as f64)
        }
    }
}

/// Principal subspace of an ensemble of flattened volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleBasis {
    /// Orthonormal eigenvectors, each of the flattened volume length.
    pub vectors: Vec<Vec<f64>>,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
}

impl EnsembleBasis {
    /// Builds a basis from explicit vectors; checks orthonormality and order.
    pub fn new(vectors: Vec<Vec<f64>>, eigenvalues: Vec<f64>) -> Result<Self> {
        if vectors.len() != eigenvalues.len() || vectors.is_empty() {
            return Err(Error::input("need one eigenvalue per basis vector"));
        }
        let dim = vectors[0].len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::input("basis vectors differ in length"));
        }
        for (i, a) in vectors.iter().enumerate() {
            for (j, b) in vectors.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() > 1e-8 {
                    return Err(Error::input("basis vectors are not orthonormal"));
                }
            }
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) || eigenvalues.iter().any(|s| *s < 0.0) {
            return Err(Error::input("eigenvalues must be non-negative and descending"));
        }
        Ok(EnsembleBasis {
            vectors,
            eigenvalues,
            mean: vec![0.0; dim],
        })
    }

    pub fn rank(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Top-`rank` covariance eigenvectors of the volumes, via the `n x n` Gram matrix.
pub fn ensemble_basis(volumes: &[Vec<f64>], rank: usize) -> Result<EnsembleBasis> {
    let n = volumes.len();
    if n < 2 {
        return Err(Error::input("ensemble basis needs at least two volumes"));
    }
    let dim = check_points(volumes)?;
    if rank == 0 {
        return Err(Error::input("rank must be >= 1"));
    }
    let mut mean = vec![0.0; dim];
    for v in volumes {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = volumes
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>()
    });
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-12 * n as f64;
    let available: Vec<usize> = order.into_iter().filter(|&k| eig.eigenvalues[k] > tol && top > 0.0).collect();
    if rank > available.len() {
        warn!("requested rank {rank}, only {} components available", available.len());
    }
    let mut vectors = Vec::new();
    let mut eigenvalues = Vec::new();
    for &k in available.iter().take(rank) {
        let lambda = eig.eigenvalues[k];
        let sigma = lambda.sqrt();
        let u = eig.eigenvectors.column(k);
        let mut v = vec![0.0; dim];
        for (i, row) in centered.iter().enumerate() {
            let w = u[i] / sigma;
            for (o, x) in v.iter_mut().zip(row) {
                *o += w * x;
            }
        }
        let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if big < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        vectors.push(v);
        eigenvalues.push(lambda / (n - 1) as f64);
    }
    Ok(EnsembleBasis {
        vectors,
        eigenvalues,
        mean,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fraction of the reference ensemble's variance captured by the test subspace:
/// `|V_B^T V_A S_A|_F^2 / |V_A^T V_A S_A|_F^2`.
pub fn pcv(reference: &EnsembleBasis, test: &EnsembleBasis) -> Result<f64> {
    let dim = reference.vectors.first().map_or(0, Vec::len);
    if test.vectors.iter().chain(&reference.vectors).any(|v| v.len() != dim) {
        return Err(Error::input("bases span different volume spaces"));
    }
    let weighted = |basis: &EnsembleBasis| -> f64 {
        let mut total = 0.0;
        for (a, s) in reference.vectors.iter().zip(&reference.eigenvalues) {
            for b in &basis.vectors {
                let p = dot(b, a) * s;
                total += p * p;
            }
        }
        total
    };
    let num = weighted(test);
    let den = weighted(reference);
    let simplified: f64 = reference.eigenvalues.iter().map(|s| s * s).sum();
    if (den - simplified).abs() > 1e-6 * simplified.max(f64::MIN_POSITIVE) {
        warn!("reference basis is not orthonormal: {den} vs {simplified}");
    }
    if den <= 0.0 {
        return Err(Error::input("reference ensemble has no variance"));
    }
    Ok(num / den)
}

/// Best FSC area of `volume` against any of `gt`.
pub fn best_fsc_auc(volume: &Volume<f64>, gt: &[Volume<f64>]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::input("no ground-truth volumes"));
    }
    let scores = gt
        .par_iter()
        .map(|g| fsc(volume, g).and_then(|c| fsc_auc(&c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// k-means on the latents, decode each center and keep its best GT score.
#[allow(clippy::too_many_arguments)]
pub fn sample_fsc(
    net: &NetworkState<f64>,
    model: &GaussianModel<f64>,
    latents: &[Vec<f64>],
    k: usize,
    seed: u64,
    gt: &[Volume<f64>],
    flags: ChannelFlags,
    settings: &RenderSettings<f64>,
) -> Result<Vec<f64>> {
    if gt.is_empty() {
        return Err(Error::input("no ground-truth volumes"));
    }
    let clusters = kmeans(latents, k, seed)?;
    clusters
        .centers
        .iter()
        .map(|c| {
            let v = decode_volume_at(net, c, model, flags, settings)?;
            best_fsc_auc(&v, gt)
        })
        .collect()
}

const BACKPROJECT_CHUNKS: usize = 8;

struct Accumulator {
    num: Vec<Complex<f64>>,
    den: Vec<f64>,
}

/// Direct Fourier inversion with CTF (Wiener-style) weighting.
///
/// Each image spectrum is inserted as a central slice by trilinear gridding;
/// `V = sum(CTF * S) / (sum(CTF^2) + 0.01 max(sum(CTF^2)))`.
pub fn backproject(images: &[Image<f64>], poses: &[Pose<f64>], ctfs: &[CtfParams]) -> Result<Volume<f64>> {
    let first = images.first().ok_or_else(|| Error::input("no images to back-project"))?;
    if poses.len() != images.len() || ctfs.len() != images.len() {
        return Err(Error::input("images, poses and CTFs differ in count"));
    }
    let n = first.height;
    if first.width != n || !n.is_power_of_two() {
        return Err(Error::config("back-projection needs square power-of-two images"));
    }
    if images.iter().any(|i| !i.same_shape(first)) {
        return Err(Error::input("images differ in shape"));
    }
    let px = first.pixel_size;
    let fft = crate::optics::Fft2::<f64>::new(n, n)?;
    let nf = n as f64;
    let half = nf / 2.0;
    let scale = nf; // undo the unitary 2D normalization

    let chunk = images.len().div_ceil(BACKPROJECT_CHUNKS);
    let parts: Vec<Accumulator> = images
        .par_chunks(chunk)
        .zip(poses.par_chunks(chunk))
        .zip(ctfs.par_chunks(chunk))
        .map(|((imgs, poses), ctfs)| -> Result<Accumulator> {
            let mut acc = Accumulator {
                num: vec![Complex::new(0.0, 0.0); n * n * n],
                den: vec![0.0; n * n * n],
            };
            for ((img, pose), ctf) in imgs.iter().zip(poses).zip(ctfs) {
                let spec = fft.forward(img)?;
                let ctf_vals: Option<Vec<f64>> = if ctf.enabled {
                    Some(ctf_evaluate(ctf, n, n, px)?)
                } else {
                    None
                };
                let r = pose.rotation;
                for row in 0..n {
                    let ky = freq_index(row, n) as f64;
                    for col in 0..n {
                        let kx = freq_index(col, n) as f64;
                        if kx * kx + ky * ky >= half * half {
                            continue;
                        }
                        let i = row * n + col;
                        // centre the origin and undo the in-plane shift
                        let phase = PI * (kx + ky) + 2.0 * PI * (kx * pose.shift[0] + ky * pose.shift[1]) / nf;
                        let s = spec.data[i] * scale * Complex::from_polar(1.0, phase);
                        let c = ctf_vals.as_ref().map_or(1.0, |v| v[i]);
                        let k = [
                            r[0][0] * kx + r[0][1] * ky,
                            r[1][0] * kx + r[1][1] * ky,
                            r[2][0] * kx + r[2][1] * ky,
                        ];
                        splat_trilinear(&mut acc, n, k, s * c, c * c);
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut total = Accumulator {
        num: vec![Complex::new(0.0, 0.0); n * n * n],
        den: vec![0.0; n * n * n],
    };
    for p in parts {
        for (t, v) in total.num.iter_mut().zip(&p.num) {
            *t += v;
        }
        for (t, v) in total.den.iter_mut().zip(&p.den) {
            *t += v;
        }
    }
    let eps = 0.01 * total.den.iter().copied().fold(0.0, f64::max);
    let mut grid: Vec<Complex<f64>> = total
        .num
        .iter()
        .zip(&total.den)
        .map(|(s, d)| if *d + eps > 0.0 { s / (d + eps) } else { Complex::new(0.0, 0.0) })
        .collect();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let parity = freq_index(x, n) + freq_index(y, n) + freq_index(z, n);
                if parity.rem_euclid(2) == 1 {
                    let i = (z * n + y) * n + x;
                    grid[i] = -grid[i];
                }
            }
        }
    }
    Fft3::new(n).run(&mut grid, true);
    let norm = (n * n * n) as f64;
    Volume::from_vec(n, px, grid.iter().map(|c| c.re / norm).collect())
}

fn splat_trilinear(acc: &mut Accumulator, n: usize, k: [f64; 3], value: Complex<f64>, weight: f64) {
    let base = k.map(f64::floor);
    let frac = [k[0] - base[0], k[1] - base[1], k[2] - base[2]];
    let wrap = |v: f64| (v as i64).rem_euclid(n as i64) as usize;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        let z = wrap(base[2] + dz as f64);
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            let y = wrap(base[1] + dy as f64);
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                let w = wx * wy * wz;
                if w == 0.0 {
                    continue;
                }
                let i = (z * n + y) * n + wrap(base[0] + dx as f64);
                acc.num[i] += value * w;
                acc.den[i] += weight * w;
            }
        }
    }
}

/// k-means on the latents, back-project each cluster's images and keep the
/// best GT score. Clusters with fewer than [`MIN_CLUSTER_IMAGES`] images are
/// reported as `None`.
#[allow(clippy::too_many_arguments)]
pub fn cluster_fsc(
    images: &[Image<f64>],
    poses: &[Pose<f64>],
    ctfs: &[CtfParams],
    latents: &[Vec<f64>],
    k: usize,
    seed: u64,
    gt: &[Volume<f64>],
) -> Result<Vec<Option<f64>>> {
    if gt.is_empty() {
        return Err(Error::input("no ground-truth volumes"));
    }
    if latents.len() != images.len() {
        return Err(Error::input("one latent per image required"));
    }
    let clusters = kmeans(latents, k, seed)?;
    cluster_volumes(images, poses, ctfs, &clusters.assignments, k)?
        .into_iter()
        .map(|v| v.map(|v| best_fsc_auc(&v, gt)).transpose())
        .collect()
}

/// Back-projection of every cluster with at least [`MIN_CLUSTER_IMAGES`] members.
pub fn cluster_volumes(
    images: &[Image<f64>],
    poses: &[Pose<f64>],
    ctfs: &[CtfParams],
    assignments: &[usize],
    k: usize,
) -> Result<Vec<Option<Volume<f64>>>> {
    (0..k)
        .map(|c| {
            let idx: Vec<usize> = (0..images.len()).filter(|&i| assignments[i] == c).collect();
            if idx.len() < MIN_CLUSTER_IMAGES {
                warn!("cluster {c} has {} images; skipped", idx.len());
                return Ok(None);
            }
            let imgs: Vec<Image<f64>> = idx.iter().map(|&i| images[i].clone()).collect();
            let ps: Vec<Pose<f64>> = idx.iter().map(|&i| poses[i]).collect();
            let cs: Vec<CtfParams> = idx.iter().map(|&i| ctfs[i]).collect();
            backproject(&imgs, &ps, &cs).map(Some)
        })
        .collect()
}

/// Atomic coordinates in Å, in the model frame (origin at the box center).
#[derive(Debug, Clone, PartialEq)]
pub struct AtomModel {
    pub coords: Vec<[f64; 3]>,
    /// Index of the nearest consensus Gaussian per atom, once mapped.
    pub nearest_gaussian: Vec<usize>,
}

impl AtomModel {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        AtomModel {
            coords,
            nearest_gaussian: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Index of the closest point (lowest index on ties).
pub fn nearest_index(points: &[[f64; 3]], x: [f64; 3]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(*p, x);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Moves every atom by the displacement of its nearest consensus Gaussian.
pub fn map_to_atoms(model: &GaussianModel<f64>, deformation: &Deformation<f64>, atoms: &AtomModel) -> Result<AtomModel> {
    if model.is_empty() {
        return Err(Error::input("empty Gaussian model"));
    }
    if deformation.len() != model.len() {
        return Err(Error::input("deformation length differs from the model"));
    }
    let px = model.pixel_size();
    let positions = model.positions();
    let nearest: Vec<usize> = atoms
        .coords
        .par_iter()
        .map(|a| nearest_index(&positions, a.map(|v| v / px)).expect("nonempty model"))
        .collect();
    let coords = atoms
        .coords
        .iter()
        .zip(&nearest)
        .map(|(a, &g)| {
            let d = deformation.delta_position[g];
            [a[0] + d[0] * px, a[1] + d[1] * px, a[2] + d[2] * px]
        })
        .collect();
    Ok(AtomModel {
        coords,
        nearest_gaussian: nearest,
    })
}

/// Root-mean-square deviation between corresponding atoms (no superposition).
pub fn rmsd(a: &AtomModel, b: &AtomModel) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!("atom counts differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::input("no atoms"));
    }
    let s: f64 = a.coords.iter().zip(&b.coords).map(|(p, q)| dist2(*p, *q)).sum();
    Ok((s / a.len() as f64).sqrt())
}

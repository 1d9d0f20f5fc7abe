use gaussem::analysis::*;
use gaussem::Volume;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_volume(rng: &mut ChaCha8Rng, n: usize) -> Volume<f64> {
    Volume::from_vec(n, 1.0, (0..n * n * n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Orthonormal `rank x dim` basis from Gram-Schmidt on random vectors.
fn random_basis(rng: &mut ChaCha8Rng, dim: usize, rank: usize) -> EnsembleBasis {
    let mut vecs: Vec<Vec<f64>> = Vec::new();
    while vecs.len() < rank {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        vecs.push(v);
    }
    let mut s: Vec<f64> = (0..rank).map(|_| rng.random_range(0.1..3.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    EnsembleBasis::new(vecs, s).unwrap()
}

#[test]
fn pcv_self_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for rank in 1..5 {
        let a = random_basis(&mut rng, 12, rank);
        assert!((pcv(&a, &a).unwrap() - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn pcv_matches_expanded_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = random_basis(&mut rng, 6, 2);
        let b = random_basis(&mut rng, 6, 2);
        let mut num = 0.0;
        let mut den = 0.0;
        for (va, s) in a.vectors.iter().zip(&a.eigenvalues) {
            for vb in &b.vectors {
                let d: f64 = vb.iter().zip(va).map(|(x, y)| x * y).sum();
                num += s * s * d * d;
            }
            for va2 in &a.vectors {
                let d: f64 = va2.iter().zip(va).map(|(x, y)| x * y).sum();
                den += s * s * d * d;
            }
        }
        let got = pcv(&a, &b).unwrap();
        assert!((got - num / den).abs() <= 1e-10);
        assert!((0.0..=1.0 + 1e-12).contains(&got));
    }
}

#[test]
fn pcv_orthogonal_and_asymmetric() {
    let e = |i: usize| -> Vec<f64> { (0..4).map(|k| if k == i { 1.0 } else { 0.0 }).collect() };
    let a = EnsembleBasis::new(vec![e(0), e(1)], vec![2.0, 1.0]).unwrap();
    let b = EnsembleBasis::new(vec![e(2), e(3)], vec![1.0, 1.0]).unwrap();
    assert_eq!(pcv(&a, &b).unwrap(), 0.0);
    let c = EnsembleBasis::new(vec![e(0)], vec![1.0]).unwrap();
    // c captures a's dominant axis; a fully contains c
    assert!((pcv(&a, &c).unwrap() - 0.8).abs() < 1e-12);
    assert!((pcv(&c, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ensemble_basis_matches_dense_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 8;
    let dim = n * n * n;
    let vols: Vec<Vec<f64>> = (0..5).map(|_| random_volume(&mut rng, n).data).collect();
    let basis = ensemble_basis(&vols, 4).unwrap();
    assert_eq!(basis.rank(), 4);

    let mean: Vec<f64> = (0..dim).map(|i| vols.iter().map(|v| v[i]).sum::<f64>() / 5.0).collect();
    let cov = DMatrix::from_fn(dim, dim, |i, j| {
        vols.iter().map(|v| (v[i] - mean[i]) * (v[j] - mean[j])).sum::<f64>() / 4.0
    });
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (k, &idx) in order.iter().take(4).enumerate() {
        let lambda = eig.eigenvalues[idx];
        assert!((basis.eigenvalues[k] - lambda).abs() <= 1e-8 * lambda.max(1.0), "eigenvalue {k}");
        let dense = eig.eigenvectors.column(idx);
        let d: f64 = basis.vectors[k].iter().zip(dense.iter()).map(|(a, b)| a * b).sum();
        let sign = d.signum();
        let err = basis.vectors[k]
            .iter()
            .zip(dense.iter())
            .map(|(a, b)| (a - sign * b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-8, "eigenvector {k}: {err}");
    }
}

#[test]
fn two_volume_basis_is_their_difference() {
    let a = vec![1.0, 0.0, 0.0, 2.0];
    let b = vec![0.0, 1.0, 0.0, 2.0];
    let basis = ensemble_basis(&[a, b], 3).unwrap();
    assert_eq!(basis.rank(), 1);
    let s = 0.5f64.sqrt();
    let v = &basis.vectors[0];
    assert!((v[0].abs() - s).abs() < 1e-12 && (v[1].abs() - s).abs() < 1e-12);
    assert!(v[2].abs() < 1e-12 && v[3].abs() < 1e-12);
}

#[test]
fn fsc_identity_scale_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_volume(&mut rng, 16);
    let b = random_volume(&mut rng, 16);
    let self_curve = fsc(&a, &a).unwrap();
    assert!(self_curve.correlations.iter().all(|c| (c - 1.0).abs() <= 1e-10));
    assert_eq!(fsc_auc(&self_curve).unwrap(), 1.0);

    let scaled = Volume::from_vec(16, 1.0, a.data.iter().map(|v| 3.0 * v).collect()).unwrap();
    let mixed = Volume::from_vec(16, 1.0, a.data.iter().zip(&b.data).map(|(x, y)| x + 0.5 * y).collect()).unwrap();
    let base = fsc(&a, &mixed).unwrap();
    let scaled_curve = fsc(&scaled, &mixed).unwrap();
    for (x, y) in base.correlations.iter().zip(&scaled_curve.correlations) {
        assert!((x - y).abs() <= 1e-10);
    }
    assert!(fsc(&scaled, &a).unwrap().correlations.iter().all(|c| (c - 1.0).abs() <= 1e-10));
    let swapped = fsc(&mixed, &a).unwrap();
    for (x, y) in base.correlations.iter().zip(&swapped.correlations) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn independent_noise_is_uncorrelated() {
    let mut total = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = random_volume(&mut rng, 32);
        let b = random_volume(&mut rng, 32);
        let c = fsc(&a, &b).unwrap();
        // the DC shell is a single voxel whose correlation is always +-1
        assert!((c.correlations[0].abs() - 1.0).abs() < 1e-12);
        let rest = &c.correlations[1..];
        total += rest.iter().map(|v| v.abs()).sum::<f64>() / rest.len() as f64;
    }
    assert!(total / 10.0 <= 0.1, "mean |FSC| {}", total / 10.0);
}

#[test]
fn fsc_rejects_shape_mismatch() {
    assert!(fsc(&Volume::zeros(8, 1.0), &Volume::zeros(16, 1.0)).is_err());
}

#[test]
fn auc_ramp() {
    let m = 16;
    let curve = FscCurve {
        shells: (0..m).collect(),
        correlations: (0..m).map(|i| 1.0 - i as f64 / (m - 1) as f64).collect(),
    };
    assert!((fsc_auc(&curve).unwrap() - 0.5).abs() <= 0.5 / m as f64);
}

use gaussem::objective::*;
use gaussem::Image;
use nalgebra::{Rotation3, Vector3};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(seed: u64, n: usize, extent: f64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-extent..extent)))
        .collect()
}

fn graph(points: &[[f64; 3]], factor: f64) -> NeighborGraph<f64> {
    let d = mean_nn_distance_points(points).unwrap();
    build_neighbor_graph_points(points, factor * d, 0.1).unwrap()
}

fn coords() -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-8.0f64..8.0), 3..25)
}

proptest! {
    #[test]
    fn geo1_vanishes_under_rigid_motion(
        points in coords(),
        t in prop::array::uniform3(-5.0f64..5.0),
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in -3.0f64..3.0,
    ) {
        let g = graph(&points, 1.5);
        let axis = Vector3::from(axis);
        prop_assume!(axis.norm() > 1e-3);
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let moved: Vec<[f64; 3]> = points
            .iter()
            .map(|p| {
                let v = rot * Vector3::from(*p) + Vector3::from(t);
                [v.x, v.y, v.z]
            })
            .collect();
        let (loss, _) = loss_geo1(&moved, &g).unwrap();
        prop_assert!(loss.abs() <= 1e-10, "L_geo1 = {loss}");
    }

    #[test]
    fn geo2_vanishes_for_uniform_displacement(
        points in coords(),
        v in prop::array::uniform3(-3.0f64..3.0),
    ) {
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let g = graph(&points, 2.5);
        let (loss, grad) = loss_geo2(&vec![v; points.len()], &g).unwrap();
        prop_assert!(loss.abs() <= 1e-10, "L_geo2 = {loss}");
        for gr in grad {
            for c in gr {
                prop_assert!(c.abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn emb_vanishes_for_equal_embeddings(points in coords(), value in -2.0f64..2.0) {
        let g = graph(&points, 2.5);
        let emb = Array2::from_elem((points.len(), 4), value);
        let (loss, grad) = loss_emb(emb.view(), &g).unwrap();
        prop_assert_eq!(loss, 0.0);
        prop_assert!(grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn all_losses_non_negative(
        points in coords(),
        seed in any::<u64>(),
    ) {
        let n = points.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |s: f64| -> Vec<[f64; 3]> {
            (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-s..s))).collect()
        };
        let disp = jitter(2.0);
        let deformed: Vec<[f64; 3]> = points
            .iter()
            .zip(&disp)
            .map(|(p, d)| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
            .collect();
        let g1 = graph(&points, 2.5);
        let g2 = graph(&points, 1.5);
        let emb = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        prop_assert!(loss_emb(emb.view(), &g1).unwrap().0 >= 0.0);
        prop_assert!(loss_geo1(&deformed, &g2).unwrap().0 >= 0.0);
        prop_assert!(loss_geo2(&disp, &g1).unwrap().0 >= 0.0);
        let mean = Array2::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
        let lv = Array2::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
        prop_assert!(kl_divergence(mean.view(), lv.view()).unwrap().0 >= 0.0);
        let a = Image::from_vec(4, 4, 1.0, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Image::from_vec(4, 4, 1.0, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        prop_assert!(loss_rec(&a, &b).unwrap().0 >= 0.0);
    }
}

#[test]
fn graph_matches_brute_force() {
    for seed in 0..5 {
        let pts = cloud(seed, 20, 6.0);
        let mu = 3.5;
        let g = build_neighbor_graph_points(&pts, mu, 0.1).unwrap();
        let mut expect = Vec::new();
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                let d: f64 = (0..3).map(|i| (pts[a][i] - pts[b][i]).powi(2)).sum::<f64>().sqrt();
                if d <= mu {
                    expect.push((a, b));
                }
            }
        }
        let mut got: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.a.min(e.b), e.a.max(e.b))).collect();
        got.sort();
        assert_eq!(got, expect, "seed {seed}");
        for e in &g.edges {
            assert!(e.distance <= mu && e.a != e.b);
            assert!((e.weight - (-0.1 * e.distance * e.distance).exp()).abs() < 1e-15);
        }
    }
}

#[test]
fn mean_nn_distance_matches_brute_force() {
    let pts = cloud(11, 50, 10.0);
    let brute: f64 = (0..pts.len())
        .map(|a| {
            (0..pts.len())
                .filter(|b| *b != a)
                .map(|b| (0..3).map(|i| (pts[a][i] - pts[b][i]).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / pts.len() as f64;
    let got = mean_nn_distance_points(&pts).unwrap();
    assert!((got - brute).abs() < 1e-12);
}

#[test]
fn emb_matches_double_loop() {
    let pts = cloud(3, 10, 3.0);
    let g = build_neighbor_graph_points(&pts, 4.0, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let emb: Array2<f64> = Array2::from_shape_fn((10, 4), |_| rng.random_range(-1.0..1.0));
    let mut brute = 0.0;
    for a in 0..10 {
        for b in a + 1..10 {
            let d: f64 = (0..3).map(|i| (pts[a][i] - pts[b][i]).powi(2)).sum::<f64>().sqrt();
            if d <= 4.0 {
                let w = (-0.1 * d * d).exp();
                brute += w * (0..4).map(|k| (emb[[a, k]] - emb[[b, k]]).powi(2)).sum::<f64>();
            }
        }
    }
    assert!((loss_emb(emb.view(), &g).unwrap().0 - brute).abs() < 1e-12);
}

#[test]
fn rec_matches_elementwise_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let expect: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    let ia = Image::from_vec(8, 8, 1.0, a).unwrap();
    let ib = Image::from_vec(8, 8, 1.0, b).unwrap();
    let (loss, grad) = loss_rec(&ia, &ib).unwrap();
    assert!((loss - expect).abs() < 1e-12);
    assert!(grad.data.iter().all(|g| g.abs() == 1.0));
}

#[test]
fn gradients_vanish_at_minima() {
    let pts = cloud(21, 15, 4.0);
    let g = graph(&pts, 1.5);
    let (_, g1) = loss_geo1(&pts, &g).unwrap();
    assert!(g1.iter().flatten().all(|v| v.abs() < 1e-12));
    let zeros = Array2::<f64>::zeros((2, 3));
    let (kl, gm, glv) = kl_divergence(zeros.view(), zeros.view()).unwrap();
    assert_eq!(kl, 0.0);
    assert!(gm.iter().chain(glv.iter()).all(|v| *v == 0.0));
}

#[test]
fn empty_graph_gives_zero() {
    let pts = vec![[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]];
    let g = build_neighbor_graph_points(&pts, 1.0, 0.1).unwrap();
    assert!(g.edges.is_empty());
    assert_eq!(loss_geo1(&[[1.0, 2.0, 3.0], [0.0; 3]], &g).unwrap().0, 0.0);
    let emb = Array2::from_shape_fn((2, 2), |(r, c)| (r * 2 + c) as f64);
    assert_eq!(loss_emb(emb.view(), &g).unwrap().0, 0.0);
}

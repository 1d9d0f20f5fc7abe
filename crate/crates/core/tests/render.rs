use gaussem::model::*;
use gaussem::optics::CtfParams;
use gaussem::{GaussianModel32, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_model(seed: u64, n: usize, box_size: usize) -> GaussianModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = box_size as f64 / 4.0;
    let gs = (0..n)
        .map(|_| {
            Gaussian::new(
                rng.random_range(0.5..1.5),
                rng.random_range(1.0..2.5),
                std::array::from_fn(|_| rng.random_range(-half..half)),
            )
            .unwrap()
        })
        .collect();
    GaussianModel::new(gs, box_size, 2.0).unwrap()
}

fn random_pose(seed: u64) -> Pose<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    Pose::from_quaternion(q, [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).unwrap()
}

fn disabled() -> CtfParams {
    CtfParams::disabled()
}

#[test]
fn identity_render_equals_splat_of_projection() {
    let m = random_model(1, 6, 32);
    let s = RenderSettings::default();
    let img = render(&m, &Deformation::zeros(6), &Pose::identity(), &disabled(), &s).unwrap();
    let floored = deform(&m, &Deformation::zeros(6), &s).unwrap();
    let direct = splat_image(&project_gaussians(&floored, [0.0, 0.0]), 32, 32, s.truncation);
    assert_eq!(img.data, direct.data);
    // the soft scale floor moves s >= 1 by less than 1e-8
    let raw = splat_image(&project_gaussians(&m, [0.0, 0.0]), 32, 32, s.truncation);
    for (a, b) in img.data.iter().zip(&raw.data) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn pure_amplitude_contrast_negates() {
    let m = random_model(2, 5, 32);
    let s = RenderSettings::default();
    let pose = random_pose(3);
    let plain = render(&m, &Deformation::zeros(5), &pose, &disabled(), &s).unwrap();
    let ctf = CtfParams {
        amplitude_contrast: 1.0,
        cs_mm: 0.0,
        defocus_u_a: 0.0,
        defocus_v_a: 0.0,
        ..CtfParams::default()
    };
    let neg = render(&m, &Deformation::zeros(5), &pose, &ctf, &s).unwrap();
    for (a, b) in plain.data.iter().zip(&neg.data) {
        assert!((a + b).abs() < 1e-12);
    }
}

/// Sub-pixel horizontal offset of `b` relative to `a` from a parabola through
/// the cross-correlation peak.
fn xcorr_shift_x(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let n = a.width;
    let cc = |t: i64| -> f64 {
        let mut s = 0.0;
        for r in 0..a.height {
            for c in 0..n {
                let c2 = c as i64 + t;
                if (0..n as i64).contains(&c2) {
                    s += a.get(r, c) * b.get(r, c2 as usize);
                }
            }
        }
        s
    };
    let best = (-8..=8).max_by(|x, y| cc(*x).total_cmp(&cc(*y))).unwrap();
    let (l, m, r) = (cc(best - 1), cc(best), cc(best + 1));
    best as f64 + 0.5 * (l - r) / (l - 2.0 * m + r)
}

#[test]
fn translating_gaussians_shifts_the_image() {
    let gs = vec![
        Gaussian::new(1.0, 2.0, [0.0, 0.0, 0.0]).unwrap(),
        Gaussian::new(0.7, 1.5, [-3.0, 2.0, 1.0]).unwrap(),
    ];
    let m = GaussianModel::new(gs, 32, 1.0).unwrap();
    let s = RenderSettings::default();
    let base = render(&m, &Deformation::zeros(2), &Pose::identity(), &disabled(), &s).unwrap();
    for t in [0.4, 1.0, 2.3, -1.7] {
        let mut def = Deformation::zeros(2);
        def.delta_position = vec![[t, 0.0, 0.0]; 2];
        let moved = render(&m, &def, &Pose::identity(), &disabled(), &s).unwrap();
        let est = xcorr_shift_x(&base, &moved);
        assert!((est - t).abs() <= 0.05, "t = {t}: estimated {est}");
    }
}

#[test]
fn render_is_linear_in_the_model() {
    let a = random_model(4, 4, 32);
    let b = random_model(5, 3, 32);
    let ab = a.concat(&b).unwrap();
    let s = RenderSettings::default();
    let pose = random_pose(6);
    let ctf = CtfParams::default();
    let ra = render(&a, &Deformation::zeros(4), &pose, &ctf, &s).unwrap();
    let rb = render(&b, &Deformation::zeros(3), &pose, &ctf, &s).unwrap();
    let rab = render(&ab, &Deformation::zeros(7), &pose, &ctf, &s).unwrap();
    for ((x, y), z) in ra.data.iter().zip(&rb.data).zip(&rab.data) {
        assert!((x + y - z).abs() < 1e-10);
    }
}

#[test]
fn projection_preserves_mass() {
    // untruncated image sum equals the total 3D mass d (2 pi)^{3/2} s^3 for
    // Gaussians well inside the box
    let m = random_model(7, 5, 64);
    let img = render(&m, &Deformation::zeros(5), &random_pose(8), &disabled(), &RenderSettings::untruncated()).unwrap();
    let mass: f64 = m
        .gaussians()
        .iter()
        .map(|g| g.density * (2.0 * std::f64::consts::PI).powf(1.5) * g.scale.powi(3))
        .sum();
    assert!((img.sum() - mass).abs() < 1e-6 * mass);
}

#[test]
fn render_backward_matches_finite_differences() {
    let m = random_model(9, 4, 16);
    let s = RenderSettings::untruncated();
    let pose = random_pose(10);
    let ctf = CtfParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut def = Deformation::zeros(4);
    for g in 0..4 {
        def.delta_density[g] = rng.random_range(-0.2..0.2);
        def.delta_scale[g] = rng.random_range(-0.3..0.3);
        def.delta_position[g] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    }
    let up = Image::from_vec(16, 16, 2.0, (0..256).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let f = |d: &Deformation<f64>| render(&m, d, &pose, &ctf, &s).unwrap().dot(&up);
    let grad = render_backward(&m, &def, &pose, &ctf, &up, &s).unwrap().to_flat();
    let flat = def.to_flat();
    let h = 1e-6;
    for i in 0..flat.len() {
        let mut p = flat.clone();
        p[i] += h;
        let mut q = flat.clone();
        q[i] -= h;
        let fd = (f(&Deformation::from_flat(&p).unwrap()) - f(&Deformation::from_flat(&q).unwrap())) / (2.0 * h);
        assert!((fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1.0), "component {i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn single_precision_tracks_double() {
    let m = random_model(12, 6, 32);
    let m32: GaussianModel32 = m.map_scalar();
    let pose = random_pose(13);
    let q = pose.to_quaternion().map(|v| v as f32);
    let pose32 = Pose::from_quaternion(q, pose.shift.map(|v| v as f32)).unwrap();
    let ctf = CtfParams::default();
    let a = render(&m, &Deformation::zeros(6), &pose, &ctf, &RenderSettings::default()).unwrap();
    let b = render(&m32, &Deformation::zeros(6), &pose32, &ctf, &RenderSettings::default()).unwrap();
    let peak = a.data.iter().fold(0.0f64, |p, v| p.max(v.abs()));
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((x - y.as_f64()).abs() <= 1e-4 * peak);
    }
}

#[test]
fn volume_matches_pointwise_density() {
    let m = random_model(14, 3, 16);
    let v = render_volume(&m, &Deformation::zeros(3), &RenderSettings::untruncated()).unwrap();
    for (x, y, z) in [(8, 8, 8), (3, 10, 7), (12, 2, 9)] {
        let p = [v.coord(x), v.coord(y), v.coord(z)];
        let expect = m.eval_density(p).unwrap();
        assert!((v.get(x, y, z) - expect).abs() < 1e-12);
    }
}

use gaussem::analysis::*;
use gaussem::datagen::{particle_rng, uniform_quaternion};
use gaussem::model::*;
use gaussem::optics::CtfParams;
use rand::Rng;

fn projections(
    model: &GaussianModel<f64>,
    count: usize,
    ctf: &CtfParams,
    seed: u64,
) -> (Vec<Image<f64>>, Vec<Pose<f64>>, Vec<CtfParams>) {
    let settings = RenderSettings::default();
    let mut images = Vec::new();
    let mut poses = Vec::new();
    for i in 0..count {
        let mut rng = particle_rng(seed, i);
        let shift = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let pose = Pose::from_quaternion(uniform_quaternion(&mut rng), shift).unwrap();
        images.push(render(model, &Deformation::zeros(model.len()), &pose, ctf, &settings).unwrap());
        poses.push(pose);
    }
    (images, poses, vec![*ctf; count])
}

fn single_gaussian() -> GaussianModel<f64> {
    GaussianModel::new(vec![Gaussian::new(1.0, 2.0, [0.0, 0.0, 0.0]).unwrap()], 32, 2.0).unwrap()
}

#[test]
fn single_gaussian_reconstruction_reaches_half_nyquist() {
    let model = single_gaussian();
    let (images, poses, ctfs) = projections(&model, 200, &CtfParams::disabled(), 1);
    let rec = backproject(&images, &poses, &ctfs).unwrap();
    let gt = render_volume(&model, &Deformation::zeros(1), &RenderSettings::default()).unwrap();
    let curve = fsc(&rec, &gt).unwrap();
    for (shell, c) in curve.shells.iter().zip(&curve.correlations).take(32 / 4 + 1) {
        assert!(*c >= 0.9, "shell {shell}: {c}");
    }
}

#[test]
fn off_center_model_with_ctf_reconstructs() {
    let gs = vec![
        Gaussian::new(1.0, 1.8, [4.0, -2.0, 1.0]).unwrap(),
        Gaussian::new(0.8, 1.5, [-3.0, 3.0, -2.0]).unwrap(),
    ];
    let model = GaussianModel::new(gs, 32, 2.0).unwrap();
    let ctf = CtfParams {
        defocus_u_a: 8000.0,
        defocus_v_a: 8000.0,
        ..CtfParams::default()
    };
    let (images, poses, ctfs) = projections(&model, 300, &ctf, 2);
    let rec = backproject(&images, &poses, &ctfs).unwrap();
    let gt = render_volume(&model, &Deformation::zeros(2), &RenderSettings::default()).unwrap();
    let curve = fsc(&rec, &gt).unwrap();
    let low = &curve.correlations[1..8];
    assert!(low.iter().all(|c| *c >= 0.8), "{low:?}");
}

#[test]
fn duplicating_images_changes_nothing() {
    let model = single_gaussian();
    let (images, poses, ctfs) = projections(&model, 20, &CtfParams::default(), 3);
    let once = backproject(&images, &poses, &ctfs).unwrap();
    let twice = backproject(
        &[images.clone(), images].concat(),
        &[poses.clone(), poses].concat(),
        &[ctfs.clone(), ctfs].concat(),
    )
    .unwrap();
    for (a, b) in once.data.iter().zip(&twice.data) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn zero_images_give_zero_volume_and_linearity_holds() {
    let model = single_gaussian();
    let (images, poses, ctfs) = projections(&model, 10, &CtfParams::default(), 4);
    let zeros: Vec<Image<f64>> = images.iter().map(|i| Image::zeros(i.height, i.width, i.pixel_size)).collect();
    assert!(backproject(&zeros, &poses, &ctfs).unwrap().data.iter().all(|v| *v == 0.0));

    let other = single_gaussian();
    let (images_b, _, _) = projections(&other, 10, &CtfParams::default(), 5);
    let mix: Vec<Image<f64>> = images
        .iter()
        .zip(&images_b)
        .map(|(a, b)| {
            let data = a.data.iter().zip(&b.data).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
            Image::from_vec(a.height, a.width, a.pixel_size, data).unwrap()
        })
        .collect();
    let va = backproject(&images, &poses, &ctfs).unwrap();
    let vb = backproject(&images_b, &poses, &ctfs).unwrap();
    let vm = backproject(&mix, &poses, &ctfs).unwrap();
    for ((a, b), m) in va.data.iter().zip(&vb.data).zip(&vm.data) {
        assert!((2.0 * a - 0.5 * b - m).abs() < 1e-10);
    }
}

#[test]
fn empty_stack_is_an_error() {
    assert!(backproject(&[], &[], &[]).is_err());
}

#[test]
fn single_cluster_equals_full_backprojection() {
    let model = single_gaussian();
    let (images, poses, ctfs) = projections(&model, 30, &CtfParams::default(), 6);
    let latents: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, 0.5]).collect();
    let clusters = kmeans(&latents, 1, 0).unwrap();
    let vols = cluster_volumes(&images, &poses, &ctfs, &clusters.assignments, 1).unwrap();
    let full = backproject(&images, &poses, &ctfs).unwrap();
    assert_eq!(vols.len(), 1);
    assert_eq!(vols[0].as_ref().unwrap().data, full.data);
}

use gaussem::gradcheck::random_scene;
use std::time::Instant;

#[test]
fn full_pipeline_gradient_matches_finite_differences() {
    let start = Instant::now();
    for seed in 0..20 {
        let scene = random_scene(seed, 16, 2).unwrap();
        let report = scene.check(1e-6).unwrap();
        assert!(
            report.max_error <= 1e-4,
            "seed {seed}: max relative error {:.3e} over {} parameters, worst {:?}",
            report.max_error,
            report.parameters,
            report.worst
        );
    }
    assert!(start.elapsed().as_secs() < 60, "gradient check took {:?}", start.elapsed());
}

#[test]
fn scenes_are_reproducible() {
    let a = random_scene(7, 16, 2).unwrap().loss_and_gradient().unwrap();
    let b = random_scene(7, 16, 2).unwrap().loss_and_gradient().unwrap();
    assert_eq!(a, b);
}

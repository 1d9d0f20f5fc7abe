use gaussem::datagen::*;
use gaussem::model::*;
use gaussem::net::NetworkConfig;
use gaussem::trainer::*;
use tempfile::tempdir;

struct Setup {
    dataset: Dataset,
    model: GaussianModel<f64>,
    config: TrainConfig,
}

fn setup() -> Setup {
    let spec = ToySpec {
        n_conformations: 4,
        n_particles: 40,
        box_size: 32,
        seed: 5,
        ..ToySpec::default()
    };
    let structure = make_toy_structure(&spec).unwrap();
    let data = simulate_dataset(&spec, &structure).unwrap();
    let mean = data.mean_volume().unwrap();
    let peak = mean.data.iter().copied().fold(0.0, f64::max);
    let model = init_gaussians_from_volume(&mean, 0.2 * peak, 4).unwrap();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 9,
        network: NetworkConfig {
            latent_dim: 2,
            embedding_dim: 4,
            image_encoder_hidden: vec![16, 12, 8],
            gaussian_encoder_hidden: vec![8],
            decoder_hidden: vec![8],
            pe_bands: 2,
            variational: true,
            ..NetworkConfig::default()
        },
        ..TrainConfig::default()
    };
    Setup {
        dataset: Dataset::new(data.images, data.poses, data.ctfs).unwrap(),
        model,
        config,
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let s = setup();
    let config = TrainConfig {
        learning_rate: 0.0,
        ..s.config.clone()
    };
    let mut t = Trainer::new(&s.dataset, s.model.clone(), config).unwrap();
    let before = t.state().network.snapshot();
    t.run_epoch().unwrap();
    assert_eq!(t.state().network.snapshot(), before);
    assert_eq!(t.state().epoch, 1);
}

#[test]
fn training_lowers_the_loss_and_is_deterministic() {
    let s = setup();
    let a = train(&s.dataset, &s.model, &s.config).unwrap();
    let b = train(&s.dataset, &s.model, &s.config).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.latents, b.latents);
    let h = &a.state.history;
    assert_eq!(h.len(), 3);
    assert!(h[2].terms.rec < h[0].terms.rec, "{h:?}");
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let s = setup();
    let full = train(&s.dataset, &s.model, &s.config).unwrap();

    let dir = tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut t = Trainer::new(&s.dataset, s.model.clone(), s.config.clone()).unwrap();
    t.run_epoch().unwrap();
    t.checkpoint().save(&path).unwrap();
    drop(t);
    let ckpt = Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::resume(&s.dataset, &ckpt).unwrap();
    resumed.run(None).unwrap();
    let out = resumed.finish().unwrap();
    assert_eq!(out.state, full.state);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let s = setup();
    let dir = tempdir().unwrap();
    let mut t = Trainer::new(&s.dataset, s.model.clone(), s.config.clone()).unwrap();
    t.run_epoch().unwrap();
    let ckpt = t.checkpoint();
    let path = dir.path().join("c.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.consensus().unwrap(), s.model);
    assert_eq!(back.network().unwrap(), t.state().network);
}

#[test]
fn run_writes_checkpoints_and_history() {
    let s = setup();
    let dir = tempdir().unwrap();
    let config = TrainConfig {
        epochs: 2,
        checkpoint_interval: 1,
        ..s.config.clone()
    };
    let mut t = Trainer::new(&s.dataset, s.model.clone(), config).unwrap();
    t.run(Some(dir.path())).unwrap();
    for name in ["checkpoint_0001.json", "checkpoint_0002.json", "checkpoint.json", "loss_history.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let (header, rows) = gaussem::io::read_table(&dir.path().join("loss_history.csv")).unwrap();
    assert_eq!(header[0], "epoch");
    assert_eq!(rows.len(), 2);
}

#[test]
fn fresh_decoder_reproduces_the_consensus() {
    let s = setup();
    let t = Trainer::new(&s.dataset, s.model.clone(), s.config.clone()).unwrap();
    let net = &t.state().network;
    let emb = net.gaussian_encode(&s.model).unwrap();
    let def = net
        .decode_deformation(&[0.3, -1.2], &emb, s.config.channels, s.model.box_size())
        .unwrap();
    assert!(def.to_flat().iter().all(|v| *v == 0.0));
}

#[test]
fn mismatched_box_is_rejected() {
    let s = setup();
    let other = GaussianModel::new(s.model.gaussians().to_vec(), 64, 3.0).unwrap();
    assert!(Trainer::new(&s.dataset, other, s.config.clone()).is_err());
}

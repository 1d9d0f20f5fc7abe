//! The `gaussem` command line: dataset simulation, Gaussian initialisation,
//! training, latent analysis, metrics and atomic-model mapping.
//!
//! [`run`] returns the process exit code: 0 on success, 1 for usage errors
//! (bad or missing arguments) and 2 when reading, validating or processing
//! data fails.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gaussem::analysis::{
    backproject, cluster_fsc, decode_volume_at, ensemble_basis, fsc, fsc_auc, kmeans, map_to_atoms, pca, pcv,
    rmsd, sample_fsc,
};
use gaussem::datagen::{
    init_gaussians_from_volume, make_toy_structure, simulate_dataset, subunit_mask, MotionKind, ToySpec,
};
use gaussem::io::{self, DatasetManifest};
use gaussem::trainer::{extract_latents, latent_means, Checkpoint, Dataset, TrainConfig, Trainer};
use gaussem::{Error, Volume};
use log::info;
use serde_json::json;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "gaussem", version, about = "Cryo-EM heterogeneity with deformable 3D Gaussians")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic particle stack with ground truth.
    Simulate(SimulateArgs),
    /// Place Gaussians on a lattice inside a contour of a volume.
    Init(InitArgs),
    /// Train the network against a particle stack.
    Train(TrainArgs),
    /// Latent embedding, clustering and decoded volumes from a checkpoint.
    Analyze(AnalyzeArgs),
    /// Evaluation metrics.
    Metrics {
        #[command(subcommand)]
        mode: MetricsMode,
    },
    /// Displace atomic coordinates by a decoded deformation.
    MapAtoms(MapAtomsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Dihedral,
    TwoState,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "dihedral")]
    kind: Kind,
    #[arg(long, default_value_t = 2000)]
    particles: usize,
    /// Ground-truth conformations (forced to 2 for two-state data).
    #[arg(long, default_value_t = 100)]
    conformations: usize,
    #[arg(long = "box", default_value_t = 64)]
    box_size: usize,
    /// Å per pixel.
    #[arg(long, default_value_t = 3.0)]
    pixel_size: f64,
    #[arg(long, default_value_t = 0.5)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simulate without CTF modulation.
    #[arg(long)]
    no_ctf: bool,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Absolute contour level.
    #[arg(long, conflicts_with = "contour_fraction", required_unless_present = "contour_fraction")]
    contour: Option<f64>,
    /// Contour as a fraction of the volume maximum.
    #[arg(long)]
    contour_fraction: Option<f64>,
    /// Lattice spacing in voxels.
    #[arg(long, default_value_t = 2)]
    interval: usize,
    /// Output model (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ParticleArgs {
    /// Dataset manifest written by `simulate` (alternative to --stack/--meta).
    #[arg(long, conflicts_with_all = ["stack", "meta"])]
    manifest: Option<PathBuf>,
    #[arg(long, requires = "meta")]
    stack: Option<PathBuf>,
    #[arg(long, requires = "stack")]
    meta: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    particles: ParticleArgs,
    /// Consensus Gaussian model (JSON); not needed with --resume.
    #[arg(long, required_unless_present = "resume")]
    model: Option<PathBuf>,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    particles: ParticleArgs,
    /// Number of k-means clusters.
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum MetricsMode {
    /// Fourier shell correlation of two volumes.
    Fsc {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// CSV file for the curve (printed to stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Captured variance of a test ensemble's principal subspace.
    Pcv {
        #[arg(long, num_args = 2.., required = true)]
        reference: Vec<PathBuf>,
        #[arg(long, num_args = 2.., required = true)]
        test: Vec<PathBuf>,
        /// Subspace rank (default min(n - 1, 20)).
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Decode k-means centers of the latents and score them against GT volumes.
    SampleFsc {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Latent CSV written by `analyze`.
        #[arg(long)]
        latents: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Back-project k-means clusters of the latents and score them.
    ClusterFsc {
        #[command(flatten)]
        particles: ParticleArgs,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct MapAtomsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Template PDB in the consensus frame (Å, origin at the box center).
    #[arg(long)]
    pdb: PathBuf,
    /// Latent coordinates, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    latent: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Init(a) => init(a),
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Metrics { mode } => metrics(mode),
        Command::MapAtoms(a) => map_atoms(a),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn simulate(a: SimulateArgs) -> CliResult {
    let (kind, n_conformations) = match a.kind {
        Kind::Dihedral => (MotionKind::Dihedral1d, a.conformations),
        Kind::TwoState => (MotionKind::TwoStateComposition, 2),
    };
    let spec = ToySpec {
        kind,
        n_conformations,
        n_particles: a.particles,
        box_size: a.box_size,
        pixel_size: a.pixel_size,
        snr: a.snr,
        ctf_enabled: !a.no_ctf,
        seed: a.seed,
        ..ToySpec::default()
    };
    let structure = make_toy_structure(&spec)?;
    let data = simulate_dataset(&spec, &structure)?;
    create_dir(&a.out)?;
    let rel = |name: String| PathBuf::from(name);
    let mut manifest = DatasetManifest {
        box_size: spec.box_size,
        pixel_size: spec.pixel_size,
        n_particles: spec.n_particles,
        stack: rel("particles.mrcs".into()),
        metadata: rel("particles.csv".into()),
        gt_volumes: Vec::new(),
        consensus_volume: rel("consensus.mrc".into()),
        gt_models: Vec::new(),
        consensus_model: rel("consensus_model.json".into()),
        subunit_mask: None,
    };
    io::write_stack(&a.out.join(&manifest.stack), &data.images)?;
    io::write_meta(&a.out.join(&manifest.metadata), &data.meta_rows())?;
    for (i, (v, m)) in data.gt_volumes.iter().zip(&structure.conformations).enumerate() {
        let (vp, mp) = (rel(format!("gt_{i:03}.mrc")), rel(format!("gt_model_{i:03}.json")));
        io::write_volume(&a.out.join(&vp), v)?;
        io::write_model(&a.out.join(&mp), m)?;
        manifest.gt_volumes.push(vp);
        manifest.gt_models.push(mp);
    }
    // the homogeneous reconstruction every later step starts from
    let consensus = backproject(&data.images, &data.poses, &data.ctfs)?;
    io::write_volume(&a.out.join(&manifest.consensus_volume), &consensus)?;
    io::write_model(&a.out.join(&manifest.consensus_model), &structure.consensus)?;
    if kind == MotionKind::TwoStateComposition {
        let mask = subunit_mask(&structure)?;
        let vol = Volume::from_vec(
            spec.box_size,
            spec.pixel_size,
            mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect(),
        )?;
        let p = rel("subunit_mask.mrc".into());
        io::write_volume(&a.out.join(&p), &vol)?;
        manifest.subunit_mask = Some(p);
    }
    io::write_json(&a.out.join("manifest.json"), &manifest)?;
    println!("wrote {} particles to {}", spec.n_particles, a.out.display());
    Ok(())
}

fn init(a: InitArgs) -> CliResult {
    let volume = io::read_volume(&a.volume)?;
    let contour = match (a.contour, a.contour_fraction) {
        (Some(c), _) => c,
        (None, Some(f)) => f * volume.data.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        (None, None) => return Err(Failure::Usage("--contour or --contour-fraction is required".into())),
    };
    let model = init_gaussians_from_volume(&volume, contour, a.interval)?;
    io::write_model(&a.out, &model)?;
    println!("{} Gaussians at contour {contour} written to {}", model.len(), a.out.display());
    Ok(())
}

fn load_particles(p: &ParticleArgs) -> CliResult<Dataset> {
    match (&p.manifest, &p.stack, &p.meta) {
        (Some(m), _, _) => {
            let manifest: DatasetManifest = io::read_json(m)?;
            let stack = DatasetManifest::resolve(m, &manifest.stack);
            let meta = DatasetManifest::resolve(m, &manifest.metadata);
            Ok(Dataset::load(&stack, &meta)?)
        }
        (None, Some(s), Some(m)) => Ok(Dataset::load(s, m)?),
        _ => Err(Failure::Usage("give --manifest or both --stack and --meta".into())),
    }
}

fn train(a: TrainArgs) -> CliResult {
    let dataset = load_particles(&a.particles)?;
    create_dir(&a.out)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.is_some() {
                return Err(Failure::Usage("--config cannot change a resumed run".into()));
            }
            Trainer::resume(&dataset, &Checkpoint::load(path)?)?
        }
        None => {
            let config = match &a.config {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    TrainConfig::from_key_values(&text)?
                }
                None => TrainConfig::default(),
            };
            let model_path = a.model.as_ref().ok_or_else(|| Failure::Usage("--model is required".into()))?;
            Trainer::new(&dataset, io::read_model(model_path)?, config)?
        }
    };
    trainer.run(Some(&a.out))?;
    let epoch = trainer.state().epoch;
    let last = trainer.state().history.last().map(|h| h.terms.total);
    info!("training finished after {epoch} epochs");
    println!("trained {epoch} epochs; final loss {last:?}; checkpoint in {}", a.out.display());
    Ok(())
}

fn latent_header(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("z{i}")).collect()
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<f64>]) -> CliResult {
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    Ok(io::write_table(path, &h, rows)?)
}

fn analyze(a: AnalyzeArgs) -> CliResult {
    if a.k == 0 {
        return Err(Failure::Usage("--k must be >= 1".into()));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let net = ckpt.network()?;
    let model = ckpt.consensus()?;
    let dataset = load_particles(&a.particles)?;
    let latents = latent_means(&extract_latents(&net, &dataset.images)?);
    let dim = net.config.latent_dim;
    create_dir(&a.out)?;
    write_rows(&a.out.join("latents.csv"), &latent_header(dim), &latents)?;

    let p = pca(&latents)?;
    let comps = dim.min(2);
    let projected: Vec<Vec<f64>> = latents.iter().map(|z| p.project(z, comps)).collect();
    let pc_header: Vec<String> = (0..comps).map(|i| format!("pc{}", i + 1)).collect();
    write_rows(&a.out.join("pca.csv"), &pc_header, &projected)?;

    let clusters = kmeans(&latents, a.k, a.seed)?;
    let assign: Vec<Vec<f64>> = clusters.assignments.iter().map(|c| vec![*c as f64]).collect();
    write_rows(&a.out.join("clusters.csv"), &["cluster".to_string()], &assign)?;
    write_rows(&a.out.join("centers.csv"), &latent_header(dim), &clusters.centers)?;

    let settings = ckpt.config.render_settings();
    let mut decoded = Vec::new();
    for (i, c) in clusters.centers.iter().enumerate() {
        let v = decode_volume_at(&net, c, &model, ckpt.config.channels, &settings)?;
        let name = format!("decoded_{i:03}.mrc");
        io::write_volume(&a.out.join(&name), &v)?;
        decoded.push(name);
    }

    let points: Vec<[f64; 2]> = projected
        .iter()
        .map(|v| [v[0], v.get(1).copied().unwrap_or(0.0)])
        .collect();
    let svg = io::scatter_svg(&points, Some(&clusters.assignments), "latent PCA (k-means colours)");
    write_text(&a.out.join("latent_pca.svg"), &svg)?;

    let summary = json!({
        "particles": latents.len(),
        "latent_dim": dim,
        "k": a.k,
        "cluster_sizes": clusters.sizes(),
        "inertia": clusters.inertia,
        "pca_variances": p.variances,
        "decoded_volumes": decoded,
    });
    io::write_json(&a.out.join("summary.json"), &summary)?;
    println!("analysis of {} particles written to {}", latents.len(), a.out.display());
    Ok(())
}

fn read_latents(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    Ok(io::read_table(path)?.1)
}

fn read_volumes(paths: &[PathBuf]) -> CliResult<Vec<Volume<f64>>> {
    Ok(paths.iter().map(|p| io::read_volume(p)).collect::<gaussem::Result<_>>()?)
}

fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (!v.is_empty()).then(|| v[v.len() / 2])
}

fn metrics(mode: MetricsMode) -> CliResult {
    match mode {
        MetricsMode::Fsc { a, b, out } => {
            let curve = fsc(&io::read_volume(&a)?, &io::read_volume(&b)?)?;
            let auc = fsc_auc(&curve)?;
            let rows: Vec<Vec<f64>> = curve
                .shells
                .iter()
                .zip(&curve.correlations)
                .map(|(s, c)| vec![*s as f64, *c])
                .collect();
            match out {
                Some(path) => write_rows(&path, &["shell".into(), "fsc".into()], &rows)?,
                None => {
                    println!("shell,fsc");
                    for r in &rows {
                        println!("{},{}", r[0], r[1]);
                    }
                }
            }
            println!("{}", json!({ "fsc_auc": auc }));
        }
        MetricsMode::Pcv { reference, test, rank } => {
            let flat = |paths: &[PathBuf]| -> CliResult<Vec<Vec<f64>>> {
                Ok(read_volumes(paths)?.into_iter().map(|v| v.data).collect())
            };
            let (r, t) = (flat(&reference)?, flat(&test)?);
            let rank_for = |n: usize| rank.unwrap_or((n - 1).min(20));
            let rb = ensemble_basis(&r, rank_for(r.len()))?;
            let tb = ensemble_basis(&t, rank_for(t.len()))?;
            println!("{}", json!({ "pcv": pcv(&rb, &tb)?, "reference_rank": rb.rank(), "test_rank": tb.rank() }));
        }
        MetricsMode::SampleFsc {
            checkpoint,
            latents,
            gt,
            k,
            seed,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let scores = sample_fsc(
                &ckpt.network()?,
                &ckpt.consensus()?,
                &read_latents(&latents)?,
                k,
                seed,
                &read_volumes(&gt)?,
                ckpt.config.channels,
                &ckpt.config.render_settings(),
            )?;
            println!("{}", json!({ "scores": scores, "median": median(&scores) }));
        }
        MetricsMode::ClusterFsc {
            particles,
            latents,
            gt,
            k,
            seed,
        } => {
            let data = load_particles(&particles)?;
            let scores = cluster_fsc(
                &data.images,
                &data.poses,
                &data.ctfs,
                &read_latents(&latents)?,
                k,
                seed,
                &read_volumes(&gt)?,
            )?;
            let present: Vec<f64> = scores.iter().flatten().copied().collect();
            println!("{}", json!({ "scores": scores, "median": median(&present) }));
        }
    }
    Ok(())
}

fn map_atoms(a: MapAtomsArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let net = ckpt.network()?;
    let model = ckpt.consensus()?;
    if a.latent.len() != net.config.latent_dim {
        return Err(Failure::Usage(format!(
            "--latent has {} values, the network expects {}",
            a.latent.len(),
            net.config.latent_dim
        )));
    }
    let atoms = io::read_pdb_coords(&a.pdb)?;
    let emb = net.gaussian_encode(&model)?;
    let def = net.decode_deformation(&a.latent, &emb, ckpt.config.channels, model.box_size())?;
    let moved = map_to_atoms(&model, &def, &atoms)?;
    io::write_pdb_coords(&a.out, &moved, &a.pdb)?;
    println!("{}", json!({ "atoms": moved.len(), "rmsd_angstrom": rmsd(&atoms, &moved)? }));
    Ok(())
}

mod failure;
mod manifest;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pilrecon_core::ensemble::Strategy;
use pilrecon_core::geometry::LatitudeMode;
use pilrecon_core::raster::{save_filament, save_polarity};
use pilrecon_core::synth::{generate, SynthSpec};
use pilrecon_core::trainer::{PlateauStop, TrainConfig};
use pilrecon_service::ServiceConfig;

use failure::Failure;
use manifest::{RunConfig, RunManifest};
use run::{run_batch, run_map, MapInputs};

#[derive(Parser)]
#[command(
    name = "pilrecon",
    version,
    about = "Polarity-map reconstruction from filament masks"
)]
struct Cli {
    /// Worker threads for ensemble members and batch maps (default: all cores).
    #[arg(long, global = true, env = "PILRECON_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic target, PIL and filament mask.
    Synth(SynthArgs),
    /// Reconstruct one map.
    Reconstruct(ReconstructArgs),
    /// Reconstruct every map of a list file and write a summary.
    Batch(BatchArgs),
    /// Re-run a recorded manifest after checking its input digests.
    Replay(ReplayArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    harmonics: usize,
    #[arg(long, default_value_t = 3)]
    max_wavenumber: u32,
    /// Fraction of PIL pixels covered by filament fragments.
    #[arg(long, default_value_t = 0.6)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Amplitude of the polar cap term added to the field.
    #[arg(long, default_value_t = 0.0)]
    polar_strength: f64,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Interactive,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 8)]
    members: usize,
    #[arg(long, default_value = "mean")]
    strategy: Strategy,
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Apply weight decay outside the Adam moments.
    #[arg(long)]
    decoupled_decay: bool,
    /// Pixels per step, 0 for full batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight of the filament gradient term (off by default).
    #[arg(long, default_value_t = 0.0)]
    gradient_weight: f64,
    /// Weight pixels by cos(latitude).
    #[arg(long)]
    cos_latitude: bool,
    /// Allow parallel gradient accumulation; results may differ in the last bits.
    #[arg(long)]
    no_determinism: bool,
    /// Stop early on a loss plateau, as WINDOW:REL_TOL, or "none".
    #[arg(long)]
    plateau: Option<String>,
    #[arg(long, default_value = "equal-angle")]
    latitude_mode: LatitudeMode,
    /// Integer downsampling factor applied to all input rasters.
    #[arg(long, default_value_t = 1)]
    downsample: usize,
    /// Reference grid spacing in pixels, read from the target; 0 for none.
    #[arg(long, default_value_t = 0)]
    grid_step: usize,
    #[arg(long, allow_negative_numbers = true)]
    pole_north: Option<i8>,
    #[arg(long, allow_negative_numbers = true)]
    pole_south: Option<i8>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let base = match self.preset {
            Preset::Paper => TrainConfig::paper(),
            Preset::Interactive => TrainConfig::interactive(),
        };
        let plateau = match self.plateau.as_deref() {
            None => base.plateau,
            Some("none") => None,
            Some(s) => {
                let bad = || Failure::Usage(format!("--plateau expects WINDOW:REL_TOL, got '{s}'"));
                let (w, t) = s.split_once(':').ok_or_else(bad)?;
                Some(PlateauStop {
                    window: w.parse().map_err(|_| bad())?,
                    rel_tol: t.parse().map_err(|_| bad())?,
                })
            }
        };
        if self.downsample == 0 {
            return Err(Failure::Usage("--downsample must be at least 1".into()));
        }
        let cfg = RunConfig {
            members: self.members,
            strategy: self.strategy,
            iterations: self.iterations.unwrap_or(base.iterations),
            learning_rate: self.lr.unwrap_or(base.adam.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(base.adam.weight_decay),
            decoupled_decay: self.decoupled_decay,
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            seed: self.seed,
            gradient_weight: self.gradient_weight,
            cos_latitude: self.cos_latitude,
            determinism: !self.no_determinism,
            plateau,
            latitude_mode: self.latitude_mode,
            downsample: self.downsample,
            grid_step: Some(self.grid_step),
            pole_north: self.pole_north,
            pole_south: self.pole_south,
        };
        if cfg.members == 0 {
            return Err(Failure::Usage("--members must be at least 1".into()));
        }
        let mut check = cfg.train_config();
        if check.iterations == 0 {
            // a warm start may make this valid; run_map re-validates per member
            check.iterations = 1;
        }
        check.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    filaments: PathBuf,
    /// Ground-truth polarity map, used for the reference grid and scoring.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Ground-truth PIL mask; derived from the target when absent.
    #[arg(long)]
    pil: Option<PathBuf>,
    /// Reference point file ("row col polarity" lines).
    #[arg(long, conflicts_with = "grid_step")]
    refs: Option<PathBuf>,
    /// Ensemble directory whose member snapshots seed training.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[arg(long, default_value = "map")]
    map_id: String,
    #[arg(long)]
    outdir: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct BatchArgs {
    /// List file: "map_id filaments [target [pil]]" per line.
    #[arg(long)]
    list: PathBuf,
    #[arg(long)]
    outdir: PathBuf,
    /// Run maps in order, each warm-started from the previous success.
    #[arg(long)]
    chain_warm_start: bool,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Concurrent reconstruction jobs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 8 * 1024 * 1024)]
    max_upload_bytes: usize,
    #[arg(long, default_value_t = 8)]
    max_members: usize,
    #[arg(long)]
    snapshot_dir: Option<PathBuf>,
    #[arg(long)]
    cors_origin: Option<String>,
}

fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        harmonics: a.harmonics,
        max_wavenumber: a.max_wavenumber,
        fragment_fraction: a.rho,
        polar_strength: a.polar_strength,
        ..SynthSpec::new(a.height, a.width, a.seed)
    };
    let world = generate(&spec)?;
    std::fs::create_dir_all(&a.outdir)
        .map_err(|e| Failure::Io(format!("{}: {e}", a.outdir.display())))?;
    save_polarity(&world.target, a.outdir.join("target.pgm"))?;
    save_filament(&world.pil, a.outdir.join("pil.pgm"))?;
    save_filament(&world.filaments, a.outdir.join("filaments.pgm"))?;
    println!(
        "wrote {}: {} PIL pixels, {} filament pixels",
        a.outdir.display(),
        world.pil.count(),
        world.filaments.count()
    );
    Ok(())
}

fn print_outcome(o: &run::MapOutcome) {
    match &o.row {
        Some(r) => println!("{}", r.format()),
        None => println!("{} reconstructed", o.manifest.map_id),
    }
    println!("wrote {}", o.dir.display());
}

fn reconstruct(a: &ReconstructArgs) -> Result<(), Failure> {
    let cfg = a.train.resolve()?;
    let inputs = MapInputs {
        map_id: a.map_id.clone(),
        filaments: a.filaments.clone(),
        target: a.target.clone(),
        pil: a.pil.clone(),
        refs: a.refs.clone(),
    };
    let warm = a.warm_start.as_ref().map(|d| {
        let id = std::fs::read_to_string(d.join("manifest"))
            .ok()
            .and_then(|t| RunManifest::parse(&t).ok())
            .map_or_else(|| d.display().to_string(), |m| m.map_id);
        (id, d.clone())
    });
    print_outcome(&run_map(&inputs, &cfg, warm, &a.outdir, None)?);
    Ok(())
}

fn replay(a: &ReplayArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.manifest)
        .map_err(|e| Failure::Io(format!("{}: {e}", a.manifest.display())))?;
    let m = RunManifest::parse(&text)?;
    let path = |role: &str| m.input(role).map(|r| r.path.clone());
    let inputs = MapInputs {
        map_id: m.map_id.clone(),
        filaments: path("filaments")
            .ok_or_else(|| Failure::Usage("manifest has no filaments input".into()))?,
        target: path("target"),
        pil: path("pil"),
        refs: path("refs"),
    };
    print_outcome(&run_map(
        &inputs,
        &m.config,
        m.warm_start.clone(),
        &a.outdir,
        Some(&m),
    )?);
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<(), Failure> {
    let config = ServiceConfig {
        max_upload_bytes: a.max_upload_bytes,
        workers: a.workers.max(1),
        max_members: a.max_members,
        snapshot_dir: a.snapshot_dir.clone(),
        cors_origin: a.cors_origin.clone(),
        ..ServiceConfig::default()
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Io(e.to_string()))?;
    rt.block_on(pilrecon_service::serve(&a.bind, a.port, config))
        .map_err(|e| Failure::Io(e.to_string()))
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Batch(a) => {
            let cfg = a.train.resolve()?;
            print!(
                "{}",
                run_batch(&a.list, &a.outdir, &cfg, a.chain_warm_start)?
            );
            Ok(())
        }
        Command::Replay(a) => replay(a),
        Command::Serve(a) => serve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pilrecon: {e}");
            e.exit_code()
        }
    }
}

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;
mod staging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfrf::dataio::DataError;
use dfrf::training::TrainError;

use config::Overrides;

/// Bad flags, configuration or arguments (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A numerical check failed (exit code 3).
#[derive(Debug)]
pub struct NumericalError(pub String);

impl std::fmt::Display for NumericalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalError {}

#[derive(Parser)]
#[command(name = "dfrf", version, about = "Few-shot conditioned dynamic radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic deformable scene.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Extra notch half-angle at full signal, in radians.
        #[arg(long, default_value_t = 0.35)]
        amplitude: f64,
        /// Camera azimuth swing in radians.
        #[arg(long, default_value_t = 0.4)]
        orbit: f64,
        #[arg(long, default_value_t = 32)]
        condition_dim: usize,
    },
    /// Coarse then joint training across two or more scenes.
    TrainBase {
        /// Scene directory; repeat for each training scene.
        #[arg(long = "scene", required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Adapt a base checkpoint to the leading frames of one scene.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fine-tuning iterations (same as --finetune-iters).
        #[arg(long)]
        iters: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render frames of a scene to PNG.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frame indices, e.g. `0,5,30-39`.
        #[arg(long, conflicts_with = "conditions")]
        frames: Option<String>,
        /// Text file with one whitespace-separated condition vector per line,
        /// rendered from the camera of `--camera`.
        #[arg(long)]
        conditions: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long, default_value_t = 4)]
        refs: usize,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 1024)]
        chunk: usize,
    },
    /// PSNR and SSIM of rendered frames against a scene.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        /// Directory of `NNNNN.png` renders named by frame index.
        #[arg(long)]
        renders: PathBuf,
        /// Compare against the scene's frames or its background plates.
        #[arg(long, value_enum, default_value_t = commands::Target::Frames)]
        target: commands::Target,
        /// Also write the table to `<out>/eval.tsv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every registered finite-difference gradient suite.
    Gradcheck,
}

fn threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("DFRF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("DFRF_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    threads()?;
    match cli.command {
        Command::GenData {
            out,
            seed,
            frames,
            resolution,
            amplitude,
            orbit,
            condition_dim,
        } => commands::gen_data(&out, seed, frames, resolution, amplitude, orbit, condition_dim),
        Command::TrainBase { scenes, out, overrides } => commands::train_base(&scenes, &out, &overrides),
        Command::Finetune {
            checkpoint,
            scene,
            out,
            iters,
            mut overrides,
        } => {
            if iters.is_some() {
                overrides.finetune_iters = iters;
            }
            commands::finetune(&checkpoint, &scene, &out, &overrides)
        }
        Command::Render {
            checkpoint,
            scene,
            out,
            frames,
            conditions,
            camera,
            refs,
            samples,
            chunk,
        } => {
            let job = match (frames, conditions) {
                (_, Some(path)) => commands::RenderJob::Conditions { path, camera },
                (Some(list), None) => commands::RenderJob::Frames(commands::parse_frames(&list)?),
                (None, None) => commands::RenderJob::AllFrames,
            };
            commands::render(&checkpoint, &scene, &out, job, refs, samples, chunk)
        }
        Command::Eval {
            scene,
            renders,
            target,
            out,
        } => commands::eval(&scene, &renders, target, out.as_deref()),
        Command::Gradcheck => commands::gradcheck(),
    }
}

/// 1 usage, 2 data, 3 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<NumericalError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::NonFinite { .. } => 3,
                _ => 2,
            };
        }
        if cause.is::<DataError>() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

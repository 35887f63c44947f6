use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;

use dfrf::conditioning::ConditionTrack;
use dfrf::dataio::{
    checkpoint_profile, generate_synthetic_scene, load_checkpoint, load_scene, psnr, read_png, save_checkpoint, ssim,
    write_png, DataError, Scene, SyntheticConfig,
};
use dfrf::diffmath::{Profile, Real};
use dfrf::gradcheck::{run_all, TOLERANCE};
use dfrf::model::{ModelConfig, ModelState, ReferenceSet};
use dfrf::renderer::render_frame;
use dfrf::training::{self, clip_references, LogRecord, Observer, TrainError};

use crate::config::{Overrides, RunConfig};
use crate::staging::Staging;
use crate::{NumericalError, UsageError};

pub const CHECKPOINT: &str = "checkpoint.dfrf";

fn frame_name(i: usize) -> String {
    format!("{i:05}.png")
}

pub fn gen_data(
    out: &Path,
    seed: u64,
    frames: usize,
    resolution: usize,
    amplitude: f64,
    orbit: f64,
    condition_dim: usize,
) -> anyhow::Result<()> {
    if resolution < 16 || frames == 0 || condition_dim == 0 {
        bail!(UsageError("need --resolution >= 16 and positive --frames, --condition-dim".into()));
    }
    if !(amplitude >= 0.0 && orbit.is_finite()) {
        bail!(UsageError("--amplitude must be non-negative and --orbit finite".into()));
    }
    let cfg = SyntheticConfig {
        seed,
        n_frames: frames,
        resolution,
        deformation_amplitude: amplitude,
        orbit_amplitude: orbit,
        condition_dim,
    };
    let staging = Staging::new(out)?;
    generate_synthetic_scene(&cfg, staging.root())?;
    staging.commit()?;
    println!("wrote scene {seed} ({frames} frames, {resolution}x{resolution}) to {}", out.display());
    Ok(())
}

/// Writes log records as JSON lines (to a file and stderr) and a checkpoint
/// after every completed stage.
struct FileObserver {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl FileObserver {
    fn new(staging: &Staging, log: &str) -> anyhow::Result<Self> {
        let path = staging.path(log);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(FileObserver {
            dir: staging.root().to_path_buf(),
            log: BufWriter::new(file),
        })
    }
}

impl<T: Real> Observer<T> for FileObserver {
    fn log(&mut self, record: &LogRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(record).map_err(|e| TrainError::Observer(e.to_string()))?;
        eprintln!("{line}");
        writeln!(self.log, "{line}")
            .and_then(|_| self.log.flush())
            .map_err(|e| TrainError::Observer(e.to_string()))
    }

    fn stage_done(&mut self, stage: &'static str, state: &ModelState<T>) -> Result<(), TrainError> {
        save_checkpoint(state, &self.dir.join(format!("{stage}.dfrf"))).map_err(|e| TrainError::Observer(e.to_string()))
    }
}

fn write_config(staging: &Staging, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::write(staging.path("config.toml"), toml::to_string(cfg)?)?;
    Ok(())
}

pub fn train_base(scene_dirs: &[PathBuf], out: &Path, overrides: &Overrides) -> anyhow::Result<()> {
    let cfg = overrides.resolve()?;
    let scenes = scene_dirs.iter().map(|d| load_scene(d)).collect::<Result<Vec<_>, _>>()?;
    let dim = scenes[0].track.dim();
    let model = cfg.model.model(dim);
    match cfg.train.profile {
        Profile::F32 => train_base_as::<f32>(&scenes, &cfg, model, out),
        Profile::F64 => train_base_as::<f64>(&scenes, &cfg, model, out),
    }
}

fn train_base_as<T: Real>(scenes: &[Scene], cfg: &RunConfig, model: ModelConfig, out: &Path) -> anyhow::Result<()> {
    let staging = Staging::new(out)?;
    let mut state = ModelState::<T>::init(model, cfg.train.seed);
    let mut observer = FileObserver::new(&staging, "train.jsonl")?;
    training::train_base(scenes, &cfg.train, &mut state, &mut observer)?;
    save_checkpoint(&state, &staging.path(CHECKPOINT))?;
    write_config(&staging, cfg)?;
    staging.commit()?;
    println!("trained {} iterations; checkpoint {}", state.iteration, out.join(CHECKPOINT).display());
    Ok(())
}

pub fn finetune(checkpoint: &Path, scene_dir: &Path, out: &Path, overrides: &Overrides) -> anyhow::Result<()> {
    let mut cfg = overrides.resolve()?;
    let profile = checkpoint_profile(checkpoint)?;
    if overrides.profile.is_some_and(|p| Profile::from(p) != profile) {
        bail!(UsageError(format!("--profile does not match the checkpoint ({profile})")));
    }
    cfg.train.profile = profile;
    let scene = load_scene(scene_dir)?;
    match profile {
        Profile::F32 => finetune_as::<f32>(checkpoint, &scene, &cfg, out),
        Profile::F64 => finetune_as::<f64>(checkpoint, &scene, &cfg, out),
    }
}

fn finetune_as<T: Real>(checkpoint: &Path, scene: &Scene, cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let base: ModelState<T> = load_checkpoint(checkpoint)?;
    let clip = scene.clip(cfg.train.clip_frames);
    let staging = Staging::new(out)?;
    let mut observer = FileObserver::new(&staging, "finetune.jsonl")?;
    let (state, _) = training::finetune(&base, &clip, &cfg.train, &mut observer)?;
    save_checkpoint(&state, &staging.path(CHECKPOINT))?;
    write_config(&staging, cfg)?;
    staging.commit()?;
    println!(
        "fine-tuned on {} frames of {}; checkpoint {}",
        clip.len(),
        scene.id,
        out.join(CHECKPOINT).display()
    );
    Ok(())
}

pub enum RenderJob {
    AllFrames,
    Frames(Vec<usize>),
    Conditions { path: PathBuf, camera: usize },
}

/// `0,5,30-39` to a list of indices.
pub fn parse_frames(list: &str) -> anyhow::Result<Vec<usize>> {
    let bad = || UsageError(format!("invalid frame list `{list}`"));
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    bail!(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        bail!(bad());
    }
    Ok(out)
}

fn read_conditions(path: &Path) -> anyhow::Result<ConditionTrack> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let parse_err = |message: String| DataError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(format!("line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    ConditionTrack::new(rows).map_err(|e| parse_err(e.to_string()).into())
}

pub fn render(
    checkpoint: &Path,
    scene_dir: &Path,
    out: &Path,
    job: RenderJob,
    refs: usize,
    samples: usize,
    chunk: usize,
) -> anyhow::Result<()> {
    if refs == 0 || samples < 2 || chunk == 0 {
        bail!(UsageError("need --refs > 0, --samples >= 2 and --chunk > 0".into()));
    }
    let scene = load_scene(scene_dir)?;
    if refs > scene.len() {
        bail!(UsageError(format!("--refs {refs} exceeds the scene's {} frames", scene.len())));
    }
    match checkpoint_profile(checkpoint)? {
        Profile::F32 => render_as::<f32>(checkpoint, &scene, out, job, refs, samples, chunk),
        Profile::F64 => render_as::<f64>(checkpoint, &scene, out, job, refs, samples, chunk),
    }
}

fn render_as<T: Real>(
    checkpoint: &Path,
    scene: &Scene,
    out: &Path,
    job: RenderJob,
    refs: usize,
    samples: usize,
    chunk: usize,
) -> anyhow::Result<()> {
    let state: ModelState<T> = load_checkpoint(checkpoint)?;
    let references = ReferenceSet::<T>::from_scene(scene, &clip_references(refs))?;
    // (camera frame, condition track, condition index, output index)
    let external;
    let (track, views): (&ConditionTrack, Vec<(usize, usize)>) = match job {
        RenderJob::AllFrames => (&scene.track, (0..scene.len()).map(|i| (i, i)).collect()),
        RenderJob::Frames(list) => (&scene.track, list.into_iter().map(|i| (i, i)).collect()),
        RenderJob::Conditions { path, camera } => {
            external = read_conditions(&path)?;
            (&external, (0..external.len()).map(|t| (camera, t)).collect())
        }
    };
    if let Some(&(cam, _)) = views.iter().find(|(cam, _)| *cam >= scene.len()) {
        bail!(UsageError(format!("frame {cam} is out of range (scene has {})", scene.len())));
    }
    let staging = Staging::new(out)?;
    for &(cam, t) in &views {
        let image = render_frame(&state, scene, &scene.frames[cam], &references, track, t, samples, chunk)?;
        write_png(&staging.path(&frame_name(t)), &image)?;
    }
    staging.commit()?;
    println!("rendered {} frames to {}", views.len(), out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Frames,
    Backgrounds,
}

pub fn eval(scene_dir: &Path, renders: &Path, target: Target, out: Option<&Path>) -> anyhow::Result<()> {
    let scene = load_scene(scene_dir)?;
    let entries = fs::read_dir(renders).map_err(|e| DataError::io(renders, e))?;
    let mut indexed = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let index = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".png"))
            .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(i) = index {
            indexed.push((i, path));
        }
    }
    indexed.sort();
    if indexed.is_empty() {
        bail!(DataError::MissingFile(renders.join("NNNNN.png")));
    }
    let mut table = String::from("frame\tpsnr\tssim\n");
    let (mut sum_p, mut sum_s) = (0.0, 0.0);
    for (i, path) in &indexed {
        let frame = scene
            .frames
            .get(*i)
            .ok_or_else(|| DataError::Parse {
                path: path.clone(),
                message: format!("the scene has no frame {i}"),
            })?;
        let reference = match target {
            Target::Frames => &frame.image,
            Target::Backgrounds => &frame.background,
        };
        let image = read_png(path)?;
        let (p, s) = (psnr(&image, reference)?, ssim(&image, reference)?);
        sum_p += p;
        sum_s += s;
        table.push_str(&format!("{i}\t{p:.4}\t{s:.6}\n"));
    }
    let n = indexed.len() as f64;
    table.push_str(&format!("mean\t{:.4}\t{:.6}\n", sum_p / n, sum_s / n));
    if let Some(out) = out {
        let staging = Staging::new(out)?;
        fs::write(staging.path("eval.tsv"), &table)?;
        staging.commit()?;
    }
    print!("{table}");
    Ok(())
}

pub fn gradcheck() -> anyhow::Result<()> {
    let results = run_all();
    println!("suite\tmax_rel_error\tstatus");
    for r in &results {
        let (err, status) = match &r.max_error {
            Ok(e) => (format!("{e:.3e}"), if r.passed() { "pass" } else { "FAIL" }),
            Err(msg) => (msg.clone(), "FAIL"),
        };
        println!("{}\t{err}\t{status}", r.name);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if !failed.is_empty() {
        bail!(NumericalError(format!(
            "gradient suites above tolerance {TOLERANCE:e}: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

use dfrf::dataio::{load_checkpoint, save_checkpoint, synthesize, Scene, SyntheticConfig};
use dfrf::diffmath::Tensor;
use dfrf::model::{ModelConfig, ModelState, ReferenceSet, Stage};
use dfrf::radiance::FieldConfig;
use dfrf::renderer::render_frame;
use dfrf::training::{
    clip_references, finetune, train_base, train_stages, LogRecord, Observer, Silent, TrainConfig, TrainError,
};

fn scene(seed: u64, frames: usize) -> Scene {
    synthesize(&SyntheticConfig {
        seed,
        n_frames: frames,
        resolution: 16,
        condition_dim: 6,
        ..SyntheticConfig::default()
    })
}

fn small_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 16,
        extractor_hidden: 8,
        aggregator_hidden: 16,
        warp_hidden: 32,
        field: FieldConfig {
            depth: 3,
            width: 64,
            skip_at: None,
            color_hidden: 32,
        },
        ..ModelConfig::desk(6)
    }
}

fn quick(coarse: usize, joint: usize) -> TrainConfig {
    TrainConfig {
        coarse_iters: coarse,
        joint_iters: joint,
        finetune_iters: 5,
        rays_per_batch: 32,
        samples_per_ray: 12,
        log_every: 10,
        clip_frames: 8,
        ..TrainConfig::default()
    }
}

fn render<T: dfrf::diffmath::Real>(state: &ModelState<T>, scene: &Scene, t: usize) -> Tensor<f64> {
    let refs = ReferenceSet::<T>::from_scene(scene, &clip_references(4)).unwrap();
    render_frame(state, scene, &scene.frames[t], &refs, &scene.track, t, 12, 128).unwrap()
}

#[test]
fn smoke_training_reduces_the_photometric_loss() {
    let scenes = [scene(0, 10), scene(1, 10)];
    let cfg = TrainConfig {
        rays_per_batch: 64,
        ..quick(500, 200)
    };
    let mut state = ModelState::<f32>::init(small_model(), 0);
    let log = train_base(&scenes, &cfg, &mut state, &mut Silent).unwrap();
    assert_eq!(log.losses.len(), 700);
    let mean = |r: &[dfrf::renderer::LossReport]| r.iter().map(|l| l.l_mse).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&log.losses[..50]), mean(&log.losses[650..]));
    assert!(last < first, "{first} -> {last}");
    assert!(log.losses.iter().all(|l| l.total.is_finite()));
    assert_eq!(state.stage, Stage::Joint { warp: true });
}

/// Records the warp-module fingerprint at each stage boundary.
struct Fingerprints(Vec<(&'static str, u64)>, Vec<LogRecord>);

impl Observer<f32> for Fingerprints {
    fn log(&mut self, record: &LogRecord) -> Result<(), TrainError> {
        self.1.push(record.clone());
        Ok(())
    }

    fn stage_done(&mut self, stage: &'static str, state: &ModelState<f32>) -> Result<(), TrainError> {
        self.0.push((stage, state.params.fingerprint("warp.")));
        Ok(())
    }
}

#[test]
fn coarse_stage_never_touches_the_warp_module() {
    let scenes = [scene(2, 8), scene(3, 8)];
    let mut state = ModelState::<f32>::init(small_model(), 1);
    let initial = state.params.fingerprint("warp.");
    let field = state.params.fingerprint("field.");
    let mut obs = Fingerprints(Vec::new(), Vec::new());
    let log = train_base(&scenes, &quick(20, 20), &mut state, &mut obs).unwrap();
    assert_eq!(obs.0[0], ("coarse", initial));
    assert_ne!(obs.0[1].1, initial, "joint stage trains the warp module");
    assert_ne!(state.params.fingerprint("field."), field);
    // no optimizer state exists for warp parameters before the joint stage
    assert!(log.losses[..20].iter().all(|l| l.l_reg == 0.0));
    assert!(log.losses[20..].iter().all(|l| l.l_reg > 0.0));
    // logged every 10 iterations and at the end of each stage
    let iters: Vec<u64> = obs.1.iter().map(|r| r.iteration).collect();
    assert_eq!(iters, vec![10, 20, 30, 40]);
    assert!(obs.1.iter().all(|r| (r.total - (r.l_mse + 5e-8 * r.l_reg)).abs() <= 1e-15));
}

#[test]
fn frozen_offsets_stay_zero() {
    let scenes = [scene(2, 8), scene(3, 8)];
    let mut state = ModelState::<f32>::init(small_model(), 2);
    let cfg = TrainConfig {
        warp: false,
        ..quick(5, 10)
    };
    let before = state.params.fingerprint("warp.");
    let log = train_base(&scenes, &cfg, &mut state, &mut Silent).unwrap();
    assert_eq!(state.params.fingerprint("warp."), before);
    assert!(log.losses.iter().all(|l| l.l_reg == 0.0));
}

#[test]
fn fixed_seed_gives_identical_checkpoints() {
    let scenes = [scene(4, 8), scene(5, 8)];
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut state = ModelState::<f32>::init(small_model(), 7);
        train_base(&scenes, &quick(10, 10), &mut state, &mut Silent).unwrap();
        let path = dir.path().join(name);
        save_checkpoint(&state, &path).unwrap();
        std::fs::read(path).unwrap()
    };
    assert_eq!(run("a"), run("b"));
    let mut other = ModelState::<f32>::init(small_model(), 8);
    train_base(&scenes, &quick(10, 10), &mut other, &mut Silent).unwrap();
    let path = dir.path().join("c");
    save_checkpoint(&other, &path).unwrap();
    assert_ne!(std::fs::read(path).unwrap(), run("d"));
}

#[test]
fn zero_iteration_finetune_renders_like_the_base() {
    let scenes = [scene(6, 10), scene(7, 10)];
    let mut base = ModelState::<f32>::init(small_model(), 3);
    train_base(&scenes, &quick(5, 5), &mut base, &mut Silent).unwrap();
    let clip = scene(8, 12);
    let cfg = TrainConfig {
        finetune_iters: 0,
        ..quick(0, 0)
    };
    let (tuned, log) = finetune(&base, &clip.clip(8), &cfg, &mut Silent).unwrap();
    assert!(log.losses.is_empty());
    assert_eq!(tuned.params, base.params);
    assert_eq!(render(&tuned, &clip, 10), render(&base, &clip, 10));
}

#[test]
fn finetuning_leaves_the_base_checkpoint_untouched() {
    let scenes = [scene(6, 10), scene(7, 10)];
    let mut base = ModelState::<f32>::init(small_model(), 4);
    train_base(&scenes, &quick(5, 5), &mut base, &mut Silent).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.dfrf");
    save_checkpoint(&base, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for seed in [10, 11] {
        let loaded: ModelState<f32> = load_checkpoint(&path).unwrap();
        let (tuned, log) = finetune(&loaded, &scene(seed, 9), &quick(0, 0), &mut Silent).unwrap();
        assert_eq!(log.losses.len(), 5);
        assert_ne!(tuned.params, loaded.params);
        // fresh optimizer moments, counting only the fine-tuning steps
        assert!(tuned.optimizer.moments.values().all(|m| m.step == 5));
    }
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn infeasible_setups_are_rejected_up_front() {
    let mut state = ModelState::<f32>::init(small_model(), 5);
    let one = [scene(0, 8)];
    assert!(matches!(
        train_base(&one, &quick(1, 1), &mut state, &mut Silent),
        Err(TrainError::Infeasible(_))
    ));
    let short = [scene(0, 4), scene(1, 8)];
    assert!(matches!(
        train_base(&short, &quick(1, 1), &mut state, &mut Silent),
        Err(TrainError::Infeasible(_))
    ));
    let other_dim = synthesize(&SyntheticConfig {
        seed: 1,
        n_frames: 8,
        resolution: 16,
        condition_dim: 5,
        ..SyntheticConfig::default()
    });
    assert!(matches!(
        train_base(&[scene(0, 8), other_dim], &quick(1, 1), &mut state, &mut Silent),
        Err(TrainError::Infeasible(_))
    ));
    assert!(matches!(
        finetune(&state, &scene(0, 4), &quick(1, 1), &mut Silent),
        Err(TrainError::Infeasible(_))
    ));
    let bad = TrainConfig {
        lambda: -1.0,
        ..quick(1, 1)
    };
    assert!(matches!(
        train_stages(&one, &bad, &mut state, &mut Silent),
        Err(TrainError::Infeasible(_))
    ));
    assert_eq!(state.iteration, 0);
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic() {
    let mut state = ModelState::<f32>::init(small_model(), 6);
    let w = state.params.get_mut("field.color_out.b").unwrap();
    w.data_mut()[0] = f32::NAN;
    let err = train_stages(&[scene(0, 8)], &quick(3, 0), &mut state, &mut Silent).unwrap_err();
    match err {
        TrainError::NonFinite {
            iteration,
            stage,
            diagnostic,
        } => {
            assert_eq!((iteration, stage), (0, "coarse"));
            assert!(diagnostic.contains("target frame") && diagnostic.contains("references"), "{diagnostic}");
        }
        other => panic!("{other}"),
    }
}

#[test]
fn strong_regularization_shrinks_offsets() {
    // with a huge weight the regularizer dominates and drives offsets down
    let scenes = [scene(2, 8), scene(3, 8)];
    let run = |lambda: f64| {
        let cfg = TrainConfig {
            lambda,
            ..quick(0, 40)
        };
        let mut state = ModelState::<f32>::init(small_model(), 9);
        let log = train_base(&scenes, &cfg, &mut state, &mut Silent).unwrap();
        log.losses[30..].iter().map(|l| l.l_reg).sum::<f64>() / 10.0
    };
    let (free, strong) = (run(0.0), run(10.0));
    assert!(strong < 0.5 * free, "{strong} vs {free}");
}

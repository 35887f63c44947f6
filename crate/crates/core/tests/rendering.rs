use dfrf::dataio::{synthesize, Scene, SyntheticConfig};
use dfrf::model::{ModelConfig, ModelState, ReferenceSet, Stage};
use dfrf::renderer::render_frame;
use dfrf::training::clip_references;

fn scene() -> Scene {
    synthesize(&SyntheticConfig {
        seed: 21,
        n_frames: 8,
        resolution: 20,
        condition_dim: 4,
        ..SyntheticConfig::default()
    })
}

#[test]
fn chunking_does_not_change_the_image() {
    let scene = scene();
    for stage in [Stage::Coarse, Stage::Joint { warp: true }] {
        let mut state = ModelState::<f32>::init(ModelConfig::desk(4), 1);
        state.stage = stage;
        let refs = ReferenceSet::<f32>::from_scene(&scene, &clip_references(4)).unwrap();
        let at = |chunk| render_frame(&state, &scene, &scene.frames[6], &refs, &scene.track, 6, 10, chunk).unwrap();
        let reference = at(4096);
        assert_eq!(at(64), reference);
        assert_eq!(at(1), reference);
        assert_eq!(reference.shape(), &[20, 20, 3]);
        assert!(reference.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn zero_density_model_renders_the_background() {
    let scene = scene();
    let state = ModelState::<f64>::init(ModelConfig::desk(4), 2).zero_density();
    let refs = ReferenceSet::<f64>::from_scene(&scene, &clip_references(4)).unwrap();
    for t in [0, 5] {
        let img = render_frame(&state, &scene, &scene.frames[t], &refs, &scene.track, t, 8, 50).unwrap();
        assert_eq!(img, scene.frames[t].background);
    }
}

#[test]
fn f32_and_f64_profiles_agree() {
    let scene = scene();
    let s64 = ModelState::<f64>::init(ModelConfig::desk(4), 3);
    let s32 = ModelState::<f32> {
        config: s64.config,
        params: s64.params.convert(),
        optimizer: Default::default(),
        rng: s64.rng.clone(),
        stage: s64.stage,
        iteration: 0,
    };
    let r64 = ReferenceSet::<f64>::from_scene(&scene, &clip_references(4)).unwrap();
    let r32 = ReferenceSet::<f32>::from_scene(&scene, &clip_references(4)).unwrap();
    let a = render_frame(&s64, &scene, &scene.frames[4], &r64, &scene.track, 4, 10, 256).unwrap();
    let b = render_frame(&s32, &scene, &scene.frames[4], &r32, &scene.track, 4, 10, 256).unwrap();
    let worst = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(worst < 1e-4, "{worst}");
}

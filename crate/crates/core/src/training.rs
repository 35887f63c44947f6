//! Adam, the two-stage base training schedule (coarse field-only stage,
//! then joint training with warping), and few-shot fine-tuning.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Scene;
use crate::diffmath::{Profile, Real, Tensor};
use crate::model::{ModelError, ModelState, RayBundle, ReferenceSet, Stage};
use crate::nn::{Graph, ParamStore};
use crate::renderer::{mse_loss, total_loss, LossReport, DEFAULT_LAMBDA};
use crate::warpfield::offset_regularizer;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("parameter `{name}`: gradient shape {grad:?} does not match {param:?}")]
    ShapeMismatch {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("gradient for unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid training setup: {0}")]
    Infeasible(String),
    #[error("non-finite loss at iteration {iteration} ({stage}): {diagnostic}")]
    NonFinite {
        iteration: u64,
        stage: &'static str,
        diagnostic: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("observer: {0}")]
    Observer(String),
}

/// First and second moments of one parameter and its own step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            moments: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Parameters without a gradient, and their moments, are left untouched.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| TrainError::UnknownParameter(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(TrainError::ShapeMismatch {
                name: name.clone(),
                grad: g.shape().to_vec(),
                param: p.shape().to_vec(),
            });
        }
    }
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(p.shape()),
            v: Tensor::zeros(p.shape()),
            step: 0,
        });
        mom.step += 1;
        let c1 = 1.0 - BETA1.powf(mom.step as f64);
        let c2 = 1.0 - BETA2.powf(mom.step as f64);
        let (b1, b2, lr_t) = (T::c(BETA1), T::c(BETA2), T::c(lr));
        let (c1, c2, eps) = (T::c(c1), T::c(c2), T::c(ADAM_EPS));
        let (one, ms, vs) = (T::one(), mom.m.data_mut(), mom.v.data_mut());
        for ((x, &gi), (m, v)) in p.data_mut().iter_mut().zip(g.data()).zip(ms.iter_mut().zip(vs.iter_mut())) {
            *m = b1 * *m + (one - b1) * gi;
            *v = b2 * *v + (one - b2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub coarse_iters: usize,
    pub joint_iters: usize,
    pub finetune_iters: usize,
    pub lr: f64,
    /// Learning rate reached at the end of each schedule (exponential decay).
    pub lr_final: f64,
    pub lambda: f64,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub n_references: usize,
    pub seed: u64,
    pub profile: Profile,
    /// Predict offsets in the joint stage; `false` freezes them at zero.
    pub warp: bool,
    /// Number of leading frames of a scene used as the fine-tuning clip.
    pub clip_frames: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            coarse_iters: 3000,
            joint_iters: 2000,
            finetune_iters: 1000,
            lr: 5e-4,
            lr_final: 5e-5,
            lambda: DEFAULT_LAMBDA,
            rays_per_batch: 128,
            samples_per_ray: 32,
            n_references: 4,
            seed: 0,
            profile: Profile::F32,
            warp: true,
            clip_frames: 30,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Infeasible(m.into()));
        if self.rays_per_batch == 0 || self.samples_per_ray < 2 || self.n_references == 0 {
            return bad("rays_per_batch, n_references must be positive and samples_per_ray at least 2");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    /// `lr * (lr_final / lr)^(i / total)`.
    pub fn learning_rate(&self, i: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        self.lr * (self.lr_final / self.lr).powf(i as f64 / (total - 1) as f64)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub stage: String,
    pub l_mse: f64,
    pub l_reg: f64,
    pub total: f64,
    pub wall_ms: u64,
}

/// Callbacks invoked by the training loops.
pub trait Observer<T> {
    fn log(&mut self, _record: &LogRecord) -> Result<(), TrainError> {
        Ok(())
    }

    /// Called after each completed stage with the state at that point.
    fn stage_done(&mut self, _stage: &'static str, _state: &ModelState<T>) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl<T> Observer<T> for Silent {}

/// Losses of every iteration, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub losses: Vec<LossReport>,
}

/// One sampled training example.
struct Example<'a> {
    scene: &'a Scene,
    target: usize,
    refs: Vec<usize>,
}

/// A single optimization step on one example; returns the loss report.
fn step<T: Real>(
    state: &mut ModelState<T>,
    cfg: &TrainConfig,
    ex: &Example<'_>,
    stage: Stage,
    lr: f64,
    label: &'static str,
) -> Result<LossReport, TrainError> {
    let model = state.model();
    let scene = ex.scene;
    let frame = &scene.frames[ex.target];
    let (h, w) = (scene.height, scene.width);
    let pixels: Vec<(usize, usize)> = sample(&mut state.rng, h * w, cfg.rays_per_batch.min(h * w))
        .into_iter()
        .map(|i| (i % w, i / w))
        .collect();
    let bundle = RayBundle::new(frame, &pixels, scene.z_near, scene.z_far, cfg.samples_per_ray, Some(&mut state.rng))?;
    let truth: Vec<T> = RayBundle::truth(frame, &pixels);
    let refs = ReferenceSet::<T>::from_scene(scene, &ex.refs)?;

    let g = Graph::new(&state.params, true);
    let features = model.extractor.forward(&g, g.constant(refs.images.clone())).map_err(ModelError::from)?;
    let condition = model.condition(&g, &scene.track, ex.target)?;
    let out = model.forward(&g, features, &refs.views, condition, &bundle, scene.world_scale, stage)?;
    let l_mse = mse_loss(g.tape(), out.rgb, &truth).map_err(ModelError::from)?;
    let mse_value = g.value(l_mse).item().f64();
    let (loss, reg_value) = match out.offsets {
        Some(offsets) => {
            let sigma = g.value(out.sigma).data().to_vec();
            let alphas = bundle.batch.opacities(&sigma);
            let reg = offset_regularizer(&g, offsets, &alphas, refs.len()).map_err(ModelError::from)?;
            let reg_value = g.value(reg).item().f64();
            let weighted = g.scale(reg, T::c(cfg.lambda));
            (g.add(l_mse, weighted).map_err(ModelError::from)?, reg_value)
        }
        None => (l_mse, 0.0),
    };
    let report = total_loss(mse_value, reg_value, cfg.lambda);
    let diagnostic = |what: &str| {
        format!(
            "{what}; scene {} target frame {} references {:?}, {} rays x {} samples, l_mse {} l_reg {}",
            scene.id, ex.target, ex.refs, bundle.batch.rays, bundle.batch.samples, report.l_mse, report.l_reg
        )
    };
    if !report.total.is_finite() {
        return Err(TrainError::NonFinite {
            iteration: state.iteration,
            stage: label,
            diagnostic: diagnostic("loss is not finite"),
        });
    }
    let grads = g.gradients(loss).map_err(ModelError::from)?;
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
        return Err(TrainError::NonFinite {
            iteration: state.iteration,
            stage: label,
            diagnostic: diagnostic(&format!("gradient of `{name}` is not finite")),
        });
    }
    adam_step(&mut state.params, &grads, &mut state.optimizer, lr)?;
    Ok(report)
}

/// Runs `iters` steps of `stage`, drawing examples with `draw`.
#[allow(clippy::too_many_arguments)]
fn run_stage<'s, T: Real>(
    state: &mut ModelState<T>,
    cfg: &TrainConfig,
    stage: Stage,
    label: &'static str,
    iters: usize,
    mut draw: impl FnMut(&mut ModelState<T>) -> Example<'s>,
    log: &mut TrainLog,
    observer: &mut dyn Observer<T>,
    lr_offset: usize,
    lr_total: usize,
) -> Result<(), TrainError> {
    let started = Instant::now();
    for i in 0..iters {
        let ex = draw(state);
        let lr = cfg.learning_rate(lr_offset + i, lr_total);
        let report = step(state, cfg, &ex, stage, lr, label)?;
        state.iteration += 1;
        log.losses.push(report);
        if (i + 1) % cfg.log_every == 0 || i + 1 == iters {
            let record = LogRecord {
                iteration: state.iteration,
                stage: label.to_string(),
                l_mse: report.l_mse,
                l_reg: report.l_reg,
                total: report.total,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            observer.log(&record)?;
            log.records.push(record);
        }
    }
    if iters > 0 {
        state.stage = stage;
    }
    observer.stage_done(label, state)?;
    Ok(())
}

fn check_scenes(scenes: &[Scene], n_refs: usize, dim: usize) -> Result<(), TrainError> {
    for s in scenes {
        if s.len() < n_refs + 1 {
            return Err(TrainError::Infeasible(format!(
                "scene {} has {} frames; {} references plus a target are needed",
                s.id,
                s.len(),
                n_refs
            )));
        }
        if s.track.dim() != dim {
            return Err(TrainError::Infeasible(format!(
                "scene {} has {}-dimensional condition vectors, the model expects {dim}",
                s.id,
                s.track.dim()
            )));
        }
    }
    Ok(())
}

/// Random scene, random target, and `n` distinct random references from
/// the same scene excluding the target.
fn draw_random<'s, T>(scenes: &'s [Scene], n: usize, state: &mut ModelState<T>) -> Example<'s> {
    let scene = &scenes[state.rng.random_range(0..scenes.len())];
    let target = state.rng.random_range(0..scene.len());
    let refs = sample(&mut state.rng, scene.len() - 1, n)
        .into_iter()
        .map(|i| if i >= target { i + 1 } else { i })
        .collect();
    Example { scene, target, refs }
}

/// Coarse then joint stages over scenes, with randomly drawn references.
/// Used directly for single-scene experiments; [`train_base`] adds the
/// multi-scene requirement.
pub fn train_stages<T: Real>(
    scenes: &[Scene],
    cfg: &TrainConfig,
    state: &mut ModelState<T>,
    observer: &mut dyn Observer<T>,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::Infeasible("no scenes".into()));
    }
    check_scenes(scenes, cfg.n_references, state.config.condition_dim)?;
    let total = cfg.coarse_iters + cfg.joint_iters;
    let n = cfg.n_references;
    let mut log = TrainLog::default();
    run_stage(
        state,
        cfg,
        Stage::Coarse,
        "coarse",
        cfg.coarse_iters,
        |s| draw_random(scenes, n, s),
        &mut log,
        observer,
        0,
        total,
    )?;
    run_stage(
        state,
        cfg,
        Stage::Joint { warp: cfg.warp },
        "joint",
        cfg.joint_iters,
        |s| draw_random(scenes, n, s),
        &mut log,
        observer,
        cfg.coarse_iters,
        total,
    )?;
    Ok(log)
}

/// Base training over at least two scenes.
pub fn train_base<T: Real>(
    scenes: &[Scene],
    cfg: &TrainConfig,
    state: &mut ModelState<T>,
    observer: &mut dyn Observer<T>,
) -> Result<TrainLog, TrainError> {
    if scenes.len() < 2 {
        return Err(TrainError::Infeasible(format!(
            "base training needs at least 2 scenes, got {}",
            scenes.len()
        )));
    }
    train_stages(scenes, cfg, state, observer)
}

/// Reference frames used for a fine-tuning clip and at inference: the first
/// `n` frames.
pub fn clip_references(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Fine-tunes every parameter on `clip` with the joint objective. References
/// are the first `n_references` frames; targets are drawn from the rest.
/// Optimizer moments start fresh.
pub fn finetune<T: Real>(
    base: &ModelState<T>,
    clip: &Scene,
    cfg: &TrainConfig,
    observer: &mut dyn Observer<T>,
) -> Result<(ModelState<T>, TrainLog), TrainError> {
    cfg.validate()?;
    let n = cfg.n_references;
    if clip.len() < n + 1 {
        return Err(TrainError::Infeasible(format!(
            "clip has {} frames; {n} references plus at least one target are needed",
            clip.len()
        )));
    }
    check_scenes(std::slice::from_ref(clip), n, base.config.condition_dim)?;
    let mut state = base.clone();
    state.optimizer = AdamState::default();
    let mut log = TrainLog::default();
    let refs = clip_references(n);
    let stage = Stage::Joint { warp: cfg.warp };
    if cfg.finetune_iters == 0 {
        return Ok((state, log));
    }
    run_stage(
        &mut state,
        cfg,
        stage,
        "finetune",
        cfg.finetune_iters,
        |s| Example {
            scene: clip,
            target: s.rng.random_range(n..clip.len()),
            refs: refs.clone(),
        },
        &mut log,
        observer,
        0,
        cfg.finetune_iters,
    )?;
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::from_f64(&[values.len()], values));
        s
    }

    fn grads(values: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("x".to_string(), Tensor::from_f64(&[values.len()], values))])
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = store(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut st = AdamState::default();
        adam_step(&mut p, &grads(&[0.0; 3]), &mut st, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = store(&[0.0; 4]);
        let g = [0.3, -2.0, 5.0, -0.05];
        let mut st = AdamState::default();
        adam_step(&mut p, &grads(&g), &mut st, 1e-3).unwrap();
        for (x, gi) in p.get("x").unwrap().data().iter().zip(g) {
            let want = -1e-3 * gi.signum();
            assert!((x - want).abs() <= 1e-6 * want.abs(), "{x} vs {want}");
        }
    }

    #[test]
    fn converges_on_a_parabola() {
        let mut p = store(&[1.0]);
        let mut st = AdamState::default();
        for _ in 0..100 {
            let x = p.get("x").unwrap().data()[0];
            adam_step(&mut p, &grads(&[2.0 * x]), &mut st, 0.1).unwrap();
        }
        assert!(p.get("x").unwrap().data()[0].abs() < 0.1);
    }

    #[test]
    fn rejects_shape_mismatch_and_unknown_names() {
        let mut p = store(&[1.0, 2.0]);
        let mut st = AdamState::default();
        assert!(matches!(
            adam_step(&mut p, &grads(&[1.0]), &mut st, 0.1),
            Err(TrainError::ShapeMismatch { .. })
        ));
        let other = BTreeMap::from([("y".to_string(), Tensor::from_f64(&[1], &[1.0]))]);
        assert!(matches!(adam_step(&mut p, &other, &mut st, 0.1), Err(TrainError::UnknownParameter(_))));
    }

    #[test]
    fn learning_rate_decays_exponentially() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0, 11), 5e-4);
        assert!((cfg.learning_rate(10, 11) - 5e-5).abs() < 1e-18);
        assert!((cfg.learning_rate(5, 11) - (5e-4f64 * 5e-5).sqrt()).abs() < 1e-15);
    }
}

//! Procedural deformable scenes: a diffuse sphere with a mouth-like wedge
//! notch whose opening follows a scalar signal, seen by an orbiting camera
//! against a constant background. Images are ray traced against the
//! signed distance function, not rendered by the neural field.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionTrack;
use crate::diffmath::Tensor;
use crate::geometry::{add, dot, generate_ray, normalize, scale, Intrinsics, Pose, Vec3};

use super::scene::{write_scene, CameraFrame, Scene};
use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub resolution: usize,
    /// Extra notch half-angle (radians) at full signal.
    pub deformation_amplitude: f64,
    /// Peak camera azimuth swing in radians; 0 keeps the camera fixed.
    pub orbit_amplitude: f64,
    pub condition_dim: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            n_frames: 100,
            resolution: 64,
            deformation_amplitude: 0.35,
            orbit_amplitude: 0.4,
            condition_dim: 32,
        }
    }
}

const CAMERA_DISTANCE: f64 = 3.0;
const Z_NEAR: f64 = 2.0;
const Z_FAR: f64 = 3.8;
const WORLD_SCALE: f64 = 0.75;
const BASE_HALF_ANGLE: f64 = 0.08;
const NOTCH_HALF_WIDTH: f64 = 0.45;
const NOTCH_APEX_Z: f64 = 0.05;

/// Per-scene appearance and motion constants drawn from the seed.
struct Look {
    radius: f64,
    albedo: [f64; 3],
    notch: [f64; 3],
    background: [f64; 3],
    light: Vec3,
    orbit_phase: f64,
    signal: [(f64, f64); 2],
    distractors: Vec<(f64, f64)>,
}

impl Look {
    fn draw(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let mut color = |lo: f64, hi: f64| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let albedo = color(0.45, 0.95);
        let notch = color(0.05, 0.3);
        let background = color(0.0, 1.0);
        Look {
            radius: rng.random_range(0.72..0.85),
            albedo,
            notch,
            background,
            light: normalize([rng.random_range(-0.5..0.5), rng.random_range(0.3..0.8), 1.0]),
            orbit_phase: rng.random_range(0.0..2.0 * PI),
            signal: [
                (rng.random_range(9.0..15.0), rng.random_range(0.0..2.0 * PI)),
                (rng.random_range(4.0..7.0), rng.random_range(0.0..2.0 * PI)),
            ],
            distractors: (1..dim)
                .map(|_| (rng.random_range(3.0..40.0), rng.random_range(0.0..2.0 * PI)))
                .collect(),
        }
    }

    /// Mouth signal in `[0, 1]`.
    fn signal(&self, t: usize) -> f64 {
        let t = t as f64;
        let [(p1, f1), (p2, f2)] = self.signal;
        0.5 + 0.3 * (2.0 * PI * t / p1 + f1).sin() + 0.2 * (2.0 * PI * t / p2 + f2).sin()
    }

    fn condition(&self, t: usize) -> Vec<f64> {
        let mut v = vec![self.signal(t)];
        v.extend(self.distractors.iter().map(|&(p, f)| (2.0 * PI * t as f64 / p + f).sin()));
        v
    }
}

/// Signed distance bound to the notched sphere and whether the notch face
/// is the closest surface.
fn sdf(p: Vec3, radius: f64, half_angle: f64) -> (f64, bool) {
    let sphere = dot(p, p).sqrt() - radius;
    let (s, c) = half_angle.sin_cos();
    let z = p[2] - NOTCH_APEX_Z;
    let wedge = (p[1] * c - z * s)
        .max(-p[1] * c - z * s)
        .max(p[0].abs() - NOTCH_HALF_WIDTH);
    if -wedge > sphere {
        (-wedge, true)
    } else {
        (sphere, false)
    }
}

fn trace(origin: Vec3, dir: Vec3, near: f64, far: f64, radius: f64, half_angle: f64) -> Option<Vec3> {
    let mut t = near;
    for _ in 0..256 {
        let p = add(origin, scale(dir, t));
        let (d, _) = sdf(p, radius, half_angle);
        if d < 1e-6 {
            return Some(p);
        }
        t += d;
        if t > far {
            return None;
        }
    }
    None
}

fn shade(p: Vec3, look: &Look, half_angle: f64) -> [f64; 3] {
    let h = 1e-5;
    let f = |q: Vec3| sdf(q, look.radius, half_angle).0;
    let n = normalize([
        f([p[0] + h, p[1], p[2]]) - f([p[0] - h, p[1], p[2]]),
        f([p[0], p[1] + h, p[2]]) - f([p[0], p[1] - h, p[2]]),
        f([p[0], p[1], p[2] + h]) - f([p[0], p[1], p[2] - h]),
    ]);
    let lit = 0.3 + 0.7 * dot(n, look.light).max(0.0);
    let base = if sdf(p, look.radius, half_angle).1 { look.notch } else { look.albedo };
    base.map(|c| (c * lit).clamp(0.0, 1.0))
}

fn camera(cfg: &SyntheticConfig, look: &Look, t: usize) -> Pose {
    let phase = 2.0 * PI * t as f64 / 50.0 + look.orbit_phase;
    let azimuth = cfg.orbit_amplitude * phase.sin();
    let elevation = 0.4 * cfg.orbit_amplitude * (0.7 * phase).cos();
    let eye = [
        CAMERA_DISTANCE * elevation.cos() * azimuth.sin(),
        CAMERA_DISTANCE * elevation.sin(),
        CAMERA_DISTANCE * elevation.cos() * azimuth.cos(),
    ];
    Pose::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0])
}

/// Renders a scene in memory. Deterministic in `cfg`.
pub fn synthesize(cfg: &SyntheticConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let look = Look::draw(&mut rng, cfg.condition_dim);
    let res = cfg.resolution;
    let focal = 1.375 * res as f64;
    let k = Intrinsics::new(focal, focal, res as f64 / 2.0, res as f64 / 2.0).expect("positive focal");
    let background = Tensor::new(&[res, res, 3], look.background.repeat(res * res));
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut conditions = Vec::with_capacity(cfg.n_frames);
    for t in 0..cfg.n_frames {
        let pose = camera(cfg, &look, t);
        let half_angle = BASE_HALF_ANGLE + cfg.deformation_amplitude * look.signal(t);
        let mut data = Vec::with_capacity(res * res * 3);
        for row in 0..res {
            for col in 0..res {
                let ray = generate_ray(&k, &pose, (col, row), Z_NEAR, Z_FAR);
                let c = trace(ray.origin, ray.direction, 0.0, 2.0 * CAMERA_DISTANCE, look.radius, half_angle)
                    .map_or(look.background, |p| shade(p, &look, half_angle));
                data.extend_from_slice(&c);
            }
        }
        frames.push(CameraFrame {
            index: t,
            image: Tensor::new(&[res, res, 3], data),
            background: background.clone(),
            intrinsics: k,
            pose,
        });
        conditions.push(look.condition(t));
    }
    Scene {
        id: format!("synthetic-{}", cfg.seed),
        height: res,
        width: res,
        z_near: Z_NEAR,
        z_far: Z_FAR,
        world_scale: WORLD_SCALE,
        frames,
        track: ConditionTrack::new(conditions).expect("non-empty track of equal-length vectors"),
    }
}

/// Renders a scene and writes it under `dir`.
pub fn generate_synthetic_scene(cfg: &SyntheticConfig, dir: &Path) -> Result<Scene, DataError> {
    assert!(cfg.resolution >= 16, "resolution must be at least 16");
    assert!(cfg.n_frames >= 1 && cfg.condition_dim >= 1);
    let scene = synthesize(cfg);
    write_scene(&scene, dir)?;
    Ok(scene)
}

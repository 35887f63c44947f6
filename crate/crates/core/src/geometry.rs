//! Pinhole cameras, ray generation, stratified depth sampling and the
//! world-to-image projection used to look up reference features.
//!
//! Poses map world to camera (`p_cam = R p + T`); camera axes follow the
//! image convention (x right, y down, z forward). A ray through pixel
//! `(i, j)` passes through the pixel center `(i + 0.5, j + 0.5)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Real, Tape, Tensor, Var};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Camera-space depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    BadFocal { fx: f64, fy: f64 },
    #[error("rotation is not orthonormal (max |R^T R - I| = {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("rotation has determinant {det}, expected +1")]
    NotProper { det: f64 },
    #[error("invalid depth bounds [{near}, {far}]")]
    BadBounds { near: f64, far: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::BadFocal { fx, fy });
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// Reads `[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`.
    pub fn from_matrix(k: &Mat3) -> Result<Self, GeometryError> {
        Self::new(k[0][0], k[1][1], k[0][2], k[1][2])
    }

    pub fn matrix(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }
}

/// World-to-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub r: Mat3,
    pub t: Vec3,
}

pub const ROTATION_TOLERANCE: f64 = 1e-6;

impl Pose {
    pub fn new(r: Mat3, t: Vec3) -> Result<Self, GeometryError> {
        let mut deviation: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                deviation = deviation.max((dot - want).abs());
            }
        }
        if !(deviation <= ROTATION_TOLERANCE) {
            return Err(GeometryError::NotOrthonormal { deviation });
        }
        let det = det3(&r);
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::NotProper { det });
        }
        Ok(Pose { r, t })
    }

    pub fn identity() -> Self {
        Pose {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    /// Camera at `eye` looking at `target`, with `up` pointing roughly
    /// opposite to the image's +v axis.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let r = [x, y, z];
        let t = neg(mat_vec(&r, eye));
        Pose { r, t }
    }

    /// `3 x 4` row-major `[R | T]`.
    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&self.r[i]);
            m[i][3] = self.t[i];
        }
        m
    }

    pub fn from_rows(m: &[[f64; 4]; 3]) -> Result<Self, GeometryError> {
        let r = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        Self::new(r, [m[0][3], m[1][3], m[2][3]])
    }

    /// Camera center in world space, `-R^T T`.
    pub fn center(&self) -> Vec3 {
        neg(mat_t_vec(&self.r, self.t))
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.r, p), self.t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub z_near: f64,
    pub z_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }
}

/// Continuous pixel coordinates; `u` runs along the width.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageCoord {
    pub u: f64,
    pub v: f64,
}

/// Projects a world point; `None` when it lies at or behind the camera plane.
pub fn project_point(p: Vec3, k: &Intrinsics, pose: &Pose) -> Option<(ImageCoord, f64)> {
    let [x, y, z] = pose.to_camera(p);
    if !(z > MIN_DEPTH) {
        return None;
    }
    Some((
        ImageCoord {
            u: k.fx * x / z + k.cx,
            v: k.fy * y / z + k.cy,
        },
        z,
    ))
}

/// Differentiable projection of `points: [M, 3]` to `[M, 2]` image
/// coordinates. Callers are responsible for masking points behind the camera.
pub fn project_points<T: Real>(
    tape: &Tape<T>,
    points: Var,
    k: &Intrinsics,
    pose: &Pose,
) -> Result<Var, DiffError> {
    let m = tape.shape(points)[0];
    let mut rt = Vec::with_capacity(9);
    for row in 0..3 {
        for col in 0..3 {
            rt.push(pose.r[col][row]);
        }
    }
    let r_t = tape.constant(Tensor::from_f64(&[3, 3], &rt));
    let t = tape.constant(Tensor::from_f64(&[3], &pose.t));
    let rotated = tape.matmul(points, r_t)?;
    let shift = tape.broadcast(t, m)?;
    let cam = tape.add(rotated, shift)?;
    let x = tape.slice(cam, 1, 0, 1)?;
    let y = tape.slice(cam, 1, 1, 1)?;
    let z = tape.slice(cam, 1, 2, 1)?;
    let xn = tape.div(x, z)?;
    let yn = tape.div(y, z)?;
    let u = tape.add_scalar(tape.scale(xn, T::c(k.fx)), T::c(k.cx));
    let v = tape.add_scalar(tape.scale(yn, T::c(k.fy)), T::c(k.cy));
    tape.concat(&[u, v], 1)
}

/// Ray through the center of pixel `(i, j)` (column, row).
pub fn generate_ray(k: &Intrinsics, pose: &Pose, pixel: (usize, usize), z_near: f64, z_far: f64) -> Ray {
    let (u, v) = (pixel.0 as f64 + 0.5, pixel.1 as f64 + 0.5);
    let cam_dir = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
    Ray {
        origin: pose.center(),
        direction: normalize(mat_t_vec(&pose.r, cam_dir)),
        z_near,
        z_far,
    }
}

pub fn check_bounds(z_near: f64, z_far: f64) -> Result<(), GeometryError> {
    if z_near > 0.0 && z_near < z_far && z_far.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::BadBounds { near: z_near, far: z_far })
    }
}

/// One depth per equal-width bin of `[z_near, z_far]`: bin midpoints when
/// `jitter` is off, a uniform draw inside each bin otherwise.
pub fn stratified_samples(ray: &Ray, n_samples: usize, jitter: bool, rng: &mut impl Rng) -> Vec<f64> {
    assert!(n_samples >= 2, "need at least two samples per ray");
    let width = (ray.z_far - ray.z_near) / n_samples as f64;
    (0..n_samples)
        .map(|i| {
            let offset = if jitter { rng.random::<f64>() } else { 0.5 };
            ray.z_near + (i as f64 + offset) * width
        })
        .collect()
}

// ---- small vector helpers ---------------------------------------------------

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn neg(a: Vec3) -> Vec3 {
    scale(a, -1.0)
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn det3(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Rotation about a unit axis by `angle` radians (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

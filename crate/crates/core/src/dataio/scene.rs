//! Scene directory layout: a TOML `manifest`, `frames/%05d.png` and
//! `backgrounds/%05d.png`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionTrack;
use crate::diffmath::Tensor;
use crate::geometry::{check_bounds, Intrinsics, Pose};

use super::image::{read_png, write_png};
use super::DataError;

pub const MANIFEST: &str = "manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image: String,
    pub background: String,
    /// Row-major 3x3 intrinsics matrix.
    pub k: [[f64; 3]; 3],
    /// Row-major 3x4 world-to-camera `[R | T]`.
    pub rt: [[f64; 4]; 3],
    pub condition: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub height: usize,
    pub width: usize,
    pub d_a: usize,
    pub z_near: f64,
    pub z_far: f64,
    pub world_scale: f64,
    pub frames: Vec<FrameEntry>,
}

/// One observation: image and background `[H, W, 3]`, camera, frame index.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub index: usize,
    pub image: Tensor<f64>,
    pub background: Tensor<f64>,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub z_near: f64,
    pub z_far: f64,
    pub world_scale: f64,
    pub frames: Vec<CameraFrame>,
    pub track: ConditionTrack,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The first `n` frames as a scene of their own (a fine-tuning clip).
    pub fn clip(&self, n: usize) -> Scene {
        let n = n.min(self.frames.len());
        Scene {
            frames: self.frames[..n].to_vec(),
            track: ConditionTrack::new(self.track.frames()[..n].to_vec()).expect("non-empty prefix of a valid track"),
            id: self.id.clone(),
            ..*self
        }
    }
}

fn manifest_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Manifest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads and validates a scene directory.
pub fn load_scene(dir: &Path) -> Result<Scene, DataError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let manifest: SceneManifest = toml::from_str(&text).map_err(|e| manifest_err(&path, e.to_string()))?;
    if manifest.frames.is_empty() {
        return Err(manifest_err(&path, "no frames"));
    }
    if manifest.height == 0 || manifest.width == 0 {
        return Err(manifest_err(&path, "image size must be positive"));
    }
    if !(manifest.world_scale > 0.0) {
        return Err(manifest_err(&path, "world_scale must be positive"));
    }
    check_bounds(manifest.z_near, manifest.z_far).map_err(|e| manifest_err(&path, e.to_string()))?;

    let want = (manifest.height, manifest.width);
    let load_image = |rel: &str| -> Result<Tensor<f64>, DataError> {
        let p = dir.join(rel);
        let img = read_png(&p)?;
        let got = (img.shape()[0], img.shape()[1]);
        if got != want {
            return Err(DataError::ImageSize { path: p, got, want });
        }
        Ok(img)
    };
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut conditions = Vec::with_capacity(manifest.frames.len());
    for (index, entry) in manifest.frames.iter().enumerate() {
        let pose = Pose::from_rows(&entry.rt).map_err(|e| DataError::MalformedPose {
            frame: index,
            reason: e.to_string(),
        })?;
        let k = &entry.k;
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(DataError::BadIntrinsics {
                frame: index,
                reason: "expected [[fx, 0, cx], [0, fy, cy], [0, 0, 1]]".into(),
            });
        }
        let intrinsics = Intrinsics::from_matrix(k).map_err(|e| DataError::BadIntrinsics {
            frame: index,
            reason: e.to_string(),
        })?;
        if entry.condition.len() != manifest.d_a {
            return Err(DataError::Condition {
                frame: index,
                got: entry.condition.len(),
                want: manifest.d_a,
            });
        }
        conditions.push(entry.condition.clone());
        frames.push(CameraFrame {
            index,
            image: load_image(&entry.image)?,
            background: load_image(&entry.background)?,
            intrinsics,
            pose,
        });
    }
    let track = ConditionTrack::new(conditions).map_err(|e| manifest_err(&path, e.to_string()))?;
    Ok(Scene {
        id: manifest.scene_id,
        height: manifest.height,
        width: manifest.width,
        z_near: manifest.z_near,
        z_far: manifest.z_far,
        world_scale: manifest.world_scale,
        frames,
        track,
    })
}

/// Writes `scene` under `dir` (created if needed).
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<(), DataError> {
    for sub in ["frames", "backgrounds"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| DataError::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(scene.frames.len());
    for (i, f) in scene.frames.iter().enumerate() {
        let image = format!("frames/{i:05}.png");
        let background = format!("backgrounds/{i:05}.png");
        write_png(&dir.join(&image), &f.image)?;
        write_png(&dir.join(&background), &f.background)?;
        entries.push(FrameEntry {
            image,
            background,
            k: f.intrinsics.matrix(),
            rt: f.pose.to_rows(),
            condition: scene.track.frame(i).to_vec(),
        });
    }
    let manifest = SceneManifest {
        scene_id: scene.id.clone(),
        height: scene.height,
        width: scene.width,
        d_a: scene.track.dim(),
        z_near: scene.z_near,
        z_far: scene.z_far,
        world_scale: scene.world_scale,
        frames: entries,
    };
    let path = dir.join(MANIFEST);
    let text = toml::to_string(&manifest).map_err(|e| manifest_err(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| DataError::io(&path, e))
}

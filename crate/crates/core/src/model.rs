//! The full conditioned pipeline: temporal filtering of the condition
//! vector, reference feature extraction, projection into each reference,
//! nearest or warped bilinear feature lookup, attention pooling, the
//! radiance field and compositing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{Aggregator, ConditionTrack, ConditioningError, FeatureExtractor, TemporalFilter};
use crate::dataio::{CameraFrame, Scene};
use crate::diffmath::{DiffError, Real, Tensor, Var};
use crate::geometry::{generate_ray, project_point, stratified_samples, GeometryError, Intrinsics, Pose, Ray};
use crate::nn::{Graph, ParamStore};
use crate::radiance::{encode_batch, encoded_dim, FieldConfig, RadianceField, DIRECTION_LEVELS, POSITION_LEVELS};
use crate::renderer::{composite, RaySampleBatch, RenderError};
use crate::training::AdamState;
use crate::warpfield::{WarpError, WarpField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("condition vectors have dimension {got}, model expects {want}")]
    ConditionDim { got: usize, want: usize },
    #[error("{0}")]
    References(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub condition_dim: usize,
    pub window: usize,
    pub temporal_hidden: usize,
    pub feature_dim: usize,
    pub extractor_hidden: usize,
    pub aggregator_hidden: usize,
    pub warp_hidden: usize,
    pub position_levels: usize,
    pub direction_levels: usize,
    pub field: FieldConfig,
}

impl ModelConfig {
    /// CPU-scale profile.
    pub fn desk(condition_dim: usize) -> Self {
        ModelConfig {
            condition_dim,
            window: 9,
            temporal_hidden: 32,
            feature_dim: 128,
            extractor_hidden: 32,
            aggregator_hidden: 64,
            warp_hidden: 128,
            position_levels: POSITION_LEVELS,
            direction_levels: DIRECTION_LEVELS,
            field: FieldConfig::desk(),
        }
    }

    /// Full-size field trunk.
    pub fn paper(condition_dim: usize) -> Self {
        ModelConfig {
            extractor_hidden: 64,
            field: FieldConfig::paper(),
            ..Self::desk(condition_dim)
        }
    }
}

/// Which feature lookup the forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Nearest lookup at the projected coordinate; no offsets.
    Coarse,
    /// Bilinear lookup at the projected coordinate plus a predicted offset,
    /// or with offsets frozen at zero when `warp` is false.
    Joint { warp: bool },
}

/// The networks of the pipeline. Parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub temporal: TemporalFilter,
    pub extractor: FeatureExtractor,
    pub aggregator: Aggregator,
    pub warp: WarpField,
    pub field: RadianceField,
}

impl Model {
    pub fn new(config: ModelConfig) -> Self {
        let enc = encoded_dim(config.position_levels);
        Model {
            temporal: TemporalFilter::new(config.window, config.condition_dim, config.temporal_hidden),
            extractor: FeatureExtractor::new(config.extractor_hidden, config.feature_dim),
            aggregator: Aggregator::new(config.feature_dim, config.aggregator_hidden),
            warp: WarpField::new(enc, config.condition_dim, config.feature_dim, config.warp_hidden),
            field: RadianceField::with_levels(
                config.field,
                config.position_levels,
                config.direction_levels,
                config.condition_dim,
                config.feature_dim,
            ),
            config,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.temporal.init(store, rng);
        self.extractor.init(store, rng);
        self.aggregator.init(store, rng);
        self.warp.init(store, rng);
        self.field.init(store, rng);
    }
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub optimizer: AdamState<T>,
    pub rng: ChaCha8Rng,
    /// Lookup used for rendering: the last stage the model was trained in.
    pub stage: Stage,
    pub iteration: u64,
}

impl<T: Real> ModelState<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        Model::new(config).init(&mut params, &mut rng);
        ModelState {
            config,
            params,
            optimizer: AdamState::default(),
            rng,
            stage: Stage::Coarse,
            iteration: 0,
        }
    }

    pub fn model(&self) -> Model {
        Model::new(self.config)
    }

    /// Forces zero density everywhere, so every ray renders its background.
    pub fn zero_density(mut self) -> Self {
        let w = self.config.field.width;
        self.params.insert("field.density.w", Tensor::zeros(&[w, 1]));
        self.params.insert("field.density.b", Tensor::full(&[1], T::c(-1e4)));
        self
    }
}

/// Camera of one reference frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefView {
    pub frame: usize,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

/// `N` reference frames: their cameras and stacked images `[N, H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet<T> {
    pub views: Vec<RefView>,
    pub images: Tensor<T>,
}

impl<T: Real> ReferenceSet<T> {
    pub fn from_scene(scene: &Scene, frames: &[usize]) -> Result<Self, ModelError> {
        if frames.is_empty() {
            return Err(ModelError::References("at least one reference frame is required".into()));
        }
        let (h, w) = (scene.height, scene.width);
        let mut data = Vec::with_capacity(frames.len() * h * w * 3);
        let mut views = Vec::with_capacity(frames.len());
        for &i in frames {
            let f = scene.frames.get(i).ok_or_else(|| {
                ModelError::References(format!("reference frame {i} outside a scene of {} frames", scene.len()))
            })?;
            data.extend(f.image.data().iter().map(|&v| T::c(v)));
            views.push(RefView {
                frame: i,
                intrinsics: f.intrinsics,
                pose: f.pose,
            });
        }
        Ok(ReferenceSet {
            views,
            images: Tensor::new(&[frames.len(), h, w, 3], data),
        })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Feature maps `[N, H, W, D]` computed outside any training graph.
    pub fn features(&self, model: &Model, params: &ParamStore<T>) -> Result<Tensor<T>, ModelError> {
        let g = Graph::new(params, false);
        let f = model.extractor.forward(&g, g.constant(self.images.clone()))?;
        let out = g.value(f).clone();
        Ok(out)
    }
}

/// Rays through chosen pixels of one camera, with their sample depths.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBundle {
    pub rays: Vec<Ray>,
    pub batch: RaySampleBatch,
}

impl RayBundle {
    /// `pixels` are `(column, row)`; background colors are read from `frame`.
    pub fn new(
        frame: &CameraFrame,
        pixels: &[(usize, usize)],
        z_near: f64,
        z_far: f64,
        n_samples: usize,
        jitter: Option<&mut ChaCha8Rng>,
    ) -> Result<Self, ModelError> {
        let rays: Vec<Ray> = pixels
            .iter()
            .map(|&px| generate_ray(&frame.intrinsics, &frame.pose, px, z_near, z_far))
            .collect();
        let depths: Vec<Vec<f64>> = match jitter {
            Some(rng) => rays.iter().map(|r| stratified_samples(r, n_samples, true, rng)).collect(),
            None => {
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                rays.iter().map(|r| stratified_samples(r, n_samples, false, &mut unused)).collect()
            }
        };
        let w = frame.background.shape()[1];
        let bg = frame.background.data();
        let background = pixels
            .iter()
            .map(|&(c, r)| {
                let i = (r * w + c) * 3;
                [bg[i], bg[i + 1], bg[i + 2]]
            })
            .collect();
        let far = vec![z_far; rays.len()];
        Ok(RayBundle {
            batch: RaySampleBatch::new(depths, &far, background)?,
            rays,
        })
    }

    /// Target colors of the bundle's pixels, flat `[R * 3]`.
    pub fn truth<T: Real>(frame: &CameraFrame, pixels: &[(usize, usize)]) -> Vec<T> {
        let w = frame.image.shape()[1];
        let img = frame.image.data();
        pixels
            .iter()
            .flat_map(|&(c, r)| {
                let i = (r * w + c) * 3;
                [T::c(img[i]), T::c(img[i + 1]), T::c(img[i + 2])]
            })
            .collect()
    }
}

/// Outputs of [`Model::forward`]. `sigma: [R * S]`, `rgb: [R, 3]`, and the
/// `[R * S * N, 2]` offsets when warping is active.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub rgb: Var,
    pub sigma: Var,
    pub offsets: Option<Var>,
}

impl Model {
    /// Filtered condition vector `[1, A]` for frame `t` of `track`.
    pub fn condition<T: Real>(&self, g: &Graph<'_, T>, track: &ConditionTrack, t: usize) -> Result<Var, ModelError> {
        if track.dim() != self.config.condition_dim {
            return Err(ModelError::ConditionDim {
                got: track.dim(),
                want: self.config.condition_dim,
            });
        }
        Ok(self.temporal.forward(g, track, t)?)
    }

    /// Renders `bundle` given reference feature maps `features: [N, H, W, D]`.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<'_, T>,
        features: Var,
        refs: &[RefView],
        condition: Var,
        bundle: &RayBundle,
        world_scale: f64,
        stage: Stage,
    ) -> Result<ForwardOutput, ModelError> {
        let n = refs.len();
        let fshape = g.shape(features);
        if fshape.len() != 4 || fshape[0] != n {
            return Err(ModelError::References(format!(
                "{n} reference cameras for feature maps of shape {fshape:?}"
            )));
        }
        let (r, s) = (bundle.batch.rays, bundle.batch.samples);
        let p = r * s;

        let mut points = Vec::with_capacity(p);
        let mut dirs = Vec::with_capacity(p);
        for (ray, depths) in bundle.rays.iter().zip(bundle.batch.depths.chunks(s)) {
            for &t in depths {
                points.push(ray.at(t));
                dirs.push(ray.direction);
            }
        }
        // grid coordinates: the center of pixel i sits at i + 0.5
        let mut coords = Vec::with_capacity(p * n * 2);
        let mut valid = Vec::with_capacity(p * n);
        for &x in &points {
            for view in refs {
                match project_point(x, &view.intrinsics, &view.pose) {
                    Some((c, _)) => {
                        coords.push(T::c(c.u - 0.5));
                        coords.push(T::c(c.v - 0.5));
                        valid.push(true);
                    }
                    None => {
                        coords.push(T::zero());
                        coords.push(T::zero());
                        valid.push(false);
                    }
                }
            }
        }
        let ref_index: Vec<usize> = (0..p).flat_map(|_| 0..n).collect();
        let scaled: Vec<_> = points.iter().map(|x| x.map(|c| c * world_scale)).collect();
        let encoded = g.constant(encode_batch(&scaled, self.config.position_levels));
        let encoded_dirs = g.constant(encode_batch(&dirs, self.config.direction_levels));

        let nearest = g.gather_nearest(features, &coords, &ref_index)?;
        let (sampled, offsets) = match stage {
            Stage::Coarse => (nearest, None),
            Stage::Joint { warp } => {
                let base = g.constant(Tensor::new(&[p * n, 2], coords));
                if warp {
                    let o = self.warp.forward(g, encoded, condition, nearest, n)?;
                    let at = g.add(base, o)?;
                    (g.sample_bilinear(features, at, &ref_index)?, Some(o))
                } else {
                    (g.sample_bilinear(features, base, &ref_index)?, None)
                }
            }
        };
        let pooled = self.aggregator.forward(g, sampled, n, Some(&valid))?;
        let out = self.field.forward(g, encoded, condition, pooled, encoded_dirs)?;
        let sigma = g.reshape(out.sigma, &[r, s])?;
        let color = g.reshape(out.color, &[r, s, 3])?;
        let comp = composite(g.tape(), &bundle.batch, sigma, color)?;
        Ok(ForwardOutput {
            rgb: comp.rgb,
            sigma: out.sigma,
            offsets,
        })
    }
}

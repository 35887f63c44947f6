//! Condition vectors and reference features: temporal attention filtering
//! of per-frame condition vectors, the two-layer convolutional feature
//! extractor, nearest/bilinear feature lookup, and attention pooling of
//! per-reference features.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Real, Tape, Tensor, Var};
use crate::geometry::ImageCoord;
use crate::nn::{uniform, Graph, Linear, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditioningError {
    #[error("condition track is empty")]
    EmptyTrack,
    #[error("frame {frame} outside a track of {len} frames")]
    FrameOutOfRange { frame: usize, len: usize },
    #[error("temporal window must be odd and positive, got {0}")]
    BadWindow(usize),
    #[error("condition vector of frame {frame} has dimension {got}, expected {want}")]
    Dimension { frame: usize, got: usize, want: usize },
    #[error("attention pooling needs at least one feature")]
    NoFeatures,
    #[error(transparent)]
    Graph(#[from] DiffError),
}

/// Raw per-frame condition vectors, all of one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionTrack {
    frames: Vec<Vec<f64>>,
}

impl ConditionTrack {
    pub fn new(frames: Vec<Vec<f64>>) -> Result<Self, ConditioningError> {
        let Some(first) = frames.first() else {
            return Err(ConditioningError::EmptyTrack);
        };
        let want = first.len();
        for (frame, v) in frames.iter().enumerate() {
            if v.len() != want {
                return Err(ConditioningError::Dimension {
                    frame,
                    got: v.len(),
                    want,
                });
            }
        }
        Ok(ConditionTrack { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    /// `[window, dim]` block centered on `t`, edges padded by repetition.
    pub fn window(&self, t: usize, window: usize) -> Result<Vec<f64>, ConditioningError> {
        if self.frames.is_empty() {
            return Err(ConditioningError::EmptyTrack);
        }
        if window == 0 || window % 2 == 0 {
            return Err(ConditioningError::BadWindow(window));
        }
        if t >= self.frames.len() {
            return Err(ConditioningError::FrameOutOfRange {
                frame: t,
                len: self.frames.len(),
            });
        }
        let half = (window / 2) as isize;
        let last = self.frames.len() as isize - 1;
        let mut out = Vec::with_capacity(window * self.dim());
        for k in -half..=half {
            let idx = (t as isize + k).clamp(0, last) as usize;
            out.extend_from_slice(&self.frames[idx]);
        }
        Ok(out)
    }
}

/// Attention-weighted smoothing of condition vectors over a temporal window.
///
/// Scores are `v . tanh(U a_k + c) + b_k` with a learned per-offset bias
/// `b_k`; the output is the softmax-weighted sum of the window vectors.
#[derive(Clone, Debug)]
pub struct TemporalFilter {
    pub window: usize,
    pub dim: usize,
    hidden: Linear,
    score: String,
    offset_bias: String,
}

impl TemporalFilter {
    pub fn new(window: usize, dim: usize, hidden: usize) -> Self {
        TemporalFilter {
            window,
            dim,
            hidden: Linear::new("temporal.hidden", dim, hidden),
            score: "temporal.score".into(),
            offset_bias: "temporal.offset_bias".into(),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.hidden.init(store, rng);
        let bound = 1.0 / (self.hidden.fan_out as f64).sqrt();
        store.insert(self.score.clone(), uniform(&[self.hidden.fan_out, 1], bound, rng));
        store.insert(self.offset_bias.clone(), Tensor::zeros(&[self.window]));
    }

    /// Softmax weights over the window, shape `[window]`.
    pub fn weights<T: Real>(&self, g: &Graph<'_, T>, block: Var) -> Result<Var, DiffError> {
        let h = self.hidden.forward(g, block)?;
        let h = g.tanh(h);
        let s = g.matmul(h, g.param(&self.score)?)?;
        let s = g.reshape(s, &[self.window])?;
        let s = g.add(s, g.param(&self.offset_bias)?)?;
        g.softmax(s, 0)
    }

    /// Filtered condition vector for frame `t`, shape `[1, dim]`.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<'_, T>,
        track: &ConditionTrack,
        t: usize,
    ) -> Result<Var, ConditioningError> {
        if track.dim() != self.dim {
            return Err(ConditioningError::Dimension {
                frame: t,
                got: track.dim(),
                want: self.dim,
            });
        }
        let block = track.window(t, self.window)?;
        let block = g.constant(Tensor::from_f64(&[self.window, self.dim], &block));
        let w = self.weights(g, block)?;
        let w = g.reshape(w, &[1, self.window])?;
        Ok(g.matmul(w, block)?)
    }

    pub fn filter<T: Real>(
        &self,
        params: &ParamStore<T>,
        track: &ConditionTrack,
        t: usize,
    ) -> Result<Vec<f64>, ConditioningError> {
        let g = Graph::new(params, false);
        let a = self.forward(&g, track, t)?;
        let out = g.value(a).to_f64_vec();
        Ok(out)
    }
}

/// Pixel-aligned features of one reference frame: `[H, W, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Tensor<T>,
    pub frame: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Two 3x3 convolutions (3 -> hidden -> depth), stride 1, zero padding,
/// ReLU between them only. Output keeps the input resolution.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub hidden: usize,
    pub depth: usize,
    conv1: Linear,
    conv2: Linear,
}

impl FeatureExtractor {
    pub fn new(hidden: usize, depth: usize) -> Self {
        FeatureExtractor {
            hidden,
            depth,
            conv1: Linear::new("extractor.conv1", 27, hidden),
            conv2: Linear::new("extractor.conv2", 9 * hidden, depth),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
    }

    fn conv<T: Real>(&self, g: &Graph<'_, T>, layer: &Linear, x: Var) -> Result<Var, DiffError> {
        let s = g.shape(x);
        let y = g.conv3x3(x, g.param(&layer.weight())?)?;
        let rows = s[0] * s[1] * s[2];
        let flat = g.reshape(y, &[rows, layer.fan_out])?;
        let flat = layer.add_bias(g, flat, rows)?;
        g.reshape(flat, &[s[0], s[1], s[2], layer.fan_out])
    }

    /// `images: [N, H, W, 3]` in `[0, 1]` to feature maps `[N, H, W, depth]`.
    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, images: Var) -> Result<Var, DiffError> {
        let h = self.conv(g, &self.conv1, images)?;
        let h = g.relu(h);
        self.conv(g, &self.conv2, h)
    }

    /// Feature maps for a set of `[H, W, 3]` images, outside any training graph.
    pub fn extract<T: Real>(
        &self,
        params: &ParamStore<T>,
        images: &[(usize, &Tensor<T>)],
    ) -> Result<Vec<FeatureMap<T>>, DiffError> {
        let mut out = Vec::with_capacity(images.len());
        for &(frame, img) in images {
            let g = Graph::new(params, false);
            let s = img.shape();
            let x = g.constant(img.clone().reshaped(&[1, s[0], s[1], s[2]]));
            let f = self.forward(&g, x)?;
            let data = g.value(f).clone().reshaped(&[s[0], s[1], self.depth]);
            out.push(FeatureMap { data, frame });
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Nearest,
    Bilinear,
}

/// Reads one feature vector at `at` (grid units, clamped to the map).
pub fn sample_feature<T: Real>(map: &FeatureMap<T>, at: ImageCoord, mode: SampleMode) -> Vec<T> {
    let tape = Tape::new();
    let s = map.data.shape();
    let maps = tape.constant(map.data.clone().reshaped(&[1, s[0], s[1], s[2]]));
    let coords = [T::c(at.u), T::c(at.v)];
    let out = match mode {
        SampleMode::Nearest => tape.gather_nearest(maps, &coords, &[0]),
        SampleMode::Bilinear => {
            let c = tape.constant(Tensor::new(&[1, 2], coords.to_vec()));
            tape.sample_bilinear(maps, c, &[0])
        }
    }
    .expect("single-row lookup on a valid map");
    let v = tape.value(out).data().to_vec();
    v
}

/// Additive attention pooling over references: scores
/// `s_n = w . tanh(W f_n + b)`, output `sum_n softmax(s)_n f_n`.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub depth: usize,
    hidden: Linear,
    score: String,
}

/// Added to the score of a reference whose projection is invalid.
const MASKED_SCORE: f64 = -1e9;

impl Aggregator {
    pub fn new(depth: usize, hidden: usize) -> Self {
        Aggregator {
            depth,
            hidden: Linear::new("aggregator.hidden", depth, hidden),
            score: "aggregator.score".into(),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.hidden.init(store, rng);
        let bound = 1.0 / (self.hidden.fan_out as f64).sqrt();
        store.insert(self.score.clone(), uniform(&[self.hidden.fan_out, 1], bound, rng));
    }

    /// `features: [P * N, D]` grouped by point, to `[P, D]`. `valid`, when
    /// given, has one flag per row; invalid rows get zero weight unless a
    /// point has no valid reference at all.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<'_, T>,
        features: Var,
        n_refs: usize,
        valid: Option<&[bool]>,
    ) -> Result<Var, ConditioningError> {
        let shape = g.shape(features);
        if n_refs == 0 || shape[0] == 0 {
            return Err(ConditioningError::NoFeatures);
        }
        let points = shape[0] / n_refs;
        let h = self.hidden.forward(g, features)?;
        let h = g.tanh(h);
        let s = g.matmul(h, g.param(&self.score)?)?;
        let mut s = g.reshape(s, &[points, n_refs])?;
        if let Some(valid) = valid {
            if valid.iter().any(|&v| !v) {
                let mask: Vec<T> = valid
                    .iter()
                    .map(|&v| if v { T::zero() } else { T::c(MASKED_SCORE) })
                    .collect();
                let mask = g.constant(Tensor::new(&[points, n_refs], mask));
                s = g.add(s, mask)?;
            }
        }
        let w = g.softmax(s, 1)?;
        let w = g.expand(w, 2, self.depth)?;
        let f = g.reshape(features, &[points, n_refs, self.depth])?;
        let weighted = g.mul(w, f)?;
        Ok(g.sum_axis(weighted, 1)?)
    }

    /// Pools a plain list of features outside any training graph.
    pub fn aggregate<T: Real>(
        &self,
        params: &ParamStore<T>,
        features: &[Vec<T>],
    ) -> Result<Vec<T>, ConditioningError> {
        if features.is_empty() {
            return Err(ConditioningError::NoFeatures);
        }
        let g = Graph::new(params, false);
        let flat: Vec<T> = features.iter().flatten().copied().collect();
        let f = g.constant(Tensor::new(&[features.len(), self.depth], flat));
        let out = self.forward(&g, f, features.len(), None)?;
        let v = g.value(out).data().to_vec();
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param, spread};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_track(frames: usize, dim: usize, r: &mut impl Rng) -> ConditionTrack {
        ConditionTrack::new(
            (0..frames)
                .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_window_filters_to_itself() {
        let mut r = rng(1);
        let filter = TemporalFilter::new(9, 6, 8);
        let mut store = ParamStore::<f64>::new();
        filter.init(&mut store, &mut r);
        let a = vec![0.3, -0.2, 0.9, 0.0, 1.5, -4.0];
        let track = ConditionTrack::new(vec![a.clone(); 12]).unwrap();
        let out = filter.filter(&store, &track, 5).unwrap();
        for (o, x) in out.iter().zip(&a) {
            assert!((o - x).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_window_returns_the_raw_frame() {
        let mut r = rng(2);
        let filter = TemporalFilter::new(1, 4, 8);
        let mut store = ParamStore::<f64>::new();
        filter.init(&mut store, &mut r);
        let track = random_track(5, 4, &mut r);
        assert_eq!(filter.filter(&store, &track, 3).unwrap(), track.frame(3));
    }

    #[test]
    fn filter_output_stays_in_window_hull() {
        let mut r = rng(3);
        let filter = TemporalFilter::new(9, 5, 8);
        let mut store = ParamStore::<f64>::new();
        filter.init(&mut store, &mut r);
        let track = random_track(20, 5, &mut r);
        for t in [0, 3, 10, 19] {
            let block = track.window(t, 9).unwrap();
            let out = filter.filter(&store, &track, t).unwrap();
            for (c, &o) in out.iter().enumerate() {
                let col = block.iter().skip(c).step_by(5);
                let lo = col.clone().copied().fold(f64::INFINITY, f64::min);
                let hi = col.copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn track_edges_repeat_and_errors_are_reported() {
        let track = ConditionTrack::new(vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(track.window(0, 5).unwrap(), vec![1.0, 1.0, 1.0, 2.0, 3.0]);
        assert_eq!(track.window(2, 3).unwrap(), vec![2.0, 3.0, 3.0]);
        assert_eq!(ConditionTrack::new(vec![]), Err(ConditioningError::EmptyTrack));
        assert!(matches!(track.window(1, 4), Err(ConditioningError::BadWindow(4))));
        assert!(matches!(track.window(7, 3), Err(ConditioningError::FrameOutOfRange { .. })));
    }

    #[test]
    fn extractor_keeps_resolution_and_depth() {
        let mut r = rng(4);
        let ex = FeatureExtractor::new(64, 128);
        let mut store = ParamStore::<f32>::new();
        ex.init(&mut store, &mut r);
        for side in [16, 64] {
            let img = uniform::<f32>(&[side, side, 3], 0.5, &mut r).map(|v| v + 0.5);
            let maps = ex.extract(&store, &[(0, &img)]).unwrap();
            assert_eq!(maps[0].data.shape(), &[side, side, 128]);
        }
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_features() {
        let mut r = rng(5);
        let ex = FeatureExtractor::new(8, 16);
        let mut store = ParamStore::<f64>::new();
        ex.init(&mut store, &mut r);
        for name in ["extractor.conv1.b", "extractor.conv2.b"] {
            let b = store.get_mut(name).unwrap();
            b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let img = Tensor::zeros(&[6, 6, 3]);
        let maps = ex.extract(&store, &[(0, &img)]).unwrap();
        assert!(maps[0].data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extractor_weight_gradients_match_finite_differences() {
        let mut r = rng(6);
        let ex = FeatureExtractor::new(4, 5);
        let mut store = ParamStore::<f64>::new();
        ex.init(&mut store, &mut r);
        let img = uniform::<f64>(&[1, 5, 4, 3], 0.5, &mut r).map(|v| v + 0.5);
        let probe = uniform::<f64>(&[1, 5, 4, 5], 1.0, &mut r);
        let loss = |g: &Graph<'_, f64>| {
            let x = g.constant(img.clone());
            let y = ex.forward(g, x)?;
            let p = g.constant(probe.clone());
            g.mul(y, p)
        };
        for name in ["extractor.conv1.w", "extractor.conv2.w", "extractor.conv2.b"] {
            let len = store.get(name).unwrap().len();
            let err = check_param(&store, name, &spread(len, 40), 1e-5, loss).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    fn grid_map(h: usize, w: usize, d: usize, r: &mut impl Rng) -> FeatureMap<f64> {
        FeatureMap {
            data: uniform(&[h, w, d], 1.0, r),
            frame: 0,
        }
    }

    #[test]
    fn bilinear_hits_nodes_and_cell_centers() {
        let mut r = rng(7);
        let map = grid_map(4, 5, 3, &mut r);
        let at = |u: usize, v: usize| map.data.data()[(v * 5 + u) * 3..(v * 5 + u + 1) * 3].to_vec();
        let node = sample_feature(&map, ImageCoord { u: 2.0, v: 1.0 }, SampleMode::Bilinear);
        assert_eq!(node, at(2, 1));
        let mid = sample_feature(&map, ImageCoord { u: 2.5, v: 1.5 }, SampleMode::Bilinear);
        for k in 0..3 {
            let mean = (at(2, 1)[k] + at(3, 1)[k] + at(2, 2)[k] + at(3, 2)[k]) / 4.0;
            assert!((mid[k] - mean).abs() < 1e-12);
        }
        let near = sample_feature(&map, ImageCoord { u: 2.6, v: 1.4 }, SampleMode::Nearest);
        assert_eq!(near, at(3, 1));
        let clamped = sample_feature(&map, ImageCoord { u: -3.0, v: 9.0 }, SampleMode::Bilinear);
        assert_eq!(clamped, at(0, 3));
    }

    #[test]
    fn bilinear_coordinate_gradient_matches_finite_differences() {
        let mut r = rng(8);
        let map = grid_map(6, 7, 4, &mut r);
        let maps = map.data.clone().reshaped(&[1, 6, 7, 4]);
        let probe = uniform::<f64>(&[3, 4], 1.0, &mut r);
        let coords = Tensor::from_f64(&[3, 2], &[1.3, 2.7, 4.55, 0.2, 5.9, 4.41]);
        let f = |t: &Tape<f64>, c: Var| {
            let m = t.constant(maps.clone());
            let s = t.sample_bilinear(m, c, &[0, 0, 0])?;
            let p = t.constant(probe.clone());
            t.mul(s, p)
        };
        let err = crate::diffmath::grad_check(f, &coords, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bilinear_is_lipschitz_in_coordinates() {
        let mut r = rng(9);
        let map = grid_map(8, 8, 6, &mut r);
        let bound = map.data.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..200 {
            let u = r.random_range(0.0..7.0);
            let v = r.random_range(0.0..7.0);
            let du = r.random_range(-0.01..0.01);
            let dv = r.random_range(-0.01..0.01);
            let a = sample_feature(&map, ImageCoord { u, v }, SampleMode::Bilinear);
            let b = sample_feature(&map, ImageCoord { u: u + du, v: v + dv }, SampleMode::Bilinear);
            let delta = (du * du + dv * dv).sqrt();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 2.0 * bound * delta * std::f64::consts::SQRT_2 + 1e-12);
                assert!((x - y).abs() <= 2.0 * bound * (du.abs() + dv.abs()) + 1e-12);
            }
        }
    }

    fn aggregator(depth: usize, seed: u64) -> (Aggregator, ParamStore<f64>) {
        let agg = Aggregator::new(depth, 8);
        let mut store = ParamStore::new();
        agg.init(&mut store, &mut rng(seed));
        (agg, store)
    }

    #[test]
    fn single_and_identical_features_pass_through() {
        let (agg, store) = aggregator(5, 10);
        let f = vec![0.1, -0.4, 2.0, 0.0, 3.3];
        assert_eq!(agg.aggregate(&store, &[f.clone()]).unwrap(), f);
        let out = agg.aggregate(&store, &[f.clone(), f.clone(), f.clone()]).unwrap();
        for (o, x) in out.iter().zip(&f) {
            assert!((o - x).abs() < 1e-12);
        }
        assert_eq!(agg.aggregate::<f64>(&store, &[]), Err(ConditioningError::NoFeatures));
    }

    #[test]
    fn pooling_is_permutation_invariant_and_convex() {
        let (agg, store) = aggregator(4, 11);
        let mut r = rng(12);
        for _ in 0..100 {
            let n = r.random_range(2..6);
            let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
            let base = agg.aggregate(&store, &feats).unwrap();
            let mut shuffled = feats.clone();
            shuffled.reverse();
            shuffled.rotate_left(1);
            let other = agg.aggregate(&store, &shuffled).unwrap();
            for c in 0..4 {
                assert!((base[c] - other[c]).abs() < 1e-12);
                let lo = feats.iter().map(|f| f[c]).fold(f64::INFINITY, f64::min);
                let hi = feats.iter().map(|f| f[c]).fold(f64::NEG_INFINITY, f64::max);
                assert!(base[c] >= lo - 1e-12 && base[c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn masked_references_are_ignored() {
        let (agg, store) = aggregator(3, 13);
        let g = Graph::new(&store, false);
        let f = g.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 7.0, 0.5]));
        let out = agg.forward(&g, f, 2, Some(&[true, false])).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0]);
    }
}

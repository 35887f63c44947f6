//! Positional encoding and the conditioned radiance field mapping a point,
//! view direction, condition vector and pooled reference feature to color
//! and density.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Real, Tensor, Var};
use crate::geometry::{norm, Vec3};
use crate::nn::{Graph, Linear, ParamStore};

pub const POSITION_LEVELS: usize = 10;
pub const DIRECTION_LEVELS: usize = 4;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("view direction has norm {norm}, expected 1")]
    NonUnitDirection { norm: f64 },
    #[error(transparent)]
    Graph(#[from] DiffError),
}

pub fn encoded_dim(levels: usize) -> usize {
    3 + 6 * levels
}

/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`,
/// each sin/cos block covering the three components.
pub fn positional_encode(x: Vec3, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(levels));
    encode_into(x, levels, &mut out);
    out
}

fn encode_into(x: Vec3, levels: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(&x);
    let mut freq = std::f64::consts::PI;
    for _ in 0..levels {
        out.extend(x.iter().map(|&c| (freq * c).sin()));
        out.extend(x.iter().map(|&c| (freq * c).cos()));
        freq *= 2.0;
    }
}

/// Encodes a batch of points into a `[P, 3 + 6L]` tensor.
pub fn encode_batch<T: Real>(points: &[Vec3], levels: usize) -> Tensor<T> {
    let mut flat = Vec::with_capacity(points.len() * encoded_dim(levels));
    for &p in points {
        encode_into(p, levels, &mut flat);
    }
    Tensor::from_f64(&[points.len(), encoded_dim(levels)], &flat)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub depth: usize,
    pub width: usize,
    /// Index of the trunk layer whose input is re-concatenated with the field input.
    pub skip_at: Option<usize>,
    pub color_hidden: usize,
}

impl FieldConfig {
    /// 8 x 256 trunk with the input re-injected before layer 5.
    pub fn paper() -> Self {
        FieldConfig {
            depth: 8,
            width: 256,
            skip_at: Some(5),
            color_hidden: 128,
        }
    }

    /// 4 x 128 trunk for CPU-scale runs.
    pub fn desk() -> Self {
        FieldConfig {
            depth: 4,
            width: 128,
            skip_at: None,
            color_hidden: 64,
        }
    }
}

/// Per-point color in `[0, 1]^3` and density `>= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct RadianceField {
    pub config: FieldConfig,
    pub position_levels: usize,
    pub direction_levels: usize,
    pub condition_dim: usize,
    pub feature_dim: usize,
    trunk: Vec<Linear>,
    density: Linear,
    color_hidden: Linear,
    color_out: Linear,
}

/// Field outputs for a batch: `sigma: [P]`, `color: [P, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    pub sigma: Var,
    pub color: Var,
}

impl RadianceField {
    pub fn new(config: FieldConfig, condition_dim: usize, feature_dim: usize) -> Self {
        Self::with_levels(config, POSITION_LEVELS, DIRECTION_LEVELS, condition_dim, feature_dim)
    }

    pub fn with_levels(
        config: FieldConfig,
        position_levels: usize,
        direction_levels: usize,
        condition_dim: usize,
        feature_dim: usize,
    ) -> Self {
        let input = encoded_dim(position_levels) + condition_dim + feature_dim;
        let trunk = (0..config.depth)
            .map(|i| {
                let fan_in = match i {
                    0 => input,
                    i if Some(i) == config.skip_at => config.width + input,
                    _ => config.width,
                };
                Linear::new(format!("field.trunk{i}"), fan_in, config.width)
            })
            .collect();
        RadianceField {
            config,
            position_levels,
            direction_levels,
            condition_dim,
            feature_dim,
            trunk,
            density: Linear::new("field.density", config.width, 1),
            color_hidden: Linear::new(
                "field.color_hidden",
                config.width + encoded_dim(direction_levels),
                config.color_hidden,
            ),
            color_out: Linear::new("field.color_out", config.color_hidden, 3),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for l in &self.trunk {
            l.init(store, rng);
        }
        self.density.init(store, rng);
        self.color_hidden.init(store, rng);
        self.color_out.init(store, rng);
    }

    /// Input block `[gamma(p), A, F]` applied through `layer`'s row blocks
    /// starting at `offset`; `A: [1, A]` is multiplied once and broadcast.
    fn input_block<T: Real>(
        &self,
        g: &Graph<'_, T>,
        layer: &Linear,
        offset: usize,
        encoded: Var,
        condition: Var,
        feature: Var,
    ) -> Result<Var, DiffError> {
        let points = g.shape(encoded)[0];
        let enc = encoded_dim(self.position_levels);
        let from_point = layer.matmul_block(g, encoded, offset)?;
        let from_cond = layer.matmul_block(g, condition, offset + enc)?;
        let from_cond = g.reshape(from_cond, &[layer.fan_out])?;
        let from_cond = g.broadcast(from_cond, points)?;
        let from_feat = layer.matmul_block(g, feature, offset + enc + self.condition_dim)?;
        let y = g.add(from_point, from_cond)?;
        g.add(y, from_feat)
    }

    /// Batched evaluation. `encoded: [P, 3 + 6 L_pos]`, `condition: [1, A]`,
    /// `feature: [P, D]`, `encoded_dirs: [P, 3 + 6 L_dir]`.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<'_, T>,
        encoded: Var,
        condition: Var,
        feature: Var,
        encoded_dirs: Var,
    ) -> Result<FieldOutput, DiffError> {
        let points = g.shape(encoded)[0];
        let mut h = None;
        for (i, layer) in self.trunk.iter().enumerate() {
            let pre = match h {
                None => self.input_block(g, layer, 0, encoded, condition, feature)?,
                Some(prev) if Some(i) == self.config.skip_at => {
                    let a = layer.matmul_block(g, prev, 0)?;
                    let b = self.input_block(g, layer, self.config.width, encoded, condition, feature)?;
                    g.add(a, b)?
                }
                Some(prev) => layer.matmul_block(g, prev, 0)?,
            };
            let pre = layer.add_bias(g, pre, points)?;
            h = Some(g.relu(pre));
        }
        let h = h.expect("trunk has at least one layer");
        let sigma = self.density.forward(g, h)?;
        let sigma = g.softplus(sigma);
        let sigma = g.reshape(sigma, &[points])?;
        let c = self.color_hidden.forward_parts(g, &[h, encoded_dirs])?;
        let c = g.relu(c);
        let c = self.color_out.forward(g, c)?;
        let color = g.sigmoid(c);
        Ok(FieldOutput { sigma, color })
    }

    /// Single-point evaluation. `dir` must be unit length.
    pub fn eval<T: Real>(
        &self,
        params: &ParamStore<T>,
        p: Vec3,
        dir: Vec3,
        condition: &[f64],
        feature: &[f64],
    ) -> Result<RadianceSample, FieldError> {
        check_unit(dir)?;
        let g = Graph::new(params, false);
        let e = g.constant(encode_batch(&[p], self.position_levels));
        let d = g.constant(encode_batch(&[dir], self.direction_levels));
        let a = g.constant(Tensor::from_f64(&[1, condition.len()], condition));
        let f = g.constant(Tensor::from_f64(&[1, feature.len()], feature));
        let out = self.forward(&g, e, a, f, d)?;
        let c = g.value(out.color).to_f64_vec();
        let sigma = g.value(out.sigma).item().f64();
        Ok(RadianceSample {
            color: [c[0], c[1], c[2]],
            sigma,
        })
    }
}

pub fn check_unit(dir: Vec3) -> Result<(), FieldError> {
    let n = norm(dir);
    if (n - 1.0).abs() > UNIT_TOLERANCE || !n.is_finite() {
        return Err(FieldError::NonUnitDirection { norm: n });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalize;
    use crate::gradcheck::{check_param, spread};
    use crate::nn::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoding_of_origin() {
        let e = positional_encode([0.0; 3], 2);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(positional_encode([0.1, 0.2, 0.3], 10).len(), 63);
        assert_eq!(encoded_dim(4), 27);
    }

    #[test]
    fn encoding_is_injective_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        for _ in 0..10_000 {
            let (x, y) = (p(), p());
            assert!(x == y || positional_encode(x, 10) != positional_encode(y, 10));
        }
    }

    fn small_field(seed: u64) -> (RadianceField, ParamStore<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FieldConfig {
            depth: 3,
            width: 16,
            skip_at: Some(2),
            color_hidden: 8,
        };
        let f = RadianceField::with_levels(cfg, 3, 2, 4, 5);
        let mut store = ParamStore::new();
        f.init(&mut store, &mut rng);
        (f, store, rng)
    }

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)])
    }

    #[test]
    fn outputs_stay_in_range_and_density_ignores_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = RadianceField::new(FieldConfig::desk(), 8, 16);
        let mut store = ParamStore::<f64>::new();
        field.init(&mut store, &mut rng);
        let mut color_differs = false;
        for _ in 0..10_000 {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (d1, d2) = (random_unit(&mut rng), random_unit(&mut rng));
            let s1 = field.eval(&store, p, d1, &a, &f).unwrap();
            assert!(s1.sigma >= 0.0);
            assert!(s1.color.iter().all(|c| (0.0..=1.0).contains(c)));
            if rng.random_range(0..50) == 0 {
                let s2 = field.eval(&store, p, d2, &a, &f).unwrap();
                assert_eq!(s1.sigma, s2.sigma);
                color_differs |= s1.color != s2.color;
            }
        }
        assert!(color_differs);
    }

    #[test]
    fn rejects_non_unit_direction() {
        let (field, store, _) = small_field(2);
        let err = field.eval(&store, [0.0; 3], [0.0, 0.0, 2.0], &[0.0; 4], &[0.0; 5]).unwrap_err();
        assert_eq!(err, FieldError::NonUnitDirection { norm: 2.0 });
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (field, store, _) = small_field(3);
        let a = field.eval(&store, [0.1, 0.2, 0.3], [0.0, 0.0, 1.0], &[0.5; 4], &[0.1; 5]).unwrap();
        let b = field.eval(&store, [0.1, 0.2, 0.3], [0.0, 0.0, 1.0], &[0.5; 4], &[0.1; 5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn field_gradients_match_finite_differences() {
        let (field, mut store, mut rng) = small_field(4);
        let pts: Vec<Vec3> = (0..4)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let dirs: Vec<Vec3> = (0..4).map(|_| random_unit(&mut rng)).collect();
        let enc = encode_batch::<f64>(&pts, 3);
        let encd = encode_batch::<f64>(&dirs, 2);
        store.insert("input.a", uniform(&[1, 4], 1.0, &mut rng));
        store.insert("input.f", uniform(&[4, 5], 1.0, &mut rng));
        let probe_c = uniform::<f64>(&[4, 3], 1.0, &mut rng);
        let loss = |g: &Graph<'_, f64>| {
            let e = g.constant(enc.clone());
            let d = g.constant(encd.clone());
            let out = field.forward(g, e, g.param("input.a")?, g.param("input.f")?, d)?;
            let c = g.mul(out.color, g.constant(probe_c.clone()))?;
            let c = g.sum(c);
            let s = g.sum(out.sigma);
            g.add(c, s)
        };
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let len = store.get(&name).unwrap().len();
            let err = check_param(&store, &name, &spread(len, 25), 1e-5, loss).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

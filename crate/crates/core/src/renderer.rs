//! Volume rendering along rays with background compositing on the last
//! sample, plus the photometric and total losses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::ConditionTrack;
use crate::dataio::{CameraFrame, Scene};
use crate::diffmath::{DiffError, Real, Tensor, Tape, Var};
use crate::model::{ModelError, ModelState, RayBundle, ReferenceSet};
use crate::nn::Graph;
use crate::radiance::RadianceSample;

/// Regularizer weight used unless a config overrides it.
pub const DEFAULT_LAMBDA: f64 = 5e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("ray {ray}: depths must be strictly increasing (t[{index}] = {value})")]
    UnsortedDepths { ray: usize, index: usize, value: f64 },
    #[error("ray {ray}: {samples} samples, at least 2 required")]
    TooFewSamples { ray: usize, samples: usize },
    #[error("ray {ray}: last depth {last} is not below z_far {z_far}")]
    BeyondFar { ray: usize, last: f64, z_far: f64 },
    #[error("{what}: {got} values, expected {want}")]
    Length { what: &'static str, got: usize, want: usize },
    #[error(transparent)]
    Graph(#[from] DiffError),
}

/// Per-ray sample depths and the interval lengths derived from them.
///
/// `deltas[i] = t[i+1] - t[i]`, the last one `z_far - t[n-1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleBatch {
    pub rays: usize,
    pub samples: usize,
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
    pub background: Vec<[f64; 3]>,
}

impl RaySampleBatch {
    /// `depths` holds one row of `samples` per ray.
    pub fn new(depths: Vec<Vec<f64>>, z_far: &[f64], background: Vec<[f64; 3]>) -> Result<Self, RenderError> {
        let rays = depths.len();
        if z_far.len() != rays {
            return Err(RenderError::Length { what: "z_far", got: z_far.len(), want: rays });
        }
        if background.len() != rays {
            return Err(RenderError::Length { what: "background", got: background.len(), want: rays });
        }
        let samples = depths.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rays * samples);
        let mut deltas = Vec::with_capacity(rays * samples);
        for (ray, row) in depths.iter().enumerate() {
            if row.len() < 2 || row.len() != samples {
                return Err(RenderError::TooFewSamples { ray, samples: row.len() });
            }
            for i in 1..row.len() {
                if !(row[i] > row[i - 1]) {
                    return Err(RenderError::UnsortedDepths { ray, index: i, value: row[i] });
                }
            }
            let last = row[samples - 1];
            if !(z_far[ray] > last) {
                return Err(RenderError::BeyondFar { ray, last, z_far: z_far[ray] });
            }
            flat.extend_from_slice(row);
            deltas.extend(row.windows(2).map(|w| w[1] - w[0]));
            deltas.push(z_far[ray] - last);
        }
        Ok(RaySampleBatch { rays, samples, depths: flat, deltas, background })
    }

    /// Per-sample opacity `1 - exp(-sigma * delta)` for given densities.
    pub fn opacities<T: Real>(&self, sigma: &[T]) -> Vec<T> {
        sigma
            .iter()
            .zip(&self.deltas)
            .map(|(&s, &d)| T::one() - (-s * T::c(d)).exp())
            .collect()
    }
}

/// Result of [`composite`]: `rgb: [R, 3]`, `weights: [R, S]`.
#[derive(Clone, Copy, Debug)]
pub struct Composite {
    pub rgb: Var,
    pub weights: Var,
}

/// Differentiable compositing of `sigma: [R, S]` and `color: [R, S, 3]`.
///
/// The last sample of every ray takes the ray's background color with
/// opacity forced to 1, so the weights of each ray sum to one.
pub fn composite<T: Real>(
    tape: &Tape<T>,
    batch: &RaySampleBatch,
    sigma: Var,
    color: Var,
) -> Result<Composite, RenderError> {
    let (r, s) = (batch.rays, batch.samples);
    let last = |i: usize| i % s == s - 1;
    let keep: Vec<T> = (0..r * s).map(|i| if last(i) { T::zero() } else { T::one() }).collect();
    let masked_delta: Vec<T> = (0..r * s)
        .map(|i| if last(i) { T::zero() } else { T::c(batch.deltas[i]) })
        .collect();
    let sd = tape.mul(sigma, tape.constant(Tensor::new(&[r, s], masked_delta)))?;
    let transmittance = tape.exp(tape.neg(tape.cumsum_exclusive(sd, 1)?));
    let survive = tape.mul(tape.exp(tape.neg(sd)), tape.constant(Tensor::new(&[r, s], keep.clone())))?;
    let alpha = tape.add_scalar(tape.neg(survive), T::one());
    let weights = tape.mul(transmittance, alpha)?;

    let keep3: Vec<T> = keep.iter().flat_map(|&k| [k; 3]).collect();
    let mut bg = vec![T::zero(); r * s * 3];
    for (ray, c) in batch.background.iter().enumerate() {
        for ch in 0..3 {
            bg[(ray * s + s - 1) * 3 + ch] = T::c(c[ch]);
        }
    }
    let color = tape.mul(color, tape.constant(Tensor::new(&[r, s, 3], keep3)))?;
    let color = tape.add(color, tape.constant(Tensor::new(&[r, s, 3], bg)))?;
    let w3 = tape.expand(weights, 2, 3)?;
    let rgb = tape.sum_axis(tape.mul(w3, color)?, 1)?;
    Ok(Composite { rgb, weights })
}

/// Samples of a single ray for [`render_ray`].
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub samples: Vec<RadianceSample>,
    pub z_far: f64,
    pub background: [f64; 3],
}

/// Composited color of one ray, with the per-sample weights.
pub fn render_ray_weights(ray: &RaySamples) -> Result<([f64; 3], Vec<f64>), RenderError> {
    let n = ray.depths.len();
    if ray.samples.len() != n {
        return Err(RenderError::Length { what: "samples", got: ray.samples.len(), want: n });
    }
    let batch = RaySampleBatch::new(vec![ray.depths.clone()], &[ray.z_far], vec![ray.background])?;
    let tape = Tape::<f64>::new();
    let sigma = tape.constant(Tensor::new(&[1, n], ray.samples.iter().map(|s| s.sigma).collect()));
    let color = tape.constant(Tensor::new(&[1, n, 3], ray.samples.iter().flat_map(|s| s.color).collect()));
    let out = composite(&tape, &batch, sigma, color)?;
    let rgb = tape.value(out.rgb).to_f64_vec();
    let weights = tape.value(out.weights).to_f64_vec();
    Ok(([rgb[0], rgb[1], rgb[2]], weights))
}

pub fn render_ray(ray: &RaySamples) -> Result<[f64; 3], RenderError> {
    render_ray_weights(ray).map(|(c, _)| c)
}

/// Mean over rays and channels of `(rendered - truth)^2`; `truth` is flat `[R * 3]`.
pub fn mse_loss<T: Real>(tape: &Tape<T>, rendered: Var, truth: &[T]) -> Result<Var, RenderError> {
    let shape = tape.shape(rendered);
    let n: usize = shape.iter().product();
    if truth.len() != n {
        return Err(RenderError::Length { what: "truth", got: truth.len(), want: n });
    }
    let diff = tape.sub(rendered, tape.constant(Tensor::new(&shape, truth.to_vec())))?;
    Ok(tape.mean(tape.mul(diff, diff)?))
}

/// [`mse_loss`] on plain values.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64, RenderError> {
    if a.len() != b.len() {
        return Err(RenderError::Length { what: "truth", got: b.len(), want: a.len() });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mse: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn total_loss(l_mse: f64, l_reg: f64, lambda: f64) -> LossReport {
    LossReport { l_mse, l_reg, total: l_mse + lambda * l_reg, lambda }
}

/// Full-frame render of `camera` (jitter off) driven by condition frame `t`
/// of `track`, processed in chunks of `chunk` rays. Chunks run in parallel
/// and are reassembled in pixel order, so the image does not depend on the
/// chunk size.
#[allow(clippy::too_many_arguments)]
pub fn render_frame<T: Real>(
    state: &ModelState<T>,
    scene: &Scene,
    camera: &CameraFrame,
    refs: &ReferenceSet<T>,
    track: &ConditionTrack,
    t: usize,
    n_samples: usize,
    chunk: usize,
) -> Result<Tensor<f64>, ModelError> {
    let model = state.model();
    let features = refs.features(&model, &state.params)?;
    let condition = {
        let g = Graph::new(&state.params, false);
        let a = model.condition(&g, track, t)?;
        let v = g.value(a).clone();
        v
    };
    let (h, w) = (camera.image.shape()[0], camera.image.shape()[1]);
    let pixels: Vec<(usize, usize)> = (0..h * w).map(|i| (i % w, i / w)).collect();
    let parts: Vec<Vec<f64>> = pixels
        .par_chunks(chunk.max(1))
        .map(|px| -> Result<Vec<f64>, ModelError> {
            let bundle = RayBundle::new(camera, px, scene.z_near, scene.z_far, n_samples, None)?;
            let g = Graph::new(&state.params, false);
            let f = g.constant(features.clone());
            let a = g.constant(condition.clone());
            let out = model.forward(&g, f, &refs.views, a, &bundle, scene.world_scale, state.stage)?;
            let rgb = g.value(out.rgb).to_f64_vec();
            Ok(rgb)
        })
        .collect::<Result<_, _>>()?;
    Ok(Tensor::new(&[h, w, 3], parts.concat()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check;
    use proptest::prelude::*;

    fn sample(sigma: f64, color: [f64; 3]) -> RadianceSample {
        RadianceSample { color, sigma }
    }

    fn uniform_ray(n: usize, near: f64, far: f64, f: impl Fn(f64) -> RadianceSample) -> RaySamples {
        let step = (far - near) / n as f64;
        let depths: Vec<f64> = (0..n).map(|i| near + i as f64 * step).collect();
        let samples = depths.iter().map(|&t| f(t)).collect();
        RaySamples { depths, samples, z_far: far, background: [0.2, 0.4, 0.6] }
    }

    #[test]
    fn empty_ray_returns_background_exactly() {
        let ray = uniform_ray(16, 2.0, 4.0, |_| sample(0.0, [1.0, 0.0, 0.0]));
        assert_eq!(render_ray(&ray).unwrap(), ray.background);
    }

    #[test]
    fn opaque_first_sample_wins() {
        let ray = uniform_ray(8, 2.0, 4.0, |t| sample(if t == 2.0 { 1e6 } else { 0.5 }, if t == 2.0 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] }));
        let c = render_ray(&ray).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-6 && c[1].abs() < 1e-6 && c[2].abs() < 1e-6, "{c:?}");
    }

    #[test]
    fn rejects_unsorted_and_short_rays() {
        let mut ray = uniform_ray(4, 2.0, 4.0, |_| sample(1.0, [0.0; 3]));
        ray.depths.swap(1, 2);
        assert!(matches!(render_ray(&ray), Err(RenderError::UnsortedDepths { ray: 0, index: 2, .. })));
        let short = uniform_ray(1, 2.0, 4.0, |_| sample(1.0, [0.0; 3]));
        assert!(matches!(render_ray(&short), Err(RenderError::TooFewSamples { .. })));
    }

    /// Piecewise-constant field with breakpoints on a 0.25 grid.
    fn analytic(t: f64) -> RadianceSample {
        let k = ((t - 2.0) / 0.25).floor() as i64;
        let sigma = [0.0, 0.3, 2.5, 0.0, 4.0, 1.0, 0.7, 3.0][k.clamp(0, 7) as usize];
        let color = [[0.9, 0.1, 0.1], [0.2, 0.8, 0.3], [0.1, 0.1, 0.9], [0.5, 0.5, 0.5]][k.rem_euclid(4) as usize];
        sample(sigma, color)
    }

    /// Midpoint quadrature of the continuous rendering integral over
    /// `[t_first, t_last]`, plus the remaining transmittance times background.
    fn dense_quadrature(f: impl Fn(f64) -> RadianceSample, a: f64, b: f64, bg: [f64; 3], n: usize) -> [f64; 3] {
        let h = (b - a) / n as f64;
        let mut depth = 0.0;
        let mut out = [0.0; 3];
        for k in 0..n {
            let s = f(a + (k as f64 + 0.5) * h);
            let t_mid = (-(depth + 0.5 * s.sigma * h)).exp();
            for c in 0..3 {
                out[c] += t_mid * s.sigma * s.color[c] * h;
            }
            depth += s.sigma * h;
        }
        let t_end = (-depth).exp();
        for c in 0..3 {
            out[c] += t_end * bg[c];
        }
        out
    }

    #[test]
    fn matches_dense_quadrature_on_piecewise_constant_field() {
        // samples at every breakpoint: the discrete sum is exact for such a field
        let ray = uniform_ray(9, 2.0, 4.25, analytic);
        let c = render_ray(&ray).unwrap();
        let want = dense_quadrature(analytic, 2.0, 4.0, ray.background, 10_000);
        for ch in 0..3 {
            assert!((c[ch] - want[ch]).abs() < 1e-4, "channel {ch}: {} vs {}", c[ch], want[ch]);
        }
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(sigmas in proptest::collection::vec(0.0f64..50.0, 2..40)) {
            let n = sigmas.len();
            let ray = RaySamples {
                depths: (0..n).map(|i| 1.0 + i as f64 * 0.1).collect(),
                samples: sigmas.iter().map(|&s| sample(s, [0.3, 0.6, 0.9])).collect(),
                z_far: 1.0 + n as f64 * 0.1,
                background: [0.0, 0.5, 1.0],
            };
            let (c, w) = render_ray_weights(&ray).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(w.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
            prop_assert!(c.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let batch = RaySampleBatch::new(
            vec![vec![2.0, 2.3, 2.9, 3.1], vec![2.1, 2.5, 2.6, 3.5]],
            &[4.0, 4.0],
            vec![[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]],
        )
        .unwrap();
        let probe = [0.3, -0.7, 1.1, 0.4, 0.9, -0.2];
        let sigma0 = Tensor::from_f64(&[2, 4], &[0.5, 1.2, 0.1, 2.0, 0.0, 3.0, 0.7, 1.5]);
        let colors: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect();
        let color0 = Tensor::from_f64(&[2, 4, 3], &colors);
        let loss = |tape: &Tape<f64>, sigma: Var, color: Var| {
            let out = composite(tape, &batch, sigma, color).unwrap();
            tape.mul(out.rgb, tape.constant(Tensor::from_f64(&[2, 3], &probe))).unwrap()
        };
        let err_sigma = grad_check(
            |tape, x| {
                let c = tape.constant(color0.clone());
                Ok(loss(tape, x, c))
            },
            &sigma0,
            1e-6,
        )
        .unwrap();
        let err_color = grad_check(
            |tape, x| {
                let s = tape.constant(sigma0.clone());
                Ok(loss(tape, s, x))
            },
            &color0,
            1e-6,
        )
        .unwrap();
        assert!(err_sigma < 1e-6 && err_color < 1e-6, "{err_sigma} {err_color}");
    }

    #[test]
    fn mse_values_and_gradient() {
        assert_eq!(mse(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), 0.0);
        let a = vec![0.5; 6];
        let b = vec![0.4; 6];
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!(mse(&a, &b[..5]).is_err());

        let truth = [0.2, 0.5, 0.9, 0.1, 0.0, 1.0];
        let x = Tensor::from_f64(&[2, 3], &[0.3, 0.1, 0.4, 0.8, 0.6, 0.2]);
        let tape = Tape::<f64>::new();
        let v = tape.leaf(x.clone(), true);
        let l = mse_loss(&tape, v, &truth).unwrap();
        let g = tape.backward(l).unwrap();
        let grad = g.get(v).unwrap().to_f64_vec();
        for i in 0..6 {
            assert!((grad[i] - 2.0 * (x.data()[i] - truth[i]) / 6.0).abs() < 1e-15);
        }
        let err = grad_check(|tape, v| mse_loss(tape, v, &truth).map_err(|e| match e {
            RenderError::Graph(e) => e,
            other => panic!("{other}"),
        }), &x, 1e-6)
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn total_loss_combines_terms() {
        assert_eq!(total_loss(0.3, 7.0, 0.0).total, 0.3);
        let r = total_loss(0.04, 2.0, DEFAULT_LAMBDA);
        assert!((r.total - 0.0400001).abs() < 1e-15);
        assert_eq!(r.total, r.l_mse + r.lambda * r.l_reg);
    }
}

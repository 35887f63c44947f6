use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{Aggregator, FeatureExtractor, TemporalFilter};
use crate::dataio::{synthesize, SyntheticConfig};
use crate::diffmath::{grad_check, DiffError, Tape, Tensor, Unary, Var};
use crate::geometry::{project_points, Intrinsics, Pose};
use crate::model::{ModelConfig, ModelState, RayBundle, ReferenceSet, Stage};
use crate::nn::{uniform, Graph, Linear, ParamStore};
use crate::radiance::{encode_batch, FieldConfig, RadianceField};
use crate::renderer::{composite, mse_loss, RaySampleBatch};
use crate::warpfield::{offset_regularizer, WarpField};

use super::{check_param, spread};

/// Maximum accepted relative gradient error.
pub const TOLERANCE: f64 = 1e-4;

/// Finite-difference step used by every suite.
const STEP: f64 = 1e-5;

/// Components probed per parameter tensor.
const PROBES: usize = 12;

pub struct Suite {
    pub name: &'static str,
    pub run: fn() -> Result<f64, String>,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_error: Result<f64, String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        matches!(self.max_error, Ok(e) if e <= TOLERANCE)
    }
}

pub fn registered() -> Vec<Suite> {
    vec![
        Suite { name: "primitives", run: primitives },
        Suite { name: "bilinear", run: bilinear },
        Suite { name: "projection", run: projection },
        Suite { name: "temporal", run: temporal },
        Suite { name: "extractor", run: extractor },
        Suite { name: "aggregator", run: aggregator },
        Suite { name: "offset-mlp", run: offset_mlp },
        Suite { name: "regularizer", run: regularizer },
        Suite { name: "radiance-field", run: radiance_field },
        Suite { name: "render-ray", run: render_ray },
        Suite { name: "pipeline", run: pipeline },
    ]
}

pub fn run_all() -> Vec<SuiteResult> {
    registered()
        .into_iter()
        .map(|s| SuiteResult {
            name: s.name,
            max_error: (s.run)(),
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn text(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// `sum(out * probe)` with a fixed, shape-determined probe, so every output
/// element gets a distinct weight.
fn probed(t: &Tape<f64>, out: Var) -> Result<Var, DiffError> {
    let shape = t.shape(out);
    let n: usize = shape.iter().product();
    let probe: Vec<f64> = (0..n).map(|i| (i as f64 * 0.73 + 0.31).sin()).collect();
    let p = t.constant(Tensor::from_f64(&shape, &probe));
    let y = t.mul(out, p)?;
    Ok(t.sum(y))
}

fn probed_graph(g: &Graph<'_, f64>, out: Var) -> Result<Var, DiffError> {
    probed(g.tape(), out)
}

/// Values bounded away from zero, for kinks and singularities at 0.
fn away_from_zero(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = r.random_range(0.2..1.2);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &v)
}

fn worst(errors: impl IntoIterator<Item = Result<f64, DiffError>>) -> Result<f64, String> {
    let mut w: f64 = 0.0;
    for e in errors {
        w = w.max(e.map_err(text)?);
    }
    Ok(w)
}

fn primitives() -> Result<f64, String> {
    let mut r = rng(1);
    let x = away_from_zero(&[3, 4], &mut r);
    let positive = x.map(|v| v.abs() + 0.1);
    let other = away_from_zero(&[3, 4], &mut r);
    type Case = Box<dyn Fn(&Tape<f64>, Var) -> Result<Var, DiffError>>;
    let mut cases: Vec<(Tensor<f64>, Case)> = Vec::new();
    for kind in Unary::all() {
        let input = match kind {
            Unary::Log | Unary::Sqrt => positive.clone(),
            _ => x.clone(),
        };
        cases.push((input, Box::new(move |t, v| Ok(t.unary(v, kind)))));
    }
    let b = other.clone();
    let with_other = move |t: &Tape<f64>, v: Var| -> Result<Var, DiffError> {
        // second operand depends on the input too, so both sides are checked
        let c = t.constant(b.clone());
        let y = t.mul(v, c)?;
        Ok(t.add_scalar(y, 3.0))
    };
    let binaries: [fn(&Tape<f64>, Var, Var) -> Result<Var, DiffError>; 4] =
        [Tape::add, Tape::sub, Tape::mul, Tape::div];
    for op in binaries {
        let w = with_other.clone();
        cases.push((x.clone(), Box::new(move |t, v| op(t, v, w(t, v)?))));
    }
    cases.push((x.clone(), Box::new(|t, v| Ok(t.scale(v, -1.7)))));
    cases.push((x.clone(), Box::new(|t, v| Ok(t.neg(v)))));
    cases.push((x.clone(), Box::new(|t, v| t.matmul(v, t.transpose(v)?))));
    cases.push((x.clone(), Box::new(|t, v| Ok(t.mean(v)))));
    for axis in 0..2 {
        cases.push((x.clone(), Box::new(move |t, v| t.sum_axis(v, axis))));
        cases.push((x.clone(), Box::new(move |t, v| t.softmax(v, axis))));
        cases.push((x.clone(), Box::new(move |t, v| t.cumsum_exclusive(v, axis))));
        cases.push((x.clone(), Box::new(move |t, v| t.concat(&[v, t.scale(v, 2.0)], axis))));
        cases.push((x.clone(), Box::new(move |t, v| t.slice(v, axis, 1, 2))));
    }
    cases.push((x.clone(), Box::new(|t, v| t.expand(v, 1, 3))));
    cases.push((x.clone(), Box::new(|t, v| t.broadcast(v, 2))));
    cases.push((x.clone(), Box::new(|t, v| t.reshape(v, &[2, 6]))));
    let maps = uniform::<f64>(&[2, 3, 4, 3], 1.0, &mut r);
    cases.push((
        maps.clone(),
        Box::new(|t, m| t.gather_nearest(m, &[0.2, 1.7, 3.0, 0.0, 2.6, 2.4], &[0, 1, 1])),
    ));
    let image = uniform::<f64>(&[1, 4, 5, 2], 1.0, &mut r);
    let kernel = uniform::<f64>(&[18, 3], 0.5, &mut r);
    let k = kernel.clone();
    cases.push((image.clone(), Box::new(move |t, x| t.conv3x3(x, t.constant(k.clone())))));
    cases.push((kernel, Box::new(move |t, w| t.conv3x3(t.constant(image.clone()), w))));

    worst(cases.iter().map(|(input, f)| grad_check(|t, v| probed(t, f(t, v)?), input, STEP)))
}

fn bilinear() -> Result<f64, String> {
    let mut r = rng(2);
    let maps = uniform::<f64>(&[2, 6, 7, 3], 1.0, &mut r);
    // interior points away from cell edges, where the lookup is smooth
    let coords = Tensor::from_f64(&[4, 2], &[1.3, 2.7, 4.55, 0.2, 5.6, 4.41, 0.35, 3.62]);
    let refs = [0, 1, 1, 0];
    let m = maps.clone();
    let by_coords = grad_check(
        |t, c| {
            let s = t.sample_bilinear(t.constant(m.clone()), c, &refs)?;
            probed(t, s)
        },
        &coords,
        STEP,
    );
    let by_maps = grad_check(
        |t, m| {
            let s = t.sample_bilinear(m, t.constant(coords.clone()), &refs)?;
            probed(t, s)
        },
        &maps,
        STEP,
    );
    worst([by_coords, by_maps])
}

fn projection() -> Result<f64, String> {
    let k = Intrinsics::new(40.0, 42.0, 16.0, 15.0).map_err(text)?;
    let pose = Pose::look_at([0.3, -0.4, 3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
    let mut r = rng(3);
    let x = uniform::<f64>(&[6, 3], 0.8, &mut r);
    worst([grad_check(|t, p| probed(t, project_points(t, p, &k, &pose)?), &x, STEP)])
}

fn check_all(store: &ParamStore<f64>, loss: impl Fn(&Graph<'_, f64>) -> Result<Var, DiffError>) -> Result<f64, String> {
    let names: Vec<String> = store.names().cloned().collect();
    worst(names.iter().map(|name| {
        let len = store.get(name).map_or(0, |t| t.len());
        check_param(store, name, &spread(len, PROBES), STEP, &loss)
    }))
}

fn temporal() -> Result<f64, String> {
    let mut r = rng(4);
    let filter = TemporalFilter::new(5, 3, 4);
    let mut store = ParamStore::new();
    filter.init(&mut store, &mut r);
    // non-zero positional bias so that parameter sees a generic point
    store.insert("temporal.offset_bias", uniform(&[5], 0.5, &mut r));
    let block = uniform::<f64>(&[5, 3], 1.0, &mut r);
    check_all(&store, |g| {
        let b = g.constant(block.clone());
        let w = filter.weights(g, b)?;
        let w = g.reshape(w, &[1, 5])?;
        let a = g.matmul(w, b)?;
        probed_graph(g, a)
    })
}

fn extractor() -> Result<f64, String> {
    let mut r = rng(5);
    let ex = FeatureExtractor::new(3, 4);
    let mut store = ParamStore::new();
    ex.init(&mut store, &mut r);
    let images = uniform::<f64>(&[2, 4, 5, 3], 0.5, &mut r).map(|v| v + 0.5);
    check_all(&store, |g| {
        let y = ex.forward(g, g.constant(images.clone()))?;
        probed_graph(g, y)
    })
}

fn aggregator() -> Result<f64, String> {
    let mut r = rng(6);
    let agg = Aggregator::new(5, 4);
    let mut store = ParamStore::new();
    agg.init(&mut store, &mut r);
    store.insert("input.f", uniform(&[3 * 4, 5], 1.0, &mut r));
    let valid: Vec<bool> = (0..12).map(|i| i % 5 != 3).collect();
    check_all(&store, |g| {
        let y = agg
            .forward(g, g.param("input.f")?, 4, Some(&valid))
            .map_err(|e| DiffError::InvalidArgument {
                op: "aggregator",
                message: e.to_string(),
            })?;
        probed_graph(g, y)
    })
}

fn offset_mlp() -> Result<f64, String> {
    let mut r = rng(7);
    let warp = WarpField::new(9, 4, 6, 8);
    let mut store = ParamStore::new();
    warp.init(&mut store, &mut r);
    // the output layer starts at zero; randomize it so every path is live
    Linear::new("warp.out", 8, 2).init(&mut store, &mut r);
    store.insert("input.a", uniform(&[1, 4], 1.0, &mut r));
    store.insert("input.f", uniform(&[3 * 2, 6], 1.0, &mut r));
    let encoded = uniform::<f64>(&[3, 9], 1.0, &mut r);
    check_all(&store, |g| {
        let e = g.constant(encoded.clone());
        let o = warp.forward(g, e, g.param("input.a")?, g.param("input.f")?, 2)?;
        probed_graph(g, o)
    })
}

fn regularizer() -> Result<f64, String> {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    store.insert("input.o", away_from_zero(&[6, 2], &mut r));
    let alphas = [0.2, 0.9, 0.5];
    check_all(&store, |g| {
        offset_regularizer(g, g.param("input.o")?, &alphas, 2).map_err(warp_error)
    })
}

fn warp_error(e: crate::warpfield::WarpError) -> DiffError {
    DiffError::InvalidArgument {
        op: "offset_regularizer",
        message: e.to_string(),
    }
}

fn radiance_field() -> Result<f64, String> {
    let mut r = rng(9);
    let cfg = FieldConfig {
        depth: 3,
        width: 8,
        skip_at: Some(2),
        color_hidden: 5,
    };
    let field = RadianceField::with_levels(cfg, 2, 1, 3, 4);
    let mut store = ParamStore::new();
    field.init(&mut store, &mut r);
    store.insert("input.a", uniform(&[1, 3], 1.0, &mut r));
    store.insert("input.f", uniform(&[4, 4], 1.0, &mut r));
    let points: Vec<[f64; 3]> = (0..4)
        .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
        .collect();
    let dirs: Vec<[f64; 3]> = points.iter().map(|p| crate::geometry::normalize([p[1], p[2] + 2.0, p[0]])).collect();
    let enc = encode_batch::<f64>(&points, 2);
    let encd = encode_batch::<f64>(&dirs, 1);
    check_all(&store, |g| {
        let out = field.forward(
            g,
            g.constant(enc.clone()),
            g.param("input.a")?,
            g.param("input.f")?,
            g.constant(encd.clone()),
        )?;
        let c = probed_graph(g, out.color)?;
        let s = probed_graph(g, out.sigma)?;
        g.add(c, s)
    })
}

fn render_ray() -> Result<f64, String> {
    let batch = RaySampleBatch::new(
        vec![vec![2.0, 2.3, 2.9, 3.1], vec![2.1, 2.5, 2.6, 3.5]],
        &[4.0, 4.0],
        vec![[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]],
    )
    .map_err(text)?;
    let sigma = Tensor::from_f64(&[2, 4], &[0.5, 1.2, 0.1, 2.0, 0.0, 3.0, 0.7, 1.5]);
    let colors: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect();
    let color = Tensor::from_f64(&[2, 4, 3], &colors);
    let render = |t: &Tape<f64>, s: Var, c: Var| -> Result<Var, DiffError> {
        let out = composite(t, &batch, s, c).map_err(|e| DiffError::InvalidArgument {
            op: "composite",
            message: e.to_string(),
        })?;
        probed(t, out.rgb)
    };
    let by_sigma = grad_check(|t, s| render(t, s, t.constant(color.clone())), &sigma, STEP);
    let by_color = grad_check(|t, c| render(t, t.constant(sigma.clone()), c), &color, STEP);
    worst([by_sigma, by_color])
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        condition_dim: 3,
        window: 3,
        temporal_hidden: 4,
        feature_dim: 4,
        extractor_hidden: 3,
        aggregator_hidden: 4,
        warp_hidden: 6,
        position_levels: 2,
        direction_levels: 1,
        field: FieldConfig {
            depth: 2,
            width: 8,
            skip_at: Some(1),
            color_hidden: 5,
        },
    }
}

/// Full objective (photometric error plus regularizer, lambda = 1) through
/// every module, on two rays of a tiny synthetic scene, in both stages.
fn pipeline() -> Result<f64, String> {
    let scene = synthesize(&SyntheticConfig {
        seed: 3,
        n_frames: 4,
        resolution: 16,
        condition_dim: 3,
        ..SyntheticConfig::default()
    });
    let mut state = ModelState::<f64>::init(micro_config(), 11);
    Linear::new("warp.out", 6, 2).init(&mut state.params, &mut state.rng);
    let model = state.model();
    let refs = ReferenceSet::<f64>::from_scene(&scene, &[1, 2]).map_err(text)?;
    let pixels = [(8, 7), (6, 9)];
    let frame = &scene.frames[0];
    let bundle = RayBundle::new(frame, &pixels, scene.z_near, scene.z_far, 6, None).map_err(text)?;
    let truth: Vec<f64> = RayBundle::truth(frame, &pixels);
    let wrap = |e: crate::model::ModelError| DiffError::InvalidArgument {
        op: "pipeline",
        message: e.to_string(),
    };
    let forward = |g: &Graph<'_, f64>, stage: Stage| {
        let images = g.constant(refs.images.clone());
        let features = model.extractor.forward(g, images)?;
        let a = model.condition(g, &scene.track, 0).map_err(wrap)?;
        model
            .forward(g, features, &refs.views, a, &bundle, scene.world_scale, stage)
            .map_err(wrap)
    };
    // opacities enter the regularizer as constants, so fix them once
    let alphas = {
        let g = Graph::new(&state.params, false);
        let out = forward(&g, Stage::Joint { warp: true }).map_err(text)?;
        let sigma = g.value(out.sigma).data().to_vec();
        bundle.batch.opacities(&sigma)
    };
    let mut errors = Vec::new();
    for stage in [Stage::Coarse, Stage::Joint { warp: true }] {
        let loss = |g: &Graph<'_, f64>| -> Result<Var, DiffError> {
            let out = forward(g, stage)?;
            let l = mse_loss(g.tape(), out.rgb, &truth).map_err(|e| DiffError::InvalidArgument {
                op: "mse",
                message: e.to_string(),
            })?;
            match out.offsets {
                Some(o) => {
                    let reg = offset_regularizer(g, o, &alphas, refs.len()).map_err(warp_error)?;
                    g.add(l, reg)
                }
                None => Ok(l),
            }
        };
        if stage != Stage::Coarse {
            // a check over identically-zero gradients would pass vacuously
            let g = Graph::new(&state.params, true);
            let l = loss(&g).map_err(text)?;
            let grads = g.gradients(l).map_err(text)?;
            for name in state.params.names() {
                if !grads.get(name).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)) {
                    return Err(format!("no gradient reaches `{name}`"));
                }
            }
        }
        errors.push(check_all(&state.params, loss));
    }
    errors.into_iter().try_fold(0.0f64, |w, e| Ok(w.max(e?)))
}

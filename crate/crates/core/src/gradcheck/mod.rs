//! Finite-difference verification of reverse-mode gradients, and the
//! registry of gradient suites run by `dfrf gradcheck`.

mod suites;

use crate::diffmath::{DiffError, Var};
use crate::nn::{Graph, ParamStore};

pub use suites::{registered, run_all, Suite, SuiteResult, TOLERANCE};

/// Central-difference check of d(loss)/d(param `name`) at the listed
/// components. `loss` builds the (scalar or summed) objective on a graph.
pub fn check_param<F>(
    store: &ParamStore<f64>,
    name: &str,
    components: &[usize],
    step: f64,
    loss: F,
) -> Result<f64, DiffError>
where
    F: Fn(&Graph<'_, f64>) -> Result<Var, DiffError>,
{
    let scalar = |g: &Graph<'_, f64>| -> Result<Var, DiffError> {
        let out = loss(g)?;
        Ok(if g.value(out).len() == 1 { out } else { g.sum(out) })
    };
    let g = Graph::new(store, true);
    let l = scalar(&g)?;
    let grads = g.gradients(l)?;
    let len = store
        .get(name)
        .ok_or_else(|| DiffError::InvalidArgument {
            op: "check_param",
            message: format!("unknown parameter `{name}`"),
        })?
        .len();
    let zero = vec![0.0; len];
    let analytic = grads.get(name).map(|t| t.data().to_vec()).unwrap_or(zero);

    let eval = |delta: f64, i: usize| -> Result<f64, DiffError> {
        let mut probe = store.clone();
        probe.get_mut(name).expect("checked above").data_mut()[i] += delta;
        let g = Graph::new(&probe, false);
        let l = scalar(&g)?;
        let v = g.value(l).item();
        Ok(v)
    };
    let mut worst: f64 = 0.0;
    for &i in components {
        let numeric = (eval(step, i)? - eval(-step, i)?) / (2.0 * step);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Up to `count` evenly spread component indices of a tensor of length `len`.
pub fn spread(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count + (i * 7919) % (len / count).max(1)).collect()
}

//! Differentiable reference warping: a three-layer MLP predicts a 2D pixel
//! offset for every (point, reference) pair from the encoded point, the
//! condition vector and the reference's nearest feature. Offsets shift the
//! projected coordinate before bilinear feature lookup, and are penalized
//! by an opacity-weighted magnitude regularizer.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Real, Tensor, Var};
use crate::geometry::ImageCoord;
use crate::nn::{Graph, Linear, ParamStore};

/// Keeps the offset norm differentiable at zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error("{offsets} offsets for {points} points x {refs} references")]
    LengthMismatch {
        offsets: usize,
        points: usize,
        refs: usize,
    },
    #[error(transparent)]
    Graph(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset {
    pub du: f64,
    pub dv: f64,
}

/// `(u + du, v + dv)`.
pub fn warp(at: ImageCoord, o: Offset) -> ImageCoord {
    ImageCoord {
        u: at.u + o.du,
        v: at.v + o.dv,
    }
}

#[derive(Clone, Debug)]
pub struct WarpField {
    pub encoded_dim: usize,
    pub condition_dim: usize,
    pub feature_dim: usize,
    l1: Linear,
    l2: Linear,
    out: Linear,
}

impl WarpField {
    pub const PREFIX: &'static str = "warp.";

    pub fn new(encoded_dim: usize, condition_dim: usize, feature_dim: usize, hidden: usize) -> Self {
        WarpField {
            encoded_dim,
            condition_dim,
            feature_dim,
            l1: Linear::new("warp.l1", encoded_dim + condition_dim + feature_dim, hidden),
            l2: Linear::new("warp.l2", hidden, hidden),
            out: Linear::new("warp.out", hidden, 2),
        }
    }

    /// Hidden layers get the default init; the output layer starts at zero
    /// so every initial offset is exactly `(0, 0)`.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.l1.init(store, rng);
        self.l2.init(store, rng);
        self.out.init_zero(store);
    }

    /// Offsets for `n_refs` references per point.
    ///
    /// `encoded: [P, E]`, `condition: [1, A]`, `features: [P * N, D]`
    /// (rows grouped by point). Returns `[P * N, 2]`. The point and
    /// condition contributions to the first layer are computed once per
    /// point and repeated across references.
    pub fn forward<T: Real>(
        &self,
        g: &Graph<'_, T>,
        encoded: Var,
        condition: Var,
        features: Var,
        n_refs: usize,
    ) -> Result<Var, DiffError> {
        let points = g.shape(encoded)[0];
        let hidden = self.l1.fan_out;
        let from_point = self.l1.matmul_block(g, encoded, 0)?;
        let from_cond = self.l1.matmul_block(g, condition, self.encoded_dim)?;
        let from_cond = g.reshape(from_cond, &[hidden])?;
        let from_cond = g.broadcast(from_cond, points)?;
        let shared = g.add(from_point, from_cond)?;
        let shared = g.expand(shared, 1, n_refs)?;
        let shared = g.reshape(shared, &[points * n_refs, hidden])?;
        let from_feat = self
            .l1
            .matmul_block(g, features, self.encoded_dim + self.condition_dim)?;
        let h = g.add(shared, from_feat)?;
        let h = self.l1.add_bias(g, h, points * n_refs)?;
        let h = g.relu(h);
        let h = self.l2.forward(g, h)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }

    /// Single-pair convenience wrapper around [`WarpField::forward`].
    pub fn predict_offset<T: Real>(
        &self,
        params: &ParamStore<T>,
        encoded: &[f64],
        condition: &[f64],
        feature: &[f64],
    ) -> Result<Offset, DiffError> {
        let g = Graph::new(params, false);
        let e = g.constant(Tensor::from_f64(&[1, encoded.len()], encoded));
        let a = g.constant(Tensor::from_f64(&[1, condition.len()], condition));
        let f = g.constant(Tensor::from_f64(&[1, feature.len()], feature));
        let o = self.forward(&g, e, a, f, 1)?;
        let v = g.value(o).to_f64_vec();
        Ok(Offset { du: v[0], dv: v[1] })
    }
}

/// Opacity-weighted mean offset magnitude,
/// `1/(N |P|) * sum_p sum_n (1 - alpha_p) * sqrt(du^2 + dv^2 + eps)`.
///
/// `offsets: [P * N, 2]` grouped by point; `alphas` has one opacity per point
/// and enters as a constant.
pub fn offset_regularizer<T: Real>(
    g: &Graph<'_, T>,
    offsets: Var,
    alphas: &[T],
    n_refs: usize,
) -> Result<Var, WarpError> {
    let rows = g.shape(offsets)[0];
    if n_refs == 0 || rows != alphas.len() * n_refs {
        return Err(WarpError::LengthMismatch {
            offsets: rows,
            points: alphas.len(),
            refs: n_refs,
        });
    }
    let sq = g.mul(offsets, offsets)?;
    let sq = g.sum_axis(sq, 1)?;
    let norm = g.sqrt(g.add_scalar(sq, T::c(NORM_EPS)));
    let weights: Vec<T> = alphas
        .iter()
        .flat_map(|&a| std::iter::repeat_n(T::one() - a, n_refs))
        .collect();
    let weights = g.constant(Tensor::new(&[rows], weights));
    let weighted = g.mul(norm, weights)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, T::c(1.0 / rows as f64)))
}

/// [`offset_regularizer`] on plain values.
pub fn regularizer_value(offsets: &[Offset], alphas: &[f64], n_refs: usize) -> Result<f64, WarpError> {
    let store = ParamStore::<f64>::new();
    let g = Graph::new(&store, false);
    let flat: Vec<f64> = offsets.iter().flat_map(|o| [o.du, o.dv]).collect();
    let o = g.constant(Tensor::from_f64(&[offsets.len(), 2], &flat));
    let r = offset_regularizer(&g, o, alphas, n_refs)?;
    let v = g.value(r).item();
    Ok(v)
}

//! Define-by-run tape. Every primitive records its output value and enough
//! context for an exact vector-Jacobian product; [`Tape::backward`] consumes
//! the tape and returns gradients for every `requires_grad` leaf.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::tensor::{axis_split, Real, Tensor};
use super::DiffError;

type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    requires_grad: bool,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn requires_grad(self) -> bool {
        self.requires_grad
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Sqrt => "sqrt",
        }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Relu => x.max(T::zero()),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => tanh(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Tanh => T::one() - y * y,
            Unary::Exp => y,
            Unary::Log => x.recip(),
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sqrt => T::c(0.5) / y,
        }
    }
}

/// `tanh` through `expm1`, several times faster than the libm routine and
/// accurate near zero.
pub fn tanh<T: Real>(x: T) -> T {
    let e = (-(x.abs() + x.abs())).exp_m1();
    let y = -e / (T::c(2.0) + e);
    y.copysign(x)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Conv3x3 {
        x: usize,
        w: usize,
        cols: Vec<T>,
    },
    Unary(usize, Unary),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    Softmax(usize, usize),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Expand {
        x: usize,
        axis: usize,
    },
    Reshape(usize),
    Transpose(usize),
    CumsumExclusive(usize, usize),
    GatherNearest {
        maps: usize,
        rows: Vec<usize>,
    },
    SampleBilinear {
        maps: usize,
        coords: usize,
        refs: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner operation recorder. Not shareable across threads; build one
/// tape per thread and run them independently.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> DiffError {
    DiffError::InvalidArgument {
        op,
        message: msg.into(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id, requires_grad }
    }

    /// Records an input tensor.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            if x.shape() != y.shape() {
                return Err(mismatch(name, x.shape(), y.shape()));
            }
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.shape(), data)
        };
        Ok(self.push(out, op, a.requires_grad || b.requires_grad))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a.id, b.id))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a.id, b.id))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |p, q| p / q, Op::Div(a.id, b.id))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a.id, c), a.requires_grad)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a.id), a.requires_grad)
    }

    pub fn unary(&self, a: Var, kind: Unary) -> Var {
        let out = self.value(a).map(|v| kind.apply(v));
        self.push(out, Op::Unary(a.id, kind), a.requires_grad)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
                return Err(mismatch("matmul", x.shape(), y.shape()));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut c = vec![T::zero(); m * n];
            T::gemm(
                m,
                k,
                n,
                T::one(),
                x.data(),
                k as isize,
                1,
                y.data(),
                n as isize,
                1,
                T::zero(),
                &mut c,
                n as isize,
                1,
            );
            Tensor::new(&[m, n], c)
        };
        Ok(self.push(out, Op::MatMul(a.id, b.id), a.requires_grad || b.requires_grad))
    }

    /// 3x3 convolution, stride 1, zero padding 1, channels-last.
    ///
    /// `x: [N, H, W, Cin]`, `w: [9 * Cin, Cout]` with row index
    /// `(ky * 3 + kx) * Cin + c`. Output `[N, H, W, Cout]`. No bias.
    pub fn conv3x3(&self, x: Var, w: Var) -> Result<Var> {
        let (out, cols) = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.id].value, &nodes[w.id].value);
            let xs = xv.shape();
            if xs.len() != 4 || wv.shape().len() != 2 || wv.shape()[0] != 9 * xs[3] {
                return Err(mismatch("conv3x3", xs, wv.shape()));
            }
            let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
            let cout = wv.shape()[1];
            let rows = n * h * wd;
            let cols = im2col(xv.data(), n, h, wd, cin);
            let mut c = vec![T::zero(); rows * cout];
            T::gemm(
                rows,
                9 * cin,
                cout,
                T::one(),
                &cols,
                (9 * cin) as isize,
                1,
                wv.data(),
                cout as isize,
                1,
                T::zero(),
                &mut c,
                cout as isize,
                1,
            );
            (Tensor::new(&[n, h, wd, cout], c), cols)
        };
        let rg = x.requires_grad || w.requires_grad;
        let cols = if w.requires_grad { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv3x3 { x: x.id, w: w.id, cols }, rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let v = self.value(a);
            if v.shape().len() != 2 {
                return Err(invalid("transpose", format!("expected rank 2, got {:?}", v.shape())));
            }
            let (r, c) = (v.shape()[0], v.shape()[1]);
            let src = v.data();
            let mut data = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = src[i * c + j];
                }
            }
            Tensor::new(&[c, r], data)
        };
        Ok(self.push(out, Op::Transpose(a.id), a.requires_grad))
    }

    // ---- reductions ------------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.id), a.requires_grad)
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = {
            let v = self.value(a);
            let s: T = v.data().iter().copied().sum();
            Tensor::scalar(s / T::c(v.len() as f64))
        };
        self.push(out, Op::MeanAll(a.id), a.requires_grad)
    }

    /// Sums out `axis`; a rank-1 input yields shape `[1]`.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let shape = v.shape();
            if axis >= shape.len() {
                return Err(invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
            }
            let (outer, n, inner) = axis_split(shape, axis);
            let src = v.data();
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut data[o * inner..(o + 1) * inner];
                for k in 0..n {
                    let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
            let mut out_shape: Vec<usize> =
                shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &s)| s).collect();
            if out_shape.is_empty() {
                out_shape.push(1);
            }
            Tensor::new(&out_shape, data)
        };
        Ok(self.push(out, Op::SumAxis(a.id, axis), a.requires_grad))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let shape = v.shape();
            if axis >= shape.len() {
                return Err(invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
            }
            let (outer, n, inner) = axis_split(shape, axis);
            let src = v.data();
            let mut data = vec![T::zero(); src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let mut hi = T::neg_infinity();
                    for k in 0..n {
                        hi = hi.max(src[at(k)]);
                    }
                    let mut total = T::zero();
                    for k in 0..n {
                        let e = (src[at(k)] - hi).exp();
                        data[at(k)] = e;
                        total += e;
                    }
                    for k in 0..n {
                        data[at(k)] = data[at(k)] / total;
                    }
                }
            }
            Tensor::new(shape, data)
        };
        Ok(self.push(out, Op::Softmax(a.id, axis), a.requires_grad))
    }

    /// Exclusive prefix sum along `axis`: `out[i] = sum_{j < i} x[j]`.
    pub fn cumsum_exclusive(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let shape = v.shape();
            if axis >= shape.len() {
                return Err(invalid("cumsum", format!("axis {axis} out of range for {shape:?}")));
            }
            let (outer, n, inner) = axis_split(shape, axis);
            let src = v.data();
            let mut data = vec![T::zero(); src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut acc = T::zero();
                    for k in 0..n {
                        let at = (o * n + k) * inner + i;
                        data[at] = acc;
                        acc += src[at];
                    }
                }
            }
            Tensor::new(shape, data)
        };
        Ok(self.push(out, Op::CumsumExclusive(a.id, axis), a.requires_grad))
    }

    // ---- shape -----------------------------------------------------------------

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].id].value.shape().to_vec();
            if axis >= first.len() {
                return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut extent = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(mismatch("concat", &first, s));
                }
                extent += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = extent;
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * extent * inner);
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(&shape, data)
        };
        let rg = parts.iter().any(|p| p.requires_grad);
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let shape = v.shape();
            if axis >= shape.len() || start + len > shape[axis] || len == 0 {
                return Err(invalid(
                    "slice",
                    format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
                ));
            }
            let (outer, n, inner) = axis_split(shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
            let mut s = shape.to_vec();
            s[axis] = len;
            Tensor::new(&s, data)
        };
        Ok(self.push(out, Op::Slice { x: a.id, axis, start }, a.requires_grad))
    }

    /// Inserts a new axis of extent `n` at position `axis`, repeating the input.
    pub fn expand(&self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let shape = v.shape();
            if axis > shape.len() || n == 0 {
                return Err(invalid("expand", format!("axis {axis} (x{n}) for {shape:?}")));
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis..].iter().product();
            let mut data = Vec::with_capacity(v.len() * n);
            for o in 0..outer {
                let block = &v.data()[o * inner..(o + 1) * inner];
                if inner == 1 {
                    data.extend(std::iter::repeat_n(block[0], n));
                } else {
                    for _ in 0..n {
                        data.extend_from_slice(block);
                    }
                }
            }
            let mut s = shape.to_vec();
            s.insert(axis, n);
            Tensor::new(&s, data)
        };
        Ok(self.push(out, Op::Expand { x: a.id, axis }, a.requires_grad))
    }

    /// Leading-axis broadcast: `[..] -> [n, ..]`.
    pub fn broadcast(&self, a: Var, n: usize) -> Result<Var> {
        self.expand(a, 0, n)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let v = self.value(a);
            if shape.iter().product::<usize>() != v.len() {
                return Err(mismatch("reshape", v.shape(), shape));
            }
            v.clone().reshaped(shape)
        };
        Ok(self.push(out, Op::Reshape(a.id), a.requires_grad))
    }

    // ---- feature sampling ------------------------------------------------------

    /// Nearest-grid lookup in `maps: [N, H, W, D]`. `coords` holds `(u, v)`
    /// pairs in grid units (u along width); each is clamped to the map and
    /// rounded. Row `i` reads map `refs[i]`. Not differentiable in the
    /// coordinates.
    pub fn gather_nearest(&self, maps: Var, coords: &[T], refs: &[usize]) -> Result<Var> {
        let (out, rows) = {
            let m = self.value(maps);
            let (n, h, w, d) = map_dims("gather_nearest", m.shape())?;
            if coords.len() != 2 * refs.len() {
                return Err(invalid("gather_nearest", "coords must hold one (u, v) pair per row"));
            }
            let mut rows = Vec::with_capacity(refs.len());
            let mut data = Vec::with_capacity(refs.len() * d);
            for (i, &r) in refs.iter().enumerate() {
                if r >= n {
                    return Err(invalid("gather_nearest", format!("reference {r} of {n}")));
                }
                let u = clamp_coord(coords[2 * i], w).round().to_usize().unwrap_or(0);
                let v = clamp_coord(coords[2 * i + 1], h).round().to_usize().unwrap_or(0);
                let row = (r * h + v) * w + u;
                rows.push(row);
                data.extend_from_slice(&m.data()[row * d..(row + 1) * d]);
            }
            (Tensor::new(&[refs.len(), d], data), rows)
        };
        Ok(self.push(out, Op::GatherNearest { maps: maps.id, rows }, maps.requires_grad))
    }

    /// Bilinear lookup in `maps: [N, H, W, D]` at `coords: [M, 2]` (grid units,
    /// clamped). Differentiable in both the maps and the coordinates.
    pub fn sample_bilinear(&self, maps: Var, coords: Var, refs: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (m, c) = (&nodes[maps.id].value, &nodes[coords.id].value);
            let (n, h, w, d) = map_dims("sample_bilinear", m.shape())?;
            if c.shape() != [refs.len(), 2] {
                return Err(mismatch("sample_bilinear", c.shape(), &[refs.len(), 2]));
            }
            let mut data = vec![T::zero(); refs.len() * d];
            for (i, &r) in refs.iter().enumerate() {
                if r >= n {
                    return Err(invalid("sample_bilinear", format!("reference {r} of {n}")));
                }
                let cell = BilinearCell::new(c.data()[2 * i], c.data()[2 * i + 1], h, w);
                let out = &mut data[i * d..(i + 1) * d];
                for (corner, weight) in cell.corners() {
                    let row = (r * h + corner.1) * w + corner.0;
                    let src = &m.data()[row * d..(row + 1) * d];
                    for (o, &s) in out.iter_mut().zip(src) {
                        *o += weight * s;
                    }
                }
            }
            Tensor::new(&[refs.len(), d], data)
        };
        let rg = maps.requires_grad || coords.requires_grad;
        Ok(self.push(
            out,
            Op::SampleBilinear {
                maps: maps.id,
                coords: coords.id,
                refs: refs.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let mut nodes = self.nodes.into_inner();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss { shape: loss_shape });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        nodes.truncate(loss.id + 1);
        if loss.requires_grad {
            grads[loss.id] = Some(Tensor::full(&loss_shape, T::one()));
        }
        let mut leaves = HashMap::new();
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(g) = grads[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(id, g);
                continue;
            }
            propagate(&nodes, &mut grads, node, g);
        }
        Ok(Gradients { by_id: leaves })
    }
}

fn map_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(invalid(op, format!("feature maps must be [N, H, W, D], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn clamp_coord<T: Real>(x: T, extent: usize) -> T {
    let hi = T::c((extent - 1) as f64);
    if x.is_nan() {
        return T::zero();
    }
    x.max(T::zero()).min(hi)
}

/// The four grid nodes enclosing a clamped coordinate and the fractional
/// offsets inside that cell.
struct BilinearCell<T> {
    u0: usize,
    v0: usize,
    u1: usize,
    v1: usize,
    fu: T,
    fv: T,
    /// d(clamped)/d(raw) for u and v.
    du: T,
    dv: T,
}

impl<T: Real> BilinearCell<T> {
    fn new(u: T, v: T, h: usize, w: usize) -> Self {
        let (u0, u1, fu, du) = Self::axis(u, w);
        let (v0, v1, fv, dv) = Self::axis(v, h);
        BilinearCell {
            u0,
            v0,
            u1,
            v1,
            fu,
            fv,
            du,
            dv,
        }
    }

    fn axis(x: T, extent: usize) -> (usize, usize, T, T) {
        let hi = T::c((extent - 1) as f64);
        let inside = x >= T::zero() && x <= hi;
        let xc = clamp_coord(x, extent);
        if extent == 1 {
            return (0, 0, T::zero(), T::zero());
        }
        let lo = xc.floor().to_usize().unwrap_or(0).min(extent - 2);
        let frac = xc - T::c(lo as f64);
        (lo, lo + 1, frac, if inside { T::one() } else { T::zero() })
    }

    fn corners(&self) -> [((usize, usize), T); 4] {
        let (one, fu, fv) = (T::one(), self.fu, self.fv);
        [
            ((self.u0, self.v0), (one - fu) * (one - fv)),
            ((self.u1, self.v0), fu * (one - fv)),
            ((self.u0, self.v1), (one - fu) * fv),
            ((self.u1, self.v1), fu * fv),
        ]
    }
}

fn im2col<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let width = 9 * c;
    let mut cols = vec![T::zero(); n * h * w * width];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * width;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let width = 9 * c;
    let mut x = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * width;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for (d, &s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn propagate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    node: Node<T>,
    g: Tensor<T>,
) {
    let wants = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| &nodes[id].value;
    match node.op {
        Op::Leaf => unreachable!("leaves are collected by the caller"),
        Op::Add(a, b) => {
            if wants(a) {
                accumulate(grads, a, g.clone());
            }
            if wants(b) {
                accumulate(grads, b, g);
            }
        }
        Op::Sub(a, b) => {
            if wants(b) {
                accumulate(grads, b, g.map(|v| -v));
            }
            if wants(a) {
                accumulate(grads, a, g);
            }
        }
        Op::Mul(a, b) => {
            if wants(a) {
                let d = zip_map(&g, val(b), |gv, y| gv * y);
                accumulate(grads, a, d);
            }
            if wants(b) {
                let d = zip_map(&g, val(a), |gv, x| gv * x);
                accumulate(grads, b, d);
            }
        }
        Op::Div(a, b) => {
            if wants(a) {
                let d = zip_map(&g, val(b), |gv, y| gv / y);
                accumulate(grads, a, d);
            }
            if wants(b) {
                // d(x/y)/dy = -out / y
                let mut d = zip_map(&g, &node.value, |gv, o| -gv * o);
                for (dv, &y) in d.data_mut().iter_mut().zip(val(b).data()) {
                    *dv = *dv / y;
                }
                accumulate(grads, b, d);
            }
        }
        Op::Scale(a, c) => accumulate(grads, a, g.map(|v| v * c)),
        Op::AddScalar(a) => accumulate(grads, a, g),
        Op::MatMul(a, b) => {
            let (x, y) = (val(a), val(b));
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            if wants(a) {
                let mut d = vec![T::zero(); m * k];
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    n as isize,
                    1,
                    y.data(),
                    1,
                    n as isize,
                    T::zero(),
                    &mut d,
                    k as isize,
                    1,
                );
                accumulate(grads, a, Tensor::new(&[m, k], d));
            }
            if wants(b) {
                let mut d = vec![T::zero(); k * n];
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    x.data(),
                    1,
                    k as isize,
                    g.data(),
                    n as isize,
                    1,
                    T::zero(),
                    &mut d,
                    n as isize,
                    1,
                );
                accumulate(grads, b, Tensor::new(&[k, n], d));
            }
        }
        Op::Conv3x3 { x, w, cols } => {
            let xs = val(x).shape().to_vec();
            let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
            let wv = val(w);
            let cout = wv.shape()[1];
            let rows = n * h * wd;
            let kdim = 9 * cin;
            if wants(w) {
                let mut d = vec![T::zero(); kdim * cout];
                T::gemm(
                    kdim,
                    rows,
                    cout,
                    T::one(),
                    &cols,
                    1,
                    kdim as isize,
                    g.data(),
                    cout as isize,
                    1,
                    T::zero(),
                    &mut d,
                    cout as isize,
                    1,
                );
                accumulate(grads, w, Tensor::new(&[kdim, cout], d));
            }
            if wants(x) {
                let mut dcols = vec![T::zero(); rows * kdim];
                T::gemm(
                    rows,
                    cout,
                    kdim,
                    T::one(),
                    g.data(),
                    cout as isize,
                    1,
                    wv.data(),
                    1,
                    cout as isize,
                    T::zero(),
                    &mut dcols,
                    kdim as isize,
                    1,
                );
                let dx = col2im(&dcols, n, h, wd, cin);
                accumulate(grads, x, Tensor::new(&xs, dx));
            }
        }
        Op::Unary(a, kind) => {
            let x = val(a);
            let mut d = g;
            for ((dv, &xv), &yv) in d.data_mut().iter_mut().zip(x.data()).zip(node.value.data()) {
                *dv = *dv * kind.derivative(xv, yv);
            }
            accumulate(grads, a, d);
        }
        Op::SumAll(a) => {
            let gv = g.item();
            accumulate(grads, a, Tensor::full(val(a).shape(), gv));
        }
        Op::MeanAll(a) => {
            let x = val(a);
            let gv = g.item() / T::c(x.len() as f64);
            accumulate(grads, a, Tensor::full(x.shape(), gv));
        }
        Op::SumAxis(a, axis) => {
            let shape = val(a).shape().to_vec();
            let (outer, n, inner) = axis_split(&shape, axis);
            let mut d = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let row = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..n {
                    d.extend_from_slice(row);
                }
            }
            accumulate(grads, a, Tensor::new(&shape, d));
        }
        Op::Softmax(a, axis) => {
            let y = &node.value;
            let (outer, n, inner) = axis_split(y.shape(), axis);
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: T = (0..n).map(|k| g.data()[at(k)] * y.data()[at(k)]).sum();
                    for k in 0..n {
                        d[at(k)] = y.data()[at(k)] * (g.data()[at(k)] - dot);
                    }
                }
            }
            accumulate(grads, a, Tensor::new(y.shape(), d));
        }
        Op::CumsumExclusive(a, axis) => {
            let (outer, n, inner) = axis_split(g.shape(), axis);
            let mut d = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut acc = T::zero();
                    for k in (0..n).rev() {
                        let at = (o * n + k) * inner + i;
                        d[at] = acc;
                        acc += g.data()[at];
                    }
                }
            }
            accumulate(grads, a, Tensor::new(g.shape(), d));
        }
        Op::Concat(parts, axis) => {
            let out_shape = node.value.shape().to_vec();
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let extent = out_shape[axis];
            let mut offset = 0;
            for p in parts {
                let ps = val(p).shape().to_vec();
                let chunk = ps[axis] * inner;
                if wants(p) {
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * extent * inner + offset;
                        d.extend_from_slice(&g.data()[base..base + chunk]);
                    }
                    accumulate(grads, p, Tensor::new(&ps, d));
                }
                offset += chunk;
            }
        }
        Op::Slice { x, axis, start } => {
            let shape = val(x).shape().to_vec();
            let (outer, n, inner) = axis_split(&shape, axis);
            let len = g.shape()[axis];
            let mut d = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            accumulate(grads, x, Tensor::new(&shape, d));
        }
        Op::Expand { x, axis } => {
            let shape = val(x).shape().to_vec();
            let n = g.shape()[axis];
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis..].iter().product();
            let mut d = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut d[o * inner..(o + 1) * inner];
                for k in 0..n {
                    let src = &g.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (dv, &s) in dst.iter_mut().zip(src) {
                        *dv += s;
                    }
                }
            }
            accumulate(grads, x, Tensor::new(&shape, d));
        }
        Op::Reshape(a) => {
            let shape = val(a).shape().to_vec();
            accumulate(grads, a, g.reshaped(&shape));
        }
        Op::Transpose(a) => {
            let (r, c) = (g.shape()[0], g.shape()[1]);
            let mut d = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = g.data()[i * c + j];
                }
            }
            accumulate(grads, a, Tensor::new(&[c, r], d));
        }
        Op::GatherNearest { maps, rows } => {
            let shape = val(maps).shape().to_vec();
            let d_feat = shape[3];
            let mut d = vec![T::zero(); shape.iter().product()];
            for (i, &row) in rows.iter().enumerate() {
                let dst = &mut d[row * d_feat..(row + 1) * d_feat];
                for (dv, &s) in dst.iter_mut().zip(&g.data()[i * d_feat..(i + 1) * d_feat]) {
                    *dv += s;
                }
            }
            accumulate(grads, maps, Tensor::new(&shape, d));
        }
        Op::SampleBilinear { maps, coords, refs } => {
            let m = val(maps);
            let c = val(coords);
            let shape = m.shape().to_vec();
            let (h, w, d_feat) = (shape[1], shape[2], shape[3]);
            let mut dmap = if wants(maps) {
                vec![T::zero(); m.len()]
            } else {
                Vec::new()
            };
            let mut dcoord = vec![T::zero(); c.len()];
            for (i, &r) in refs.iter().enumerate() {
                let cell = BilinearCell::new(c.data()[2 * i], c.data()[2 * i + 1], h, w);
                let gi = &g.data()[i * d_feat..(i + 1) * d_feat];
                if !dmap.is_empty() {
                    for (corner, weight) in cell.corners() {
                        let row = (r * h + corner.1) * w + corner.0;
                        let dst = &mut dmap[row * d_feat..(row + 1) * d_feat];
                        for (dv, &s) in dst.iter_mut().zip(gi) {
                            *dv += weight * s;
                        }
                    }
                }
                if wants(coords) {
                    let at = |u: usize, v: usize| {
                        let row = (r * h + v) * w + u;
                        &m.data()[row * d_feat..(row + 1) * d_feat]
                    };
                    let (f00, f10) = (at(cell.u0, cell.v0), at(cell.u1, cell.v0));
                    let (f01, f11) = (at(cell.u0, cell.v1), at(cell.u1, cell.v1));
                    let one = T::one();
                    let (mut su, mut sv) = (T::zero(), T::zero());
                    for k in 0..d_feat {
                        let dfdu = (one - cell.fv) * (f10[k] - f00[k]) + cell.fv * (f11[k] - f01[k]);
                        let dfdv = (one - cell.fu) * (f01[k] - f00[k]) + cell.fu * (f11[k] - f10[k]);
                        su += gi[k] * dfdu;
                        sv += gi[k] * dfdv;
                    }
                    dcoord[2 * i] = su * cell.du;
                    dcoord[2 * i + 1] = sv * cell.dv;
                }
            }
            if wants(maps) {
                accumulate(grads, maps, Tensor::new(&shape, dmap));
            }
            if wants(coords) {
                accumulate(grads, coords, Tensor::new(c.shape(), dcoord));
            }
        }
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Leaf gradients produced by one backward pass, keyed by node id.
pub struct Gradients<T> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_id.get(&v.id)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_id.remove(&v.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn into_map(self) -> HashMap<usize, Tensor<T>> {
        self.by_id
    }
}

impl Unary {
    pub fn all() -> [Unary; 9] {
        [
            Unary::Relu,
            Unary::Softplus,
            Unary::Sigmoid,
            Unary::Tanh,
            Unary::Exp,
            Unary::Log,
            Unary::Sin,
            Unary::Cos,
            Unary::Sqrt,
        ]
    }

    pub fn label(self) -> &'static str {
        self.name()
    }
}

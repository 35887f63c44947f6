//! Named parameter storage and per-step graph binding.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::Deref;

use rand::Rng;

use crate::diffmath::{DiffError, Real, Tape, Tensor, Var};

/// Named learnable tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// FNV-1a over the bit patterns of every tensor whose name starts with `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.tensors.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            let mut bytes = name.as_bytes().to_vec();
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
            for b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }

    pub fn convert<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.convert()))
                .collect(),
        }
    }
}

/// A tape plus lazily bound parameters. A parameter becomes a leaf only when
/// a forward pass asks for it, so modules that are not evaluated in a step
/// receive no gradient and no update.
pub struct Graph<'p, T> {
    tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: RefCell<BTreeMap<String, Var>>,
    trainable: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, trainable: bool) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: RefCell::new(BTreeMap::new()),
            trainable,
        }
    }

    pub fn param(&self, name: &str) -> Result<Var, DiffError> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let value = self.params.get(name).ok_or_else(|| DiffError::InvalidArgument {
            op: "param",
            message: format!("unknown parameter `{name}`"),
        })?;
        let v = self.tape.leaf(value.clone(), self.trainable);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }

    /// Runs backward from `loss` and returns gradients by parameter name.
    pub fn gradients(self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>, DiffError> {
        let bound = self.bound.into_inner();
        let mut grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, v) in bound {
            if let Some(g) = grads.take(v) {
                out.insert(name, g);
            }
        }
        Ok(out)
    }
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

/// Affine layer `x W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            name: name.into(),
            fan_in,
            fan_out,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let bound = 1.0 / (self.fan_in as f64).sqrt();
        store.insert(self.weight(), uniform(&[self.fan_in, self.fan_out], bound, rng));
        store.insert(self.bias(), uniform(&[self.fan_out], bound, rng));
    }

    pub fn init_zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(self.weight(), Tensor::zeros(&[self.fan_in, self.fan_out]));
        store.insert(self.bias(), Tensor::zeros(&[self.fan_out]));
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var, DiffError> {
        let w = g.param(&self.weight())?;
        let rows = g.shape(x)[0];
        let y = g.matmul(x, w)?;
        self.add_bias(g, y, rows)
    }

    /// `sum_i x_i W_i + b` where `W_i` are consecutive row blocks of `W`;
    /// equal to `forward` on the column-concatenation of the parts.
    pub fn forward_parts<T: Real>(&self, g: &Graph<'_, T>, parts: &[Var]) -> Result<Var, DiffError> {
        let y = self.matmul_parts(g, parts, 0)?;
        let rows = g.shape(y)[0];
        self.add_bias(g, y, rows)
    }

    /// `x W[start..start + width]` without the bias, `x: [rows, width]`.
    pub fn matmul_block<T: Real>(&self, g: &Graph<'_, T>, x: Var, start: usize) -> Result<Var, DiffError> {
        self.matmul_parts(g, &[x], start)
    }

    fn matmul_parts<T: Real>(&self, g: &Graph<'_, T>, parts: &[Var], start: usize) -> Result<Var, DiffError> {
        let w = g.param(&self.weight())?;
        let mut offset = start;
        let mut acc: Option<Var> = None;
        for &p in parts {
            let width = g.shape(p)[1];
            let block = if offset == 0 && width == self.fan_in {
                w
            } else {
                g.slice(w, 0, offset, width)?
            };
            offset += width;
            let y = g.matmul(p, block)?;
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        acc.ok_or_else(|| DiffError::InvalidArgument {
            op: "linear",
            message: "no inputs".into(),
        })
    }

    pub fn add_bias<T: Real>(&self, g: &Graph<'_, T>, y: Var, rows: usize) -> Result<Var, DiffError> {
        let b = g.param(&self.bias())?;
        let bb = g.broadcast(b, rows)?;
        g.add(y, bb)
    }
}

pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data)
}

//! Parameter storage, graph binding and the small layers shared by every
//! model: dense maps, layer normalization and embedding tables.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor with the same-named tensor of `other`, checking
    /// shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in other {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = &mut self.tensors[id.0];
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone().with_requires_grad(true);
        }
        Ok(())
    }
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass. Each parameter
/// is recorded at most once, on first use.
pub struct Graph<'t, T: Real> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
}

impl<'t, T: Real> Graph<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Graph {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.tape.param(self.store.get(id).clone()))
    }

    pub fn input(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }

    /// Reverse pass; returns one gradient slot per parameter (None when the
    /// parameter did not take part in the loss).
    pub fn backward(self, loss: Var<'t, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads: Gradients<T> = self.tape.backward(loss)?;
        Ok(self
            .bound
            .into_inner()
            .into_iter()
            .map(|v| v.and_then(|v| grads.take(v.id())))
            .collect())
    }
}

/// Runs `f` on a fresh tape bound to `store`, for inference.
pub fn eval_graph<T: Real, R>(
    store: &ParamStore<T>,
    f: impl for<'t> FnOnce(&Graph<'t, T>) -> Result<R>,
) -> Result<R> {
    let tape = Tape::new();
    let g = Graph::new(&tape, store);
    f(&g)
}

/// Glorot/Xavier uniform init for a `[fan_in, fan_out]` map.
pub fn glorot_uniform<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape")
}

/// Orthogonal init for a `[rows, cols]` map via modified Gram-Schmidt on a
/// Gaussian matrix. The shorter side receives orthonormal vectors.
pub fn orthogonal<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let (n, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            vecs.push(v);
        }
    }
    let mut data = vec![T::zero(); rows * cols];
    for (i, v) in vecs.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
            data[r * cols + c] = T::of(x);
        }
    }
    Tensor::new(&[rows, cols], data).expect("shape")
}

/// Affine map `x·W + b` over the rows of `x`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot_uniform(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t, T: Real>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(g.p(self.w))?.add(g.p(self.b))
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t, T: Real>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(g.p(self.gamma), g.p(self.beta), T::of(Self::EPS))
    }
}

/// Gaussian-initialized lookup table.
pub fn embedding_table<T: Real, R: Rng>(rng: &mut R, rows: usize, dim: usize, std: f64) -> Tensor<T> {
    let data = (0..rows * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::new(&[rows, dim], data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q: Tensor<f64> = orthogonal(&mut rng, 4, 9);
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn graph_binds_each_param_once() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let a = g.p(id);
        let b = g.p(id);
        assert_eq!(a.id(), b.id());
        let loss = a.mul(b).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[0].as_ref().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        let bad = vec![("w".to_string(), Tensor::zeros(&[3]))];
        assert!(store.load_from(&bad).is_err());
    }
}

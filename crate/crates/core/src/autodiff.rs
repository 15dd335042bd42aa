//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a valid reverse topological order because a node can only refer
//! to nodes created before it.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{axis_extents, gemm, strides, Real, Tensor};

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sum(usize),
    SumAxis(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LogSumExp(usize, usize),
    Concat(Vec<usize>, usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Rc<Vec<usize>>,
        weights: Vec<T>,
        norm: T,
        probs: Vec<T>,
    },
    PickSum(usize, Rc<Vec<usize>>),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass. Single-owner; not shared across
/// threads.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    kink_margin: Cell<f64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by the variables that
/// required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            kink_margin: Cell::new(f64::INFINITY),
        }
    }

    /// Smallest `|x|` fed to any ReLU on this tape, infinite if none. Finite
    /// differences are unreliable when this is below the step size.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients are tracked iff the tensor requires them.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?
            .value();
        if axis >= first.rank() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut shape = first.shape().to_vec();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != shape.len()
                || s.iter()
                    .zip(&shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", first.shape(), s));
            }
            total += s[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.id));
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(ids, axis), rg))
    }

    /// Embedding lookup: rows of a `[vocab, dim]` table.
    pub fn gather_rows<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let tv = table.value();
        if tv.rank() != 2 {
            return Err(Error::shape("gather_rows", tv.shape(), &[ids.len()]));
        }
        let (rows, dim) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            if i >= rows {
                return Err(Error::invalid(format!("row id {i} out of range [0, {rows})")));
            }
            data.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table.id);
        Ok(self.push(
            Tensor::new(&[ids.len(), dim], data)?,
            Op::GatherRows(table.id, Rc::new(ids.to_vec())),
            rg,
        ))
    }

    /// Reverse pass from a scalar. Clears the tape afterwards; `Var`s recorded
    /// on it must not be used again.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contribs = backprop(&nodes, id, &g)?;
            for (input, gi) in contribs {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each element of `out_shape`, the offset of the matching element in a
/// broadcast operand of shape `in_shape`.
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = in_shape
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(numel);
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn binary_forward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a.shape() == b.shape() {
        return a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let oa = (a.shape() != out_shape).then(|| broadcast_offsets(out_shape, a.shape()));
    let ob = (b.shape() != out_shape).then(|| broadcast_offsets(out_shape, b.shape()));
    let numel: usize = out_shape.iter().product();
    (0..numel)
        .map(|i| {
            let x = a.data()[oa.as_ref().map_or(i, |o| o[i])];
            let y = b.data()[ob.as_ref().map_or(i, |o| o[i])];
            f(x, y)
        })
        .collect()
}

/// Sums a gradient of `out_shape` down to a broadcast operand's shape.
fn reduce_to<T: Real>(g: &[T], out_shape: &[usize], target: &[usize]) -> Vec<T> {
    if out_shape == target {
        return g.to_vec();
    }
    let offs = broadcast_offsets(out_shape, target);
    let mut acc = vec![T::zero(); target.iter().product()];
    for (i, &o) in offs.iter().enumerate() {
        acc[o] += g[i];
    }
    acc
}

fn permute_data<T: Real>(src: &Tensor<T>, perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_shape = src.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = src.numel();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(src.data()[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn backprop<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    let need = |i: usize| nodes[i].requires_grad;
    let gd = g.data();
    let mk = |shape: &[usize], data: Vec<T>| Tensor::new(shape, data);
    let mut res = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if need(*a) {
                let mut da = vec![T::zero(); m * k];
                gemm(m, n, k, gd, false, bv.data(), true, &mut da, false);
                res.push((*a, mk(av.shape(), da)?));
            }
            if need(*b) {
                let mut db = vec![T::zero(); k * n];
                gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                res.push((*b, mk(bv.shape(), db)?));
            }
        }
        Op::BatchMatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            if need(*a) {
                let mut da = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        true,
                        &mut da[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                res.push((*a, mk(av.shape(), da)?));
            }
            if need(*b) {
                let mut db = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    gemm(
                        k,
                        m,
                        n,
                        &av.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &mut db[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                res.push((*b, mk(bv.shape(), db)?));
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if need(*a) {
                let s = val(*a).shape();
                res.push((*a, mk(s, reduce_to(gd, out.shape(), s))?));
            }
            if need(*b) {
                let s = val(*b).shape();
                let mut d = reduce_to(gd, out.shape(), s);
                if sign < T::zero() {
                    d.iter_mut().for_each(|x| *x = -*x);
                }
                res.push((*b, mk(s, d)?));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if need(*a) {
                let prod = binary_forward(g, bv, out.shape(), |x, y| x * y);
                res.push((*a, mk(av.shape(), reduce_to(&prod, out.shape(), av.shape()))?));
            }
            if need(*b) {
                let prod = binary_forward(g, av, out.shape(), |x, y| x * y);
                res.push((*b, mk(bv.shape(), reduce_to(&prod, out.shape(), bv.shape()))?));
            }
        }
        Op::Scale(a, c) => {
            res.push((*a, mk(out.shape(), gd.iter().map(|&x| x * *c).collect())?));
        }
        Op::Relu(a) => {
            let d = gd
                .iter()
                .zip(out.data())
                .map(|(&gi, &y)| if y > T::zero() { gi } else { T::zero() })
                .collect();
            res.push((*a, mk(out.shape(), d)?));
        }
        Op::Tanh(a) => {
            let d = gd
                .iter()
                .zip(out.data())
                .map(|(&gi, &y)| gi * (T::one() - y * y))
                .collect();
            res.push((*a, mk(out.shape(), d)?));
        }
        Op::Sigmoid(a) => {
            let d = gd
                .iter()
                .zip(out.data())
                .map(|(&gi, &y)| gi * y * (T::one() - y))
                .collect();
            res.push((*a, mk(out.shape(), d)?));
        }
        Op::Exp(a) => {
            let d = gd.iter().zip(out.data()).map(|(&gi, &y)| gi * y).collect();
            res.push((*a, mk(out.shape(), d)?));
        }
        Op::Ln(a) => {
            let d = gd
                .iter()
                .zip(val(*a).data())
                .map(|(&gi, &x)| gi / x)
                .collect();
            res.push((*a, mk(out.shape(), d)?));
        }
        Op::Sum(a) => {
            let s = val(*a).shape();
            res.push((*a, Tensor::full(s, gd[0])));
        }
        Op::SumAxis(a) => {
            let s = val(*a).shape();
            res.push((*a, mk(s, reduce_to_expand(gd, out.shape(), s))?));
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = axis_extents(out.shape(), *axis);
            let y = out.data();
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: T = (0..len)
                        .map(|j| gd[base + j * inner] * y[base + j * inner])
                        .sum();
                    for j in 0..len {
                        let k = base + j * inner;
                        d[k] = y[k] * (gd[k] - dot);
                    }
                }
            }
            res.push((*a, mk(out.shape(), d)?));
        }
        Op::LogSoftmax(a, axis) => {
            let (outer, len, inner) = axis_extents(out.shape(), *axis);
            let y = out.data();
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let gsum: T = (0..len).map(|j| gd[base + j * inner]).sum();
                    for j in 0..len {
                        let k = base + j * inner;
                        d[k] = gd[k] - y[k].exp() * gsum;
                    }
                }
            }
            res.push((*a, mk(out.shape(), d)?));
        }
        Op::LogSumExp(a, axis) => {
            let av = val(*a);
            let (outer, len, inner) = axis_extents(av.shape(), *axis);
            let x = av.data();
            let lse = out.data();
            let mut d = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    for j in 0..len {
                        let k = o * len * inner + j * inner + i;
                        d[k] = if lse[r].is_finite() {
                            gd[r] * (x[k] - lse[r]).exp()
                        } else {
                            T::zero()
                        };
                    }
                }
            }
            res.push((*a, mk(av.shape(), d)?));
        }
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = axis_extents(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &p in parts {
                let ps = val(p).shape();
                let len = ps[*axis];
                if need(p) {
                    let mut d = Vec::with_capacity(val(p).numel());
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        d.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    res.push((p, mk(ps, d)?));
                }
                offset += len;
            }
        }
        Op::Slice { src, axis, start } => {
            let ss = val(*src).shape();
            let (outer, total, inner) = axis_extents(ss, *axis);
            let len = out.shape()[*axis];
            let mut d = vec![T::zero(); val(*src).numel()];
            for o in 0..outer {
                let dst = o * total * inner + start * inner;
                let from = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&gd[from..from + len * inner]);
            }
            res.push((*src, mk(ss, d)?));
        }
        Op::Permute(a, perm) => {
            let (shape, d) = permute_data(g, &inverse_perm(perm));
            res.push((*a, mk(&shape, d)?));
        }
        Op::Reshape(a) => {
            res.push((*a, mk(val(*a).shape(), gd.to_vec())?));
        }
        Op::GatherRows(table, ids) => {
            let ts = val(*table).shape();
            let dim = ts[1];
            let mut d = vec![T::zero(); ts[0] * dim];
            for (r, &i) in ids.iter().enumerate() {
                for c in 0..dim {
                    d[i * dim + c] += gd[r * dim + c];
                }
            }
            res.push((*table, mk(ts, d)?));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let dim = *out.shape().last().expect("rank >= 1");
            let rows = out.numel() / dim;
            let gam = val(*gamma).data();
            if need(*x) {
                let mut dx = vec![T::zero(); out.numel()];
                let n = T::of(dim as f64);
                for r in 0..rows {
                    let base = r * dim;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for c in 0..dim {
                        let dxh = gd[base + c] * gam[c];
                        s1 += dxh;
                        s2 += dxh * xhat[base + c];
                    }
                    for c in 0..dim {
                        let dxh = gd[base + c] * gam[c];
                        dx[base + c] = inv_std[r] * (dxh - s1 / n - xhat[base + c] * s2 / n);
                    }
                }
                res.push((*x, mk(out.shape(), dx)?));
            }
            if need(*gamma) || need(*beta) {
                let mut dg = vec![T::zero(); dim];
                let mut db = vec![T::zero(); dim];
                for r in 0..rows {
                    for c in 0..dim {
                        dg[c] += gd[r * dim + c] * xhat[r * dim + c];
                        db[c] += gd[r * dim + c];
                    }
                }
                res.push((*gamma, mk(val(*gamma).shape(), dg)?));
                res.push((*beta, mk(val(*beta).shape(), db)?));
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            norm,
            probs,
        } => {
            let ls = val(*logits).shape();
            let classes = ls[1];
            let mut d = vec![T::zero(); probs.len()];
            for (r, &t) in targets.iter().enumerate() {
                let w = weights[r];
                if w == T::zero() {
                    continue;
                }
                let scale = gd[0] * w / *norm;
                for c in 0..classes {
                    let onehot = if c == t { T::one() } else { T::zero() };
                    d[r * classes + c] = scale * (probs[r * classes + c] - onehot);
                }
            }
            res.push((*logits, mk(ls, d)?));
        }
        Op::PickSum(a, idx) => {
            let s = val(*a).shape();
            let mut d = vec![T::zero(); val(*a).numel()];
            for &i in idx.iter() {
                d[i] += gd[0];
            }
            res.push((*a, mk(s, d)?));
        }
    }
    Ok(res)
}

/// Broadcasts a keep-dim reduction gradient back over the reduced axis.
fn reduce_to_expand<T: Real>(g: &[T], reduced: &[usize], full: &[usize]) -> Vec<T> {
    let offs = broadcast_offsets(full, reduced);
    offs.iter().map(|&o| g[o]).collect()
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    fn rg(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn unary(&self, op: Op<T>, data: Vec<T>) -> Var<'t, T> {
        let v = self.value();
        let t = Tensor::new(v.shape(), data).expect("same shape");
        self.tape.push(t, op, self.rg())
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let rg = self.rg() || other.rg();
        Ok(self
            .tape
            .push(Tensor::new(&[m, n], out)?, Op::MatMul(self.id, other.id), rg))
    }

    /// Batched product `[B,m,k] · [B,k,n] -> [B,m,n]`.
    pub fn bmm(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1]
        {
            return Err(Error::shape("bmm", a.shape(), b.shape()));
        }
        let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg() || other.rg();
        Ok(self.tape.push(
            Tensor::new(&[bs, m, n], out)?,
            Op::BatchMatMul(self.id, other.id),
            rg,
        ))
    }

    fn binary(
        &self,
        other: Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let shape =
            broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
        let data = binary_forward(&a, &b, &shape, f);
        let rg = self.rg() || other.rg();
        Ok(self.tape.push(Tensor::new(&shape, data)?, op, rg))
    }

    /// Elementwise sum with same-rank broadcasting over unit dimensions.
    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let d = self.value().data().iter().map(|&x| x * c).collect();
        self.unary(Op::Scale(self.id, c), d)
    }

    pub fn relu(&self) -> Var<'t, T> {
        let v = self.value();
        let margin = v.data().iter().fold(f64::INFINITY, |m, x| m.min(x.to_f64().unwrap_or(0.0).abs()));
        self.tape.kink_margin.set(self.tape.kink_margin.get().min(margin));
        let d = v
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.unary(Op::Relu(self.id), d)
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let d = self.value().data().iter().map(|&x| x.tanh()).collect();
        self.unary(Op::Tanh(self.id), d)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let d = self.value().data().iter().map(|&x| sigmoid(x)).collect();
        self.unary(Op::Sigmoid(self.id), d)
    }

    pub fn exp(&self) -> Var<'t, T> {
        let d = self.value().data().iter().map(|&x| x.exp()).collect();
        self.unary(Op::Exp(self.id), d)
    }

    pub fn ln(&self) -> Var<'t, T> {
        let d = self.value().data().iter().map(|&x| x.ln()).collect();
        self.unary(Op::Ln(self.id), d)
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum(self.id), self.rg())
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::of(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    fn check_axis(&self, axis: usize) -> Result<Rc<Tensor<T>>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {:?}",
                v.shape()
            )));
        }
        Ok(v)
    }

    /// Sum along `axis`, keeping it as a unit dimension.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.check_axis(axis)?;
        let (outer, len, inner) = axis_extents(v.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v.data()[o * len * inner + j * inner + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        Ok(self
            .tape
            .push(Tensor::new(&shape, out)?, Op::SumAxis(self.id), self.rg()))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        self.masked_softmax(axis, None)
    }

    /// Softmax along `axis`. Entries whose mask is `false` get weight exactly
    /// zero; a fully masked slice yields all zeros.
    pub fn masked_softmax(&self, axis: usize, mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        let v = self.check_axis(axis)?;
        if let Some(m) = mask {
            if m.len() != v.numel() {
                return Err(Error::shape("masked_softmax", v.shape(), &[m.len()]));
            }
        }
        let keep = |k: usize| mask.is_none_or(|m| m[k]);
        let (outer, len, inner) = axis_extents(v.shape(), axis);
        let x = v.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    let k = base + j * inner;
                    if keep(k) && x[k] > mx {
                        mx = x[k];
                    }
                }
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut z = T::zero();
                for j in 0..len {
                    let k = base + j * inner;
                    if keep(k) {
                        y[k] = (x[k] - mx).exp();
                        z += y[k];
                    }
                }
                for j in 0..len {
                    y[base + j * inner] /= z;
                }
            }
        }
        Ok(self.unary(Op::Softmax(self.id, axis), y))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.check_axis(axis)?;
        let lse = logsumexp_values(&v, axis);
        let (outer, len, inner) = axis_extents(v.shape(), axis);
        let mut y = v.data().to_vec();
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    y[o * len * inner + j * inner + i] -= lse[o * inner + i];
                }
            }
        }
        Ok(self.unary(Op::LogSoftmax(self.id, axis), y))
    }

    /// `log Σ exp` along `axis`, keeping it as a unit dimension.
    pub fn logsumexp(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.check_axis(axis)?;
        let out = logsumexp_values(&v, axis);
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        Ok(self
            .tape
            .push(Tensor::new(&shape, out)?, Op::LogSumExp(self.id, axis), self.rg()))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.check_axis(axis)?;
        let (outer, total, inner) = axis_extents(v.shape(), axis);
        if len == 0 || start + len > total {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * total * inner + start * inner;
            data.extend_from_slice(&v.data()[from..from + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.push(
            Tensor::new(&shape, data)?,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            self.rg(),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let mut seen = vec![false; v.rank()];
        if perm.len() != v.rank() || perm.iter().any(|&p| p >= v.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!(
                "invalid permutation {perm:?} for shape {:?}",
                v.shape()
            )));
        }
        let (shape, data) = permute_data(&v, perm);
        Ok(self.tape.push(
            Tensor::new(&shape, data)?,
            Op::Permute(self.id, perm.to_vec()),
            self.rg(),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let t = (*v).clone().reshape(shape)?;
        Ok(self.tape.push(t, Op::Reshape(self.id), self.rg()))
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let v = self.value();
        let dim = *v.shape().last().expect("rank >= 1");
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.numel() != dim || bv.numel() != dim {
            return Err(Error::shape("layer_norm", v.shape(), gv.shape()));
        }
        let rows = v.numel() / dim;
        let n = T::of(dim as f64);
        let mut xhat = vec![T::zero(); v.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..dim {
                let xh = (row[c] - mean) * is;
                xhat[r * dim + c] = xh;
                out[r * dim + c] = xh * gv.data()[c] + bv.data()[c];
            }
        }
        let rg = self.rg() || gamma.rg() || beta.rg();
        Ok(self.tape.push(
            Tensor::new(v.shape(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean negative log-softmax of `[b, C]` logits.
    ///
    /// With class weights the mean is weighted by the target class weight;
    /// positions whose `keep` flag is false contribute nothing.
    pub fn cross_entropy(
        &self,
        targets: &[usize],
        class_weights: Option<&[T]>,
        keep: Option<&[bool]>,
    ) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.rank() != 2 || v.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", v.shape(), &[targets.len()]));
        }
        let classes = v.shape()[1];
        if let Some(w) = class_weights {
            if w.len() != classes {
                return Err(Error::shape("cross_entropy weights", &[classes], &[w.len()]));
            }
        }
        if let Some(k) = keep {
            if k.len() != targets.len() {
                return Err(Error::shape("cross_entropy mask", &[targets.len()], &[k.len()]));
            }
        }
        let lse = logsumexp_values(&v, 1);
        let mut weights = Vec::with_capacity(targets.len());
        let mut probs = Vec::with_capacity(v.numel());
        let mut total = T::zero();
        let mut norm = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::invalid(format!("target {t} out of range [0, {classes})")));
            }
            let row = v.row(r);
            probs.extend(row.iter().map(|&x| (x - lse[r]).exp()));
            let kept = keep.is_none_or(|k| k[r]);
            let w = if kept {
                class_weights.map_or(T::one(), |cw| cw[t])
            } else {
                T::zero()
            };
            weights.push(w);
            if w != T::zero() {
                total += w * (lse[r] - row[t]);
                norm += w;
            }
        }
        if norm == T::zero() {
            return Err(Error::invalid("cross_entropy: every position is ignored"));
        }
        Ok(self.tape.push(
            Tensor::scalar(total / norm),
            Op::CrossEntropy {
                logits: self.id,
                targets: Rc::new(targets.to_vec()),
                weights,
                norm,
                probs,
            },
            self.rg(),
        ))
    }

    /// Sum of the entries at the given flat indices (repeats count twice).
    pub fn pick_sum(&self, indices: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let mut s = T::zero();
        for &i in indices {
            if i >= v.numel() {
                return Err(Error::invalid(format!("index {i} out of range for {:?}", v.shape())));
            }
            s += v.data()[i];
        }
        Ok(self.tape.push(
            Tensor::scalar(s),
            Op::PickSum(self.id, Rc::new(indices.to_vec())),
            self.rg(),
        ))
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn logsumexp_values<T: Real>(v: &Tensor<T>, axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_extents(v.shape(), axis);
    let x = v.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| x[o * len * inner + j * inner + i];
            let mx = (0..len).map(at).fold(T::neg_infinity(), T::max);
            out[o * inner + i] = if mx == T::neg_infinity() {
                mx
            } else {
                mx + (0..len).map(|j| (at(j) - mx).exp()).sum::<T>().ln()
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_clears_tape() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        tape.backward(x.sum()).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let msg = a.matmul(b).err().unwrap().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn concat_shapes_add() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 5]));
        assert_eq!(tape.concat(&[a, b], 1).unwrap().shape(), vec![2, 8]);
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[0.0; 4]));
        assert_eq!(x.softmax(1).unwrap().value().data(), &[0.25; 4]);
        let y = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let s = y.softmax(1).unwrap().value();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] >= 0.0);
        assert!(s.is_finite());
    }

    #[test]
    fn masked_softmax_zeroes_masked() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[5.0, 1.0, 2.0]));
        let s = x
            .masked_softmax(1, Some(&[false, true, true]))
            .unwrap()
            .value();
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] + s.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_limits() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[0.0; 8]));
        let l = x.cross_entropy(&[0, 3], None, None).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let y = tape.constant(t(&[1, 2], &[100.0, -100.0]));
        assert!(y.cross_entropy(&[0], None, None).unwrap().item() < 1e-12);
        assert!(x
            .cross_entropy(&[0, 1], None, Some(&[false, false]))
            .is_err());
    }

    #[test]
    fn broadcast_add_row_and_column() {
        let tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[0.0; 6]));
        let row = tape.param(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let col = tape.param(t(&[2, 1], &[10.0, 20.0]));
        let y = a.add(row).unwrap().add(col).unwrap();
        assert_eq!(y.value().data(), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(row).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(col).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|x| x as f64).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value().data(), &data[..]);
    }
}

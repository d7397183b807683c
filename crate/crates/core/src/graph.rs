//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] records every primitive as it is evaluated. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.
//! Parameters enter the tape through [`Graph::param`], which reads from a
//! [`ParamStore`]; the resulting [`Gradients`] can be summed back into the
//! store's gradient buffers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamTensor<T: Scalar = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f64> {
    params: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.id_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(ParamTensor::new(name, value, true));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(ParamTensor::zero_grad);
    }

    /// Adds `weight · g` into the gradient buffer of every trainable parameter in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients<T>, weight: T) {
        for (id, g) in &grads.entries {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += weight * b;
            }
        }
    }
}

/// Parameter gradients produced by one backward sweep.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar = f64> {
    entries: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.entries.iter().map(|(i, g)| (*i, g))
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxCols(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Resize(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-owner tape: one recording, then at most one backward sweep.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Consumes the graph and returns the value of `v` without copying.
    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).value
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records a parameter leaf. Repeated requests for the same parameter
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn softmax_columns(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_columns(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxCols(a)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(x), h, w)?;
        Ok(self.push(out, Op::Resize(x)))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_last(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let out = if x.shape() == y.shape() || y.len() == 1 || x.len() == 1 {
            if y.data().iter().any(|&v| v == T::zero()) {
                return Err(Error::Numeric("division by zero".into()));
            }
            ops::mul(x, &y.map(|v| T::one() / v))?
        } else {
            return Err(Error::shape("div", x.shape(), y.shape()));
        };
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = ops::scale(self.value(a), s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = ops::relu(self.value(a));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = ops::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = ops::softplus(self.value(a));
        self.push(out, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward recording".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!("loss node {} is not on this tape", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        let mut out = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.push((*id, g)),
                Op::MatMul(a, b) => {
                    let ga = ops::matmul_nt(&g, val(*b))?;
                    let gb = ops::matmul_tn(val(*a), &g)?;
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accum(&mut grads, *a, ops::transpose(&g)?),
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accum(&mut grads, *a, g.reshape(&shape)?);
                }
                Op::SoftmaxCols(a) => {
                    accum(&mut grads, *a, ops::softmax_columns_backward(&node.value, &g));
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = ops::conv2d_backward(val(*x), val(*w), &g, *stride, *pad)?;
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *w, dw);
                    accum(&mut grads, *b, db);
                }
                Op::Resize(x) => {
                    let (h, w, _) = val(*x).hwc("resize")?;
                    accum(&mut grads, *x, ops::bilinear_resize_backward(&g, h, w)?);
                }
                Op::Concat(a, b) => {
                    let ca = *val(*a).shape().last().unwrap();
                    let (ga, gb) = ops::split_last(&g, ca)?;
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, ops::unbroadcast(g.clone(), val(*a).shape()));
                    accum(&mut grads, *b, ops::unbroadcast(g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, ops::unbroadcast(g.clone(), val(*a).shape()));
                    accum(&mut grads, *b, ops::unbroadcast(g.map(|v| -v), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let ga = ops::mul(&g, val(*b))?;
                    let gb = ops::mul(&g, val(*a))?;
                    accum(&mut grads, *a, ops::unbroadcast(ga, val(*a).shape()));
                    accum(&mut grads, *b, ops::unbroadcast(gb, val(*b).shape()));
                }
                Op::Div(a, b) => {
                    // out = a / b
                    let inv = val(*b).map(|v| T::one() / v);
                    let ga = ops::mul(&g, &inv)?;
                    let gb = ops::mul(&ops::mul(&g, &node.value)?, &inv)?.map(|v| -v);
                    accum(&mut grads, *a, ops::unbroadcast(ga, val(*a).shape()));
                    accum(&mut grads, *b, ops::unbroadcast(gb, val(*b).shape()));
                }
                Op::Scale(a, s) => accum(&mut grads, *a, ops::scale(&g, *s)),
                Op::AddConst(a) => accum(&mut grads, *a, g),
                Op::Relu(a) => {
                    let x = val(*a);
                    let d = Tensor::from_fn(x.shape(), |k| {
                        if x.data()[k] > T::zero() {
                            g.data()[k]
                        } else {
                            T::zero()
                        }
                    });
                    accum(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = Tensor::from_fn(y.shape(), |k| {
                        let s = y.data()[k];
                        g.data()[k] * s * (T::one() - s)
                    });
                    accum(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let x = val(*a);
                    let d = Tensor::from_fn(x.shape(), |k| {
                        g.data()[k] * ops::sigmoid_scalar(x.data()[k])
                    });
                    accum(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accum(&mut grads, *a, Tensor::full(val(*a).shape(), s));
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(Gradients { entries: out })
    }

    /// Runs [`Graph::backward`] and adds the result into `store`'s gradients.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads, T::one());
        Ok(())
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_tensor(shape: &[usize], r: &mut SeededRng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| r.range_f64(-1.0, 1.0))
    }

    /// Central-difference check of `f` w.r.t. every parameter entry.
    fn check(store: &mut ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var) {
        let mut g = Graph::new();
        let loss = f(&mut g, store);
        let grads = g.backward(loss).unwrap();
        let h = 1e-6;
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
            for k in 0..store.value(id).len() {
                let orig = store.value(id).data()[k];
                store.get_mut(id).value.data_mut()[k] = orig + h;
                let mut gp = Graph::new();
                let lp = f(&mut gp, store);
                let fp = gp.value(lp).data()[0];
                store.get_mut(id).value.data_mut()[k] = orig - h;
                let mut gm = Graph::new();
                let lm = f(&mut gm, store);
                let fm = gm.value(lm).data()[0];
                store.get_mut(id).value.data_mut()[k] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-5, "param {} entry {k}: analytic {a} numeric {numeric}", store.get(id).name);
            }
        }
    }

    #[test]
    fn sum_of_squares() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum(sq);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(x).grad.data(), &[2.0, 4.0]);
        store.zero_grad();
        assert_eq!(store.get(x).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_adjoint_is_ones_times_bt() {
        let mut r = SeededRng::new(3);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&[3, 4], &mut r));
        let b = store.add("b", rand_tensor(&[4, 2], &mut r));
        let mut g = Graph::new();
        let (av, bv) = (g.param(&store, a), g.param(&store, b));
        let c = g.matmul(av, bv).unwrap();
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        let expected = ops::matmul_nt(&Tensor::ones(&[3, 2]), store.value(b)).unwrap();
        assert!(grads.get(a).unwrap().max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn backward_on_empty_graph_is_state_error() {
        let g = Graph::<f64>::new();
        assert!(matches!(g.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(v), Err(Error::State(_))));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut r = SeededRng::new(11);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&[5, 6, 3], &mut r));
        let w = store.add("w", rand_tensor(&[3, 3, 3, 4], &mut r));
        let b = store.add("b", rand_tensor(&[4], &mut r));
        let m = store.add("m", rand_tensor(&[4, 4], &mut r));
        let s = store.add("s", rand_tensor(&[1], &mut r));
        let weights = rand_tensor(&[7, 9, 8], &mut r);
        check(&mut store, |g, st| {
            let (xv, wv, bv, mv, sv) = (g.param(st, x), g.param(st, w), g.param(st, b), g.param(st, m), g.param(st, s));
            let c = g.conv2d(xv, wv, bv, 1, 1).unwrap();
            let c = g.relu(c);
            let flat = g.reshape(c, &[30, 4]).unwrap();
            let t = g.transpose(flat).unwrap();
            let sm = g.softmax_columns(t).unwrap();
            let back = g.transpose(sm).unwrap();
            let mm = g.matmul(back, mv).unwrap();
            let sp = g.softplus(sv);
            let scaled = g.mul(mm, sp).unwrap();
            let img = g.reshape(scaled, &[5, 6, 4]).unwrap();
            let up = g.resize(img, 7, 9).unwrap();
            let sig = g.sigmoid(up);
            let cat = g.concat(sig, up).unwrap();
            let wcat = g.constant(weights.clone());
            let prod = g.mul(cat, wcat).unwrap();
            let tot = g.sum(prod);
            let denom = g.add_const(sv, 3.0);
            let d2 = g.mul(denom, denom).unwrap();
            let q = g.div(tot, d2).unwrap();
            let q = g.sub(q, sv).unwrap();
            g.scale(q, 0.5)
        });
    }
}

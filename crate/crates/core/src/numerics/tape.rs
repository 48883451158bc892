//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass in creation
//! order, which is already a topological order. [`Var`] is a cheap handle
//! into it. [`Tape::backward`] walks the nodes in reverse, accumulates
//! adjoints, returns the gradients of the named parameter leaves and clears
//! the tape; a second call fails with [`Error::TapeConsumed`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::rng::Rng;
use super::tensor::{broadcast_shape, broadcast_strides, for_each_index, gemm_nn, gemm_nt, gemm_tn, reduce_to, Tensor};
use crate::error::{shape_mismatch, Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    Exp(usize),
    Ln(usize),
    Scale(usize, f64),
    ClampMin(usize, f64),
    SumLast(usize),
    Sum(usize),
    GatherRows(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Records one forward pass. Confined to a single thread.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of named leaves, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Self { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Global L2 norm over all gradients.
    pub fn norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
            name: None,
        });
        Var { tape: self, id }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is reported under `name`.
    pub fn param(&self, name: &str, value: &Tensor) -> Var<'_> {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.inner.borrow_mut().nodes[v.id].name = Some(name.to_string());
        v
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn needs(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[id].value)
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let first = &inner.nodes[parts[0].id].value;
            let lead = &first.shape()[..first.rank() - 1];
            let widths: Vec<usize> = parts
                .iter()
                .map(|p| {
                    let t = &inner.nodes[p.id].value;
                    if &t.shape()[..t.rank() - 1] != lead {
                        return Err(shape_mismatch("concat_last", first.shape(), t.shape()));
                    }
                    Ok(t.last_dim())
                })
                .collect::<Result<_>>()?;
            let total: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(inner.nodes[p.id].value.row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            let needs = parts.iter().any(|p| inner.nodes[p.id].needs_grad);
            (Tensor::new(&shape, data)?, needs)
        };
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), needs))
    }

    /// Runs the reverse pass from the scalar `loss`, then clears the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(&loss_shape));
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Some(name) = &node.name {
                match out.map.get_mut(name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        out.map.insert(name.clone(), g);
                    }
                }
                continue;
            }
            propagate(nodes, id, &g, &mut grads)?;
        }

        inner.nodes.clear();
        inner.consumed = true;
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

/// Pushes the adjoint `g` of node `id` into its inputs.
fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if needs(a) {
                accumulate(grads, a, reduce_to(g, val(a).shape()));
            }
            if needs(b) {
                accumulate(grads, b, reduce_to(g, val(b).shape()));
            }
        }
        &Op::Sub(a, b) => {
            if needs(a) {
                accumulate(grads, a, reduce_to(g, val(a).shape()));
            }
            if needs(b) {
                accumulate(grads, b, reduce_to(&g.map(|x| -x), val(b).shape()));
            }
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                let ga = broadcast_binary(g, val(b), |g, y| g * y);
                accumulate(grads, a, reduce_to(&ga, val(a).shape()));
            }
            if needs(b) {
                let gb = broadcast_binary(g, val(a), |g, x| g * x);
                accumulate(grads, b, reduce_to(&gb, val(b).shape()));
            }
        }
        &Op::Div(a, b) => {
            if needs(a) {
                let ga = broadcast_binary(g, val(b), |g, y| g / y);
                accumulate(grads, a, reduce_to(&ga, val(a).shape()));
            }
            if needs(b) {
                // d(x/y)/dy = -(x/y)/y = -out/y
                let q = broadcast_binary(&nodes[id].value, val(b), |o, y| -o / y);
                let gb = q.zip_map(g, |q, g| q * g)?;
                accumulate(grads, b, reduce_to(&gb, val(b).shape()));
            }
        }
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = (av.shape()[av.rank() - 2], av.last_dim());
            let n = bv.last_dim();
            let batches = av.len() / (m * k);
            let shared_b = bv.rank() == 2;
            if needs(a) {
                let mut ga = Tensor::zeros(av.shape());
                for bi in 0..batches {
                    let boff = if shared_b { 0 } else { bi * k * n };
                    gemm_nt(
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &bv.data()[boff..boff + k * n],
                        &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(grads, a, ga);
            }
            if needs(b) {
                let mut gb = Tensor::zeros(bv.shape());
                for bi in 0..batches {
                    let boff = if shared_b { 0 } else { bi * k * n };
                    gemm_tn(
                        &av.data()[bi * m * k..(bi + 1) * m * k],
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &mut gb.data_mut()[boff..boff + k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(grads, b, gb);
            }
        }
        Op::Permute(a, perm) => {
            if needs(*a) {
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                accumulate(grads, *a, g.permute(&inv)?);
            }
        }
        &Op::Reshape(a) => {
            if needs(a) {
                accumulate(grads, a, g.reshape(val(a).shape())?);
            }
        }
        Op::Concat(parts) => {
            let rows = g.len() / g.last_dim();
            let total = g.last_dim();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).last_dim();
                if needs(p) {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, Tensor::new(val(p).shape(), gp)?);
                }
                offset += w;
            }
        }
        &Op::Softmax(a) => {
            if needs(a) {
                let y = &nodes[id].value;
                let c = y.last_dim();
                let mut ga = Tensor::zeros(y.shape());
                for r in 0..y.len() / c {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        ga.data_mut()[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, a, ga);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = g.last_dim();
            let rows = g.len() / c;
            let gam = val(*gamma).data();
            if needs(*gamma) || needs(*beta) {
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += g.data()[r * c + j] * xhat[r * c + j];
                        gb[j] += g.data()[r * c + j];
                    }
                }
                if needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(val(*gamma).shape(), gg)?);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(val(*beta).shape(), gb)?);
                }
            }
            if needs(*x) {
                let mut gx = Tensor::zeros(g.shape());
                let nf = c as f64;
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = &xhat[r * c..(r + 1) * c];
                    let gxh: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                    let s1: f64 = gxh.iter().sum();
                    let s2: f64 = gxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx.data_mut()[r * c + j] = inv_std[r] / nf * (nf * gxh[j] - s1 - xh[j] * s2);
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        &Op::Gelu(a) => {
            if needs(a) {
                let ga = val(a).zip_map(g, |x, g| g * gelu_grad(x))?;
                accumulate(grads, a, ga);
            }
        }
        &Op::Exp(a) => {
            if needs(a) {
                accumulate(grads, a, nodes[id].value.zip_map(g, |y, g| y * g)?);
            }
        }
        &Op::Ln(a) => {
            if needs(a) {
                accumulate(grads, a, val(a).zip_map(g, |x, g| g / x)?);
            }
        }
        &Op::Scale(a, c) => {
            if needs(a) {
                accumulate(grads, a, g.map(|x| x * c));
            }
        }
        &Op::ClampMin(a, lo) => {
            if needs(a) {
                accumulate(grads, a, val(a).zip_map(g, |x, g| if x > lo { g } else { 0.0 })?);
            }
        }
        &Op::SumLast(a) => {
            if needs(a) {
                let c = val(a).last_dim();
                let ga = Tensor::from_fn(val(a).shape(), |i| g.data()[i / c]);
                accumulate(grads, a, ga);
            }
        }
        &Op::Sum(a) => {
            if needs(a) {
                accumulate(grads, a, Tensor::full(val(a).shape(), g.item()));
            }
        }
        Op::GatherRows(a, idx) => {
            if needs(*a) {
                let table = val(*a);
                let c = table.last_dim();
                let mut ga = Tensor::zeros(table.shape());
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga.data_mut()[src * c + j] += g.data()[r * c + j];
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
    }
    Ok(())
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let out_shape = broadcast_shape(a.shape(), b.shape()).expect("shapes validated in forward");
    if a.shape() == b.shape() {
        return a.zip_map(b, f).expect("same shape");
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for_each_index(&out_shape, &[&sa, &sb], |_, [ia, ib]| {
        data.push(f(a.data()[ia], b.data()[ib]))
    });
    Tensor::new(&out_shape, data).expect("broadcast shape")
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact GELU, `x·Φ(x)` with the standard normal CDF written through erf.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    pub fn is_finite(&self) -> bool {
        self.tape.with_value(self.id, Tensor::is_finite)
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.id, f)?;
        Ok(self.tape.push(value, op, self.requires_grad()))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            if broadcast_shape(a.shape(), b.shape()).is_none() {
                return Err(shape_mismatch(name, a.shape(), b.shape()));
            }
            broadcast_binary(a, b, f)
        };
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op(self.id, other.id), needs))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Matrix product over the last two axes. `other` is either a plain
    /// `[k, n]` matrix shared by every batch, or carries the same leading
    /// axes as `self`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            let ok = a.rank() >= 2
                && b.rank() >= 2
                && a.last_dim() == b.shape()[b.rank() - 2]
                && (b.rank() == 2 || a.shape()[..a.rank() - 2] == b.shape()[..b.rank() - 2]);
            if !ok {
                return Err(shape_mismatch("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[a.rank() - 2], a.last_dim(), b.last_dim());
            let batches = a.len() / (m * k).max(1);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            let mut out = Tensor::zeros(&shape);
            for bi in 0..batches {
                let boff = if b.rank() == 2 { 0 } else { bi * k * n };
                gemm_nn(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &b.data()[boff..boff + k * n],
                    &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            out
        };
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), needs))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Permute(self.id, perm.to_vec()), |t| t.permute(perm))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(shape_mismatch("transpose", &self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(self.id), |t| t.reshape(shape))
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        self.unary(Op::Softmax(self.id), |t| {
            if !t.is_finite() {
                return Err(Error::NonFiniteInput("softmax"));
            }
            let c = t.last_dim();
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                row.iter_mut().for_each(|x| *x /= z);
            }
            Ok(out)
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (value, xhat, inv_std) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let (g, b) = (&inner.nodes[gamma.id].value, &inner.nodes[beta.id].value);
            let c = x.last_dim();
            if g.len() != c || b.len() != c {
                return Err(shape_mismatch("layer_norm", x.shape(), g.shape()));
            }
            let rows = x.len() / c;
            let mut xhat = vec![0.0; x.len()];
            let mut inv_std = vec![0.0; rows];
            let mut out = Tensor::zeros(x.shape());
            for r in 0..rows {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..c {
                    let h = (row[j] - mean) * inv;
                    xhat[r * c + j] = h;
                    out.data_mut()[r * c + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (out, xhat, inv_std)
        };
        let needs = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(value, op, needs))
    }

    pub fn gelu(&self) -> Result<Var<'t>> {
        self.unary(Op::Gelu(self.id), |t| Ok(t.map(gelu_scalar)))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), |t| Ok(t.map(f64::exp)))
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary(Op::Ln(self.id), |t| Ok(t.map(f64::ln)))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, c), |t| Ok(t.map(|x| x * c)))
    }

    /// `max(x, lo)` elementwise; the gradient is cut where the floor is active.
    pub fn clamp_min(&self, lo: f64) -> Result<Var<'t>> {
        self.unary(Op::ClampMin(self.id, lo), |t| Ok(t.map(|x| x.max(lo))))
    }

    /// Sums out the last axis.
    pub fn sum_last(&self) -> Result<Var<'t>> {
        self.unary(Op::SumLast(self.id), |t| {
            let c = t.last_dim();
            let data: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
            let mut shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(&shape, data)
        })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary(Op::Sum(self.id), |t| Ok(Tensor::scalar(t.sum())))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.tape.with_value(self.id, Tensor::len) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Selects rows of a `[rows, c]` table: output row `r` is `table[idx[r]]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::GatherRows(self.id, idx.to_vec()), |t| {
            if t.rank() != 2 {
                return Err(shape_mismatch("gather_rows", t.shape(), &[]));
            }
            let c = t.last_dim();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= t.shape()[0] {
                    return Err(shape_mismatch("gather_rows", t.shape(), &[i]));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(&[idx.len(), c], data)
        })
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` so evaluation is
    /// the identity.
    pub fn dropout(&self, rate: f64, rng: &mut Rng, training: bool) -> Result<Var<'t>> {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        if !training || rate == 0.0 {
            return Ok(*self);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape();
        let mask = Tensor::from_fn(&shape, |_| if rng.uniform() < rate { 0.0 } else { keep });
        self.mul(&self.tape.constant(mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let m = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let out = tape.constant(Tensor::eye(3)).matmul(&tape.constant(m.clone())).unwrap();
        assert_eq!(out.value(), m);
    }

    #[test]
    fn broadcast_add_rowwise() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[17, 3]));
        let b = tape.constant(t(&[1, 3], &[1., 2., 3.]));
        let out = a.add(&b).unwrap().value();
        for r in 0..17 {
            assert_eq!(out.row(r), &[1., 2., 3.]);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[1, 3])).softmax().unwrap().value();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = tape.constant(t(&[1, 2], &[1000.0, 0.0])).softmax().unwrap().value();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(x.softmax(), Err(Error::NonFiniteInput(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(3);
        let tape = Tape::new();
        let s = tape
            .constant(rng.gaussian(&[4, 4]).map(|x| 5.0 * x))
            .softmax()
            .unwrap()
            .value();
        for r in 0..4 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(s.row(r).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn layer_norm_edge_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4], 3.5));
        let ones = tape.constant(Tensor::ones(&[4]));
        let zeros = tape.constant(Tensor::zeros(&[4]));
        let y = x.layer_norm(&ones, &zeros, 1e-5).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = tape.constant(t(&[1, 4], &[1., -2., 0.5, 7.]));
        let beta = tape.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = x.layer_norm(&zeros, &beta, 1e-5).unwrap().value();
        assert_eq!(y.data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu_scalar(-10.0).abs() < 1e-12);
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.param("x", &t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("x").unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn backward_lifecycle() {
        let tape = Tape::new();
        let x = tape.param("x", &Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.is_empty());
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn dropout_contract() {
        let mut rng = Rng::new(1);
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1000]));
        assert_eq!(x.dropout(0.0, &mut rng, true).unwrap().value(), Tensor::ones(&[1000]));
        assert_eq!(x.dropout(0.25, &mut rng, false).unwrap().value(), Tensor::ones(&[1000]));
        let y = x.dropout(0.25, &mut rng, true).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn dropout_keep_fraction() {
        let mut rng = Rng::new(77);
        let tape = Tape::new();
        let n = 1_000_000;
        let y = tape
            .constant(Tensor::ones(&[n]))
            .dropout(0.25, &mut rng, true)
            .unwrap()
            .value();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((kept - 0.75).abs() <= 0.002, "kept {kept}");
    }

    #[test]
    fn gather_rows_scatter_grad() {
        let tape = Tape::new();
        let table = tape.param("g", &t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let rows = table.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(rows.value().data(), &[5., 6., 1., 2., 5., 6.]);
        let g = tape.backward(rows.sum().unwrap()).unwrap();
        assert_eq!(g.get("g").unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }
}

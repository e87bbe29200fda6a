//! Tape-style reverse-mode differentiation.
//!
//! Every operation appends a node to the graph, so node ids are a valid
//! topological order and `backward` is a single reverse sweep. Gradients
//! arriving from several consumers are summed; the engine never averages.

use super::array::Tensor;
use super::scalar::Scalar;
use super::shape::{broadcast_shapes, numel, row_major_strides, BroadcastMap};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Expand(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var, F),
    LogSoftmax(Var, F),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    L2Normalize {
        input: Var,
        norms: Vec<F>,
        eps: F,
    },
    Map {
        input: Var,
        derivative: fn(F) -> F,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A computation graph over elements of type `F`.
///
/// Build with [`Graph::new`] when gradients are needed, or
/// [`Graph::inference`] for forward-only evaluation (nothing is tracked and
/// `backward` populates no gradient).
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn tensor(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    // ---------------------------------------------------------------
    // elementwise

    fn binary(&mut self, a: Var, b: Var, op: fn(F, F) -> F) -> Result<(Tensor<F>, bool)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shapes(sa, sb)?;
        let ma = BroadcastMap::new(sa, &out_shape);
        let mb = BroadcastMap::new(sb, &out_shape);
        let va = self.value(a);
        let vb = self.value(b);
        let values = (0..numel(&out_shape))
            .map(|i| op(va[ma.at(i)], vb[mb.at(i)]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok((Tensor::from_parts_unchecked(out_shape, values), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = &self.nodes[a.0].value;
        let values = t.values().iter().map(|&x| x * c).collect();
        let out = Tensor::from_parts_unchecked(t.shape().to_vec(), values);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Elementwise `f` with user-supplied derivative `df` (evaluated at the
    /// input). The derivative is trusted, which makes this the hook for
    /// exercising the gradient checker against a faulty backward.
    pub fn map(&mut self, a: Var, f: fn(F) -> F, df: fn(F) -> F) -> Var {
        let t = &self.nodes[a.0].value;
        let values = t.values().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts_unchecked(t.shape().to_vec(), values);
        let rg = self.rg(a);
        self.push(
            out,
            Op::Map {
                input: a,
                derivative: df,
            },
            rg,
        )
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let values = t.values().iter().map(|&x| gelu_scalar(x)).collect();
        let out = Tensor::from_parts_unchecked(t.shape().to_vec(), values);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    // ---------------------------------------------------------------
    // linear algebra

    /// Batched matrix product `[.., M, K] × [.., K, N] → [.., M, N]` with
    /// numpy broadcasting over the batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let plan = MatMulPlan::new(&sa, &sb)?;
        let mut out = vec![F::ZERO; plan.out_numel()];
        let va = self.value(a);
        let vb = self.value(b);
        plan.for_each_batch(|a_off, b_off, c_off| {
            F::gemm(
                plan.m,
                plan.k,
                plan.n,
                F::ONE,
                &va[a_off..],
                plan.k as isize,
                1,
                &vb[b_off..],
                plan.n as isize,
                1,
                F::ZERO,
                &mut out[c_off..],
                plan.n as isize,
                1,
            );
        });
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::from_parts_unchecked(plan.out_shape.clone(), out);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    // ---------------------------------------------------------------
    // layout

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axes.len() != shape.len() {
            return Err(Error::shape(format!(
                "permutation {axes:?} does not match rank of {shape:?}"
            )));
        }
        let mut seen = vec![false; axes.len()];
        for &ax in axes {
            if ax >= axes.len() || seen[ax] {
                return Err(Error::shape(format!("invalid permutation {axes:?}")));
            }
            seen[ax] = true;
        }
        let src = permute_source_offsets(&shape, axes);
        let va = self.value(a);
        let values = src.iter().map(|&o| va[o]).collect();
        let out_shape = axes.iter().map(|&ax| shape[ax]).collect();
        let rg = self.rg(a);
        let t = Tensor::from_parts_unchecked(out_shape, values);
        Ok(self.push(t, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Broadcast `a` up to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        let out = broadcast_shapes(sa, shape)?;
        if out != shape {
            return Err(Error::shape(format!("cannot expand {sa:?} to {shape:?}")));
        }
        let map = BroadcastMap::new(sa, shape);
        let va = self.value(a);
        let values = (0..numel(shape)).map(|i| va[map.at(i)]).collect();
        let rg = self.rg(a);
        let t = Tensor::from_parts_unchecked(shape.to_vec(), values);
        Ok(self.push(t, Op::Expand(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut values = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                values.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let t = Tensor::from_parts_unchecked(out_shape, values);
        Ok(self.push(t, Op::Concat(inputs.to_vec(), axis), rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let va = self.value(a);
        let mut values = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            values.extend_from_slice(&va[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        let t = Tensor::from_parts_unchecked(out_shape, values);
        Ok(self.push(t, Op::Narrow { input: a, axis, start }, rg))
    }

    // ---------------------------------------------------------------
    // reductions

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, F::ONE / F::from_f64(n as f64))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let va = self.value(a);
        let mut values = vec![F::ZERO; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &va[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in values[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        let t = Tensor::from_parts_unchecked(out_shape, values);
        Ok(self.push(t, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, F::ONE / F::from_f64(n as f64)))
    }

    // ---------------------------------------------------------------
    // normalisation

    /// `softmax(x / tau)` along the last axis.
    pub fn softmax(&mut self, a: Var, tau: F) -> Result<Var> {
        check_tau(tau)?;
        let t = &self.nodes[a.0].value;
        let k = last_extent(t.shape())?;
        let mut values = t.values().to_vec();
        for row in values.chunks_mut(k) {
            softmax_row(row, tau);
        }
        let out = Tensor::from_parts_unchecked(t.shape().to_vec(), values);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a, tau), rg))
    }

    /// `log softmax(x / tau)` along the last axis.
    pub fn log_softmax(&mut self, a: Var, tau: F) -> Result<Var> {
        check_tau(tau)?;
        let t = &self.nodes[a.0].value;
        let k = last_extent(t.shape())?;
        let mut values = t.values().to_vec();
        for row in values.chunks_mut(k) {
            let m = row.iter().fold(F::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = F::ZERO;
            for x in row.iter_mut() {
                *x = (*x - m) / tau;
                z += x.exp();
            }
            let lz = z.ln();
            for x in row.iter_mut() {
                *x -= lz;
            }
        }
        let out = Tensor::from_parts_unchecked(t.shape().to_vec(), values);
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a, tau), rg))
    }

    /// LayerNorm over the last axis with affine `gamma`, `beta` of extent D.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_extent(&shape)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm over {shape:?} needs affine of shape [{d}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let vx = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = vx.len() / d;
        let inv_d = F::ONE / F::from_f64(d as f64);
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut values = Vec::with_capacity(vx.len());
        for row in vx.chunks(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = F::ONE / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                values.push(g[j] * h + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::from_parts_unchecked(shape, values);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scale each last-axis slice to unit L2 norm (norms below `eps` are
    /// clamped to `eps`).
    pub fn l2_normalize(&mut self, a: Var, eps: F) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let k = last_extent(t.shape())?;
        let mut values = t.values().to_vec();
        let mut norms = Vec::with_capacity(values.len() / k);
        for row in values.chunks_mut(k) {
            let n = row.iter().map(|&x| x * x).sum::<F>().sqrt().max(eps);
            norms.push(n);
            for x in row.iter_mut() {
                *x = *x / n;
            }
        }
        let out = Tensor::from_parts_unchecked(t.shape().to_vec(), values);
        let rg = self.rg(a);
        Ok(self.push(out, Op::L2Normalize { input: a, norms, eps }, rg))
    }

    // ---------------------------------------------------------------
    // backward

    /// Reverse sweep from a single-element `root`. Replaces any gradients
    /// from a previous call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let n = self.nodes[root.0].value.numel();
        if n != 1 {
            return Err(Error::contract(format!(
                "backward root must hold a single element, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![F::ONE]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout)?;
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [F], &[Node<F>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![F::ZERO; n]);
        f(slot, &self.nodes);
    }

    fn propagate(&mut self, i: usize, g: &[F]) -> Result<()> {
        // Ops that need data from the node itself copy it out first so the
        // gradient buffers can be borrowed mutably.
        let out_shape = self.nodes[i].value.shape().to_vec();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let negate_b = matches!(self.nodes[i].op, Op::Sub(..));
                let ma = BroadcastMap::new(self.shape(a), &out_shape);
                let mb = BroadcastMap::new(self.shape(b), &out_shape);
                self.accumulate(a, |ga, _| {
                    for (j, &gj) in g.iter().enumerate() {
                        ga[ma.at(j)] += gj;
                    }
                });
                self.accumulate(b, |gb, _| {
                    for (j, &gj) in g.iter().enumerate() {
                        if negate_b {
                            gb[mb.at(j)] -= gj;
                        } else {
                            gb[mb.at(j)] += gj;
                        }
                    }
                });
            }
            &Op::Mul(a, b) => {
                let ma = BroadcastMap::new(self.shape(a), &out_shape);
                let mb = BroadcastMap::new(self.shape(b), &out_shape);
                self.accumulate(a, |ga, nodes| {
                    let vb = nodes[b.0].value.values();
                    for (j, &gj) in g.iter().enumerate() {
                        ga[ma.at(j)] += gj * vb[mb.at(j)];
                    }
                });
                self.accumulate(b, |gb, nodes| {
                    let va = nodes[a.0].value.values();
                    for (j, &gj) in g.iter().enumerate() {
                        gb[mb.at(j)] += gj * va[ma.at(j)];
                    }
                });
            }
            &Op::Scale(a, c) => {
                self.accumulate(a, |ga, _| {
                    for (d, &gj) in ga.iter_mut().zip(g) {
                        *d += gj * c;
                    }
                });
            }
            &Op::Map { input, derivative } => {
                self.accumulate(input, |ga, nodes| {
                    let x = nodes[input.0].value.values();
                    for ((d, &gj), &xj) in ga.iter_mut().zip(g).zip(x) {
                        *d += gj * derivative(xj);
                    }
                });
            }
            &Op::Gelu(a) => {
                self.accumulate(a, |ga, nodes| {
                    let x = nodes[a.0].value.values();
                    for ((d, &gj), &xj) in ga.iter_mut().zip(g).zip(x) {
                        *d += gj * gelu_derivative(xj);
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let plan = MatMulPlan::new(self.shape(a), self.shape(b))?;
                // dA = dC · Bᵀ
                self.accumulate(a, |ga, nodes| {
                    let vb = nodes[b.0].value.values();
                    plan.for_each_batch(|a_off, b_off, c_off| {
                        F::gemm(
                            plan.m,
                            plan.n,
                            plan.k,
                            F::ONE,
                            &g[c_off..],
                            plan.n as isize,
                            1,
                            &vb[b_off..],
                            1,
                            plan.n as isize,
                            F::ONE,
                            &mut ga[a_off..],
                            plan.k as isize,
                            1,
                        );
                    });
                });
                // dB = Aᵀ · dC
                self.accumulate(b, |gb, nodes| {
                    let va = nodes[a.0].value.values();
                    plan.for_each_batch(|a_off, b_off, c_off| {
                        F::gemm(
                            plan.k,
                            plan.m,
                            plan.n,
                            F::ONE,
                            &va[a_off..],
                            1,
                            plan.k as isize,
                            &g[c_off..],
                            plan.n as isize,
                            1,
                            F::ONE,
                            &mut gb[b_off..],
                            plan.n as isize,
                            1,
                        );
                    });
                });
            }
            Op::Permute(a, axes) => {
                let a = *a;
                let src = permute_source_offsets(self.shape(a), axes);
                self.accumulate(a, |ga, _| {
                    for (&o, &gj) in src.iter().zip(g) {
                        ga[o] += gj;
                    }
                });
            }
            &Op::Reshape(a) => {
                self.accumulate(a, |ga, _| {
                    for (d, &gj) in ga.iter_mut().zip(g) {
                        *d += gj;
                    }
                });
            }
            &Op::Expand(a) => {
                let map = BroadcastMap::new(self.shape(a), &out_shape);
                self.accumulate(a, |ga, _| {
                    for (j, &gj) in g.iter().enumerate() {
                        ga[map.at(j)] += gj;
                    }
                });
            }
            Op::Concat(inputs, axis) => {
                let (inputs, axis) = (inputs.clone(), *axis);
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(v)[axis] * inner;
                    self.accumulate(v, |gv, _| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (d, &s) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(input).to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = out_shape[axis];
                self.accumulate(input, |ga, _| {
                    for o in 0..outer {
                        let base = (o * in_shape[axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in ga[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            &Op::SumAll(a) => {
                let g0 = g[0];
                self.accumulate(a, |ga, _| {
                    for d in ga.iter_mut() {
                        *d += g0;
                    }
                });
            }
            &Op::SumAxis(a, axis) => {
                let in_shape = self.shape(a).to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let n = in_shape[axis];
                self.accumulate(a, |ga, _| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            &Op::Softmax(a, tau) => {
                let k = *out_shape.last().unwrap_or(&1);
                let inv_tau = F::ONE / tau;
                self.accumulate(a, |ga, nodes| {
                    let y = nodes[i].value.values();
                    for ((dr, gr), yr) in ga.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let dot: F = gr.iter().zip(yr).map(|(&gj, &yj)| gj * yj).sum();
                        for ((d, &gj), &yj) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += inv_tau * yj * (gj - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a, tau) => {
                let k = *out_shape.last().unwrap_or(&1);
                let inv_tau = F::ONE / tau;
                self.accumulate(a, |ga, nodes| {
                    let y = nodes[i].value.values();
                    for ((dr, gr), yr) in ga.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let total: F = gr.iter().copied().sum();
                        for ((d, &gj), &yj) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += inv_tau * (gj - yj.exp() * total);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ..
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = *out_shape.last().unwrap_or(&1);
                self.accumulate(beta, |gb, _| {
                    for row in g.chunks(d) {
                        for (acc, &gj) in gb.iter_mut().zip(row) {
                            *acc += gj;
                        }
                    }
                });
                self.accumulate(gamma, |gg, nodes| {
                    let Op::LayerNorm { xhat, .. } = &nodes[i].op else {
                        unreachable!()
                    };
                    for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, &gj), &h) in gg.iter_mut().zip(row).zip(hrow) {
                            *acc += gj * h;
                        }
                    }
                });
                self.accumulate(x, |gx, nodes| {
                    let Op::LayerNorm { xhat, rstd, .. } = &nodes[i].op else {
                        unreachable!()
                    };
                    let gam = nodes[gamma.0].value.values();
                    let inv_d = F::ONE / F::from_f64(d as f64);
                    for (((dx, row), hrow), &r) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .zip(rstd.iter())
                    {
                        let mut mean_dh = F::ZERO;
                        let mut mean_dh_h = F::ZERO;
                        for j in 0..d {
                            let dh = row[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = row[j] * gam[j];
                            dx[j] += r * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::L2Normalize { input, .. } => {
                let input = *input;
                let k = *out_shape.last().unwrap_or(&1);
                self.accumulate(input, |ga, nodes| {
                    let Op::L2Normalize { norms, eps, .. } = &nodes[i].op else {
                        unreachable!()
                    };
                    let y = nodes[i].value.values();
                    for (((dr, gr), yr), &n) in ga
                        .chunks_mut(k)
                        .zip(g.chunks(k))
                        .zip(y.chunks(k))
                        .zip(norms.iter())
                    {
                        // In the clamped region the map is linear: y = x / eps.
                        let clamped = !(n > *eps);
                        let dot: F = if clamped {
                            F::ZERO
                        } else {
                            gr.iter().zip(yr).map(|(&gj, &yj)| gj * yj).sum()
                        };
                        for ((d, &gj), &yj) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += (gj - yj * dot) / n;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn check_tau<F: Scalar>(tau: F) -> Result<()> {
    if !(tau > F::ZERO) || !tau.is_finite() {
        return Err(Error::domain(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn last_extent(shape: &[usize]) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| Error::shape("operation needs at least one axis"))
}

/// In-place `softmax(row / tau)`, stabilised by max subtraction.
pub fn softmax_row<F: Scalar>(row: &mut [F], tau: F) {
    let m = row.iter().fold(F::NEG_INFINITY, |m, &x| m.max(x));
    let mut z = F::ZERO;
    for x in row.iter_mut() {
        *x = ((*x - m) / tau).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x = *x / z;
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * x * (F::ONE + (x * F::from_f64(FRAC_1_SQRT_2)).erf())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let cdf = half * (F::ONE + (x * F::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = F::from_f64(FRAC_1_SQRT_2PI) * (-(half * x * x)).exp();
    cdf + x * pdf
}

/// For each row-major output position of `permute(shape, axes)`, the
/// offset of the source element.
fn permute_source_offsets(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let strides = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&ax| strides[ax]).collect();
    let total = numel(shape);
    let rank = shape.len();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        offsets.push(pos);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// Per output batch: (a batch index, b batch index).
    batches: Vec<(usize, usize)>,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!(
                "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents disagree: {sa:?} × {sb:?}"
            )));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shapes(ba, bb).map_err(|_| {
            Error::shape(format!("matmul batch extents not broadcastable: {sa:?} × {sb:?}"))
        })?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);

        // A 2-D right operand shared by every batch collapses the whole
        // product into a single GEMM.
        if bb.is_empty() && ba == batch.as_slice() {
            let rows = numel(ba) * m;
            return Ok(MatMulPlan {
                m: rows,
                k,
                n,
                out_shape,
                batches: vec![(0, 0)],
            });
        }
        let ma = BroadcastMap::new(ba, &batch);
        let mb = BroadcastMap::new(bb, &batch);
        let batches = (0..numel(&batch)).map(|i| (ma.at(i), mb.at(i))).collect();
        Ok(MatMulPlan {
            m,
            k,
            n,
            out_shape,
            batches,
        })
    }

    fn out_numel(&self) -> usize {
        numel(&self.out_shape)
    }

    fn for_each_batch(&self, mut f: impl FnMut(usize, usize, usize)) {
        for (ci, &(ai, bi)) in self.batches.iter().enumerate() {
            f(ai * self.m * self.k, bi * self.k * self.n, ci * self.m * self.n);
        }
    }
}

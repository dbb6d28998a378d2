//! Define-by-run computation graph.
//!
//! Every forward primitive appends a node; node ids are allocated in
//! execution order, so the node list is already topologically sorted and a
//! reverse sweep visits each node once.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{gelu_grad, gemm, Bcast, MatView};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    TransposeLast2(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Sin(Var),
    Cos(Var),
    Erf(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    SumLast(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    PickLast { x: Var, indices: Vec<usize> },
    Broadcast(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
    Select { mask: Vec<bool>, a: Var, b: Var },
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
    pub param: Option<ParamId>,
}

/// Recorded forward computation. Build one per forward pass and drop it
/// after [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that never marks nodes as requiring gradients. Values are
    /// identical to a recording graph; `backward` is a no-op on it.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
            param: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copies a parameter into the graph as a leaf. Gradients flow back to
    /// the store through [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// path reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Reverse sweep from a scalar `loss`. Node gradients are reset first,
    /// so repeated calls give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            vjp(&self.nodes, i, g, lower);
        }
        Ok(())
    }

    /// Adds the gradient of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                let dst = &mut store.get_mut(id).grad;
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], lower: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(lower[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

/// Propagates the output gradient `g` of node `i` into its inputs.
fn vjp(nodes: &[Node], i: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = &node.value;
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = slot(nodes, lower, *a) {
                let bc = Bcast::new(val(*a).shape(), out.shape());
                for (k, gi) in g.iter().enumerate() {
                    ga[bc.at(k)] += gi;
                }
            }
            if let Some(gb) = slot(nodes, lower, *b) {
                let bc = Bcast::new(val(*b).shape(), out.shape());
                for (k, gi) in g.iter().enumerate() {
                    gb[bc.at(k)] += sign * gi;
                }
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let ba = Bcast::new(val(*a).shape(), out.shape());
            let bb = Bcast::new(val(*b).shape(), out.shape());
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, lower, *a) {
                for (k, gi) in g.iter().enumerate() {
                    let y = bd[bb.at(k)];
                    ga[ba.at(k)] += if is_div { gi / y } else { gi * y };
                }
            }
            if let Some(gb) = slot(nodes, lower, *b) {
                for (k, gi) in g.iter().enumerate() {
                    let x = ad[ba.at(k)];
                    let y = bd[bb.at(k)];
                    gb[bb.at(k)] += if is_div { -gi * x / (y * y) } else { gi * x };
                }
            }
        }
        Op::Neg(x) => {
            if let Some(gx) = slot(nodes, lower, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, lower, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, lower, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, lower, *a) {
                for bi in 0..*batch {
                    let boff = if *shared_rhs { 0 } else { bi * k * n };
                    let gout = MatView::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n);
                    let bv = MatView::row_major(&bd[boff..boff + k * n], k, n);
                    gemm(gout, bv.t(), &mut ga[bi * m * k..(bi + 1) * m * k], 1.0);
                }
            }
            if let Some(gb) = slot(nodes, lower, *b) {
                for bi in 0..*batch {
                    let boff = if *shared_rhs { 0 } else { bi * k * n };
                    let av = MatView::row_major(&ad[bi * m * k..(bi + 1) * m * k], m, k);
                    let gout = MatView::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n);
                    gemm(av.t(), gout, &mut gb[boff..boff + k * n], 1.0);
                }
            }
        }
        Op::TransposeLast2(x) => {
            if let Some(gx) = slot(nodes, lower, *x) {
                let s = val(*x).shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                for (bi, chunk) in g.chunks(r * c).enumerate() {
                    let base = bi * r * c;
                    for ci in 0..c {
                        for ri in 0..r {
                            gx[base + ri * c + ci] += chunk[ci * r + ri];
                        }
                    }
                }
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = slot(nodes, lower, *x) {
                for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += s * y;
                }
            }
        }
        Op::Ln(x) => {
            let xd = val(*x).data();
            if let Some(gx) = slot(nodes, lower, *x) {
                for ((d, s), xv) in gx.iter_mut().zip(g).zip(xd) {
                    *d += s / xv;
                }
            }
        }
        Op::Powf(x, p) => {
            let xd = val(*x).data();
            if let Some(gx) = slot(nodes, lower, *x) {
                for ((d, s), xv) in gx.iter_mut().zip(g).zip(xd) {
                    *d += s * p * xv.powf(p - 1.0);
                }
            }
        }
        Op::Sin(x) | Op::Cos(x) | Op::Erf(x) | Op::Gelu(x) => {
            let xd = val(*x).data();
            let deriv: fn(f64) -> f64 = match node.op {
                Op::Sin(_) => f64::cos,
                Op::Cos(_) => |v: f64| -v.sin(),
                Op::Erf(_) => |v: f64| 2.0 / std::f64::consts::PI.sqrt() * (-v * v).exp(),
                _ => gelu_grad,
            };
            if let Some(gx) = slot(nodes, lower, *x) {
                for ((d, s), xv) in gx.iter_mut().zip(g).zip(xd) {
                    *d += s * deriv(*xv);
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(gx) = slot(nodes, lower, *x) {
                let c = last_dim(out);
                for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if let Some(gx) = slot(nodes, lower, *x) {
                let c = last_dim(out);
                for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::LogSumExp(x) => {
            let xv = val(*x);
            if let Some(gx) = slot(nodes, lower, *x) {
                let c = last_dim(xv);
                for (r, (xr, dr)) in xv.data().chunks(c).zip(gx.chunks_mut(c)).enumerate() {
                    let lse = out.data()[r];
                    for j in 0..c {
                        dr[j] += g[r] * (xr[j] - lse).exp();
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, lower, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumLast(x) => {
            if let Some(gx) = slot(nodes, lower, *x) {
                let c = last_dim(val(*x));
                for (r, dr) in gx.chunks_mut(c).enumerate() {
                    dr.iter_mut().for_each(|d| *d += g[r]);
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let oshape = out.shape();
            let outer: usize = oshape[..*axis].iter().product();
            let inner: usize = oshape[axis + 1..].iter().product();
            let out_row = oshape[*axis] * inner;
            let mut offset = 0;
            for v in inputs {
                let w = val(*v).shape()[*axis] * inner;
                if let Some(gx) = slot(nodes, lower, *v) {
                    for o in 0..outer {
                        let src = &g[o * out_row + offset..o * out_row + offset + w];
                        for (d, s) in gx[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Slice { x, axis, start } => {
            let xshape = val(*x).shape();
            let outer: usize = xshape[..*axis].iter().product();
            let inner: usize = xshape[axis + 1..].iter().product();
            let in_row = xshape[*axis] * inner;
            let w = out.shape()[*axis] * inner;
            if let Some(gx) = slot(nodes, lower, *x) {
                for o in 0..outer {
                    let dst = &mut gx[o * in_row + start * inner..o * in_row + start * inner + w];
                    for (d, s) in dst.iter_mut().zip(&g[o * w..(o + 1) * w]) {
                        *d += s;
                    }
                }
            }
        }
        Op::GatherRows { table, indices } => {
            let width = last_dim(val(*table));
            if let Some(gt) = slot(nodes, lower, *table) {
                for (r, &idx) in indices.iter().enumerate() {
                    let dst = &mut gt[idx * width..(idx + 1) * width];
                    for (d, s) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *d += s;
                    }
                }
            }
        }
        Op::PickLast { x, indices } => {
            let c = last_dim(val(*x));
            if let Some(gx) = slot(nodes, lower, *x) {
                for (r, &idx) in indices.iter().enumerate() {
                    gx[r * c + idx] += g[r];
                }
            }
        }
        Op::Broadcast(x) => {
            if let Some(gx) = slot(nodes, lower, *x) {
                let bc = Bcast::new(val(*x).shape(), out.shape());
                for (k, gi) in g.iter().enumerate() {
                    gx[bc.at(k)] += gi;
                }
            }
        }
        Op::MaskedFill { x, mask } => {
            if let Some(gx) = slot(nodes, lower, *x) {
                let ml = mask.len();
                for (k, (d, s)) in gx.iter_mut().zip(g).enumerate() {
                    if !mask[k % ml] {
                        *d += s;
                    }
                }
            }
        }
        Op::Select { mask, a, b } => {
            if let Some(ga) = slot(nodes, lower, *a) {
                for (k, (d, s)) in ga.iter_mut().zip(g).enumerate() {
                    if mask[k] {
                        *d += s;
                    }
                }
            }
            if let Some(gb) = slot(nodes, lower, *b) {
                for (k, (d, s)) in gb.iter_mut().zip(g).enumerate() {
                    if !mask[k] {
                        *d += s;
                    }
                }
            }
        }
    }
}

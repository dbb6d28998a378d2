//! Forward primitives. Each records one node on the graph.

use crate::error::{domain_err, shape_err, Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::kernels::{gelu, gemm, Bcast, MatView};
use crate::tensor::Tensor;

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

impl Graph {
    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let shape = broadcast_shape(op, self.shape(a), self.shape(b))?;
        let ba = Bcast::new(self.shape(a), &shape);
        let bb = Bcast::new(self.shape(b), &shape);
        let (ad, bd) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let data = match (&ba, &bb) {
            (Bcast::Same, Bcast::Same) => ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect(),
            _ => (0..n).map(|k| f(ad[ba.at(k)], bd[bb.at(k)])).collect(),
        };
        Ok((Tensor::from_parts(shape, data), self.rg(a) || self.rg(b)))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(x).iter().map(|v| f(*v)).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("subtract", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Elementwise quotient; any zero in the divisor is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(pos) = self.data(b).iter().position(|v| *v == 0.0) {
            return Err(domain_err("divide", format!("zero divisor at element {pos}")));
        }
        let (t, rg) = self.binary("divide", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(pos) = self.data(x).iter().position(|v| !(*v > 0.0)) {
            return Err(domain_err(
                "natural-log",
                format!("non-positive input {} at element {pos}", self.data(x)[pos]),
            ));
        }
        Ok(self.unary(x, Op::Ln(x), f64::ln))
    }

    /// `x^p` for a constant exponent. Non-integer exponents need positive
    /// inputs.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 {
            if let Some(pos) = self.data(x).iter().position(|v| !(*v > 0.0)) {
                return Err(domain_err("power", format!("non-positive base at element {pos}")));
            }
        }
        Ok(self.unary(x, Op::Powf(x, p), |v| v.powf(p)))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), f64::sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x), f64::cos)
    }

    pub fn erf(&mut self, x: Var) -> Var {
        self.unary(x, Op::Erf(x), libm::erf)
    }

    /// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`. `b` is either `[k, n]` (shared by every batch
    /// entry) or `[..., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands must be at least 2-d: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(shape_err("matmul", format!("batch axes differ: {sa:?} x {sb:?}")));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        if shared_rhs {
            // One product with the batch folded into the rows.
            gemm(
                MatView::row_major(ad, batch * m, k),
                MatView::row_major(bd, k, n),
                &mut out,
                0.0,
            );
        } else {
            for bi in 0..batch {
                gemm(
                    MatView::row_major(&ad[bi * m * k..(bi + 1) * m * k], m, k),
                    MatView::row_major(&bd[bi * k * n..(bi + 1) * k * n], k, n),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose", format!("need rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for (bi, chunk) in xd.chunks(r * c).enumerate() {
            let base = bi * r * c;
            for ri in 0..r {
                for ci in 0..c {
                    out[base + ci * r + ri] = chunk[ri * c + ci];
                }
            }
        }
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::TransposeLast2(x), rg))
    }

    fn rows(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&c) => Ok(c),
            None => Err(shape_err(op, "needs rank >= 1")),
        }
    }

    /// Softmax over the last axis with max subtraction. Entries equal to
    /// `-inf` get probability zero; a row that is entirely `-inf` is a
    /// domain error.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.rows("softmax", x)?;
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(domain_err("softmax", "row is entirely -inf"));
            }
            let start = out.len();
            let mut total = 0.0;
            for v in row {
                let e = (v - mx).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// `x - logsumexp(x)` over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.rows("log-softmax", x)?;
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(c) {
            let lse = logsumexp(row).ok_or_else(|| domain_err("log-softmax", "row is entirely -inf"))?;
            out.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax(x), rg))
    }

    /// Stable log-sum-exp over the last axis; the axis is removed.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let c = self.rows("logsumexp", x)?;
        let out = self
            .data(x)
            .chunks(c)
            .map(|row| logsumexp(row).ok_or_else(|| domain_err("logsumexp", "row is entirely -inf")))
            .collect::<Result<Vec<_>>>()?;
        let s = self.shape(x);
        let t = Tensor::from_parts(s[..s.len() - 1].to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSumExp(x), rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sum over the last axis; the axis is removed.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let c = self.rows("sum-reduce", x)?;
        let out = self.data(x).chunks(c).map(|r| r.iter().sum()).collect();
        let s = self.shape(x);
        let t = Tensor::from_parts(s[..s.len() - 1].to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::SumLast(x), rg))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concatenate", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concatenate", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concatenate", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let w = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.data(*v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let t = Tensor::from_parts(shape, self.data(x).to_vec());
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let row = s[axis] * inner;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[o * row + start * inner..o * row + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, rg))
    }

    /// Row lookup: `table` is `[rows, width]`, the result is
    /// `index_shape ++ [width]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("index-gather", format!("table must be 2-d, got {ts:?}")));
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(shape_err("index-gather", format!("{} indices for shape {index_shape:?}", indices.len())));
        }
        let (rows, width) = (ts[0], ts[1]);
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "index-gather",
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(&td[i * width..(i + 1) * width]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(width);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Picks one entry of the last axis per row: `x[..., indices[r]]`.
    pub fn pick_last(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let c = self.rows("index-gather", x)?;
        let s = self.shape(x).to_vec();
        let rows = self.value(x).numel() / c;
        if indices.len() != rows {
            return Err(shape_err("index-gather", format!("{} indices for {rows} rows", indices.len())));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows);
        for (r, &i) in indices.iter().enumerate() {
            if i >= c {
                return Err(TensorError::Index {
                    op: "index-gather",
                    index: i,
                    extent: c,
                });
            }
            out.push(xd[r * c + i]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(s[..s.len() - 1].to_vec(), out),
            Op::PickLast {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Materializes `x` broadcast to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let target = broadcast_shape("broadcast", self.shape(x), &shape)?;
        if target != shape {
            return Err(shape_err("broadcast", format!("{:?} does not broadcast to {shape:?}", self.shape(x))));
        }
        let bc = Bcast::new(self.shape(x), &shape);
        let xd = self.data(x);
        let n: usize = shape.iter().product();
        let out = (0..n).map(|k| xd[bc.at(k)]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Broadcast(x), rg))
    }

    /// Replaces entries where `mask` is true with `value`. The mask covers
    /// the trailing axes of `x` and repeats over the leading ones.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let n = self.value(x).numel();
        if mask.is_empty() || n % mask.len() != 0 {
            return Err(shape_err("masked-fill", format!("mask of {} does not tile {n} elements", mask.len())));
        }
        let ml = mask.len();
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(k, v)| if mask[k % ml] { value } else { *v })
            .collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise choice: `a` where `mask` is true, else `b`.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("select", a, b)?;
        if mask.len() != self.value(a).numel() {
            return Err(shape_err("select", "mask length differs from operands"));
        }
        let out = mask
            .iter()
            .zip(self.data(a).iter().zip(self.data(b)))
            .map(|(m, (x, y))| if *m { *x } else { *y })
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            t,
            Op::Select {
                mask: mask.to_vec(),
                a,
                b,
            },
            rg,
        ))
    }
}

/// Stable log-sum-exp of a slice; `None` when every entry is `-inf`.
pub fn logsumexp(row: &[f64]) -> Option<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return None;
    }
    let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
    Some(mx + s.ln())
}

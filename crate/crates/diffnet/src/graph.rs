//! Single-use computation tape with reverse-mode gradient propagation.
//!
//! A [`Graph`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so a reverse sweep over node indices is a valid
//! topological order for the backward pass. Each tape supports exactly one
//! call to [`Graph::backward`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::gemm::{gemm, View};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

impl Bcast {
    fn resolve(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Self> {
        if lhs.shape() == rhs.shape()
            || (lhs.numel() == rhs.numel() && lhs.cols() == rhs.cols())
        {
            Ok(Bcast::Same)
        } else if rhs.numel() == 1 {
            Ok(Bcast::Scalar)
        } else if rhs.rows() == 1 && rhs.cols() == lhs.cols() {
            Ok(Bcast::Row)
        } else if rhs.cols() == 1 && rhs.rows() == lhs.rows() && lhs.shape().len() >= 2 {
            Ok(Bcast::Col)
        } else {
            Err(Error::shape(op, lhs.shape(), rhs.shape()))
        }
    }

    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row => i % cols,
            Bcast::Col => i / cols,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Gelu,
    Relu,
    Silu,
    Sqrt,
    Square,
    Ln,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinKind, Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    DeadZone(Var, Vec<f64>),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    SelectCols(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    DiffRows(Var, f64),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<(String, usize), Var>,
    tracked: Vec<(String, ParamId, Var)>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of a node; convenient for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Places a parameter on the tape. Repeated calls return the same node.
    /// Parameters of a frozen store are recorded as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag().to_string(), id.index());
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let track = !store.is_frozen();
        let v = self.push(store.value(id).clone(), Op::Leaf, track);
        if track {
            self.tracked.push((key.0.clone(), id, v));
        }
        self.param_cache.insert(key, v);
        v
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = Bcast::resolve(name, av, bv)?;
        let cols = av.cols();
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = (0..ad.len())
            .map(|i| {
                let x = ad[i];
                let y = bd[bc.index(i, cols)];
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a, b, bc), rg))
    }

    /// Elementwise sum; `b` may be a scalar, a row broadcast over rows, or a
    /// column broadcast over columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Gelu => gelu,
            Unary::Relu => |x| x.max(0.0),
            Unary::Silu => |x| x * sigmoid(x),
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::Ln => f64::ln,
        };
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    /// `sign(x) * max(|x| - delta_col, 0)` with one threshold per column.
    pub fn dead_zone(&mut self, a: Var, thresholds: &[f64]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if thresholds.len() != av.cols() {
            return Err(Error::shape("dead_zone", av.shape(), &[thresholds.len()]));
        }
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let d = thresholds[i % cols];
                x.signum() * (x.abs() - d).max(0.0)
            })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::DeadZone(a, thresholds.to_vec()), rg))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`. Leading dims of `a` are folded into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::rows(av.data(), k), View::rows(bv.data(), n), 0.0, &mut out, 0, n, 1);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("matmul lhs has a trailing dim") = n;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose needs a 2-D tensor, got {:?}",
                av.shape()
            )));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let d = av.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let s = av.sum() / av.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum over axis 0 (rows, giving `[1, cols]`) or axis 1 (columns, giving
    /// `[rows, 1]`) of the matrix view.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let d = av.data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += d[i * c + j];
                    }
                }
                Tensor::matrix(1, c, out)?
            }
            1 => {
                let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
                Tensor::matrix(r, 1, out)?
            }
            _ => {
                return Err(Error::InvalidArgument(format!("sum_axis: bad axis {axis}")));
            }
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let n = if axis == 0 { av.rows() } else { av.cols() };
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let mut out = av.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]).map_err(|_| {
                Error::InvalidArgument(format!("softmax row {i} is fully masked"))
            })?;
        }
        let value = Tensor::new(av.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("layer_norm", xv.shape(), self.nodes[gamma.0].value.shape()));
        }
        let d = xv.data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- indexing ----------------------------------------------------------

    /// Row lookup: `table[indices[i], :]` for each `i`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (r, c) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            if ix >= r {
                return Err(Error::InvalidArgument(format!(
                    "gather index {ix} out of range for {r} rows"
                )));
            }
            out.extend_from_slice(tv.row_slice(ix));
        }
        let value = Tensor::matrix(indices.len(), c, out)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::Gather(table, indices.to_vec()), rg))
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = &self.nodes[parts[0].0].value;
        let value = match axis {
            0 => {
                let c = first.cols();
                let mut out = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let pv = &self.nodes[p.0].value;
                    if pv.cols() != c {
                        return Err(Error::shape("concat", first.shape(), pv.shape()));
                    }
                    rows += pv.rows();
                    out.extend_from_slice(pv.data());
                }
                Tensor::matrix(rows, c, out)?
            }
            1 => {
                let r = first.rows();
                let mut total = 0;
                for p in parts {
                    let pv = &self.nodes[p.0].value;
                    if pv.rows() != r {
                        return Err(Error::shape("concat", first.shape(), pv.shape()));
                    }
                    total += pv.cols();
                }
                let mut out = Vec::with_capacity(r * total);
                for i in 0..r {
                    for p in parts {
                        out.extend_from_slice(self.nodes[p.0].value.row_slice(i));
                    }
                }
                Tensor::matrix(r, total, out)?
            }
            _ => return Err(Error::InvalidArgument(format!("concat: bad axis {axis}"))),
        };
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Half-open slice `[start, end)` along axis 0 or 1.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > limit {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {end}) on axis {axis} of {:?}",
                av.shape()
            )));
        }
        let value = if axis == 0 {
            Tensor::matrix(end - start, c, av.data()[start * c..end * c].to_vec())?
        } else {
            let mut out = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                out.extend_from_slice(&av.row_slice(i)[start..end]);
            }
            Tensor::matrix(r, end - start, out)?
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice(a, axis, start, end), rg))
    }

    /// Column gather; indices may repeat.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidArgument(format!(
                "select_cols index {bad} out of range for {c} columns"
            )));
        }
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            let row = av.row_slice(i);
            out.extend(cols.iter().map(|&j| row[j]));
        }
        let value = Tensor::matrix(r, cols.len(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SelectCols(a, cols.to_vec()), rg))
    }

    /// Forward difference along rows, scaled: `y[t] = s * (x[t+1] - x[t])`;
    /// the last row repeats the previous one.
    pub fn diff_rows(&mut self, a: Var, scale: f64) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        if r < 2 {
            return Err(Error::InvalidArgument(format!(
                "diff_rows needs at least 2 rows, got {r}"
            )));
        }
        let d = av.data();
        let mut out = vec![0.0; r * c];
        for t in 0..r - 1 {
            for j in 0..c {
                out[t * c + j] = scale * (d[(t + 1) * c + j] - d[t * c + j]);
            }
        }
        let (head, tail) = out.split_at_mut((r - 1) * c);
        tail.copy_from_slice(&head[(r - 2) * c..]);
        let value = Tensor::matrix(r, c, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::DiffRows(a, scale), rg))
    }

    // ---- attention ---------------------------------------------------------

    /// Multi-head scaled dot-product attention over already-projected inputs.
    ///
    /// `q` is `[tq, d]`, `k` and `v` are `[tk, d]`; heads split `d` evenly.
    /// `mask`, when given, is an additive `[tq, tk]` bias applied before the
    /// softmax (use `f64::NEG_INFINITY` to block a position).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (tq, d) = (qv.rows(), qv.cols());
        let tk = kv.rows();
        if kv.cols() != d || vv.cols() != d || vv.rows() != tk {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        if let Some(m) = mask {
            if m.rows() != tq || m.cols() != tk {
                return Err(Error::shape("attention mask", m.shape(), &[tq, tk]));
            }
        }
        let dh = d / heads;
        let alpha = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(
                tq,
                dh,
                tk,
                alpha,
                View::strides(qv.data(), h * dh, d, 1),
                View::strides(kv.data(), h * dh, 1, d),
                0.0,
                p,
                0,
                tk,
                1,
            );
            if let Some(m) = mask {
                for (x, b) in p.iter_mut().zip(m.data()) {
                    *x += b;
                }
            }
            for i in 0..tq {
                softmax_in_place(&mut p[i * tk..(i + 1) * tk]).map_err(|_| {
                    Error::InvalidArgument(format!("attention row {i} is fully masked"))
                })?;
            }
            gemm(
                tq,
                tk,
                dh,
                1.0,
                View::rows(p, tk),
                View::strides(vv.data(), h * dh, d, 1),
                0.0,
                &mut out,
                h * dh,
                d,
                1,
            );
        }
        let value = Tensor::matrix(tq, d, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    // ---- composites --------------------------------------------------------

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Squared L2 norm of all entries.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. The tape cannot be reused.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            node_grads: grads,
            tracked: std::mem::take(&mut self.tracked),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn zeros_for(&self, v: Var) -> Vec<f64> {
        vec![0.0; self.nodes[v.0].value.numel()]
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                let cols = node.value.cols();
                if self.rg(*a) {
                    let ga: Vec<f64> = match kind {
                        BinKind::Add | BinKind::Sub => g.to_vec(),
                        BinKind::Mul => (0..g.len()).map(|j| g[j] * bd[bc.index(j, cols)]).collect(),
                        BinKind::Div => (0..g.len()).map(|j| g[j] / bd[bc.index(j, cols)]).collect(),
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = self.zeros_for(*b);
                    for j in 0..g.len() {
                        let bi = bc.index(j, cols);
                        gb[bi] += match kind {
                            BinKind::Add => g[j],
                            BinKind::Sub => -g[j],
                            BinKind::Mul => g[j] * ad[j],
                            BinKind::Div => -g[j] * ad[j] / (bd[bi] * bd[bi]),
                        };
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * f).collect());
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Unary(kind, a) => {
                let x = self.nodes[a.0].value.data();
                let ga = (0..g.len())
                    .map(|j| {
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Tanh => 1.0 - out[j] * out[j],
                            Unary::Sigmoid => out[j] * (1.0 - out[j]),
                            Unary::Softplus => sigmoid(x[j]),
                            Unary::Exp => out[j],
                            Unary::Gelu => gelu_grad(x[j]),
                            Unary::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Silu => {
                                let s = sigmoid(x[j]);
                                s * (1.0 + x[j] * (1.0 - s))
                            }
                            Unary::Sqrt => 0.5 / out[j],
                            Unary::Square => 2.0 * x[j],
                            Unary::Ln => 1.0 / x[j],
                        };
                        g[j] * d
                    })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::DeadZone(a, th) => {
                let x = self.nodes[a.0].value.data();
                let c = th.len();
                let ga = (0..g.len())
                    .map(|j| if x[j].abs() > th[j % c] { g[j] } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.nodes[a.0].value.data();
                let ga = (0..g.len())
                    .map(|j| if x[j] > *lo && x[j] < *hi { g[j] } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, View::rows(g, n), View::transposed(bv.data(), n), 0.0, &mut ga, 0, k, 1);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, View::transposed(av.data(), k), View::rows(g, n), 0.0, &mut gb, 0, n, 1);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) => {
                let av = &self.nodes[a.0].value;
                let (r, c) = (av.rows(), av.cols());
                let mut ga = vec![0.0; r * c];
                for ii in 0..r {
                    for j in 0..c {
                        ga[ii * c + j] = if *axis == 0 { g[j] } else { g[ii] };
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for (row, (gy, y)) in ga.chunks_mut(c).zip(g.chunks(c).zip(out.chunks(c))) {
                    let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        row[j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let r = node.value.rows();
                let gv = self.nodes[gamma.0].value.data();
                if self.rg(*gamma) {
                    let mut gg = vec![0.0; c];
                    for ii in 0..r {
                        for j in 0..c {
                            gg[j] += g[ii * c + j] * xhat[ii * c + j];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    let mut gb = vec![0.0; c];
                    for ii in 0..r {
                        for j in 0..c {
                            gb[j] += g[ii * c + j];
                        }
                    }
                    self.accumulate(grads, *beta, gb);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; r * c];
                    let nf = c as f64;
                    for ii in 0..r {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = g[ii * c + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[ii * c + j];
                        }
                        for j in 0..c {
                            let dh = g[ii * c + j] * gv[j];
                            gx[ii * c + j] =
                                inv_std[ii] / nf * (nf * dh - s1 - xhat[ii * c + j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Gather(table, indices) => {
                let c = node.value.cols();
                let mut gt = self.zeros_for(*table);
                for (row, &ix) in indices.iter().enumerate() {
                    for j in 0..c {
                        gt[ix * c + j] += g[row * c + j];
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.numel();
                        self.accumulate(grads, *p, g[off..off + n].to_vec());
                        off += n;
                    }
                } else {
                    let r = node.value.rows();
                    let total = node.value.cols();
                    let mut col = 0;
                    for p in parts {
                        let pc = self.nodes[p.0].value.cols();
                        let mut gp = Vec::with_capacity(r * pc);
                        for ii in 0..r {
                            gp.extend_from_slice(&g[ii * total + col..ii * total + col + pc]);
                        }
                        self.accumulate(grads, *p, gp);
                        col += pc;
                    }
                }
            }
            Op::Slice(a, axis, start, end) => {
                let av = &self.nodes[a.0].value;
                let c = av.cols();
                let mut ga = vec![0.0; av.numel()];
                if *axis == 0 {
                    ga[start * c..end * c].copy_from_slice(g);
                } else {
                    let w = end - start;
                    for ii in 0..av.rows() {
                        ga[ii * c + start..ii * c + end].copy_from_slice(&g[ii * w..(ii + 1) * w]);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SelectCols(a, cols) => {
                let av = &self.nodes[a.0].value;
                let c = av.cols();
                let w = cols.len();
                let mut ga = vec![0.0; av.numel()];
                for ii in 0..av.rows() {
                    for (k, &j) in cols.iter().enumerate() {
                        ga[ii * c + j] += g[ii * w + k];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut ga = vec![0.0; r * c];
                for ii in 0..r {
                    for j in 0..c {
                        ga[j * r + ii] = g[ii * c + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::DiffRows(a, s) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let mut ga = vec![0.0; r * c];
                for t in 0..r - 1 {
                    for j in 0..c {
                        let mut gy = g[t * c + j];
                        if t == r - 2 {
                            gy += g[(r - 1) * c + j];
                        }
                        ga[t * c + j] -= s * gy;
                        ga[(t + 1) * c + j] += s * gy;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let qv = self.nodes[q.0].value.data();
                let kv = self.nodes[k.0].value.data();
                let vv = self.nodes[v.0].value.data();
                let (tq, d) = (node.value.rows(), node.value.cols());
                let tk = self.nodes[k.0].value.rows();
                let dh = d / heads;
                let alpha = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; tq * d];
                let mut gk = vec![0.0; tk * d];
                let mut gv = vec![0.0; tk * d];
                let mut dp = vec![0.0; tq * tk];
                for h in 0..*heads {
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    // dV = P^T dO
                    gemm(
                        tk,
                        tq,
                        dh,
                        1.0,
                        View::transposed(p, tk),
                        View::strides(g, h * dh, d, 1),
                        0.0,
                        &mut gv,
                        h * dh,
                        d,
                        1,
                    );
                    // dP = dO V^T
                    gemm(
                        tq,
                        dh,
                        tk,
                        1.0,
                        View::strides(g, h * dh, d, 1),
                        View::strides(vv, h * dh, 1, d),
                        0.0,
                        &mut dp,
                        0,
                        tk,
                        1,
                    );
                    for ii in 0..tq {
                        let pr = &p[ii * tk..(ii + 1) * tk];
                        let dr = &mut dp[ii * tk..(ii + 1) * tk];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..tk {
                            dr[j] = pr[j] * (dr[j] - dot);
                        }
                    }
                    // dQ = dS K * alpha ; dK = dS^T Q * alpha
                    gemm(
                        tq,
                        tk,
                        dh,
                        alpha,
                        View::rows(&dp, tk),
                        View::strides(kv, h * dh, d, 1),
                        0.0,
                        &mut gq,
                        h * dh,
                        d,
                        1,
                    );
                    gemm(
                        tk,
                        tq,
                        dh,
                        alpha,
                        View::transposed(&dp, tk),
                        View::strides(qv, h * dh, d, 1),
                        0.0,
                        &mut gk,
                        h * dh,
                        d,
                        1,
                    );
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    tracked: Vec<(String, ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node that required grad.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Collects parameter gradients for one store. Parameters that did not
    /// take part in the loss get exact zeros.
    pub fn for_store(&self, store: &ParamStore) -> GradBuffer {
        let mut out = GradBuffer::zeros_like(store);
        for (tag, id, var) in &self.tracked {
            if tag == store.tag() {
                if let Some(g) = self.wrt(*var) {
                    out.get_mut(*id).copy_from_slice(g);
                }
            }
        }
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
    Ok(())
}

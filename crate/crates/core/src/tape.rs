//! Tape-based reverse mode over a closed set of tensor primitives.
//!
//! Every primitive computes its value eagerly and records enough state for a
//! hand-written adjoint. Nodes are appended in execution order, so a single
//! reverse sweep over the node list is a valid topological order.

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, TensorBuf};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    KlRows {
        student: Var,
        target: Var,
        p: Vec<f64>,
        q: Vec<f64>,
        ratio: Vec<f64>,
    },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: TensorBuf,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in execution order.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Accumulated adjoints, one slot per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<TensorBuf>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&TensorBuf> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or exact zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> TensorBuf {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => TensorBuf::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> TensorBuf {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => TensorBuf::zeros(&self.shapes[v.0]),
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: TensorBuf) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: TensorBuf) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &TensorBuf {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: TensorBuf, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::Shape(format!("{what}: expected 2-D, got {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(TensorBuf::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "add_row_bias: bias {:?} for {n} columns",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(
            TensorBuf::from_parts(vec![m, n], out),
            Op::AddRowBias(x, bias),
            rg,
        ))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<TensorBuf> {
        self.value(a).check_same_shape(self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(TensorBuf::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let v = TensorBuf::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| math::gelu(v)).collect();
        let v = TensorBuf::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        self.value(x).ensure_finite("softmax_rows")?;
        let mut out = vec![0.0; m * n];
        for (src, dst) in self.value(x).data().chunks(n).zip(out.chunks_mut(n)) {
            math::softmax_into(src, dst);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(TensorBuf::from_parts(vec![m, n], out), Op::SoftmaxRows(x), rg))
    }

    /// Layer norm applied independently to each row.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm_rows")?;
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm needs at least 2 features, got {n}"
            )));
        }
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::Shape(format!(
                "layer_norm_rows: gamma {:?} beta {:?} for {n} features",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        {
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            let xs = self.value(x).data();
            for i in 0..m {
                let r = i * n..(i + 1) * n;
                inv_std[i] = math::layer_norm_into(
                    &xs[r.clone()],
                    g,
                    b,
                    eps,
                    &mut out[r.clone()],
                    &mut xhat[r],
                );
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            TensorBuf::from_parts(vec![m, n], out),
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose2()?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::Shape(format!("slice_rows {start}+{len} of {m} rows")));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            TensorBuf::from_parts(vec![len, n], data),
            Op::SliceRows(x, start),
            rg,
        ))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!("slice_cols {start}+{len} of {n} cols")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            TensorBuf::from_parts(vec![m, len], data),
            Op::SliceCols(x, start),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let (_, n) = self.dims2(*first, "concat_rows")?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(Error::Shape(format!("concat_rows: {c} vs {n} columns")));
            }
            m += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            TensorBuf::from_parts(vec![m, n], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let (m, _) = self.dims2(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::Shape(format!("concat_cols: {r} vs {m} rows")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            TensorBuf::from_parts(vec![m, n], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "gather_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::Shape(format!("gather_rows {rows:?} of {m} rows")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            TensorBuf::from_parts(vec![rows.len(), n], data),
            Op::GatherRows(x, rows.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(TensorBuf::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() / self.value(x).len() as f64;
        let rg = self.rg(&[x]);
        self.push(TensorBuf::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over rows of `KL(softmax(student_r) ‖ softmax(target_r))`,
    /// softmax taken along each row.
    pub fn kl_rows(&mut self, student: Var, target: Var) -> Result<Var> {
        let (m, n) = self.dims2(student, "kl_rows")?;
        self.value(student)
            .check_same_shape(self.value(target), "kl_rows")?;
        self.value(student).ensure_finite("kl_rows student")?;
        self.value(target).ensure_finite("kl_rows target")?;
        let mut p = vec![0.0; m * n];
        let mut q = vec![0.0; m * n];
        let mut ratio = vec![0.0; m * n];
        let mut total = 0.0;
        {
            let s = self.value(student).data();
            let t = self.value(target).data();
            for i in 0..m {
                let r = i * n..(i + 1) * n;
                total += math::kl_logits_into(&s[r.clone()], &t[r.clone()], &mut p[r.clone()], &mut ratio[r.clone()]);
                math::softmax_into(&t[r.clone()], &mut q[r]);
            }
        }
        let rg = self.rg(&[student, target]);
        Ok(self.push(
            TensorBuf::scalar(total / m as f64),
            Op::KlRows {
                student,
                target,
                p,
                q,
                ratio,
            },
            rg,
        ))
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b), "mse")?;
        let n = self.value(a).len() as f64;
        let s = self.value(a).sq_dist(self.value(b)) / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(TensorBuf::scalar(s), Op::Mse(a, b), rg))
    }

    /// Reverse sweep seeded with `d out / d out = 1`; `out` must be a scalar.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        self.backward_with(out, TensorBuf::filled(self.shape(out), 1.0))
    }

    /// Reverse sweep from `out` with an explicit upstream adjoint.
    pub fn backward_with(&self, out: Var, seed: TensorBuf) -> Result<Gradients> {
        seed.check_same_shape(self.value(out), "backward seed")?;
        let mut grads: Vec<Option<TensorBuf>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // only leaves that asked for gradients keep them
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                if idx != out.0 {
                    grads[idx] = None;
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &TensorBuf, grads: &mut [Option<TensorBuf>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    matmul_nt_acc(gd, self.value(*b).data(), ga, m, n, k);
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(grads, *b);
                    matmul_tn_acc(self.value(*a).data(), gd, gb, m, k, n);
                }
            }
            Op::AddRowBias(x, bias) => {
                self.acc(grads, *x, gd);
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).len();
                    let gb = self.slot(grads, *bias);
                    for row in gd.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd);
                self.acc(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd);
                if self.requires_grad(*b) {
                    for (o, v) in self.slot(grads, *b).iter_mut().zip(gd) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let other = self.value(*b).data();
                    for ((o, v), w) in self.slot(grads, *a).iter_mut().zip(gd).zip(other) {
                        *o += v * w;
                    }
                }
                if self.requires_grad(*b) {
                    let other = self.value(*a).data();
                    for ((o, v), w) in self.slot(grads, *b).iter_mut().zip(gd).zip(other) {
                        *o += v * w;
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.requires_grad(*x) {
                    for (o, v) in self.slot(grads, *x).iter_mut().zip(gd) {
                        *o += v * s;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.requires_grad(*x) {
                    let xs = self.value(*x).data();
                    for ((o, v), &xv) in self.slot(grads, *x).iter_mut().zip(gd).zip(xs) {
                        *o += v * math::gelu_grad(xv);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.requires_grad(*x) {
                    let n = node.value.shape()[1];
                    let y = node.value.data();
                    let gx = self.slot(grads, *x);
                    for ((gr, yr), or) in gd.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            or[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.shape()[1];
                if self.requires_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let gx = self.slot(grads, *x);
                    let mut dxhat = vec![0.0; n];
                    for (i, &istd) in inv_std.iter().enumerate() {
                        let r = i * n..(i + 1) * n;
                        let xh = &xhat[r.clone()];
                        for j in 0..n {
                            dxhat[j] = gd[i * n + j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, o) in gx[r].iter_mut().enumerate() {
                            *o += istd * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if self.requires_grad(*gamma) {
                    let gg = self.slot(grads, *gamma);
                    for (row, xr) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += row[j] * xr[j];
                        }
                    }
                }
                if self.requires_grad(*beta) {
                    let gb = self.slot(grads, *beta);
                    for row in gd.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.requires_grad(*x) {
                    let t = g.transpose2().unwrap();
                    self.acc(grads, *x, t.data());
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, gd),
            Op::SliceRows(x, start) => {
                if self.requires_grad(*x) {
                    let n = node.value.shape()[1];
                    let gx = self.slot(grads, *x);
                    for (o, v) in gx[start * n..start * n + gd.len()].iter_mut().zip(gd) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if self.requires_grad(*x) {
                    let (m, w) = (node.value.shape()[0], node.value.shape()[1]);
                    let n = self.value(*x).shape()[1];
                    let gx = self.slot(grads, *x);
                    for i in 0..m {
                        for j in 0..w {
                            gx[i * n + start + j] += gd[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, &gd[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let (m, w) = self.value(p).dims2().unwrap();
                    if self.requires_grad(p) {
                        let gp = self.slot(grads, p);
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += gd[i * n + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows(x, rows) => {
                if self.requires_grad(*x) {
                    let n = node.value.shape()[1];
                    let gx = self.slot(grads, *x);
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            gx[r * n + j] += gd[k * n + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.requires_grad(*x) {
                    let s = gd[0];
                    for o in self.slot(grads, *x).iter_mut() {
                        *o += s;
                    }
                }
            }
            Op::Mean(x) => {
                if self.requires_grad(*x) {
                    let s = gd[0] / self.value(*x).len() as f64;
                    for o in self.slot(grads, *x).iter_mut() {
                        *o += s;
                    }
                }
            }
            Op::KlRows {
                student,
                target,
                p,
                q,
                ratio,
            } => {
                let (m, n) = self.value(*student).dims2().unwrap();
                let s = gd[0] / m as f64;
                if self.requires_grad(*student) {
                    let gs = self.slot(grads, *student);
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let (pr, ar) = (&p[r.clone()], &ratio[r.clone()]);
                        let expect: f64 = pr.iter().zip(ar).map(|(a, b)| a * b).sum();
                        for (j, o) in gs[r].iter_mut().enumerate() {
                            *o += s * pr[j] * (ar[j] - expect);
                        }
                    }
                }
                if self.requires_grad(*target) {
                    let gt = self.slot(grads, *target);
                    for k in 0..m * n {
                        gt[k] += s * (q[k] - p[k]);
                    }
                }
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let s = 2.0 * gd[0] / n;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    for ((o, x), y) in self.slot(grads, *a).iter_mut().zip(av).zip(bv) {
                        *o += s * (x - y);
                    }
                }
                if self.requires_grad(*b) {
                    for ((o, x), y) in self.slot(grads, *b).iter_mut().zip(av).zip(bv) {
                        *o -= s * (x - y);
                    }
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<TensorBuf>], v: Var) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| TensorBuf::zeros(self.nodes[v.0].value.shape()))
            .data_mut()
    }

    fn acc(&self, grads: &mut [Option<TensorBuf>], v: Var, g: &[f64]) {
        if !self.requires_grad(v) {
            return;
        }
        for (o, x) in self.slot(grads, v).iter_mut().zip(g) {
            *o += x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut t = GradTape::new();
        let x = t.param(TensorBuf::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let out = t.sum(y);
        let g = t.backward(out).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut t = GradTape::new();
        let x = t.param(TensorBuf::from_fn(&[2, 2], |i| i as f64));
        let unused = t.param(TensorBuf::filled(&[3], 7.0));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), TensorBuf::zeros(&[3]));
        assert_eq!(g.wrt(x).shape(), &[2, 2]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = GradTape::new();
        let c = t.constant(TensorBuf::filled(&[1, 3], 2.0));
        let w = t.param(TensorBuf::filled(&[3, 1], 0.5));
        let y = t.matmul(c, w).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(w).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = GradTape::new();
        let x = t.param(TensorBuf::zeros(&[2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn kl_rows_rejects_shape_mismatch() {
        let mut t = GradTape::new();
        let a = t.param(TensorBuf::zeros(&[2, 3]));
        let b = t.constant(TensorBuf::zeros(&[3, 2]));
        assert!(matches!(t.kl_rows(a, b), Err(Error::Shape(_))));
    }
}

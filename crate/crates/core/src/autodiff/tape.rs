//! Reverse-mode tape over dense matrices.
//!
//! Every operation appends a node holding its value; `backward` walks the
//! tape once in reverse order, so the recorded order is already topological.

use super::tensor::{gemm, Tensor};
use crate::error::{RemError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + 1 * row`, `row` is `1 x cols`.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine(Var, f64),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    /// Multiply by a constant mask (dropout).
    MaskScale(Var, Vec<f64>),
    Sum(Var),
    /// Masked reduction; `dpred` is the gradient of the loss w.r.t. `pred`.
    Loss { pred: Var, dpred: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> RemError {
    RemError::Shape(format!(
        "{what}: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
}

impl Tape {
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
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient after [`Tape::backward`]; `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm(ta.rows(), ta.cols(), tb.cols(), ta.data(), false, tb.data(), false, 0.0, out.data_mut());
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        gemm(ta.rows(), ta.cols(), tb.rows(), ta.data(), false, tb.data(), true, 0.0, out.data_mut());
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut out = ta.clone();
        let cols = ta.cols();
        for chunk in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let rg = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `a * scale + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * scale + shift).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(out, Op::Affine(a, scale), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        let cols = ta.cols().max(1);
        for row in out.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.needs(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Standardizes each row over its columns, then applies `gain`/`bias` (both `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if n < 2 {
            return Err(RemError::Shape("layer_norm needs at least 2 features".to_string()));
        }
        if tg.shape() != [1, n] || tb.shape() != [1, n] {
            return Err(shape_err("layer_norm affine", tx, tg));
        }
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; tx.rows()];
        let mut out = Tensor::zeros(tx.rows(), n);
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out.data_mut()[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(RemError::Shape(format!(
                "slice_cols {start}..{} of {} columns",
                start + len,
                ta.cols()
            )));
        }
        let mut out = Tensor::zeros(ta.rows(), len);
        for r in 0..ta.rows() {
            out.data_mut()[r * len..(r + 1) * len].copy_from_slice(&ta.row(r)[start..start + len]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(RemError::Shape("concat_cols row mismatch".to_string()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let w = t.cols();
            for r in 0..rows {
                out.data_mut()[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if rows.iter().any(|&r| r >= ta.rows()) {
            return Err(RemError::Shape(format!("select_rows beyond {} rows", ta.rows())));
        }
        let c = ta.cols();
        let mut out = Tensor::zeros(rows.len(), c);
        for (i, &r) in rows.iter().enumerate() {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(ta.row(r));
        }
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SelectRows(a, rows.to_vec()), rg))
    }

    pub fn mask_scale(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(RemError::Shape("mask_scale length".to_string()));
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::MaskScale(a, mask), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    fn check_loss_args(&self, pred: Var, target: &[f64], mask: &[bool]) -> Result<usize> {
        let n = self.value(pred).len();
        if target.len() != n || mask.len() != n {
            return Err(RemError::Shape(format!(
                "loss: pred has {n} values, target {}, mask {}",
                target.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(RemError::Empty("loss mask selects no positions".to_string()));
        }
        Ok(count)
    }

    /// Mean squared error over positions where `mask` is true.
    pub fn mse_loss(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let count = self.check_loss_args(pred, target, mask)? as f64;
        let p = self.value(pred).data();
        let mut loss = 0.0;
        let mut dpred = vec![0.0; p.len()];
        for i in 0..p.len() {
            if mask[i] {
                let d = p[i] - target[i];
                loss += d * d;
                dpred[i] = 2.0 * d / count;
            }
        }
        let rg = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(loss / count), Op::Loss { pred, dpred }, rg))
    }

    /// Smooth-L1 (Huber with threshold `beta`) averaged over positions where `mask` is true.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: &[f64], mask: &[bool], beta: f64) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(RemError::Domain(format!("smooth-L1 beta must be > 0, got {beta}")));
        }
        let count = self.check_loss_args(pred, target, mask)? as f64;
        let p = self.value(pred).data();
        let mut loss = 0.0;
        let mut dpred = vec![0.0; p.len()];
        for i in 0..p.len() {
            if mask[i] {
                let d = p[i] - target[i];
                let (l, g) = smooth_l1(d, beta);
                loss += l;
                dpred[i] = g / count;
            }
        }
        let rg = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(loss / count), Op::Loss { pred, dpred }, rg))
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn grad_buffer(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(node.grad.get_or_insert_with(|| vec![0.0; len]))
    }

    /// Seeds `d output / d output = 1` at a scalar node and propagates backwards.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(RemError::Shape("backward needs a scalar output".to_string()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[output.0].grad = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let ga = self.grad_buffer(*a).unwrap();
                    gemm(m, n, k, g, false, &bv, true, 1.0, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let gb = self.grad_buffer(*b).unwrap();
                    gemm(k, m, n, &av, true, g, false, 1.0, gb);
                }
            }
            Op::MatMulT(a, b) => {
                // c = a b^T, a: m x k, b: n x k
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let ga = self.grad_buffer(*a).unwrap();
                    gemm(m, n, k, g, false, &bv, false, 1.0, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let gb = self.grad_buffer(*b).unwrap();
                    gemm(n, m, k, g, true, &av, false, 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddRow(a, row) => {
                self.accumulate(*a, g);
                let cols = self.value(*row).cols();
                if let Some(gr) = self.grad_buffer(*row) {
                    for chunk in g.chunks(cols.max(1)) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(*a, &d);
                }
                if self.nodes[b.0].requires_grad {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(*b, &d);
                }
            }
            Op::Scale(a, c) | Op::Affine(a, c) => {
                let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accumulate(*a, &d);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let cols = y.cols().max(1);
                let mut d = vec![0.0; g.len()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.data().chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..yr.len() {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(*a, &d);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = self.value(*x).cols();
                let gv = self.value(*gain).data().to_vec();
                if self.nodes[gain.0].requires_grad || self.nodes[bias.0].requires_grad {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += gr[c] * hr[c];
                            db[c] += gr[c];
                        }
                    }
                    self.accumulate(*gain, &dg);
                    self.accumulate(*bias, &db);
                }
                if self.nodes[x.0].requires_grad {
                    let nf = n as f64;
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dh = gr[c] * gv[c];
                            s1 += dh;
                            s2 += dh * hr[c];
                        }
                        for c in 0..n {
                            let dh = gr[c] * gv[c];
                            dx[r * n + c] = inv_std[r] / nf * (nf * dh - s1 - hr[c] * s2);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::SliceCols(a, start) => {
                let cols = self.value(*a).cols();
                let w = self.nodes[idx].value.cols();
                if let Some(ga) = self.grad_buffer(*a) {
                    for (r, gr) in g.chunks(w.max(1)).enumerate() {
                        for (o, v) in ga[r * cols + start..r * cols + start + w].iter_mut().zip(gr) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.grad_buffer(p) {
                        for (r, chunk) in gp.chunks_mut(w.max(1)).enumerate() {
                            for (o, v) in chunk.iter_mut().zip(&g[r * total + off..r * total + off + w]) {
                                *o += v;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SelectRows(a, rows) => {
                let c = self.value(*a).cols();
                if let Some(ga) = self.grad_buffer(*a) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, v) in ga[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MaskScale(a, mask) => {
                let d: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                self.accumulate(*a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                self.accumulate(*a, &d);
            }
            Op::Loss { pred, dpred } => {
                let d: Vec<f64> = dpred.iter().map(|x| x * g[0]).collect();
                self.accumulate(*pred, &d);
            }
        }
    }
}

/// Smooth-L1 value and derivative at residual `d`.
pub fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

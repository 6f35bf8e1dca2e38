//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation in creation order, so node ids are a
//! topological order and the backward sweep simply walks them in reverse.
//! [`Var`] is a cheap copyable handle into one tape.

use std::cell::{Cell, Ref, RefCell};

use super::kernels;
use super::tensor::{ParamId, ParamSet, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    OneMinus(usize),
    Sigmoid(usize),
    Gelu(usize),
    Square(usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    AddRow { x: usize, bias: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    SelectRows { x: usize, rows: Vec<usize>, cols: usize },
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize, cols_in: usize },
    ConcatCols(Vec<usize>),
    Outer(usize, usize),
    Bce { z: usize, y: Vec<f64> },
    Mse(usize, usize),
    AvgPool { x: usize, n: usize, h: usize, w: usize, oh: usize, ow: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder. Single-threaded; one tape per worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(usize, ParamId)>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when unreachable.
    pub fn wrt(&self, var: Var<'_>) -> Vec<f64> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.sizes[var.id]])
    }

    /// Adds the gradients of every parameter registered on the tape into the
    /// parameter set. Registered but unreachable parameters receive zeros.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<()> {
        for &(node, pid) in &self.params {
            let t = params.get_mut(pid);
            match &self.grads[node] {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; t.numel()];
                    t.accumulate_grad(&zeros)?;
                }
            }
        }
        Ok(())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_scalar(shape: &[usize]) -> bool {
    numel(shape) == 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Records a leaf. It participates in differentiation when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        if numel(&shape) != data.len() {
            return Err(shape_err("constant", format!("{shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    /// Records a trainable parameter; its gradient is routed back to the
    /// parameter set by [`Gradients::accumulate_into`].
    pub fn param(&self, params: &ParamSet, id: ParamId) -> Var<'_> {
        let t = params.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.borrow_mut().push((v.id, id));
        v
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !is_scalar(&root.shape) {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            sizes: nodes.iter().map(|n| n.data.len()).collect(),
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Reduces a gradient flowing into a (possibly broadcast scalar) operand.
fn reduce_to(g: Vec<f64>, target_len: usize) -> Vec<f64> {
    if target_len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| -> &[f64] { &nodes[i].data };
    let bcast = |d: &[f64], j: usize| if d.len() == 1 { d[0] } else { d[j] };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (la, lb) = (val(*a).len(), val(*b).len());
            acc(nodes, grads, *a, reduce_to(g.to_vec(), la));
            acc(nodes, grads, *b, reduce_to(g.to_vec(), lb));
        }
        Op::Sub(a, b) => {
            let (la, lb) = (val(*a).len(), val(*b).len());
            acc(nodes, grads, *a, reduce_to(g.to_vec(), la));
            acc(nodes, grads, *b, reduce_to(g.iter().map(|v| -v).collect(), lb));
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(*a), val(*b));
            let ga: Vec<f64> = (0..g.len()).map(|j| g[j] * bcast(db, j)).collect();
            let gb: Vec<f64> = (0..g.len()).map(|j| g[j] * bcast(da, j)).collect();
            acc(nodes, grads, *a, reduce_to(ga, da.len()));
            acc(nodes, grads, *b, reduce_to(gb, db.len()));
        }
        Op::Scale(a, c) => acc(nodes, grads, *a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) => acc(nodes, grads, *a, g.to_vec()),
        Op::OneMinus(a) => acc(nodes, grads, *a, g.iter().map(|v| -v).collect()),
        Op::Sigmoid(a) => {
            let s = &node.data;
            acc(nodes, grads, *a, g.iter().zip(s).map(|(g, s)| g * s * (1.0 - s)).collect());
        }
        Op::Gelu(a) => {
            let x = val(*a);
            acc(nodes, grads, *a, g.iter().zip(x).map(|(g, &x)| g * kernels::gelu_grad(x)).collect());
        }
        Op::Square(a) => {
            let x = val(*a);
            acc(nodes, grads, *a, g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect());
        }
        &Op::MatMul { a, b, m, k, n } => {
            if nodes[a].needs_grad {
                // dA = G · Bᵀ
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, false, val(b), true, &mut ga, false);
                acc(nodes, grads, a, ga);
            }
            if nodes[b].needs_grad {
                // dB = Aᵀ · G
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, val(a), true, g, false, &mut gb, false);
                acc(nodes, grads, b, gb);
            }
        }
        &Op::Transpose { x, rows, cols } => {
            // g is cols×rows
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    gx[r * cols + c] = g[c * rows + r];
                }
            }
            acc(nodes, grads, x, gx);
        }
        &Op::AddRow { x, bias } => {
            let n = val(bias).len();
            let mut gb = vec![0.0; n];
            for row in g.chunks(n) {
                for (a, b) in gb.iter_mut().zip(row) {
                    *a += b;
                }
            }
            acc(nodes, grads, x, g.to_vec());
            acc(nodes, grads, bias, gb);
        }
        Op::LayerNorm { x, gamma, beta, mean, rstd } => {
            let xd = val(*x);
            let gm = val(*gamma);
            let d = gm.len();
            let rows = xd.len() / d;
            let mut gx = vec![0.0; xd.len()];
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for r in 0..rows {
                let off = r * d;
                let (mu, rs) = (mean[r], rstd[r]);
                let mut sum_gxh = 0.0;
                let mut sum_gxh_xhat = 0.0;
                for j in 0..d {
                    let xhat = (xd[off + j] - mu) * rs;
                    let gy = g[off + j];
                    ggamma[j] += gy * xhat;
                    gbeta[j] += gy;
                    let gxh = gy * gm[j];
                    sum_gxh += gxh;
                    sum_gxh_xhat += gxh * xhat;
                }
                let inv_d = 1.0 / d as f64;
                for j in 0..d {
                    let xhat = (xd[off + j] - mu) * rs;
                    let gxh = g[off + j] * gm[j];
                    gx[off + j] = rs * (gxh - inv_d * sum_gxh - xhat * inv_d * sum_gxh_xhat);
                }
            }
            acc(nodes, grads, *x, gx);
            acc(nodes, grads, *gamma, ggamma);
            acc(nodes, grads, *beta, gbeta);
        }
        &Op::Softmax { x, outer, len, inner } => {
            let s = &node.data;
            let mut gx = vec![0.0; s.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * s[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = s[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            acc(nodes, grads, x, gx);
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            acc(nodes, grads, *a, vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = val(*a).len();
            acc(nodes, grads, *a, vec![g[0] / n as f64; n]);
        }
        Op::Reshape(a) => acc(nodes, grads, *a, g.to_vec()),
        Op::SelectRows { x, rows, cols } => {
            let mut gx = vec![0.0; val(*x).len()];
            for (out_r, &src) in rows.iter().enumerate() {
                for c in 0..*cols {
                    gx[src * cols + c] += g[out_r * cols + c];
                }
            }
            acc(nodes, grads, *x, gx);
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(p).len();
                acc(nodes, grads, p, g[off..off + len].to_vec());
                off += len;
            }
        }
        &Op::SliceCols { x, start, cols_in } => {
            let rows = node.shape[0];
            let w = node.shape[1];
            let mut gx = vec![0.0; rows * cols_in];
            for r in 0..rows {
                gx[r * cols_in + start..r * cols_in + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            acc(nodes, grads, x, gx);
        }
        Op::ConcatCols(parts) => {
            let rows = node.shape[0];
            let total = node.shape[1];
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].shape[1];
                let mut gp = vec![0.0; rows * w];
                for r in 0..rows {
                    gp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                }
                acc(nodes, grads, p, gp);
                off += w;
            }
        }
        &Op::Outer(a, b) => {
            let (da, db) = (val(a), val(b));
            let n = db.len();
            let mut ga = vec![0.0; da.len()];
            let mut gb = vec![0.0; n];
            for i in 0..da.len() {
                for j in 0..n {
                    let gij = g[i * n + j];
                    ga[i] += gij * db[j];
                    gb[j] += gij * da[i];
                }
            }
            acc(nodes, grads, a, ga);
            acc(nodes, grads, b, gb);
        }
        Op::Bce { z, y } => {
            let zd = val(*z);
            let c = zd.len() as f64;
            let gz = zd
                .iter()
                .zip(y)
                .map(|(&z, &y)| g[0] * (kernels::sigmoid(z) - y) / c)
                .collect();
            acc(nodes, grads, *z, gz);
        }
        Op::Mse(a, b) => {
            let (da, db) = (val(*a), val(*b));
            let c = 2.0 * g[0] / da.len() as f64;
            let ga: Vec<f64> = da.iter().zip(db).map(|(a, b)| c * (a - b)).collect();
            let gb = ga.iter().map(|v| -v).collect();
            acc(nodes, grads, *a, ga);
            acc(nodes, grads, *b, gb);
        }
        &Op::AvgPool { x, n, h, w, oh, ow } => {
            let (kh, kw) = kernels::pool_windows(h, w, oh, ow);
            let area = (kh * kw) as f64;
            let mut gx = vec![0.0; n * h * w];
            for p in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[(p * oh + oy) * ow + ox] / area;
                        for y in oy * kh..(oy + 1) * kh {
                            for xx in ox * kw..(ox + 1) * kw {
                                gx[(p * h + y) * w + xx] += go;
                            }
                        }
                    }
                }
            }
            acc(nodes, grads, x, gx);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    fn node(&self) -> Ref<'_, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node().data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.node().data.clone()
    }

    /// Runs `f` on a borrowed view of the value.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.node().data)
    }

    pub fn value(&self) -> Tensor {
        let n = self.node();
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    /// Scalar value; panics for non-scalar vars.
    pub fn item(&self) -> f64 {
        let n = self.node();
        assert_eq!(n.data.len(), 1, "item() on non-scalar of shape {:?}", n.shape);
        n.data[0]
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, data) = {
            let n = self.node();
            (n.shape.clone(), n.data.iter().map(|&v| f(v)).collect())
        };
        let ng = self.tape.needs(&[self.id]);
        self.tape.push(shape, data, op, ng)
    }

    fn binary(self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (shape, data) = {
            let a = self.node();
            let b = other.node();
            if a.shape == b.shape {
                (a.shape.clone(), a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
            } else if is_scalar(&b.shape) {
                let y = b.data[0];
                (a.shape.clone(), a.data.iter().map(|&x| f(x, y)).collect())
            } else if is_scalar(&a.shape) {
                let x = a.data[0];
                (b.shape.clone(), b.data.iter().map(|&y| f(x, y)).collect())
            } else {
                return Err(shape_err(name, format!("{:?} vs {:?}", a.shape, b.shape)));
            }
        };
        let ng = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(shape, data, op, ng))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t> {
        self.unary(Op::OneMinus(self.id), |v| 1.0 - v)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), kernels::sigmoid)
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), kernels::gelu)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.node().shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let data = kernels::matmul(&self.node().data, &other.node().data, m, k, n);
        let ng = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(vec![m, n], data, Op::MatMul { a: self.id, b: other.id, m, k, n }, ng))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (rows, cols) = self.dims2("transpose")?;
        let data = {
            let d = &self.node().data;
            let mut t = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    t[c * rows + r] = d[r * cols + c];
                }
            }
            t
        };
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(vec![cols, rows], data, Op::Transpose { x: self.id, rows, cols }, ng))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| shape_err("add_row", "scalar input"))?;
        let data = {
            let b = bias.node();
            if b.data.len() != n {
                return Err(shape_err("add_row", format!("{shape:?} + {:?}", b.shape)));
            }
            let x = self.node();
            x.data.chunks(n).flat_map(|row| row.iter().zip(&b.data).map(|(a, b)| a + b)).collect()
        };
        let ng = self.tape.needs(&[self.id, bias.id]);
        Ok(self.tape.push(shape, data, Op::AddRow { x: self.id, bias: bias.id }, ng))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| shape_err("layernorm", "scalar input"))?;
        if d == 0 {
            return Err(shape_err("layernorm", "last dimension is zero"));
        }
        if gamma.numel() != d || beta.numel() != d {
            return Err(shape_err("layernorm", format!("D={d}, gamma {}, beta {}", gamma.numel(), beta.numel())));
        }
        let (out, mean, rstd) = kernels::layernorm(&self.node().data, d, &gamma.node().data, &beta.node().data);
        let ng = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            shape,
            out,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, mean, rstd },
            ng,
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let data = kernels::softmax(&self.node().data, outer, len, inner);
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(shape, data, Op::Softmax { x: self.id, outer, len, inner }, ng))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.node().data.iter().sum();
        let ng = self.tape.needs(&[self.id]);
        self.tape.push(vec![], vec![s], Op::Sum(self.id), ng)
    }

    pub fn mean(self) -> Var<'t> {
        let s = {
            let d = &self.node().data;
            d.iter().sum::<f64>() / d.len() as f64
        };
        let ng = self.tape.needs(&[self.id]);
        self.tape.push(vec![], vec![s], Op::Mean(self.id), ng)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let data = self.data();
        if numel(&shape) != data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(shape, data, Op::Reshape(self.id), ng))
    }

    /// Gathers rows of a matrix (duplicates allowed).
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let (r, cols) = self.dims2("select_rows")?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        {
            let x = self.node();
            for &i in rows {
                if i >= r {
                    return Err(Error::OutOfRange { index: i, len: r });
                }
                data.extend_from_slice(&x.data[i * cols..(i + 1) * cols]);
            }
        }
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            vec![rows.len(), cols],
            data,
            Op::SelectRows { x: self.id, rows: rows.to_vec(), cols },
            ng,
        ))
    }

    /// Row one of a matrix as a vector.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let (_, cols) = self.dims2("row")?;
        self.select_rows(&[i])?.reshape(vec![cols])
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t>> {
        let (rows, cols) = self.dims2("slice_cols")?;
        if start + width > cols {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of {cols}", start + width)));
        }
        let data = {
            let x = self.node();
            (0..rows).flat_map(|r| x.data[r * cols + start..r * cols + start + width].to_vec()).collect()
        };
        let ng = self.tape.needs(&[self.id]);
        Ok(self.tape.push(vec![rows, width], data, Op::SliceCols { x: self.id, start, cols_in: cols }, ng))
    }
}

/// Stacks matrices (or vectors, treated as single rows) along axis 0.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
    let tape = first.tape;
    let cols = *first.shape().last().ok_or_else(|| shape_err("concat_rows", "scalar input"))?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let n = p.node();
        let c = *n.shape.last().unwrap_or(&0);
        if c != cols || n.shape.len() > 2 {
            return Err(shape_err("concat_rows", format!("{:?} with width {cols}", n.shape)));
        }
        rows += n.data.len() / cols;
        data.extend_from_slice(&n.data);
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let ng = tape.needs(&ids);
    Ok(tape.push(vec![rows, cols], data, Op::ConcatRows(ids), ng))
}

/// Concatenates matrices with equal row counts along axis 1.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
    let tape = first.tape;
    let (rows, _) = first.dims2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2("concat_cols")?;
        if r != rows {
            return Err(shape_err("concat_cols", format!("{r} rows vs {rows}")));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; rows * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let n = p.node();
        for r in 0..rows {
            data[r * total + off..r * total + off + w].copy_from_slice(&n.data[r * w..(r + 1) * w]);
        }
        off += w;
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let ng = tape.needs(&ids);
    Ok(tape.push(vec![rows, total], data, Op::ConcatCols(ids), ng))
}

/// Outer product of two vectors: `[P] ⊗ [D] -> [P×D]`.
pub fn outer<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let (data, p, d) = {
        let (na, nb) = (a.node(), b.node());
        let data = na.data.iter().flat_map(|x| nb.data.iter().map(move |y| x * y)).collect();
        (data, na.data.len(), nb.data.len())
    };
    let ng = a.tape.needs(&[a.id, b.id]);
    a.tape.push(vec![p, d], data, Op::Outer(a.id, b.id), ng)
}

/// Mean binary cross-entropy over classes, computed from logits.
pub fn bce_with_logits<'t>(z: Var<'t>, targets: &[f64]) -> Result<Var<'t>> {
    if z.numel() != targets.len() {
        return Err(shape_err("bce_with_logits", format!("{} logits vs {} targets", z.numel(), targets.len())));
    }
    if let Some(bad) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument(format!("bce target {bad} not in {{0,1}}")));
    }
    let loss = z.with_data(|zd| {
        zd.iter().zip(targets).map(|(&z, &y)| kernels::bce_with_logits(z, y)).sum::<f64>() / zd.len() as f64
    });
    let ng = z.tape.needs(&[z.id]);
    Ok(z.tape.push(vec![], vec![loss], Op::Bce { z: z.id, y: targets.to_vec() }, ng))
}

/// Mean squared difference of two equal-shape tensors.
pub fn mse<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() {
        return Err(shape_err("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let v = {
        let (na, nb) = (a.node(), b.node());
        na.data.iter().zip(&nb.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / na.data.len() as f64
    };
    let ng = a.tape.needs(&[a.id, b.id]);
    Ok(a.tape.push(vec![], vec![v], Op::Mse(a.id, b.id), ng))
}

/// Average pooling of an `N×H×W` tensor to `N×out_h×out_w`, truncating
/// trailing rows/columns that do not fill a whole window.
pub fn avg_pool2d(x: Var<'_>, out_h: usize, out_w: usize) -> Result<Var<'_>> {
    let (n, h, w) = match x.shape().as_slice() {
        &[n, h, w] => (n, h, w),
        s => return Err(shape_err("avg_pool2d", format!("expected N×H×W, got {s:?}"))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(shape_err("avg_pool2d", "zero output extent"));
    }
    if out_h > h || out_w > w {
        return Err(shape_err("avg_pool2d", format!("{out_h}x{out_w} from {h}x{w}")));
    }
    let data = kernels::avg_pool2d(&x.node().data, n, h, w, out_h, out_w);
    let ng = x.tape.needs(&[x.id]);
    Ok(x.tape.push(vec![n, out_h, out_w], data, Op::AvgPool { x: x.id, n, h, w, oh: out_h, ow: out_w }, ng))
}

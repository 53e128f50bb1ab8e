//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles in
//! evaluation order, so parents always precede children. [`Tape::backward`]
//! walks the record once in reverse and accumulates vector-Jacobian products
//! into each node. All reductions run in a fixed order; the same inputs give
//! bit-identical values and gradients.

use crate::attention::kernels;
use crate::basis::BasisSpec;
use crate::error::{KaratError, Result};
use crate::simplex;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use std::cell::RefCell;
use std::sync::Arc;

/// Epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// How gradients flow back through a simplex projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionGrad {
    /// The projection is treated as a constant.
    Stop,
    /// Upstream gradient passes through on the active set, zero elsewhere.
    Masked,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Sum(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SelectRow(usize, usize),
    CrossEntropy {
        logits: usize,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    UnitOperator {
        input: usize,
        params: usize,
        spec: BasisSpec,
    },
    ProjectRows(usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
///
/// A tape is confined to one thread; run independent samples on independent
/// tapes and reduce their gradients in a fixed order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node; outstanding `Var`s become invalid.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf sharing storage with the caller.
    pub fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` gets an entry, zero-filled when
    /// the loss does not depend on it.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(KaratError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut out = Vec::with_capacity(nodes.len());
        for (id, node) in nodes.iter().enumerate() {
            let g = grads.get_mut(id).and_then(Option::take);
            let t = match (g, &node.op) {
                (Some(g), _) if node.needs_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
                }
                (None, Op::Leaf) if node.needs_grad => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            };
            out.push(t);
        }
        Ok(Gradients { grads: out })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = av.dims2();
            let n = bv.cols();
            acc(grads, nodes, *a, |s| matmul_nt_into(g, bv.data(), s, m, n, k));
            acc(grads, nodes, *b, |s| matmul_tn_into(av.data(), g, s, m, k, n));
        }
        Op::Transpose(a) => {
            let (m, n) = nodes[*a].value.dims2();
            acc(grads, nodes, *a, |s| {
                for i in 0..m {
                    for j in 0..n {
                        s[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |s| add_assign(s, g));
            acc(grads, nodes, *b, |s| add_assign(s, g));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |s| add_assign(s, g));
            acc(grads, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            acc(grads, nodes, *a, |s| {
                for ((x, gi), bi) in s.iter_mut().zip(g).zip(bv.data()) {
                    *x += gi * bi;
                }
            });
            acc(grads, nodes, *b, |s| {
                for ((x, gi), ai) in s.iter_mut().zip(g).zip(av.data()) {
                    *x += gi * ai;
                }
            });
        }
        Op::Scale(a, c) => acc(grads, nodes, *a, |s| {
            s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
        }),
        Op::AddRow(a, b) => {
            let n = nodes[*b].value.numel();
            acc(grads, nodes, *a, |s| add_assign(s, g));
            acc(grads, nodes, *b, |s| {
                for row in g.chunks_exact(n) {
                    add_assign(s, row);
                }
            });
        }
        Op::Sum(a) => acc(grads, nodes, *a, |s| s.iter_mut().for_each(|x| *x += g[0])),
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let n = y.cols();
            acc(grads, nodes, *a, |s| {
                for ((srow, yrow), grow) in s.chunks_exact_mut(n).zip(y.data().chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((x, yi), gi) in srow.iter_mut().zip(yrow).zip(grow) {
                        *x += yi * (gi - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let gv = &nodes[*gamma].value;
            let n = gv.numel();
            acc(grads, nodes, *gamma, |s| {
                for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for ((x, gi), hi) in s.iter_mut().zip(grow).zip(hrow) {
                        *x += gi * hi;
                    }
                }
            });
            acc(grads, nodes, *beta, |s| {
                for grow in g.chunks_exact(n) {
                    add_assign(s, grow);
                }
            });
            acc(grads, nodes, *x, |s| {
                let nf = n as f64;
                for (r, ((srow, grow), hrow)) in s
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(xhat.chunks_exact(n))
                    .enumerate()
                {
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for ((gi, gam), hi) in grow.iter().zip(gv.data()).zip(hrow) {
                        let d = gi * gam;
                        mean_d += d;
                        mean_dh += d * hi;
                    }
                    mean_d /= nf;
                    mean_dh /= nf;
                    for (((x, gi), gam), hi) in srow.iter_mut().zip(grow).zip(gv.data()).zip(hrow) {
                        *x += inv_std[r] * (gi * gam - mean_d - hi * mean_dh);
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let av = &nodes[*a].value;
            acc(grads, nodes, *a, |s| {
                for ((x, gi), xi) in s.iter_mut().zip(g).zip(av.data()) {
                    *x += gi * crate::basis::base_activation_grad(crate::basis::BaseActivation::Gelu, *xi).1;
                }
            });
        }
        Op::SliceCols { src, start } => {
            let (m, n) = nodes[*src].value.dims2();
            let w = node.value.cols();
            acc(grads, nodes, *src, |s| {
                for i in 0..m {
                    add_assign(&mut s[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let m = node.value.rows();
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                acc(grads, nodes, p, |s| {
                    for i in 0..m {
                        add_assign(&mut s[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                    }
                });
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                acc(grads, nodes, p, |s| add_assign(s, &g[off..off + len]));
                off += len;
            }
        }
        Op::SelectRow(src, i) => {
            let n = node.value.numel();
            acc(grads, nodes, *src, |s| add_assign(&mut s[i * n..(i + 1) * n], g));
        }
        Op::CrossEntropy { logits, target, probs } => {
            let mass: f64 = target.iter().sum();
            acc(grads, nodes, *logits, |s| {
                for ((x, p), t) in s.iter_mut().zip(probs).zip(target) {
                    *x += g[0] * (p * mass - t);
                }
            });
        }
        Op::UnitOperator { input, params, spec } => {
            let xv = &nodes[*input].value;
            let pv = &nodes[*params].value;
            let need_x = nodes[*input].needs_grad;
            let need_p = nodes[*params].needs_grad;
            let mut dx = if need_x { vec![0.0; xv.numel()] } else { Vec::new() };
            let mut dp = if need_p { vec![0.0; pv.numel()] } else { Vec::new() };
            kernels::operator_backward(spec, xv, pv, g, need_x.then_some(&mut dx[..]), need_p.then_some(&mut dp[..]));
            if need_x {
                acc(grads, nodes, *input, |s| add_assign(s, &dx));
            }
            if need_p {
                acc(grads, nodes, *params, |s| add_assign(s, &dp));
            }
        }
        Op::ProjectRows(src) => {
            let y = &node.value;
            acc(grads, nodes, *src, |s| {
                for ((x, gi), yi) in s.iter_mut().zip(g).zip(y.data()) {
                    if *yi > 0.0 {
                        *x += gi;
                    }
                }
            });
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(KaratError::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(KaratError::dim(format!("{what}: expected a matrix, got {:?}", t.shape())));
    }
    Ok(t.dims2())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn needs_any(&self, others: &[Var<'t>]) -> bool {
        self.requires_grad() || others.iter().any(Var::requires_grad)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = matrix(&a, "matmul")?;
        let (k2, n) = matrix(&b, "matmul")?;
        if k != k2 {
            return Err(KaratError::dim(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.push(t, Op::MatMul(self.id, other.id), self.needs_any(&[other])))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        matrix(&a, "transpose")?;
        Ok(self.tape.push(a.transpose(), Op::Transpose(self.id), self.requires_grad()))
    }

    fn zip_with(self, other: Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, what)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(t, op, self.needs_any(&[other])))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| c * x).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.push(t, Op::Scale(self.id, c), self.requires_grad())
    }

    /// Adds the vector `row` to every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        let (_, n) = a.dims2();
        if b.numel() != n {
            return Err(KaratError::dim(format!("add_row {:?} + {:?}", a.shape(), b.shape())));
        }
        let mut data = a.data().to_vec();
        for r in data.chunks_exact_mut(n) {
            add_assign(r, b.data());
        }
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(t, Op::AddRow(self.id, row.id), self.needs_any(&[row])))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        let t = softmax_rows(&a)?;
        Ok(self.tape.push(t, Op::SoftmaxRows(self.id), self.requires_grad()))
    }

    /// Per-row normalization followed by an affine map.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = matrix(&a, "layer_norm")?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.numel() != n || bv.numel() != n {
            return Err(KaratError::dim("layer_norm: affine parameters do not match width"));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = a.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = gv.data()[c] * h + bv.data()[c];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let needs = self.needs_any(&[gamma, beta]);
        Ok(self.tape.push(
            t,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
            needs,
        ))
    }

    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let data = a
            .data()
            .iter()
            .map(|&x| crate::basis::eval_base_activation(crate::basis::BaseActivation::Gelu, x))
            .collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.push(t, Op::Gelu(self.id), self.requires_grad())
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = matrix(&a, "slice_cols")?;
        if start + len > n {
            return Err(KaratError::dim(format!("slice_cols {start}+{len} > {n}")));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&a.row(i)[start..start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        Ok(self.tape.push(t, Op::SliceCols { src: self.id, start }, self.requires_grad()))
    }

    pub fn select_row(self, i: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, _) = matrix(&a, "select_row")?;
        if i >= m {
            return Err(KaratError::dim(format!("row {i} out of {m}")));
        }
        let t = Tensor::new(vec![1, a.cols()], a.row(i).to_vec())?;
        Ok(self.tape.push(t, Op::SelectRow(self.id, i), self.requires_grad()))
    }

    /// Smoothed cross-entropy `−Σ_c t_c log softmax(z)_c` of a single logit row.
    pub fn cross_entropy(self, target: &[f64]) -> Result<Var<'t>> {
        let z = self.value();
        if z.numel() != target.len() {
            return Err(KaratError::dim("cross_entropy: target width"));
        }
        let zmax = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.data().iter().map(|v| (v - zmax).exp()).sum();
        let lse = zmax + sum.ln();
        let probs: Vec<f64> = z.data().iter().map(|v| (v - lse).exp()).collect();
        let loss: f64 = -z.data().iter().zip(target).map(|(v, t)| t * (v - lse)).sum::<f64>();
        if !loss.is_finite() {
            return Err(KaratError::numeric("non-finite cross-entropy"));
        }
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, target: target.to_vec(), probs },
            self.requires_grad(),
        ))
    }

    /// `out[k, p] = Σ_q φ_pq(self[k, q])` with unit parameters `params[p, q, :]`.
    pub fn unit_operator(self, params: Var<'t>, spec: &BasisSpec) -> Result<Var<'t>> {
        let (x, p) = (self.value(), params.value());
        let out = kernels::operator_forward(spec, &x, &p)?;
        let needs = self.needs_any(&[params]);
        Ok(self.tape.push(
            out,
            Op::UnitOperator { input: self.id, params: params.id, spec: *spec },
            needs,
        ))
    }

    /// Projects every row onto the probability simplex.
    pub fn project_rows(self, grad: ProjectionGrad) -> Result<Var<'t>> {
        let a = self.value();
        let t = simplex::project_rows(&a)?;
        let needs = grad == ProjectionGrad::Masked && self.requires_grad();
        Ok(self.tape.push(t, Op::ProjectRows(self.id), needs))
    }
}

/// Concatenates matrices with equal row counts side by side.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| KaratError::dim("concat of nothing"))?;
    let tape = first.tape;
    let vals: Vec<_> = parts.iter().map(Var::value).collect();
    let m = vals[0].rows();
    if vals.iter().any(|v| v.rank() != 2 || v.rows() != m) {
        return Err(KaratError::dim("concat_cols: row counts differ"));
    }
    let total: usize = vals.iter().map(|v| v.cols()).sum();
    let mut data = Vec::with_capacity(m * total);
    for i in 0..m {
        for v in &vals {
            data.extend_from_slice(v.row(i));
        }
    }
    let needs = parts.iter().any(Var::requires_grad);
    let t = Tensor::new(vec![m, total], data)?;
    Ok(tape.push(t, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), needs))
}

/// Stacks matrices (or row vectors) with equal widths on top of each other.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| KaratError::dim("concat of nothing"))?;
    let tape = first.tape;
    let vals: Vec<_> = parts.iter().map(Var::value).collect();
    let n = vals[0].cols();
    if vals.iter().any(|v| v.cols() != n) {
        return Err(KaratError::dim("concat_rows: widths differ"));
    }
    let rows: usize = vals.iter().map(|v| v.numel() / n.max(1)).sum();
    let mut data = Vec::with_capacity(rows * n);
    for v in &vals {
        data.extend_from_slice(v.data());
    }
    let needs = parts.iter().any(Var::requires_grad);
    let t = Tensor::new(vec![rows, n], data)?;
    Ok(tape.push(t, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), needs))
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|x| x.is_nan()) {
        return Err(KaratError::numeric("softmax input contains NaN"));
    }
    let (m, n) = a.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = a.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut s = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - mx).exp();
            s += *o;
        }
        orow.iter_mut().for_each(|o| *o /= s);
    }
    Tensor::new(a.shape().to_vec(), out)
}

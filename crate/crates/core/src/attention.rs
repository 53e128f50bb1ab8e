//! Learnable attention activations.
//!
//! A KArAt head replaces the row-wise softmax of `A = QKᵀ/√d_h` by an
//! operator built from learnable scalar units (see [`crate::basis`]). Four
//! operator layouts are supported, all acting on each row `A_k` of one head:
//!
//! | layout     | parameters                          | row map                 |
//! |------------|-------------------------------------|-------------------------|
//! | `FullRank` | `Φ ∈ N×N` units                      | `Φ(A_k)`                |
//! | `PhiThenW` | `Φ̂ ∈ r×N` units, `W ∈ N×r`           | `W Φ̂(A_k)`              |
//! | `WThenPhi` | `W ∈ r×N`, `Φ̂ ∈ N×r` units           | `Φ̂(W A_k)`              |
//! | `PhiPhi`   | `Φ̂₁ ∈ r×N`, `Φ̂₂ ∈ N×r` units         | `Φ̂₂(Φ̂₁(A_k))`           |
//!
//! where `Φ(x)_p = Σ_q φ_pq(x_q)`. Unit coefficients live in a rank-3 tensor
//! `[rows, cols, params_per_unit]`.

use crate::basis::BasisSpec;
use crate::error::{KaratError, Result};
use crate::tape::{ProjectionGrad, Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    FullRank,
    PhiThenW,
    WThenPhi,
    PhiPhi,
}

impl Layout {
    pub fn name(&self) -> &'static str {
        match self {
            Layout::FullRank => "full",
            Layout::PhiThenW => "phi_w",
            Layout::WThenPhi => "w_phi",
            Layout::PhiPhi => "phi_phi",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sharing {
    /// Independent operators for every (block, head).
    Blockwise,
    /// One operator per head, shared by all blocks.
    Universal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadActivation {
    Softmax,
    Karat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KaratConfig {
    pub basis: BasisSpec,
    pub rank: usize,
    pub layout: Layout,
    pub sharing: Sharing,
    pub project: bool,
    pub project_grad: ProjectionGrad,
    /// Multiplies attention logits before they reach the units.
    pub input_scale: f64,
    /// Per-head activation; empty means every head uses KArAt.
    pub head_assignment: Vec<HeadActivation>,
}

impl KaratConfig {
    pub fn fourier(grid_size: usize, rank: usize) -> Self {
        Self {
            basis: BasisSpec::fourier(grid_size),
            rank,
            layout: Layout::PhiThenW,
            sharing: Sharing::Blockwise,
            project: false,
            project_grad: ProjectionGrad::Stop,
            input_scale: 1.0,
            head_assignment: Vec::new(),
        }
    }

    pub fn head(&self, i: usize) -> HeadActivation {
        self.head_assignment.get(i).copied().unwrap_or(HeadActivation::Karat)
    }

    /// Indices of heads that carry a learnable operator.
    pub fn karat_heads(&self, heads: usize) -> Vec<usize> {
        (0..heads).filter(|&i| self.head(i) == HeadActivation::Karat).collect()
    }

    pub fn validate(&self, n: usize, heads: usize) -> Result<()> {
        self.basis.validate()?;
        if !self.head_assignment.is_empty() && self.head_assignment.len() != heads {
            return Err(KaratError::config(format!(
                "head_assignment lists {} heads, model has {heads}",
                self.head_assignment.len()
            )));
        }
        if self.layout != Layout::FullRank && (self.rank == 0 || self.rank > n) {
            return Err(KaratError::config(format!(
                "rank {} must lie in 1..={n} for layout {}",
                self.rank,
                self.layout.name()
            )));
        }
        if !self.input_scale.is_finite() {
            return Err(KaratError::config("input_scale must be finite"));
        }
        Ok(())
    }

    /// Named tensor shapes of one operator acting on `n` tokens.
    pub fn operator_shapes(&self, n: usize) -> Vec<(&'static str, Vec<usize>)> {
        let p = self.basis.params_per_unit();
        let r = self.rank;
        match self.layout {
            Layout::FullRank => vec![("phi", vec![n, n, p])],
            Layout::PhiThenW => vec![("phi", vec![r, n, p]), ("proj", vec![n, r])],
            Layout::WThenPhi => vec![("proj", vec![r, n]), ("phi", vec![n, r, p])],
            Layout::PhiPhi => vec![("phi", vec![r, n, p]), ("phi2", vec![n, r, p])],
        }
    }

    /// Trainable scalars in one operator.
    pub fn operator_param_count(&self, n: usize) -> usize {
        self.operator_shapes(n)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Parameters of one learnable operator.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorParams {
    /// First (or only) unit matrix `[rows, cols, params_per_unit]`.
    pub phi: Tensor,
    /// Linear projector for the `PhiThenW` and `WThenPhi` layouts.
    pub proj: Option<Tensor>,
    /// Second unit matrix for `PhiPhi`.
    pub phi2: Option<Tensor>,
}

impl OperatorParams {
    /// Unit coefficients from the basis initializer; `W` entries ~ N(0, 1/fan_in).
    pub fn init<R: Rng + ?Sized>(cfg: &KaratConfig, n: usize, rng: &mut R) -> Self {
        let units = |rows: usize, cols: usize, rng: &mut R| {
            let p = cfg.basis.params_per_unit();
            let mut data = Vec::with_capacity(rows * cols * p);
            for _ in 0..rows * cols {
                data.extend(cfg.basis.init_unit(rng));
            }
            Tensor::new(vec![rows, cols, p], data).expect("unit tensor")
        };
        let r = cfg.rank;
        match cfg.layout {
            Layout::FullRank => Self { phi: units(n, n, rng), proj: None, phi2: None },
            Layout::PhiThenW => {
                let phi = units(r, n, rng);
                let proj = Tensor::randn(&[n, r], (1.0 / r as f64).sqrt(), rng);
                Self { phi, proj: Some(proj), phi2: None }
            }
            Layout::WThenPhi => {
                let proj = Tensor::randn(&[r, n], (1.0 / n as f64).sqrt(), rng);
                let phi = units(n, r, rng);
                Self { phi, proj: Some(proj), phi2: None }
            }
            Layout::PhiPhi => {
                let phi = units(r, n, rng);
                let phi2 = units(n, r, rng);
                Self { phi, proj: None, phi2: Some(phi2) }
            }
        }
    }

    /// Tensors in the order of [`KaratConfig::operator_shapes`].
    pub fn tensors(&self, layout: Layout) -> Vec<&Tensor> {
        match layout {
            Layout::FullRank => vec![&self.phi],
            Layout::PhiThenW => vec![&self.phi, self.proj.as_ref().expect("proj")],
            Layout::WThenPhi => vec![self.proj.as_ref().expect("proj"), &self.phi],
            Layout::PhiPhi => vec![&self.phi, self.phi2.as_ref().expect("phi2")],
        }
    }

    pub fn from_tensors(layout: Layout, mut ts: Vec<Tensor>) -> Self {
        match layout {
            Layout::FullRank => Self { phi: ts.remove(0), proj: None, phi2: None },
            Layout::PhiThenW => {
                let proj = ts.remove(1);
                Self { phi: ts.remove(0), proj: Some(proj), phi2: None }
            }
            Layout::WThenPhi => {
                let phi = ts.remove(1);
                Self { phi, proj: Some(ts.remove(0)), phi2: None }
            }
            Layout::PhiPhi => {
                let phi2 = ts.remove(1);
                Self { phi: ts.remove(0), proj: None, phi2: Some(phi2) }
            }
        }
    }

    fn check(&self, cfg: &KaratConfig, n: usize) -> Result<()> {
        let want = cfg.operator_shapes(n);
        for ((name, shape), t) in want.iter().zip(self.tensors(cfg.layout)) {
            if t.shape() != shape.as_slice() {
                return Err(KaratError::dim(format!(
                    "operator tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// Operator parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct OperatorVars<'t> {
    pub phi: Var<'t>,
    pub proj: Option<Var<'t>>,
    pub phi2: Option<Var<'t>>,
}

impl<'t> OperatorVars<'t> {
    pub fn from_vars(layout: Layout, vars: &[Var<'t>]) -> Self {
        match layout {
            Layout::FullRank => Self { phi: vars[0], proj: None, phi2: None },
            Layout::PhiThenW => Self { phi: vars[0], proj: Some(vars[1]), phi2: None },
            Layout::WThenPhi => Self { phi: vars[1], proj: Some(vars[0]), phi2: None },
            Layout::PhiPhi => Self { phi: vars[0], proj: None, phi2: Some(vars[1]) },
        }
    }

    pub fn record(tape: &'t Tape, params: &OperatorParams, layout: Layout, requires_grad: bool) -> Self {
        let vars: Vec<_> = params
            .tensors(layout)
            .into_iter()
            .map(|t| tape.leaf(std::sync::Arc::new(t.clone()), requires_grad))
            .collect();
        Self::from_vars(layout, &vars)
    }
}

/// One operator applied to a single vector: `out_p = Σ_q φ_pq(row_q)`.
pub fn apply_operator(phi: &Tensor, spec: &BasisSpec, row: &[f64]) -> Result<Vec<f64>> {
    let x = Tensor::new(vec![1, row.len()], row.to_vec())?;
    Ok(kernels::operator_forward(spec, &x, phi)?.into_data())
}

/// The learnable activation applied to every row of one head's logits.
pub fn karat_activate_var<'t>(a: Var<'t>, cfg: &KaratConfig, ops: &OperatorVars<'t>) -> Result<Var<'t>> {
    let a = if cfg.input_scale == 1.0 { a } else { a.scale(cfg.input_scale) };
    let spec = &cfg.basis;
    let proj = || ops.proj.ok_or_else(|| KaratError::config("layout needs a projector"));
    let out = match cfg.layout {
        Layout::FullRank => a.unit_operator(ops.phi, spec)?,
        Layout::PhiThenW => a.unit_operator(ops.phi, spec)?.matmul(proj()?.transpose()?)?,
        Layout::WThenPhi => a.matmul(proj()?.transpose()?)?.unit_operator(ops.phi, spec)?,
        Layout::PhiPhi => {
            let phi2 = ops.phi2.ok_or_else(|| KaratError::config("layout needs a second operator"))?;
            a.unit_operator(ops.phi, spec)?.unit_operator(phi2, spec)?
        }
    };
    if cfg.project {
        out.project_rows(cfg.project_grad)
    } else {
        Ok(out)
    }
}

/// Plain-tensor form of [`karat_activate_var`].
pub fn karat_activate(a: &Tensor, cfg: &KaratConfig, params: &OperatorParams) -> Result<Tensor> {
    let n = a.cols();
    if a.rank() != 2 || a.rows() != n {
        return Err(KaratError::dim(format!("attention must be square, got {:?}", a.shape())));
    }
    cfg.validate(n, cfg.head_assignment.len().max(1))?;
    params.check(cfg, n)?;
    let tape = Tape::new();
    let av = tape.constant(a.clone());
    let ops = OperatorVars::record(&tape, params, cfg.layout, false);
    Ok((*karat_activate_var(av, cfg, &ops)?.value()).clone())
}

/// Row activation of one head.
#[derive(Clone, Copy, Debug)]
pub enum Activation<'a, 't> {
    Softmax,
    Karat(&'a KaratConfig, OperatorVars<'t>),
    /// A precomputed post-activation matrix used in place of `σ(A)`.
    Fixed(Var<'t>),
}

/// Pre- and post-activation attention together with the head output.
pub struct HeadOutput<'t> {
    pub logits: Var<'t>,
    pub attention: Var<'t>,
    pub output: Var<'t>,
}

/// `A = QKᵀ/√d_h`, `Ā = σ(A)`, returns `Ā V`.
pub fn attention_head_var<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    act: Activation<'_, 't>,
) -> Result<HeadOutput<'t>> {
    let dh = q.value().cols();
    let logits = q.matmul(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
    let attention = match act {
        Activation::Softmax => logits.softmax_rows()?,
        Activation::Karat(cfg, ops) => karat_activate_var(logits, cfg, &ops)?,
        Activation::Fixed(m) => m,
    };
    let output = attention.matmul(v)?;
    Ok(HeadOutput { logits, attention, output })
}

/// Plain-tensor head forward; `karat` selects the learnable activation.
pub fn attention_head_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    karat: Option<(&KaratConfig, &OperatorParams)>,
) -> Result<Tensor> {
    let tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let act = match karat {
        None => Activation::Softmax,
        Some((cfg, params)) => {
            params.check(cfg, q.rows())?;
            Activation::Karat(cfg, OperatorVars::record(&tape, params, cfg.layout, false))
        }
    };
    let out = attention_head_var(qv, kv, vv, act)?;
    Ok((*out.output.value()).clone())
}

/// Operator parameter sets with their (layer, head) assignment.
///
/// Universal sharing stores one set per KArAt head and every layer points
/// at it, so a single update changes all uses at once.
#[derive(Clone, Debug)]
pub struct SharedOperators {
    pub sets: Vec<OperatorParams>,
    slots: Vec<Vec<Option<usize>>>,
}

impl SharedOperators {
    /// Index into `sets` used by `(layer, head)`; `None` for softmax heads.
    pub fn slot(&self, layer: usize, head: usize) -> Option<usize> {
        self.slots[layer][head]
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&OperatorParams> {
        self.slot(layer, head).map(|s| &self.sets[s])
    }

    pub fn param_count(&self) -> usize {
        self.sets
            .iter()
            .map(|s| s.phi.numel() + s.proj.as_ref().map_or(0, Tensor::numel) + s.phi2.as_ref().map_or(0, Tensor::numel))
            .sum()
    }
}

/// Slot table for `layers × heads` under the configured sharing mode.
pub fn operator_slots(cfg: &KaratConfig, heads: usize, layers: usize) -> (usize, Vec<Vec<Option<usize>>>) {
    let karat = cfg.karat_heads(heads);
    let mut slots = vec![vec![None; heads]; layers];
    let mut next = 0;
    match cfg.sharing {
        Sharing::Universal => {
            for &h in &karat {
                for row in slots.iter_mut() {
                    row[h] = Some(next);
                }
                next += 1;
            }
        }
        Sharing::Blockwise => {
            for row in slots.iter_mut() {
                for &h in &karat {
                    row[h] = Some(next);
                    next += 1;
                }
            }
        }
    }
    (next, slots)
}

/// Builds the operator sets for a model with `heads` heads and `layers` blocks.
pub fn make_shared_params(cfg: &KaratConfig, n: usize, heads: usize, layers: usize, seed: u64) -> SharedOperators {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (count, slots) = operator_slots(cfg, heads, layers);
    let sets = (0..count).map(|_| OperatorParams::init(cfg, n, &mut rng)).collect();
    SharedOperators { sets, slots }
}

/// Closed-form count of trainable activation parameters.
///
/// Fourier `PhiThenW`: `h_K · L · (2G·r·N + N·r)` blockwise and
/// `h_K · (2G·r·N + N·r)` universal, with `h_K` the number of KArAt heads.
/// Other layouts replace the bracket by their own operator size
/// (`N²P`, `rN + NrP`, `2rNP` with `P` parameters per unit).
pub fn count_activation_params(cfg: &KaratConfig, n: usize, heads: usize, layers: usize) -> usize {
    let per_op = cfg.operator_param_count(n);
    let karat = cfg.karat_heads(heads).len();
    match cfg.sharing {
        Sharing::Blockwise => karat * layers * per_op,
        Sharing::Universal => karat * per_op,
    }
}

pub mod kernels {
    //! Forward and backward passes of a unit matrix over a batch of rows.

    use crate::basis::{base_activation_grad, eval_base_activation, BasisKind, BasisSpec};
    use crate::error::{KaratError, Result};
    use crate::tensor::Tensor;

    fn check(spec: &BasisSpec, x: &Tensor, p: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (n, cols) = x.dims2();
        let ppu = spec.params_per_unit();
        if p.rank() != 3 || p.shape()[1] != cols || p.shape()[2] != ppu {
            return Err(KaratError::dim(format!(
                "unit matrix {:?} cannot act on rows of width {cols} with {ppu} parameters per unit",
                p.shape()
            )));
        }
        Ok((n, cols, p.shape()[0], ppu))
    }

    /// `out[k, p] = Σ_q φ_pq(x[k, q])`.
    pub fn operator_forward(spec: &BasisSpec, x: &Tensor, p: &Tensor) -> Result<Tensor> {
        let (n, cols, rows, ppu) = check(spec, x, p)?;
        let pd = p.data();
        let mut out = vec![0.0; n * rows];
        if spec.kind == BasisKind::Fourier {
            let g = spec.grid_size;
            let mut cs = vec![0.0; g];
            let mut sn = vec![0.0; g];
            for k in 0..n {
                let orow = &mut out[k * rows..(k + 1) * rows];
                for q in 0..cols {
                    let xv = x.data()[k * cols + q];
                    for m in 0..g {
                        let t = (m + 1) as f64 * xv;
                        cs[m] = t.cos();
                        sn[m] = t.sin();
                    }
                    let base = eval_base_activation(spec.base, xv);
                    for (pi, o) in orow.iter_mut().enumerate() {
                        let c = &pd[(pi * cols + q) * ppu..(pi * cols + q + 1) * ppu];
                        let mut s = 0.0;
                        for m in 0..g {
                            s += c[m] * cs[m] + c[g + m] * sn[m];
                        }
                        if spec.fourier_dc {
                            s += c[2 * g];
                        }
                        *o += s + base;
                    }
                }
            }
        } else {
            for k in 0..n {
                for q in 0..cols {
                    let xv = x.data()[k * cols + q];
                    for pi in 0..rows {
                        let c = &pd[(pi * cols + q) * ppu..(pi * cols + q + 1) * ppu];
                        out[k * rows + pi] += spec.eval(c, xv);
                    }
                }
            }
        }
        Tensor::new(vec![n, rows], out)
    }

    /// Accumulates input and parameter gradients for upstream gradient `g`.
    pub fn operator_backward(
        spec: &BasisSpec,
        x: &Tensor,
        p: &Tensor,
        g: &[f64],
        mut dx: Option<&mut [f64]>,
        mut dp: Option<&mut [f64]>,
    ) {
        let (n, cols, rows, ppu) = check(spec, x, p).expect("checked in forward");
        let pd = p.data();
        let mut unit_grad = vec![0.0; ppu];
        if spec.kind == BasisKind::Fourier {
            let g_size = spec.grid_size;
            let mut cs = vec![0.0; g_size];
            let mut sn = vec![0.0; g_size];
            for k in 0..n {
                for q in 0..cols {
                    let xv = x.data()[k * cols + q];
                    for m in 0..g_size {
                        let t = (m + 1) as f64 * xv;
                        cs[m] = t.cos();
                        sn[m] = t.sin();
                    }
                    let dbase = base_activation_grad(spec.base, xv).1;
                    let mut dxv = 0.0;
                    for pi in 0..rows {
                        let gk = g[k * rows + pi];
                        if gk == 0.0 {
                            continue;
                        }
                        let off = (pi * cols + q) * ppu;
                        let c = &pd[off..off + ppu];
                        if dx.is_some() {
                            let mut d = dbase;
                            for m in 0..g_size {
                                let mf = (m + 1) as f64;
                                d += mf * (c[g_size + m] * cs[m] - c[m] * sn[m]);
                            }
                            dxv += gk * d;
                        }
                        if let Some(dp) = dp.as_deref_mut() {
                            let slot = &mut dp[off..off + ppu];
                            for m in 0..g_size {
                                slot[m] += gk * cs[m];
                                slot[g_size + m] += gk * sn[m];
                            }
                            if spec.fourier_dc {
                                slot[2 * g_size] += gk;
                            }
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[k * cols + q] += dxv;
                    }
                }
            }
        } else {
            for k in 0..n {
                for q in 0..cols {
                    let xv = x.data()[k * cols + q];
                    let mut dxv = 0.0;
                    for pi in 0..rows {
                        let gk = g[k * rows + pi];
                        if gk == 0.0 {
                            continue;
                        }
                        let off = (pi * cols + q) * ppu;
                        let (_, d) = spec.eval_grad(&pd[off..off + ppu], xv, &mut unit_grad);
                        dxv += gk * d;
                        if let Some(dp) = dp.as_deref_mut() {
                            for (s, u) in dp[off..off + ppu].iter_mut().zip(&unit_grad) {
                                *s += gk * u;
                            }
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[k * cols + q] += dxv;
                    }
                }
            }
        }
    }
}

//! Parameter and FLOP accounting with the published reference figures alongside.

use karat_core::attention::{count_activation_params, KaratConfig, Layout, Sharing};
use karat_core::basis::BasisKind;
use karat_core::vit::{AttentionKind, VitConfig};
use std::fmt::Write as _;

/// Cost constants of the FLOP model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopConstants {
    /// Per multiply-accumulate of a projector `W`.
    pub projector: f64,
    /// Per Fourier frequency of one unit evaluation.
    pub trig: f64,
    /// Per attention logit for softmax.
    pub softmax: f64,
}

impl Default for FlopConstants {
    fn default() -> Self {
        Self { projector: 1.0, trig: 3.0, softmax: 3.0 }
    }
}

/// A computed quantity next to its published reference value.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub quantity: &'static str,
    pub computed: f64,
    pub published: f64,
    /// Relative difference above which the pair is flagged.
    pub tolerance: f64,
}

impl Reference {
    pub fn relative_diff(&self) -> f64 {
        (self.computed - self.published).abs() / self.published.abs()
    }

    pub fn flagged(&self) -> bool {
        self.relative_diff() > self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accounting {
    pub tokens: usize,
    pub backbone_params: usize,
    /// Basis coefficients of all unit matrices.
    pub unit_params: usize,
    /// Entries of all projectors `W`.
    pub projector_params: usize,
    pub backbone_macs: f64,
    pub softmax_flops: f64,
    pub karat_flops: f64,
    pub references: Vec<Reference>,
}

impl Accounting {
    pub fn activation_params(&self) -> usize {
        self.unit_params + self.projector_params
    }

    pub fn total_params(&self) -> usize {
        self.backbone_params + self.activation_params()
    }

    pub fn activation_flops(&self) -> f64 {
        self.softmax_flops + self.karat_flops
    }

    pub fn total_flops(&self) -> f64 {
        self.backbone_macs + self.activation_flops()
    }

    /// Human-readable table; flagged references carry `FLAG`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tokens               {}", self.tokens);
        let _ = writeln!(s, "backbone params      {}", self.backbone_params);
        let _ = writeln!(s, "unit params          {}", self.unit_params);
        let _ = writeln!(s, "projector params     {}", self.projector_params);
        let _ = writeln!(s, "activation params    {}", self.activation_params());
        let _ = writeln!(s, "total params         {}", self.total_params());
        let _ = writeln!(s, "backbone GMACs       {:.3}", self.backbone_macs / 1e9);
        let _ = writeln!(s, "activation GFLOPs    {:.3}", self.activation_flops() / 1e9);
        let _ = writeln!(s, "total GFLOPs         {:.3}", self.total_flops() / 1e9);
        for r in &self.references {
            let _ = writeln!(
                s,
                "reference {:<22} computed {:>14.6e} published {:>14.6e} diff {:>6.2}% {}",
                r.quantity,
                r.computed,
                r.published,
                100.0 * r.relative_diff(),
                if r.flagged() { "FLAG" } else { "ok" }
            );
        }
        s
    }
}

/// Unit-matrix evaluations and projector multiply-accumulates per attention row.
fn per_row_costs(k: &KaratConfig, n: usize) -> (f64, f64) {
    let r = k.rank as f64;
    let n = n as f64;
    let (units, proj) = match k.layout {
        Layout::FullRank => (n * n, 0.0),
        Layout::PhiThenW | Layout::WThenPhi => (r * n, r * n),
        Layout::PhiPhi => (2.0 * r * n, 0.0),
    };
    (units, proj)
}

fn unit_cost(k: &KaratConfig, c: &FlopConstants) -> f64 {
    match k.basis.kind {
        BasisKind::Fourier => c.trig * k.basis.grid_size as f64,
        _ => k.basis.params_per_unit() as f64,
    }
}

/// Published parameter/FLOP figures keyed by geometry and activation.
fn published(cfg: &VitConfig) -> Vec<(&'static str, f64)> {
    if cfg.image_size != 224 || cfg.patch != 16 || cfg.channels != 3 || cfg.depth != 12 {
        return Vec::new();
    }
    let base = match (cfg.dim, cfg.heads) {
        (192, 3) => (5.53e6, 0.005e9, 1.262e9),
        (384, 6) => (22.05e6, 0.008e9, 4.614e9),
        (768, 12) => (85.81e6, 0.016e9, 17.595e9),
        _ => return Vec::new(),
    };
    let mut out = vec![("backbone params", base.0)];
    match &cfg.attention {
        AttentionKind::Softmax => {
            out.push(("activation GFLOPs", base.1));
            out.push(("total GFLOPs", base.2));
        }
        AttentionKind::Karat(k) => {
            let fourier_r12 = k.basis.kind == BasisKind::Fourier
                && k.layout == Layout::PhiThenW
                && k.rank == 12
                && k.head_assignment.is_empty();
            if !fourier_r12 {
                return out;
            }
            let row = match (cfg.dim, k.basis.grid_size, k.sharing) {
                (192, 3, Sharing::Blockwise) => Some((0.76e6, 0.168e9, 1.425e9)),
                (192, 3, Sharing::Universal) => Some((0.06e6, 0.168e9, 1.425e9)),
                (384, 3, Sharing::Blockwise) => Some((1.53e6, 0.335e9, 4.941e9)),
                (384, 3, Sharing::Universal) => Some((0.13e6, 0.335e9, 4.941e9)),
                (768, 1, Sharing::Blockwise) => Some((1.70e6, 0.268e9, 17.847e9)),
                (768, 1, Sharing::Universal) => Some((0.14e6, 0.268e9, 17.847e9)),
                _ => None,
            };
            if let Some((p, a, t)) = row {
                out.push(("activation params", p));
                out.push(("activation GFLOPs", a));
                out.push(("total GFLOPs", t));
            }
        }
    }
    out
}

pub fn count_params_flops(cfg: &VitConfig) -> Accounting {
    count_with(cfg, &FlopConstants::default())
}

/// Exact parameter counts and the FLOP model:
/// backbone multiply-accumulates (embedding, projections, `QKᵀ`, `AV`, MLP, head),
/// `softmax·N²` per softmax head and layer, and per KArAt head and layer
/// `N · (units · unit_cost + projector · W entries)`.
pub fn count_with(cfg: &VitConfig, c: &FlopConstants) -> Accounting {
    let n = cfg.tokens();
    let (nf, d, l) = (n as f64, cfg.dim as f64, cfg.depth as f64);
    let hidden = (cfg.mlp_ratio * cfg.dim) as f64;
    let backbone_macs = (n - 1) as f64 * cfg.patch_dim() as f64 * d
        + l * (4.0 * nf * d * d + 2.0 * nf * nf * d + 2.0 * nf * d * hidden)
        + d * cfg.classes as f64;

    let (mut unit_params, mut projector_params) = (0, 0);
    let (mut softmax_heads, mut karat_flops) = (cfg.heads, 0.0);
    if let AttentionKind::Karat(k) = &cfg.attention {
        let total = count_activation_params(k, n, cfg.heads, cfg.depth);
        let per_op = k.operator_param_count(n);
        let proj_per_op: usize = k
            .operator_shapes(n)
            .iter()
            .filter(|(name, _)| *name == "proj")
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        let ops = if per_op == 0 { 0 } else { total / per_op };
        projector_params = ops * proj_per_op;
        unit_params = total - projector_params;
        let kh = k.karat_heads(cfg.heads).len();
        softmax_heads -= kh;
        let (units, proj) = per_row_costs(k, n);
        karat_flops = nf * (units * unit_cost(k, c) + c.projector * proj) * kh as f64 * l;
    }
    let softmax_flops = c.softmax * nf * nf * softmax_heads as f64 * l;

    let mut acc = Accounting {
        tokens: n,
        backbone_params: cfg.backbone_param_count(),
        unit_params,
        projector_params,
        backbone_macs,
        softmax_flops,
        karat_flops,
        references: Vec::new(),
    };
    for (quantity, published) in published(cfg) {
        let computed = match quantity {
            "backbone params" => acc.backbone_params as f64,
            "activation params" => acc.activation_params() as f64,
            "activation GFLOPs" => acc.activation_flops(),
            _ => acc.total_flops(),
        };
        let tolerance = if quantity.ends_with("GFLOPs") { 0.05 } else { 0.01 };
        acc.references.push(Reference { quantity, computed, published, tolerance });
    }
    acc
}

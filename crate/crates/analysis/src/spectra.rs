//! Singular-value scans of attention matrices and the scree elbow rule.

use crate::svd::svd;
use karat_core::vit::Vit;
use karat_core::{KaratError, Result, Tensor};
use rayon::prelude::*;
use std::fmt::Write as _;

/// Which side of the attention activation a matrix comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pre,
    Post,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pre => "pre",
            Stage::Post => "post",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumEntry {
    pub layer: usize,
    pub head: usize,
    pub sample: usize,
    pub stage: Stage,
    pub sigma: Vec<f64>,
}

/// Per-index aggregate of `ln σᵢ` over all matrices of one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogSigmaStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SpectraReport {
    pub entries: Vec<SpectrumEntry>,
    /// Worst `‖A − USVᵀ‖_F / ‖A‖_F` over every analysed matrix.
    pub max_reconstruction_error: f64,
    /// Worst `|‖A·1‖ − √N|` over post-activation matrices whose rows sum to one.
    pub max_row_sum_deviation: Option<f64>,
}

impl SpectraReport {
    pub fn aggregate(&self, stage: Stage) -> Vec<LogSigmaStats> {
        let rows: Vec<&SpectrumEntry> = self.entries.iter().filter(|e| e.stage == stage).collect();
        let Some(first) = rows.first() else { return Vec::new() };
        (0..first.sigma.len())
            .map(|i| {
                let logs: Vec<f64> = rows.iter().map(|e| e.sigma[i].ln()).collect();
                LogSigmaStats {
                    min: logs.iter().cloned().fold(f64::INFINITY, f64::min),
                    mean: logs.iter().sum::<f64>() / logs.len() as f64,
                    max: logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect()
    }

    /// `layer,head,sample,index,sigma` rows for one stage.
    pub fn csv(&self, stage: Stage) -> String {
        let mut s = String::from("layer,head,sample,index,sigma\n");
        for e in self.entries.iter().filter(|e| e.stage == stage) {
            for (i, v) in e.sigma.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{}", e.layer, e.head, e.sample, i, v);
            }
        }
        s
    }
}

/// `max_i |Σ_j A_ij − 1|`.
pub fn row_sum_defect(a: &Tensor) -> f64 {
    (0..a.rows()).map(|i| (a.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

/// `|‖A·1‖₂ − √N|`; zero for any row-stochastic matrix.
pub fn ones_image_defect(a: &Tensor) -> f64 {
    let n = a.rows();
    let norm = (0..n).map(|i| a.row(i).iter().sum::<f64>().powi(2)).sum::<f64>().sqrt();
    (norm - (n as f64).sqrt()).abs()
}

/// SVD of every pre- and post-activation attention matrix in `layers` for every sample.
pub fn spectral_scan(model: &Vit, samples: &[Tensor], layers: &[usize]) -> Result<SpectraReport> {
    if samples.is_empty() {
        return Err(KaratError::config("spectral scan needs at least one sample"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= model.cfg.depth) {
        return Err(KaratError::config(format!("layer {bad} out of range for depth {}", model.cfg.depth)));
    }
    let per_sample: Vec<Result<Vec<(SpectrumEntry, f64, Option<f64>)>>> = samples
        .par_iter()
        .enumerate()
        .map(|(sample, img)| {
            let all = model.extract_all_attention(img)?;
            let mut out = Vec::new();
            for &layer in layers {
                let (pre, post) = &all[layer];
                for (stage, mats) in [(Stage::Pre, pre), (Stage::Post, post)] {
                    for (head, a) in mats.iter().enumerate() {
                        let d = svd(a).map_err(|e| {
                            KaratError::numeric(format!("layer {layer} head {head} sample {sample} {}: {e}", stage.name()))
                        })?;
                        let err = d.relative_error(a);
                        let ones = (stage == Stage::Post && row_sum_defect(a) < 1e-9).then(|| ones_image_defect(a));
                        out.push((SpectrumEntry { layer, head, sample, stage, sigma: d.s }, err, ones));
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut report = SpectraReport::default();
    for r in per_sample {
        for (e, err, ones) in r? {
            report.max_reconstruction_error = report.max_reconstruction_error.max(err);
            if let Some(d) = ones {
                report.max_row_sum_deviation = Some(report.max_row_sum_deviation.unwrap_or(0.0).max(d));
            }
            report.entries.push(e);
        }
    }
    Ok(report)
}

/// Outcome of the elbow rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scree {
    pub count: usize,
    pub no_elbow: bool,
}

/// Smallest peak second difference that still counts as an elbow.
pub const ELBOW_THRESHOLD: f64 = 0.5;

/// Number of significant singular values by the elbow of `ℓᵢ = ln(σᵢ + ε)`.
///
/// `ε = 1e-10·σ₁`. The count is the index `i` (0-based) maximising
/// `ℓᵢ₋₁ − 2ℓᵢ + ℓᵢ₊₁`; ties go to the smallest index. When no second
/// difference reaches [`ELBOW_THRESHOLD`] the spectrum has no elbow and the
/// count is the full length. An all-zero spectrum counts 0.
pub fn scree_count(sigma: &[f64]) -> Scree {
    let top = sigma.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Scree { count: 0, no_elbow: false };
    }
    if sigma.len() < 3 {
        return Scree { count: sigma.len(), no_elbow: true };
    }
    let eps = 1e-10 * top;
    let l: Vec<f64> = sigma.iter().map(|s| (s.max(0.0) + eps).ln()).collect();
    let (mut best, mut at) = (f64::NEG_INFINITY, 0);
    for i in 1..l.len() - 1 {
        let d = l[i - 1] - 2.0 * l[i] + l[i + 1];
        if d > best {
            best = d;
            at = i;
        }
    }
    if best < ELBOW_THRESHOLD {
        Scree { count: sigma.len(), no_elbow: true }
    } else {
        Scree { count: at, no_elbow: false }
    }
}

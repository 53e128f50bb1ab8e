//! Loss surfaces along the top two principal directions of a training trajectory.

use crate::svd::svd;
use karat_core::checkpoint::Checkpoint;
use karat_core::vit::{Vit, VitConfig};
use karat_core::{KaratError, Result, Tensor};
use karat_harness::data::Dataset;
use karat_harness::train::evaluate;
use rayon::prelude::*;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandscapeOptions {
    /// Points per axis.
    pub resolution: usize,
    /// Grid spans `[-extent, extent]` on both axes.
    pub extent: f64,
    /// Rescale each weight tensor's slice of a direction to that tensor's norm;
    /// vector-shaped tensors get no displacement.
    pub filter_normalize: bool,
}

impl Default for LandscapeOptions {
    fn default() -> Self {
        Self { resolution: 41, extent: 1.0, filter_normalize: false }
    }
}

#[derive(Clone, Debug)]
pub struct LandscapeGrid {
    pub directions: [Vec<f64>; 2],
    /// Singular values of the delta matrix belonging to the two directions.
    pub sigma: [f64; 2],
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[i * betas.len() + j]` is the loss at `(alphas[i], betas[j])`.
    pub losses: Vec<f64>,
    pub anchor_loss: f64,
}

impl LandscapeGrid {
    pub fn loss_at(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.betas.len() + j]
    }

    /// `alpha,beta,loss` rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("alpha,beta,loss\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                let _ = writeln!(s, "{a},{b},{}", self.loss_at(i, j));
            }
        }
        s
    }
}

fn rank_deficient(msg: impl std::fmt::Display) -> KaratError {
    KaratError::Contract(format!("rank-deficient trajectory: {msg}"))
}

/// Top-2 left singular vectors of the `P×T` matrix whose columns are `θₜ − θ_anchor`.
///
/// The anchor is the last entry of `trajectory`. Returns the directions and their
/// singular values.
pub fn principal_directions(trajectory: &[Vec<f64>]) -> Result<([Vec<f64>; 2], [f64; 2])> {
    if trajectory.len() < 3 {
        return Err(rank_deficient(format!(
            "{} checkpoints give fewer than 2 parameter deltas",
            trajectory.len()
        )));
    }
    let anchor = trajectory.last().expect("non-empty");
    let p = anchor.len();
    if trajectory.iter().any(|t| t.len() != p) {
        return Err(KaratError::dim("checkpoints differ in parameter count"));
    }
    let t = trajectory.len() - 1;
    let mut d = Tensor::zeros(&[p, t]);
    for (c, theta) in trajectory[..t].iter().enumerate() {
        for i in 0..p {
            d.set2(i, c, theta[i] - anchor[i]);
        }
    }
    let dec = svd(&d)?;
    let (s1, s2) = (dec.s[0], dec.s[1]);
    if !(s1 > 0.0) || s2 <= 1e-10 * s1 {
        return Err(rank_deficient(format!("second singular value {s2:e} against first {s1:e}")));
    }
    let col = |k: usize| (0..p).map(|i| dec.u.get2(i, k)).collect::<Vec<f64>>();
    Ok(([col(0), col(1)], [s1, s2]))
}

fn filter_normalize(dir: &mut [f64], model: &Vit) {
    let mut off = 0;
    for i in 0..model.params.len() {
        let t = model.params.get(i);
        let n = t.numel();
        let slice = &mut dir[off..off + n];
        if t.rank() >= 2 {
            let dn = slice.iter().map(|x| x * x).sum::<f64>().sqrt();
            let tn = t.frobenius_norm();
            let k = if dn > 0.0 { tn / dn } else { 0.0 };
            slice.iter_mut().for_each(|x| *x *= k);
        } else {
            slice.iter_mut().for_each(|x| *x = 0.0);
        }
        off += n;
    }
}

fn axis(res: usize, extent: f64) -> Vec<f64> {
    if res <= 1 {
        return vec![0.0];
    }
    let m = (res - 1) as f64;
    (0..res).map(|i| extent * (2.0 * i as f64 - m) / m).collect()
}

/// Mean cross-entropy on `data` over a grid around the last checkpoint.
pub fn loss_landscape(
    trajectory: &[Checkpoint],
    cfg: &VitConfig,
    data: &Dataset,
    opts: &LandscapeOptions,
) -> Result<LandscapeGrid> {
    let mut model = Vit::new(cfg.clone(), 0)?;
    let mut flats = Vec::with_capacity(trajectory.len());
    for c in trajectory {
        model.load_checkpoint(c)?;
        flats.push(model.params.flatten());
    }
    let (mut directions, sigma) = principal_directions(&flats)?;
    if opts.filter_normalize {
        for d in &mut directions {
            filter_normalize(d, &model);
        }
    }
    let anchor = flats.pop().expect("checked length");
    model.params.assign_flat(&anchor)?;
    let anchor_loss = evaluate(&model, data)?.loss;

    let alphas = axis(opts.resolution, opts.extent);
    let betas = alphas.clone();
    let points: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| betas.iter().map(move |&b| (a, b))).collect();
    let losses = points
        .par_iter()
        .map(|&(a, b)| {
            let theta: Vec<f64> = anchor
                .iter()
                .zip(&directions[0])
                .zip(&directions[1])
                .map(|((t, u), v)| t + a * u + b * v)
                .collect();
            let mut m = model.clone();
            m.params.assign_flat(&theta)?;
            Ok(evaluate(&m, data)?.loss)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LandscapeGrid { directions, sigma, alphas, betas, losses, anchor_loss })
}

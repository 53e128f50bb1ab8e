//! Mini-batch training with per-sample tapes reduced in a fixed order.

use crate::data::{Augment, Dataset};
use crate::optim::{clip_grad_norm, lr_at, AdamW, Schedule};
use karat_core::checkpoint::Checkpoint;
use karat_core::vit::{ForwardOptions, Vit, VitConfig};
use karat_core::{KaratError, Result, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,top1,top5";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub label_smoothing: f64,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 20,
            base_lr: 1e-3,
            warmup_lr: 1e-6,
            min_lr: 1e-5,
            warmup_epochs: 2,
            weight_decay: 0.05,
            grad_clip: 1.0,
            seed: 0,
            label_smoothing: 0.1,
            eval_every: 1,
            augment: Augment::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KaratError::config(m));
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.min_lr < 0.0 || self.warmup_lr < 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("min_lr, warmup_lr, weight_decay and grad_clip must be nonnegative".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_lr: self.warmup_lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.epoch, self.step, self.lr, self.train_loss, opt(self.top1), opt(self.top5))
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub model: Vit,
    pub metrics: Vec<MetricsRow>,
    /// Per-epoch checkpoint files, in epoch order.
    pub checkpoints: Vec<PathBuf>,
    pub best: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub grad_norms: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
}

/// Rank of `label` among the logits; ties go to the lower class index.
pub(crate) fn label_rank(logits: &[f64], label: usize) -> usize {
    let t = logits[label];
    logits.iter().enumerate().filter(|&(j, &v)| v > t || (v == t && j < label)).count()
}

/// Top-1/top-5 accuracy and mean unsmoothed cross-entropy, no augmentation.
pub fn evaluate(model: &Vit, data: &Dataset) -> Result<EvalResult> {
    evaluate_with(model, data, &Source::Own)
}

pub(crate) fn evaluate_with(model: &Vit, data: &Dataset, source: &Source<'_>) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(KaratError::config("evaluation set is empty"));
    }
    if data.classes != model.cfg.classes {
        return Err(KaratError::config(format!(
            "dataset has {} classes, model has {}",
            data.classes, model.cfg.classes
        )));
    }
    let per: Vec<Result<(usize, f64)>> = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(img, &label)| {
            let logits = match source {
                Source::Own => model.forward(img)?,
                Source::Teacher(t) => crate::transfer::transfer_forward(t, model, img)?,
            };
            let z = logits.data();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            Ok((label_rank(z, label), lse - z[label]))
        })
        .collect();
    let (mut c1, mut c5, mut loss) = (0usize, 0usize, 0.0);
    for r in per {
        let (rank, l) = r?;
        c1 += (rank < 1) as usize;
        c5 += (rank < 5) as usize;
        loss += l;
    }
    let n = data.len() as f64;
    Ok(EvalResult { top1: c1 as f64 / n, top5: c5 as f64 / n, loss: loss / n })
}

/// Loads `ckpt` into a model of geometry `cfg` and evaluates it.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, cfg: &VitConfig, data: &Dataset) -> Result<EvalResult> {
    let mut model = Vit::new(cfg.clone(), 0)?;
    model.load_checkpoint(ckpt)?;
    evaluate(&model, data)
}

pub fn smoothed_target(label: usize, classes: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / classes as f64; classes];
    t[label] += 1.0 - eps;
    t
}

/// What the per-sample loss sees besides the model itself.
pub(crate) enum Source<'a> {
    Own,
    Teacher(&'a Vit),
}

/// Loss and per-parameter gradients for one sample; frozen parameters yield `None`.
pub(crate) fn sample_grad(
    model: &Vit,
    trainable: &[bool],
    source: &Source<'_>,
    img: &Tensor,
    target: &[f64],
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let teacher_attn;
    let opts = match source {
        Source::Own => ForwardOptions::default(),
        Source::Teacher(t) => {
            teacher_attn = t.extract_all_attention(img)?.into_iter().map(|(_, post)| post).collect::<Vec<_>>();
            ForwardOptions { attention_override: Some(&teacher_attn) }
        }
    };
    let tape = Tape::new();
    let vars = model.bind(&tape, |i| trainable[i]);
    let trace = model.forward_var(&tape, &vars, img, opts)?;
    let loss = trace.logits.cross_entropy(target)?;
    let value = loss.value().item();
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(trainable)
        .map(|(&v, &t)| if t { Some(grads.take(v).unwrap_or_else(|| Tensor::zeros(v.value().shape()))) } else { None })
        .collect();
    Ok((value, g))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| KaratError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Shared loop behind [`train`] and attention transfer.
pub(crate) fn fit(
    mut model: Vit,
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    out_dir: Option<&Path>,
    trainable: &[bool],
    source: Source<'_>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(KaratError::config("training set is empty"));
    }
    if train_set.classes != model.cfg.classes {
        return Err(KaratError::config(format!(
            "dataset has {} classes, model has {}",
            train_set.classes, model.cfg.classes
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let eval_set = eval_set.unwrap_or(train_set);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let sched = cfg.schedule(steps_per_epoch);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut art = RunArtifacts {
        model: model.clone(),
        metrics: Vec::new(),
        checkpoints: Vec::new(),
        best: None,
        metrics_path: out_dir.map(|d| d.join("metrics.csv")),
        grad_norms: Vec::with_capacity(total),
    };
    let mut best_top1 = f64::NEG_INFINITY;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            lr = lr_at(step, total, &sched);
            let per: Vec<Result<(f64, Vec<Option<Tensor>>)>> = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &s)| {
                    let img = cfg.augment.apply(&train_set.images[i], &mut ChaCha8Rng::seed_from_u64(s));
                    let target = smoothed_target(train_set.labels[i], train_set.classes, cfg.label_smoothing);
                    sample_grad(&model, trainable, &source, &img, &target)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut sum: Vec<Option<Tensor>> = vec![None; trainable.len()];
            let mut batch_loss = 0.0;
            for r in per {
                let (l, g) = r.map_err(|e| at_step(e, step))?;
                batch_loss += l;
                for (acc, g) in sum.iter_mut().zip(g) {
                    let Some(g) = g else { continue };
                    match acc {
                        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => *acc = Some(g),
                    }
                }
            }
            for g in sum.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(KaratError::numeric(format!("non-finite loss at step {step}")));
            }
            art.grad_norms.push(clip_grad_norm(&mut sum, cfg.grad_clip));
            opt.step(&mut model.params, &sum, lr).map_err(|e| at_step(e, step))?;
            epoch_loss += batch_loss * batch.len() as f64;
            step += 1;
        }
        let evaluated = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let ev = if evaluated { Some(evaluate_with(&model, eval_set, &source)?) } else { None };
        art.metrics.push(MetricsRow {
            epoch,
            step,
            lr,
            train_loss: epoch_loss / train_set.len() as f64,
            top1: ev.map(|e| e.top1),
            top5: ev.map(|e| e.top5),
        });
        if let Some(dir) = out_dir {
            let bytes = model.to_checkpoint().to_bytes();
            let path = dir.join(format!("epoch_{epoch:03}.ckpt"));
            write_file(&path, &bytes)?;
            art.checkpoints.push(path);
            if let Some(e) = ev {
                if e.top1 > best_top1 {
                    best_top1 = e.top1;
                    let best = dir.join("best.ckpt");
                    write_file(&best, &bytes)?;
                    art.best = Some(best);
                }
            }
            write_file(&dir.join("metrics.csv"), metrics_csv(&art.metrics).as_bytes())?;
        }
    }
    art.model = model;
    Ok(art)
}

fn at_step(e: KaratError, step: usize) -> KaratError {
    match e {
        KaratError::Numeric(m) => KaratError::numeric(format!("step {step}: {m}")),
        other => other,
    }
}

/// Trains `model` on `train_set`, evaluating on `eval_set` (or the training set).
///
/// With `out_dir`, writes `epoch_NNN.ckpt` every epoch, `best.ckpt` by eval top-1,
/// and `metrics.csv`.
pub fn train(
    model: Vit,
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts> {
    let trainable = vec![true; model.params.len()];
    fit(model, cfg, train_set, eval_set, out_dir, &trainable, Source::Own)
}

use karat_core::vit::ParamStore;
use karat_core::{KaratError, Result, Tensor};
use std::f64::consts::PI;

/// Warmup-then-cosine learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
}

/// Linear warmup from `warmup_lr` to `base_lr`, then cosine decay to `min_lr` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.warmup_lr + (s.base_lr - s.warmup_lr) * step as f64 / s.warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.base_lr;
    }
    let t = (step.min(total_steps) - s.warmup_steps) as f64 / span as f64;
    s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (PI * t).cos())
}

/// Scales all present gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter that has a gradient; `None` entries are left untouched.
    ///
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(KaratError::dim(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.get(i).shape() {
                    return Err(KaratError::dim(format!("gradient shape mismatch for {}", params.name(i))));
                }
                if !g.is_finite() {
                    return Err(KaratError::numeric(format!("non-finite gradient in {}", params.name(i))));
                }
            }
        }
        if self.m.len() != params.len() {
            self.m = vec![None; params.len()];
            self.v = vec![None; params.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(i);
            let decay = 1.0 - lr * self.weight_decay;
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p = *p * decay - lr * update;
            }
        }
        Ok(())
    }
}

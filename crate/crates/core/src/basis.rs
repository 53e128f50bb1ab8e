//! Learnable scalar function families used as attention-activation units.
//!
//! Every unit is a map `x ↦ b(x) + f_θ(x)` where `b` is a fixed base
//! activation and `f_θ` comes from one of the supported families:
//!
//! | family      | parameters                      | `f_θ(x)`                                         |
//! |-------------|---------------------------------|--------------------------------------------------|
//! | Fourier     | `a[1..G], b[1..G]` (+ DC)       | `Σ_m a_m cos(mx) + b_m sin(mx)`                  |
//! | Rational    | `a[0..m], b[1..n]`              | `P(x) / (1 + |b_1 x + … + b_n xⁿ|)`              |
//! | wavelets    | `w, s, τ`                       | `w ψ((x − τ)/s)`                                 |
//!
//! Parameter slices are laid out in exactly that order.

use crate::error::{KaratError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::{FRAC_PI_2, PI};

/// Central frequency of the Morlet wavelet.
pub const MORLET_OMEGA0: f64 = 5.0;

/// Lower bound on the magnitude of a wavelet scale.
pub const MIN_WAVELET_SCALE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisKind {
    Fourier,
    Rational { num: usize, den: usize },
    MexicanHat,
    Morlet,
    Dog,
    Meyer,
    Shannon,
}

impl BasisKind {
    pub fn is_wavelet(&self) -> bool {
        matches!(
            self,
            BasisKind::MexicanHat | BasisKind::Morlet | BasisKind::Dog | BasisKind::Meyer | BasisKind::Shannon
        )
    }

    pub fn name(&self) -> String {
        match self {
            BasisKind::Fourier => "fourier".into(),
            BasisKind::Rational { num, den } => format!("rational({num},{den})"),
            BasisKind::MexicanHat => "mexican_hat".into(),
            BasisKind::Morlet => "morlet".into(),
            BasisKind::Dog => "dog".into(),
            BasisKind::Meyer => "meyer".into(),
            BasisKind::Shannon => "shannon".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseActivation {
    Zero,
    Identity,
    Silu,
    Gelu,
}

impl BaseActivation {
    pub fn name(&self) -> &'static str {
        match self {
            BaseActivation::Zero => "zero",
            BaseActivation::Identity => "identity",
            BaseActivation::Silu => "silu",
            BaseActivation::Gelu => "gelu",
        }
    }
}

/// A unit family together with its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisSpec {
    pub kind: BasisKind,
    /// Number of Fourier frequencies `G`; ignored by the other families.
    pub grid_size: usize,
    pub base: BaseActivation,
    /// Adds a constant coefficient to every Fourier unit.
    pub fourier_dc: bool,
    /// Scales Fourier coefficient draws by `1/√G`.
    pub scaled_init: bool,
}

impl BasisSpec {
    pub fn fourier(grid_size: usize) -> Self {
        Self {
            kind: BasisKind::Fourier,
            grid_size,
            base: BaseActivation::Zero,
            fourier_dc: false,
            scaled_init: false,
        }
    }

    pub fn with_kind(kind: BasisKind) -> Self {
        Self { kind, ..Self::fourier(1) }
    }

    pub fn with_base(mut self, base: BaseActivation) -> Self {
        self.base = base;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BasisKind::Fourier if self.grid_size == 0 => {
                Err(KaratError::config("Fourier basis needs grid_size >= 1"))
            }
            BasisKind::Rational { den: 0, .. } => {
                Err(KaratError::config("rational basis needs denominator order >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn params_per_unit(&self) -> usize {
        match self.kind {
            BasisKind::Fourier => 2 * self.grid_size + usize::from(self.fourier_dc),
            BasisKind::Rational { num, den } => num + 1 + den,
            _ => 3,
        }
    }

    pub fn eval(&self, p: &[f64], x: f64) -> f64 {
        let f = match self.kind {
            BasisKind::Fourier => fourier_value(p, self.grid_size, self.fourier_dc, x),
            BasisKind::Rational { num, .. } => eval_rational(&p[..=num], &p[num + 1..], x),
            kind => eval_wavelet(kind, p, x),
        };
        f + eval_base_activation(self.base, x)
    }

    /// Value and `d/dx`; `dp` receives the gradient with respect to each parameter.
    pub fn eval_grad(&self, p: &[f64], x: f64, dp: &mut [f64]) -> (f64, f64) {
        let (f, dfdx) = match self.kind {
            BasisKind::Fourier => fourier_grad(p, self.grid_size, self.fourier_dc, x, dp),
            BasisKind::Rational { num, .. } => rational_grad(p, num, x, dp),
            kind => wavelet_grad(kind, p, x, dp),
        };
        let (b, db) = base_activation_grad(self.base, x);
        (f + b, dfdx + db)
    }

    pub fn init_unit<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            BasisKind::Fourier => {
                let scale = if self.scaled_init {
                    1.0 / (self.grid_size as f64).sqrt()
                } else {
                    1.0
                };
                let mut p: Vec<f64> = (0..2 * self.grid_size)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if self.fourier_dc {
                    p.push(0.0);
                }
                p
            }
            BasisKind::Rational { .. } => (0..self.params_per_unit())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
            _ => vec![rng.sample(StandardNormal), 1.0, 0.0],
        }
    }

    /// Restores parameter-space constraints after an update (wavelet scale floor).
    pub fn constrain(&self, p: &mut [f64]) {
        if self.kind.is_wavelet() {
            for unit in p.chunks_exact_mut(3) {
                unit[1] = floor_scale(unit[1]);
            }
        }
    }
}

/// Draws one unit's parameters from its own seeded stream.
pub fn init_unit(spec: &BasisSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.init_unit(&mut rng)
}

fn floor_scale(s: f64) -> f64 {
    if s.abs() >= MIN_WAVELET_SCALE {
        s
    } else if s < 0.0 {
        -MIN_WAVELET_SCALE
    } else {
        MIN_WAVELET_SCALE
    }
}

/// Fourier unit with coefficients `a[0..G]` (cosines) and `b[0..G]` (sines).
pub fn eval_fourier(a: &[f64], b: &[f64], base: BaseActivation, x: f64) -> f64 {
    let mut s = 0.0;
    for (m, (am, bm)) in a.iter().zip(b).enumerate() {
        let t = (m + 1) as f64 * x;
        s += am * t.cos() + bm * t.sin();
    }
    s + eval_base_activation(base, x)
}

fn fourier_value(p: &[f64], g: usize, dc: bool, x: f64) -> f64 {
    let mut s = 0.0;
    for m in 0..g {
        let t = (m + 1) as f64 * x;
        s += p[m] * t.cos() + p[g + m] * t.sin();
    }
    if dc {
        s += p[2 * g];
    }
    s
}

fn fourier_grad(p: &[f64], g: usize, dc: bool, x: f64, dp: &mut [f64]) -> (f64, f64) {
    let mut s = 0.0;
    let mut ds = 0.0;
    for m in 0..g {
        let mf = (m + 1) as f64;
        let (sn, cs) = (mf * x).sin_cos();
        s += p[m] * cs + p[g + m] * sn;
        ds += mf * (p[g + m] * cs - p[m] * sn);
        dp[m] = cs;
        dp[g + m] = sn;
    }
    if dc {
        s += p[2 * g];
        dp[2 * g] = 1.0;
    }
    (s, ds)
}

/// Safe Padé unit: `(a₀ + … + a_m x^m) / (1 + |b₁x + … + b_n xⁿ|)`.
pub fn eval_rational(num: &[f64], den: &[f64], x: f64) -> f64 {
    let p = num.iter().rev().fold(0.0, |acc, &c| acc * x + c);
    let q = den.iter().rev().fold(0.0, |acc, &c| acc * x + c) * x;
    p / (1.0 + q.abs())
}

fn rational_grad(p: &[f64], num: usize, x: f64, dp: &mut [f64]) -> (f64, f64) {
    let (a, b) = p.split_at(num + 1);
    let pv = a.iter().rev().fold(0.0, |acc, &c| acc * x + c);
    let dpv = a
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (i, &c)| acc * x + i as f64 * c);
    let q = b.iter().rev().fold(0.0, |acc, &c| acc * x + c) * x;
    let dq = b
        .iter()
        .enumerate()
        .rev()
        .fold(0.0, |acc, (j, &c)| acc * x + (j + 1) as f64 * c);
    let sgn = if q > 0.0 {
        1.0
    } else if q < 0.0 {
        -1.0
    } else {
        0.0
    };
    let denom = 1.0 + q.abs();
    let mut xp = 1.0;
    for d in dp.iter_mut().take(a.len()) {
        *d = xp / denom;
        xp *= x;
    }
    let common = -pv * sgn / (denom * denom);
    let mut xp = x;
    for d in dp[a.len()..a.len() + b.len()].iter_mut() {
        *d = common * xp;
        xp *= x;
    }
    (pv / denom, dpv / denom + common * dq)
}

/// Mother wavelet `ψ(u)` and `ψ'(u)`.
fn mother(kind: BasisKind, u: f64) -> (f64, f64) {
    match kind {
        BasisKind::MexicanHat => {
            let c = 2.0 / (PI.powf(0.25) * 3f64.sqrt());
            let e = (-0.5 * u * u).exp();
            (c * (u * u - 1.0) * e, c * u * (3.0 - u * u) * e)
        }
        BasisKind::Morlet => {
            let e = (-0.5 * u * u).exp();
            let (sn, cs) = (MORLET_OMEGA0 * u).sin_cos();
            (cs * e, (-MORLET_OMEGA0 * sn - u * cs) * e)
        }
        BasisKind::Dog => {
            let e = (-0.5 * u * u).exp();
            (u * e, (1.0 - u * u) * e)
        }
        BasisKind::Meyer => meyer(u),
        BasisKind::Shannon => shannon(u),
        _ => unreachable!("not a wavelet"),
    }
}

/// Meyer auxiliary polynomial, clamped to 0 below its support and 1 above.
pub fn meyer_nu(x: f64) -> (f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0)
    } else if x >= 1.0 {
        (1.0, 0.0)
    } else {
        let x2 = x * x;
        let x4 = x2 * x2;
        let v = x4 * (35.0 - 84.0 * x + 70.0 * x2 - 20.0 * x2 * x);
        let om = 1.0 - x;
        (v, 140.0 * x2 * x * om * om * om)
    }
}

fn meyer_window(t: f64) -> (f64, f64) {
    if t <= 0.5 {
        (1.0, 0.0)
    } else if t < 1.0 {
        let (nu, dnu) = meyer_nu(2.0 * t - 1.0);
        let (sn, cs) = (FRAC_PI_2 * nu).sin_cos();
        (cs, -sn * FRAC_PI_2 * 2.0 * dnu)
    } else {
        (0.0, 0.0)
    }
}

fn meyer(u: f64) -> (f64, f64) {
    let (nu, dnu) = meyer_nu(u);
    let (m, dm) = meyer_window(nu);
    let (sn, cs) = (PI * u.abs()).sin_cos();
    let sgn = if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    };
    (sn * m, PI * sgn * cs * m + sn * dm * dnu)
}

fn shannon(u: f64) -> (f64, f64) {
    if u.abs() > PI {
        return (0.0, 0.0);
    }
    // sinc(u/π) = sin(u)/u
    let (s, ds) = if u.abs() < 1e-4 {
        let u2 = u * u;
        (1.0 - u2 / 6.0 + u2 * u2 / 120.0, -u / 3.0 + u * u2 / 30.0)
    } else {
        let (sn, cs) = u.sin_cos();
        (sn / u, (u * cs - sn) / (u * u))
    };
    let (wsn, wcs) = u.sin_cos();
    let w = 0.54 + 0.46 * wcs;
    let dw = -0.46 * wsn;
    (s * w, ds * w + s * dw)
}

/// Wavelet unit `w ψ((x − τ)/s)` with parameters `[w, s, τ]`.
pub fn eval_wavelet(kind: BasisKind, p: &[f64], x: f64) -> f64 {
    let s = floor_scale(p[1]);
    let u = (x - p[2]) / s;
    p[0] * mother(kind, u).0
}

fn wavelet_grad(kind: BasisKind, p: &[f64], x: f64, dp: &mut [f64]) -> (f64, f64) {
    let (w, raw_s, tau) = (p[0], p[1], p[2]);
    let s = floor_scale(raw_s);
    let u = (x - tau) / s;
    let (psi, dpsi) = mother(kind, u);
    let du = w * dpsi / s;
    dp[0] = psi;
    dp[1] = if s == raw_s { -du * u } else { 0.0 };
    dp[2] = -du;
    (w * psi, du)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn eval_base_activation(kind: BaseActivation, x: f64) -> f64 {
    match kind {
        BaseActivation::Zero => 0.0,
        BaseActivation::Identity => x,
        BaseActivation::Silu => x / (1.0 + (-x).exp()),
        BaseActivation::Gelu => x * normal_cdf(x),
    }
}

pub fn base_activation_grad(kind: BaseActivation, x: f64) -> (f64, f64) {
    match kind {
        BaseActivation::Zero => (0.0, 0.0),
        BaseActivation::Identity => (x, 1.0),
        BaseActivation::Silu => {
            let sig = 1.0 / (1.0 + (-x).exp());
            (x * sig, sig * (1.0 + x * (1.0 - sig)))
        }
        BaseActivation::Gelu => {
            let cdf = normal_cdf(x);
            let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
            (x * cdf, cdf + x * pdf)
        }
    }
}

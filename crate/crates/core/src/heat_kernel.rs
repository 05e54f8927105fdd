//! Dirichlet heat kernel on [0,1].
//!
//! G_t(x,y) = Σ_{n≥1} 2 e^{−π²n²t} sin(nπx) sin(nπy). The sine series is the primary
//! evaluator for t ≥ `t_floor`; the method-of-images Gaussian sum covers small times.
//! Alongside the evaluators live the closed-form series integrals and the ratio
//! functions used to check the kernel inequalities numerically.

use std::f64::consts::PI;

use statrs::function::erf::{erf, erfc};
use thiserror::Error;

use crate::quadrature::GradedRule;

pub const DEFAULT_T_FLOOR: f64 = 1e-4;
pub const MAX_TERMS: usize = 4096;
/// Target for the discarded series tail at `t_floor`.
pub const TAIL_TARGET: f64 = 1e-12;
/// Summation stops early once the remaining terms are provably below this.
const NEGLIGIBLE: f64 = 1e-18;
const IMAGE_CUTOFF: f64 = 1e-15;
const PI2: f64 = PI * PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("heat_kernel: time {t} is below the series floor {t_floor}; raise N or use the image sum")]
    BelowFloor { t: f64, t_floor: f64 },
    #[error("heat_kernel: time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("heat_kernel: invalid kernel spec: {0}")]
    InvalidSpec(String),
    #[error("heat_kernel: s = t and x = y, the ratio is 0/0")]
    Coincident,
    #[error("heat_kernel: exponent p = {0} must exceed 4")]
    ExponentTooSmall(f64),
    #[error("heat_kernel: need 0 <= s <= t, got s = {s}, t = {t}")]
    TimeOrder { s: f64, t: f64 },
}

/// Truncated sine-series representation of the kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    n_terms: usize,
    t_floor: f64,
}

impl KernelSpec {
    pub fn new(n_terms: usize, t_floor: f64) -> Result<Self, KernelError> {
        if n_terms == 0 {
            return Err(KernelError::InvalidSpec("n_terms must be at least 1".into()));
        }
        if !(t_floor > 0.0 && t_floor.is_finite()) {
            return Err(KernelError::InvalidSpec(format!("t_floor must be positive, got {t_floor}")));
        }
        Ok(Self { n_terms, t_floor })
    }

    /// Smallest N whose tail bound at `t_floor` is below [`TAIL_TARGET`], capped at
    /// [`MAX_TERMS`].
    pub fn for_floor(t_floor: f64) -> Result<Self, KernelError> {
        let mut spec = Self::new(1, t_floor)?;
        while spec.tail_bound() >= TAIL_TARGET && spec.n_terms < MAX_TERMS {
            spec.n_terms += 1;
        }
        Ok(spec)
    }

    pub fn n_terms(&self) -> usize {
        self.n_terms
    }

    pub fn t_floor(&self) -> f64 {
        self.t_floor
    }

    /// Same floor, different truncation (used by refinement studies).
    pub fn with_terms(&self, n_terms: usize) -> Result<Self, KernelError> {
        Self::new(n_terms, self.t_floor)
    }

    /// Bound on Σ_{n>N} 2e^{−π²n²t} valid for every t ≥ t_floor.
    pub fn tail_bound(&self) -> f64 {
        let n = self.n_terms as f64;
        2.0 * (-PI2 * n * n * self.t_floor).exp() / -(-PI2 * self.t_floor).exp_m1()
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::for_floor(DEFAULT_T_FLOOR).expect("default floor is valid")
    }
}

/// sin(nπx), cos(nπx) for n = 1, 2, ... by a rotation recurrence.
///
/// Points above ½ are reflected to 1 − x with the matching sign pattern, so x = 1
/// gives exact zeros just like x = 0.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Sines {
    s: f64,
    c: f64,
    s1: f64,
    c1: f64,
    flip: bool,
    n: u64,
}

impl Sines {
    pub(crate) fn new(x: f64) -> Self {
        let flip = x > 0.5;
        let xr = if flip { 1.0 - x } else { x };
        let (s1, c1) = (PI * xr).sin_cos();
        Self { s: s1, c: c1, s1, c1, flip, n: 1 }
    }

    #[inline]
    pub(crate) fn sin(&self) -> f64 {
        if self.flip && self.n % 2 == 0 {
            -self.s
        } else {
            self.s
        }
    }

    #[inline]
    pub(crate) fn cos(&self) -> f64 {
        if self.flip && self.n % 2 == 1 {
            -self.c
        } else {
            self.c
        }
    }

    #[inline]
    pub(crate) fn advance(&mut self) {
        let s = self.s * self.c1 + self.c * self.s1;
        let c = self.c * self.c1 - self.s * self.s1;
        self.s = s;
        self.c = c;
        self.n += 1;
    }
}

/// Σ_{n ≤ n_max} 2e^{−π²n²t}·g_n, stopping once the remaining weights are negligible.
/// `g` receives the mode index and must be bounded by `g_bound` in absolute value.
#[inline]
fn weighted_mode_sum(n_max: usize, t: f64, g_bound: f64, mut g: impl FnMut(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for n in 1..=n_max {
        let nf = n as f64;
        let w = 2.0 * (-PI2 * nf * nf * t).exp();
        acc += w * g(n);
        if w * g_bound < 1e-8 {
            let r = (-PI2 * (2.0 * nf + 1.0) * t).exp();
            if w * g_bound * r / (1.0 - r) < NEGLIGIBLE {
                break;
            }
        }
    }
    acc
}

fn series_kernel(n_max: usize, t: f64, x: f64, y: f64) -> f64 {
    let mut sx = Sines::new(x);
    let mut sy = Sines::new(y);
    weighted_mode_sum(n_max, t, 1.0, |n| {
        if n > 1 {
            sx.advance();
            sy.advance();
        }
        sx.sin() * sy.sin()
    })
}

/// Truncated sine series Σ_{n=1}^{N} 2e^{−π²n²t} sin(nπx) sin(nπy).
///
/// Terms are omitted once the rest of the series is provably below 1e−18.
pub fn eval_kernel(spec: &KernelSpec, t: f64, x: f64, y: f64) -> Result<f64, KernelError> {
    if !(t >= spec.t_floor) {
        return Err(KernelError::BelowFloor { t, t_floor: spec.t_floor });
    }
    Ok(series_kernel(spec.n_terms, t, x, y))
}

/// Method of images: Σ_k [φ(x−y+2k) − φ(x+y+2k)], φ the centred Gaussian of
/// variance 2t. Images stop once every new term is below 1e−15.
pub fn eval_images(t: f64, x: f64, y: f64) -> Result<f64, KernelError> {
    if !(t > 0.0) {
        return Err(KernelError::NonPositiveTime(t));
    }
    let inv = 1.0 / (4.0 * t);
    let norm = (inv / PI).sqrt();
    let phi = |z: f64| norm * (-z * z * inv).exp();
    let mut acc = phi(x - y) - phi(x + y);
    let mut k = 1.0;
    loop {
        let terms = [phi(x - y + 2.0 * k), phi(x + y + 2.0 * k), phi(x - y - 2.0 * k), phi(x + y - 2.0 * k)];
        acc += (terms[0] - terms[1]) + (terms[2] - terms[3]);
        if terms.iter().all(|&v| v < IMAGE_CUTOFF) {
            break;
        }
        k += 1.0;
    }
    Ok(acc)
}

/// Series for t ≥ t_floor, images below it.
pub fn eval_hybrid(spec: &KernelSpec, t: f64, x: f64, y: f64) -> Result<f64, KernelError> {
    if t >= spec.t_floor {
        Ok(series_kernel(spec.n_terms, t, x, y))
    } else {
        eval_images(t, x, y)
    }
}

/// P(lo < Z < hi) for Z ~ Normal(0, 2t), computed without catastrophic cancellation.
fn gauss_mass(lo: f64, hi: f64, t: f64) -> f64 {
    let scale = 1.0 / (4.0 * t).sqrt();
    let (a, b) = (lo * scale, hi * scale);
    if a >= 0.0 {
        0.5 * (erfc(a) - erfc(b))
    } else if b <= 0.0 {
        0.5 * (erfc(-b) - erfc(-a))
    } else {
        0.5 * (erf(b) - erf(a))
    }
}

/// Mean of G_t(·, y) over [a, b].
pub fn cell_mean(spec: &KernelSpec, t: f64, y: f64, a: f64, b: f64) -> Result<f64, KernelError> {
    if !(t > 0.0) {
        return Err(KernelError::NonPositiveTime(t));
    }
    let width = b - a;
    if t >= spec.t_floor {
        let mut sy = Sines::new(y);
        let mut sa = Sines::new(a);
        let mut sb = Sines::new(b);
        let sum = weighted_mode_sum(spec.n_terms, t, 2.0, |n| {
            if n > 1 {
                sy.advance();
                sa.advance();
                sb.advance();
            }
            sy.sin() * (sa.cos() - sb.cos()) / (n as f64 * PI)
        });
        Ok(sum / width)
    } else {
        let mut acc = gauss_mass(a - y, b - y, t) - gauss_mass(a + y, b + y, t);
        let mut k = 1.0;
        loop {
            let terms = [
                gauss_mass(a - y + 2.0 * k, b - y + 2.0 * k, t),
                gauss_mass(a + y + 2.0 * k, b + y + 2.0 * k, t),
                gauss_mass(a - y - 2.0 * k, b - y - 2.0 * k, t),
                gauss_mass(a + y - 2.0 * k, b + y - 2.0 * k, t),
            ];
            acc += (terms[0] - terms[1]) + (terms[2] - terms[3]);
            if terms.iter().all(|&v| v < IMAGE_CUTOFF) {
                break;
            }
            k += 1.0;
        }
        Ok(acc / width)
    }
}

/// Outcome of comparing the series against the free-space Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDomination {
    pub kernel: f64,
    pub gaussian: f64,
    /// kernel / gaussian (0 when both vanish).
    pub ratio: f64,
    /// Absolute accuracy of the series value: tail bound plus accumulated rounding.
    pub abs_floor: f64,
}

impl GaussianDomination {
    /// kernel ≤ gaussian·(1 + rel) + abs_floor.
    pub fn holds(&self, rel: f64) -> bool {
        self.kernel <= self.gaussian * (1.0 + rel) + self.abs_floor
    }
}

pub fn gaussian_bound_check(spec: &KernelSpec, t: f64, x: f64, y: f64) -> Result<GaussianDomination, KernelError> {
    let kernel = eval_kernel(spec, t, x, y)?;
    let gaussian = (-(x - y).powi(2) / (4.0 * t)).exp() / (4.0 * PI * t).sqrt();
    let ratio = if kernel == 0.0 { 0.0 } else { kernel / gaussian };
    // Σ|terms| ≤ Σ 2e^{−π²n²t} ≤ 1/√(πt) + 2 bounds the magnitude that rounding acts on.
    let magnitude = 1.0 / (PI * t).sqrt() + 2.0;
    let abs_floor = spec.tail_bound() + 8.0 * spec.n_terms as f64 * f64::EPSILON * magnitude;
    Ok(GaussianDomination { kernel, gaussian, ratio, abs_floor })
}

/// Trapezoid sum of f over [0,1] with `intervals` equal panels.
fn trapezoid01(intervals: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = 1.0 / intervals as f64;
    let mut acc = 0.5 * (f(0.0) + f(1.0));
    for k in 1..intervals {
        acc += f(k as f64 * h);
    }
    acc * h
}

/// |∫₀¹ G_s(x,z)G_t(z,y)dz − G_{s+t}(x,y)|, z-integral by the trapezoid rule with
/// `quad_points` panels. The rule is exact for sine products of total degree below
/// 2·quad_points, so the defect measures truncation and rounding only.
pub fn semigroup_defect(spec: &KernelSpec, s: f64, t: f64, x: f64, y: f64, quad_points: usize) -> Result<f64, KernelError> {
    let lhs = trapezoid01(quad_points, |z| {
        eval_kernel(spec, s, x, z).unwrap_or(f64::NAN) * eval_kernel(spec, t, z, y).unwrap_or(f64::NAN)
    });
    if lhs.is_nan() {
        return Err(KernelError::BelowFloor { t: s.min(t), t_floor: spec.t_floor });
    }
    Ok((lhs - eval_kernel(spec, s + t, x, y)?).abs())
}

/// Trapezoid quadrature of ∫₀¹ G_t(x,y) dy.
pub fn mass(spec: &KernelSpec, t: f64, x: f64, quad_points: usize) -> Result<f64, KernelError> {
    if !(t >= spec.t_floor) {
        return Err(KernelError::BelowFloor { t, t_floor: spec.t_floor });
    }
    Ok(trapezoid01(quad_points, |y| series_kernel(spec.n_terms, t, x, y)))
}

/// Trapezoid quadrature of ∫₀¹ G_t(x,y)² dy.
pub fn l2_space_quadrature(spec: &KernelSpec, t: f64, x: f64, quad_points: usize) -> Result<f64, KernelError> {
    if !(t >= spec.t_floor) {
        return Err(KernelError::BelowFloor { t, t_floor: spec.t_floor });
    }
    Ok(trapezoid01(quad_points, |y| series_kernel(spec.n_terms, t, x, y).powi(2)))
}

/// Parseval form of ∫₀¹ G_t(x,y)² dy for the truncated kernel: Σ_{n≤N} 2e^{−2π²n²t} sin²(nπx).
pub fn l2_space(spec: &KernelSpec, t: f64, x: f64) -> f64 {
    let mut sx = Sines::new(x);
    weighted_mode_sum(spec.n_terms, 2.0 * t, 1.0, |n| {
        if n > 1 {
            sx.advance();
        }
        sx.sin() * sx.sin()
    })
}

/// ∫₀^t∫₀¹ G²_{t−s}(x,y) dy ds for the full kernel,
/// x(1−x)/2 − Σ_n sin²(nπx) e^{−2π²n²t}/(π²n²), summed until the terms are negligible.
pub fn l2_time_integral(t: f64, x: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let mut sx = Sines::new(x);
    let mut rest = 0.0;
    let mut n = 1usize;
    loop {
        let nf = n as f64;
        let e = (-2.0 * PI2 * nf * nf * t).exp();
        rest += sx.sin() * sx.sin() * e / (PI2 * nf * nf);
        // Remaining terms are bounded by e·r/(1−r)/(π²n²) with r the next exponent ratio.
        let r = (-2.0 * PI2 * (2.0 * nf + 1.0) * t).exp();
        if e * r / ((1.0 - r) * PI2 * nf * nf) < NEGLIGIBLE || n >= 50_000_000 {
            break;
        }
        sx.advance();
        n += 1;
    }
    (0.5 * x * (1.0 - x) - rest).max(0.0)
}

/// Σ_{n≤N} sin²(nπx)(1−e^{−2π²n²t})/(π²n²): the same integral for the truncated kernel.
pub fn l2_time_integral_truncated(spec: &KernelSpec, t: f64, x: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let mut sx = Sines::new(x);
    let mut acc = 0.0;
    for n in 1..=spec.n_terms {
        if n > 1 {
            sx.advance();
        }
        let nf = n as f64;
        acc += sx.sin() * sx.sin() * -(-2.0 * PI2 * nf * nf * t).exp_m1() / (PI2 * nf * nf);
    }
    acc
}

/// z-integral ∫₀¹ (G_{t−r}(x,z) − G_{s−r}(y,z))² dz in closed form via the semigroup
/// property. `gap_s` = s − r (≤ 0 when r ≥ s), `gap_t` = t − r > 0.
fn difference_sq(spec: &KernelSpec, gap_s: f64, gap_t: f64, x: f64, y: f64) -> f64 {
    let g = |tau: f64, a: f64, b: f64| eval_hybrid(spec, tau, a, b).expect("positive lag");
    let xx = g(2.0 * gap_t, x, x);
    if gap_s <= 0.0 {
        return xx;
    }
    (xx - 2.0 * g(gap_t + gap_s, x, y) + g(2.0 * gap_s, y, y)).max(0.0)
}

/// Gauss–Legendre order per panel and panel count for the Appendix-style ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaQuadrature {
    pub order: usize,
    pub panels: usize,
}

impl Default for LemmaQuadrature {
    fn default() -> Self {
        Self { order: 8, panels: 40 }
    }
}

impl LemmaQuadrature {
    pub fn doubled(&self) -> Self {
        Self { order: 2 * self.order, panels: self.panels }
    }
}

fn check_times(s: f64, t: f64) -> Result<(), KernelError> {
    if !(0.0 <= s && s <= t) {
        return Err(KernelError::TimeOrder { s, t });
    }
    Ok(())
}

/// ∫₀^t (∫₀¹ (G_{t−r}(x,z) − G_{s−r}(y,z))² dz)^e dr with G_u := 0 for u ≤ 0.
fn difference_time_integral(spec: &KernelSpec, s: f64, t: f64, x: f64, y: f64, e: f64, quad: LemmaQuadrature) -> f64 {
    let power = ((1.0 / (1.0 - 0.5 * e)).ceil() as u32).max(2);
    let rule = GradedRule::new(power, quad.panels, quad.order);
    let lower = rule.integrate(0.0, s, |_, gap| difference_sq(spec, gap, t - s + gap, x, y).powf(e));
    let upper = if e == 1.0 {
        l2_time_integral(t - s, x)
    } else {
        rule.integrate(s, t, |_, gap| difference_sq(spec, 0.0, gap, x, y).powf(e))
    };
    lower + upper
}

/// [∫₀^t∫₀¹ (G_{t−r}(x,z) − G_{s−r}(y,z))² dz dr] / (|t−s|^{1/4} + |x−y|^{1/2})².
pub fn lemma_a1_ratio(spec: &KernelSpec, s: f64, t: f64, x: f64, y: f64, quad: LemmaQuadrature) -> Result<f64, KernelError> {
    check_times(s, t)?;
    if s == t && x == y {
        return Err(KernelError::Coincident);
    }
    let num = difference_time_integral(spec, s, t, x, y, 1.0, quad);
    let den = ((t - s).powf(0.25) + (x - y).abs().sqrt()).powi(2);
    Ok(num / den)
}

/// [∫₀^t (∫₀¹ (G_{t−r}(x,z) − G_{s−r}(y,z))² dz)^{p/(p−2)} dr]^{(p−2)/2}
/// / (|x−y|^{(p−4)/2} + |t−s|^{(p−4)/4}).
pub fn lemma_a2_ratio(spec: &KernelSpec, s: f64, t: f64, x: f64, y: f64, p: f64, quad: LemmaQuadrature) -> Result<f64, KernelError> {
    if !(p > 4.0) {
        return Err(KernelError::ExponentTooSmall(p));
    }
    check_times(s, t)?;
    if s == t && x == y {
        return Err(KernelError::Coincident);
    }
    let inner = difference_time_integral(spec, s, t, x, y, p / (p - 2.0), quad);
    let num = inner.powf((p - 2.0) / 2.0);
    let den = (x - y).abs().powf((p - 4.0) / 2.0) + (t - s).powf((p - 4.0) / 4.0);
    Ok(num / den)
}

/// Constant in ∫₀¹ G_τ²(x,y)v(y)dy ≤ C_p τ^{−(1−1/(2p))} ‖v‖_q obtained from the
/// Gaussian bound and Hölder's inequality: C_p = (2π/p)^{1/(2p)}/(4π).
pub fn g2_convolution_constant(p: f64) -> f64 {
    (2.0 * PI / p).powf(0.5 / p) / (4.0 * PI)
}

/// Left side over right side of the G² convolution bound for v ≡ 1 (‖v‖_q = 1).
/// The exact ∫₀¹ G_τ(x,y)² dy = G_{2τ}(x,x) comes from the semigroup property.
pub fn g2_convolution_ratio(spec: &KernelSpec, tau: f64, x: f64, p: f64) -> Result<f64, KernelError> {
    if !(tau > 0.0) {
        return Err(KernelError::NonPositiveTime(tau));
    }
    let lhs = eval_hybrid(spec, 2.0 * tau, x, x)?;
    let rhs = g2_convolution_constant(p) * tau.powf(-(1.0 - 0.5 / p));
    Ok(lhs / rhs)
}

/// Σ_{k≤N} (1−e^{−2π²k²ε})/(2π²k²).
pub fn sev_sum(eps: f64, n_terms: usize) -> f64 {
    (1..=n_terms)
        .map(|k| {
            let kf = k as f64;
            -(-2.0 * PI2 * kf * kf * eps).exp_m1() / (2.0 * PI2 * kf * kf)
        })
        .sum()
}

/// Smallest C with sev_sum(ε) ≤ C ε^δ over the given ε values.
pub fn fit_sev_constant(eps: &[f64], delta: f64, n_terms: usize) -> f64 {
    eps.iter().map(|&e| sev_sum(e, n_terms) / e.powf(delta)).fold(0.0, f64::max)
}

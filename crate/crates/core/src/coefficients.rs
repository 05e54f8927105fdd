//! Drift f, diffusion σ, the cut-off H_n and the initial condition.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::quadrature::gauss_legendre;

/// A coefficient function of (x, u).
pub type CoefFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoefficientError {
    #[error("coefficients: unknown family '{0}' (known: additive, nonlinear)")]
    UnknownFamily(String),
    #[error("coefficients: family '{family}' takes at most {max} parameters, got {got}")]
    TooManyParams { family: String, max: usize, got: usize },
    #[error("coefficients: invalid parameter: {0}")]
    BadParam(String),
    #[error("coefficients: cut-off level must be positive and finite, got {0}")]
    BadCutoff(f64),
    #[error("coefficients: initial condition must vanish at x = 0 and x = 1, got u0(0) = {0}, u0(1) = {1}")]
    BoundaryMismatch(f64, f64),
}

/// Drift and diffusion together with their u-derivatives and declared constants.
#[derive(Clone)]
pub struct CoefficientPair {
    name: String,
    f: CoefFn,
    f_u: CoefFn,
    sigma: CoefFn,
    sigma_u: CoefFn,
    pub k_f: f64,
    pub k_sigma: f64,
    pub c0: f64,
    /// Neither f nor σ depends on u, so the mild equation is solved by one Picard sweep.
    pub state_independent: bool,
}

impl fmt::Debug for CoefficientPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientPair")
            .field("name", &self.name)
            .field("k_f", &self.k_f)
            .field("k_sigma", &self.k_sigma)
            .field("c0", &self.c0)
            .field("state_independent", &self.state_independent)
            .finish()
    }
}

impl CoefficientPair {
    #[allow(clippy::too_many_arguments)]
    pub fn new(name: impl Into<String>, f: CoefFn, f_u: CoefFn, sigma: CoefFn, sigma_u: CoefFn, k_f: f64, k_sigma: f64, c0: f64) -> Self {
        Self { name: name.into(), f, f_u, sigma, sigma_u, k_f, k_sigma, c0, state_independent: false }
    }

    /// f ≡ 0, σ ≡ `sigma`.
    pub fn additive(sigma: f64) -> Self {
        let mut pair = Self::new(
            "additive",
            Arc::new(|_, _| 0.0),
            Arc::new(|_, _| 0.0),
            Arc::new(move |_, _| sigma),
            Arc::new(|_, _| 0.0),
            0.0,
            sigma.abs(),
            sigma.abs(),
        );
        pair.state_independent = true;
        pair
    }

    /// f = a·tanh(u), σ = b + c·sin(u); K_f = a, K_σ = b + c, c0 = b − c.
    pub fn nonlinear(a: f64, b: f64, c: f64) -> Self {
        Self::new(
            "nonlinear",
            Arc::new(move |_, u: f64| a * u.tanh()),
            Arc::new(move |_, u: f64| a / u.cosh().powi(2)),
            Arc::new(move |_, u: f64| b + c * u.sin()),
            Arc::new(move |_, u: f64| c * u.cos()),
            a.abs(),
            b.abs() + c.abs(),
            b - c.abs(),
        )
    }

    /// Built-in family by name; missing parameters take their defaults
    /// (additive: [1.0]; nonlinear: [0.5, 1.0, 0.25]).
    pub fn from_family(name: &str, params: &[f64]) -> Result<Self, CoefficientError> {
        let defaults: &[f64] = match name {
            "additive" => &[1.0],
            "nonlinear" => &[0.5, 1.0, 0.25],
            _ => return Err(CoefficientError::UnknownFamily(name.to_string())),
        };
        if params.len() > defaults.len() {
            return Err(CoefficientError::TooManyParams { family: name.into(), max: defaults.len(), got: params.len() });
        }
        if let Some(bad) = params.iter().find(|p| !p.is_finite()) {
            return Err(CoefficientError::BadParam(format!("{bad}")));
        }
        let p: Vec<f64> = defaults.iter().enumerate().map(|(i, d)| params.get(i).copied().unwrap_or(*d)).collect();
        Ok(match name {
            "additive" => Self::additive(p[0]),
            _ => Self::nonlinear(p[0], p[1], p[2]),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn f(&self, x: f64, u: f64) -> f64 {
        (self.f)(x, u)
    }

    #[inline]
    pub fn f_u(&self, x: f64, u: f64) -> f64 {
        (self.f_u)(x, u)
    }

    #[inline]
    pub fn sigma(&self, x: f64, u: f64) -> f64 {
        (self.sigma)(x, u)
    }

    #[inline]
    pub fn sigma_u(&self, x: f64, u: f64) -> f64 {
        (self.sigma_u)(x, u)
    }

    /// Lipschitz constants of H_n(|u|)f and H_n(|u|)σ in u:
    /// K + max|H′|·sup|·| with the smoothstep slope 1.5 and sup bounded by K.
    pub fn effective_constants(&self) -> (f64, f64) {
        (self.k_f + MAX_CUTOFF_SLOPE * self.k_f, self.k_sigma + MAX_CUTOFF_SLOPE * self.k_sigma)
    }
}

/// Largest |H_n′| of the smoothstep cut-off.
pub const MAX_CUTOFF_SLOPE: f64 = 1.5;

/// Truncation level n of the cut-off H_n.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffSpec {
    n: f64,
}

impl CutoffSpec {
    pub fn new(n: f64) -> Result<Self, CoefficientError> {
        if !(n > 0.0 && n.is_finite()) {
            return Err(CoefficientError::BadCutoff(n));
        }
        Ok(Self { n })
    }

    pub fn level(&self) -> f64 {
        self.n
    }
}

/// H_n(x): 1 for |x| < n, 0 for |x| ≥ n + 1, smoothstep 1 − 3w² + 2w³ (w = |x| − n) between.
pub fn cutoff_eval(spec: &CutoffSpec, x: f64) -> f64 {
    let w = x.abs() - spec.n;
    if w < 0.0 {
        1.0
    } else if w >= 1.0 {
        0.0
    } else {
        1.0 - w * w * (3.0 - 2.0 * w)
    }
}

/// Derivative of r ↦ H_n(r) for r ≥ 0.
pub fn cutoff_slope(spec: &CutoffSpec, r: f64) -> f64 {
    let w = r - spec.n;
    if w <= 0.0 || w >= 1.0 {
        0.0
    } else {
        6.0 * w * (w - 1.0)
    }
}

/// H_n(|u|)·f(x,u).
pub fn truncated_drift(pair: &CoefficientPair, spec: &CutoffSpec, x: f64, u: f64) -> f64 {
    let h = cutoff_eval(spec, u);
    if h == 0.0 {
        0.0
    } else {
        h * pair.f(x, u)
    }
}

/// H_n(|u|)·σ(x,u).
pub fn truncated_diffusion(pair: &CoefficientPair, spec: &CutoffSpec, x: f64, u: f64) -> f64 {
    let h = cutoff_eval(spec, u);
    if h == 0.0 {
        0.0
    } else {
        h * pair.sigma(x, u)
    }
}

/// (m, m̂) = ∂_u of H_n(|u|)f and H_n(|u|)σ.
pub fn multiplier_fields(pair: &CoefficientPair, spec: &CutoffSpec, x: f64, u: f64) -> (f64, f64) {
    let h = cutoff_eval(spec, u);
    if h == 0.0 {
        return (0.0, 0.0);
    }
    let dh = cutoff_slope(spec, u.abs()) * u.signum();
    let m = if dh == 0.0 { h * pair.f_u(x, u) } else { dh * pair.f(x, u) + h * pair.f_u(x, u) };
    let m_hat = if dh == 0.0 { h * pair.sigma_u(x, u) } else { dh * pair.sigma(x, u) + h * pair.sigma_u(x, u) };
    (m, m_hat)
}

/// One checked assumption: `margin` ≥ 0 means satisfied.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub margin: f64,
    /// (x, u) where the margin is attained.
    pub worst_at: (f64, f64),
}

impl AssumptionCheck {
    pub fn passed(&self) -> bool {
        self.margin >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(AssumptionCheck::passed)
    }

    pub fn failures(&self) -> Vec<&AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn worst_margin(&self) -> f64 {
        self.checks.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min)
    }
}

/// Check boundedness, Lipschitz bounds (finite differences on the u-cloud) and the
/// nondegeneracy floor σ ≥ c0 on u ≥ 0.
pub fn validate_assumptions(pair: &CoefficientPair, u_range: (f64, f64), x_samples: &[f64]) -> AssumptionReport {
    const U_POINTS: usize = 401;
    let (lo, hi) = u_range;
    let us: Vec<f64> = (0..U_POINTS).map(|k| lo + (hi - lo) * k as f64 / (U_POINTS - 1) as f64).collect();

    let mut bound_f = (f64::INFINITY, (0.0, 0.0));
    let mut bound_s = (f64::INFINITY, (0.0, 0.0));
    let mut lip_f = (f64::INFINITY, (0.0, 0.0));
    let mut lip_s = (f64::INFINITY, (0.0, 0.0));
    let mut floor = (f64::INFINITY, (0.0, 0.0));
    let take = |slot: &mut (f64, (f64, f64)), m: f64, at: (f64, f64)| {
        if m < slot.0 {
            *slot = (m, at);
        }
    };
    for &x in x_samples {
        for (k, &u) in us.iter().enumerate() {
            let (fv, sv) = (pair.f(x, u), pair.sigma(x, u));
            take(&mut bound_f, pair.k_f - fv.abs(), (x, u));
            take(&mut bound_s, pair.k_sigma - sv.abs(), (x, u));
            if u >= 0.0 {
                take(&mut floor, sv.abs() - pair.c0, (x, u));
            }
            if k + 1 < us.len() {
                let v = us[k + 1];
                let h = v - u;
                if h > 0.0 {
                    take(&mut lip_f, pair.k_f - (pair.f(x, v) - fv).abs() / h, (x, u));
                    take(&mut lip_s, pair.k_sigma - (pair.sigma(x, v) - sv).abs() / h, (x, u));
                }
            }
        }
    }
    let mut checks = vec![
        AssumptionCheck { name: "drift bounded by K_f", margin: bound_f.0, worst_at: bound_f.1 },
        AssumptionCheck { name: "diffusion bounded by K_sigma", margin: bound_s.0, worst_at: bound_s.1 },
        AssumptionCheck { name: "drift Lipschitz with K_f", margin: lip_f.0, worst_at: lip_f.1 },
        AssumptionCheck { name: "diffusion Lipschitz with K_sigma", margin: lip_s.0, worst_at: lip_s.1 },
        AssumptionCheck { name: "diffusion at least c0 on u >= 0", margin: floor.0, worst_at: floor.1 },
    ];
    if !(pair.c0 > 0.0) {
        checks.push(AssumptionCheck { name: "c0 positive", margin: pair.c0.min(-f64::MIN_POSITIVE), worst_at: (f64::NAN, f64::NAN) });
    }
    for c in &mut checks {
        if !c.margin.is_finite() {
            c.margin = if c.margin == f64::INFINITY { 0.0 } else { f64::NEG_INFINITY };
        }
    }
    AssumptionReport { checks }
}

/// Initial condition u₀ with u₀(0) = u₀(1) = 0.
#[derive(Clone)]
pub enum InitialCondition {
    /// a·sin(πx), evaluated so that both endpoints give exact zeros.
    Sine { amplitude: f64 },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for InitialCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sine { amplitude } => write!(f, "Sine {{ amplitude: {amplitude} }}"),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl InitialCondition {
    pub fn sine(amplitude: f64) -> Self {
        Self::Sine { amplitude }
    }

    pub fn custom(u0: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self, CoefficientError> {
        let (a, b) = (u0(0.0), u0(1.0));
        if a != 0.0 || b != 0.0 {
            return Err(CoefficientError::BoundaryMismatch(a, b));
        }
        Ok(Self::Custom(Arc::new(u0)))
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::Sine { amplitude } => amplitude * (PI * x.min(1.0 - x)).sin(),
            Self::Custom(f) => f(x),
        }
    }

    /// Sine coefficients c_n = 2∫₀¹ u₀(y) sin(nπy) dy for n = 1..=modes.
    pub fn modes(&self, modes: usize) -> Vec<f64> {
        match self {
            Self::Sine { amplitude } => {
                let mut c = vec![0.0; modes];
                if modes > 0 {
                    c[0] = *amplitude;
                }
                c
            }
            Self::Custom(f) => {
                // Composite Gauss–Legendre, enough panels to resolve the highest mode.
                let (gx, gw) = gauss_legendre(8);
                let panels = (4 * modes).max(64);
                let h = 1.0 / panels as f64;
                let mut c = vec![0.0; modes];
                for p in 0..panels {
                    for (xi, wi) in gx.iter().zip(&gw) {
                        let y = h * (p as f64 + 0.5 * (xi + 1.0));
                        let fy = f(y) * wi * 0.5 * h;
                        for (n, cn) in c.iter_mut().enumerate() {
                            *cn += 2.0 * fy * ((n + 1) as f64 * PI * y).sin();
                        }
                    }
                }
                c
            }
        }
    }

    /// True when u₀ ≡ 0 on [0,1] (cheap test used to skip work).
    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Sine { amplitude } if *amplitude == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cut() -> CutoffSpec {
        CutoffSpec::new(5.0).unwrap()
    }

    #[test]
    fn cutoff_examples() {
        assert_eq!(cutoff_eval(&cut(), 4.9), 1.0);
        assert_eq!(cutoff_eval(&cut(), 6.2), 0.0);
        assert_eq!(cutoff_eval(&cut(), 5.5), 0.5);
        assert_eq!(cutoff_eval(&cut(), -5.5), 0.5);
        assert!(CutoffSpec::new(0.0).is_err());
    }

    #[test]
    fn cutoff_is_c1_at_the_joints() {
        let c = cut();
        for &r in &[5.0, 6.0] {
            let h = 1e-7;
            let left = (cutoff_eval(&c, r) - cutoff_eval(&c, r - h)) / h;
            let right = (cutoff_eval(&c, r + h) - cutoff_eval(&c, r)) / h;
            assert!((left - right).abs() < 1e-6, "{left} {right}");
            assert_eq!(cutoff_slope(&c, r), 0.0);
        }
        let max = (0..1000).map(|k| cutoff_slope(&c, 5.0 + k as f64 / 1000.0).abs()).fold(0.0, f64::max);
        assert!((max - MAX_CUTOFF_SLOPE).abs() < 1e-5 && max <= 2.0);
    }

    #[test]
    fn truncation_regions() {
        let p = CoefficientPair::nonlinear(0.5, 1.0, 0.25);
        assert_eq!(truncated_drift(&p, &cut(), 0.3, 2.0), p.f(0.3, 2.0));
        assert_eq!(truncated_diffusion(&p, &cut(), 0.3, -2.0), p.sigma(0.3, -2.0));
        assert_eq!(truncated_drift(&p, &cut(), 0.3, 7.0), 0.0);
        assert_eq!(truncated_diffusion(&p, &cut(), 0.3, -6.0), 0.0);
        let a = CoefficientPair::additive(1.0);
        for &u in &[-10.0, 0.0, 3.0] {
            assert_eq!(truncated_drift(&a, &cut(), 0.5, u), 0.0);
        }
    }

    #[test]
    fn multiplier_examples() {
        let a = CoefficientPair::additive(1.0);
        assert_eq!(multiplier_fields(&a, &cut(), 0.4, 1.3), (0.0, 0.0));
        let p = CoefficientPair::nonlinear(0.5, 1.0, 0.25);
        assert_eq!(multiplier_fields(&p, &cut(), 0.4, 0.0).0, 0.5);
        let (m, mh) = multiplier_fields(&p, &cut(), 0.4, 1.7);
        assert_eq!((m, mh), (p.f_u(0.4, 1.7), p.sigma_u(0.4, 1.7)));
    }

    #[test]
    fn multipliers_match_central_differences() {
        let p = CoefficientPair::nonlinear(0.5, 1.0, 0.25);
        let c = cut();
        let h = 1e-5;
        for k in 0..200 {
            let u = -7.0 + 14.0 * (k as f64 + 0.5) / 200.0;
            let (m, mh) = multiplier_fields(&p, &c, 0.5, u);
            let fd = (truncated_drift(&p, &c, 0.5, u + h) - truncated_drift(&p, &c, 0.5, u - h)) / (2.0 * h);
            let sd = (truncated_diffusion(&p, &c, 0.5, u + h) - truncated_diffusion(&p, &c, 0.5, u - h)) / (2.0 * h);
            assert!((m - fd).abs() < 1e-8 && (mh - sd).abs() < 1e-8, "u={u}");
            let (cf, cs) = p.effective_constants();
            assert!(m.abs() <= cf && mh.abs() <= cs);
        }
    }

    #[test]
    fn validation_examples() {
        let xs: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let mut unit = CoefficientPair::additive(1.0);
        unit.c0 = 0.5;
        let r = validate_assumptions(&unit, (-10.0, 10.0), &xs);
        assert!(r.passed());
        let floor = r.checks.iter().find(|c| c.name.starts_with("diffusion at least")).unwrap();
        assert!((floor.margin - 0.5).abs() < 1e-15);

        let bad = CoefficientPair::new(
            "linear",
            Arc::new(|_, _| 0.0),
            Arc::new(|_, _| 0.0),
            Arc::new(|_, u| 0.1 + u),
            Arc::new(|_, _| 1.0),
            0.0,
            2.0,
            0.1,
        );
        let r = validate_assumptions(&bad, (0.0, 100.0), &xs);
        assert!(!r.passed());
        assert_eq!(r.failures()[0].name, "diffusion bounded by K_sigma");

        let mut nl = CoefficientPair::nonlinear(0.5, 1.0, 0.25);
        assert!(validate_assumptions(&nl, (-20.0, 20.0), &xs).passed());
        nl.c0 = 0.5;
        assert!(validate_assumptions(&nl, (-20.0, 20.0), &xs).passed());
    }

    #[test]
    fn families_by_name() {
        let p = CoefficientPair::from_family("nonlinear", &[]).unwrap();
        assert_eq!((p.k_f, p.k_sigma, p.c0), (0.5, 1.25, 0.75));
        let a = CoefficientPair::from_family("additive", &[2.0]).unwrap();
        assert_eq!(a.sigma(0.1, 5.0), 2.0);
        assert!(a.state_independent);
        assert!(CoefficientPair::from_family("cubic", &[]).is_err());
        assert!(CoefficientPair::from_family("additive", &[1.0, 2.0]).is_err());
    }

    #[test]
    fn initial_condition_boundaries_and_modes() {
        let s = InitialCondition::sine(0.7);
        assert_eq!(s.eval(0.0), 0.0);
        assert_eq!(s.eval(1.0), 0.0);
        assert_eq!(s.modes(3), vec![0.7, 0.0, 0.0]);
        assert!(InitialCondition::custom(|x| x + 1.0).is_err());
        let parabola = InitialCondition::custom(|x| x * (1.0 - x)).unwrap();
        let c = parabola.modes(5);
        // 2∫ x(1−x) sin(nπx) dx = 8/(nπ)³ for odd n, 0 for even n.
        for (k, cn) in c.iter().enumerate() {
            let n = (k + 1) as f64;
            let want = if (k + 1) % 2 == 1 { 8.0 / (n * PI).powi(3) } else { 0.0 };
            assert!((cn - want).abs() < 1e-13, "n={n} {cn} {want}");
        }
    }
}

//! Kernel density estimates for u(t,x) and for sup u over a window.

use std::f64::consts::PI;
use std::io::{self, Write};

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::solver::SolutionField;

pub const MIN_SAMPLES: usize = 100;
pub const GRID_POINTS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("density: need at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("density: degenerate law, all {n} samples equal {value}")]
    DegenerateLaw { n: usize, value: f64 },
    #[error("density: non-finite sample")]
    NonFinite,
    #[error("density: empty window {0}")]
    EmptyWindow(String),
    #[error("density: bad bandwidth {0}")]
    BadBandwidth(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BandwidthRule {
    /// 1.06·σ̂·n^{−1/5}
    #[default]
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub samples: usize,
    pub bandwidth: f64,
    pub eval_grid: Vec<f64>,
    pub density: Vec<f64>,
    pub statistic_vs_reference: Option<(String, f64)>,
}

impl DensityEstimate {
    /// Trapezoid integral over the evaluation grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.eval_grid, &self.density)
    }

    /// Linear interpolation, zero outside the grid.
    pub fn eval(&self, x: f64) -> f64 {
        let g = &self.eval_grid;
        if x < g[0] || x > g[g.len() - 1] {
            return 0.0;
        }
        let h = g[1] - g[0];
        let k = (((x - g[0]) / h) as usize).min(g.len() - 2);
        let w = (x - g[k]) / h;
        self.density[k] * (1.0 - w) + self.density[k + 1] * w
    }

    pub fn with_reference(mut self, name: impl Into<String>, value: f64) -> Self {
        self.statistic_vs_reference = Some((name.into(), value));
        self
    }

    /// First line `# {json header}`, then `abscissa,density` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = serde_json::json!({
            "bandwidth": self.bandwidth,
            "n": self.samples,
            "integral": self.integral(),
        });
        if let Some((name, value)) = &self.statistic_vs_reference {
            header["reference"] = serde_json::json!({ "statistic": name, "value": value });
        }
        writeln!(w, "# {header}")?;
        writeln!(w, "abscissa,density")?;
        for (x, d) in self.eval_grid.iter().zip(&self.density) {
            writeln!(w, "{x:e},{d:e}")?;
        }
        Ok(())
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1])).sum()
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check_samples(values: &[f64]) -> Result<(), DensityError> {
    if values.len() < MIN_SAMPLES {
        return Err(DensityError::TooFewSamples(values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DensityError::NonFinite);
    }
    if values.iter().all(|&v| v == values[0]) {
        return Err(DensityError::DegenerateLaw { n: values.len(), value: values[0] });
    }
    Ok(())
}

/// Gaussian-kernel KDE on 512 points spanning [min − 3h, max + 3h].
pub fn estimate_density(values: &[f64], rule: BandwidthRule) -> Result<DensityEstimate, DensityError> {
    check_samples(values)?;
    let n = values.len();
    let h = match rule {
        BandwidthRule::Silverman => 1.06 * mean_sd(values).1 * (n as f64).powf(-0.2),
        BandwidthRule::Fixed(h) => h,
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(DensityError::BadBandwidth(h));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let eval_grid: Vec<f64> = (0..GRID_POINTS).map(|k| lo + k as f64 * step).collect();
    let norm = 1.0 / (n as f64 * h * (2.0 * PI).sqrt());
    let density = eval_grid
        .par_iter()
        .map(|&x| {
            let s: f64 = values.iter().map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum();
            s * norm
        })
        .collect();
    Ok(DensityEstimate { samples: n, bandwidth: h, eval_grid, density, statistic_vs_reference: None })
}

/// sup_x |F_n(x) − F(x)| of the empirical CDF against `cdf`.
pub fn ks_statistic(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs())
    })
}

pub fn ks_vs_normal(values: &[f64], mean: f64, sd: f64) -> f64 {
    let law = Normal::new(mean, sd).expect("positive standard deviation");
    ks_statistic(values, |x| law.cdf(x))
}

/// Closed rectangle of grid nodes: t in (t_lo, t_hi] (t_lo = 0 excludes the initial row), x in [x_lo, x_hi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub t: (f64, f64),
    pub x: (f64, f64),
}

impl Window {
    /// [l, 1−l] × (0, T].
    pub fn interior(l: f64, t_final: f64) -> Self {
        Self { t: (0.0, t_final), x: (l, 1.0 - l) }
    }

    fn nodes(&self, field: &SolutionField) -> Result<(Vec<usize>, Vec<usize>), DensityError> {
        let grid = field.grid;
        let slack = 1e-12;
        let rows: Vec<usize> = (0..=grid.nt).filter(|&i| grid.t(i) > self.t.0 + slack && grid.t(i) <= self.t.1 + slack).collect();
        let cols: Vec<usize> = (0..=grid.nx).filter(|&j| grid.x(j) >= self.x.0 - slack && grid.x(j) <= self.x.1 + slack).collect();
        if rows.is_empty() || cols.is_empty() || !(self.x.0 > 0.0 && self.x.1 < 1.0) {
            return Err(DensityError::EmptyWindow(format!("{self:?}")));
        }
        Ok((rows, cols))
    }
}

/// Grid max of u over the window.
pub fn sup_over_window(field: &SolutionField, window: &Window) -> Result<f64, DensityError> {
    let (rows, cols) = window.nodes(field)?;
    Ok(rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| field.value(i, j)).fold(f64::NEG_INFINITY, f64::max))
}

/// Largest jump between neighbouring nodes inside the window; bounds the gap
/// between the grid max and the continuum sup up to the modulus of continuity.
pub fn adjacent_increment(field: &SolutionField, window: &Window) -> Result<f64, DensityError> {
    let (rows, cols) = window.nodes(field)?;
    let mut worst: f64 = 0.0;
    for &i in &rows {
        for pair in cols.windows(2) {
            worst = worst.max((field.value(i, pair[1]) - field.value(i, pair[0])).abs());
        }
    }
    Ok(worst)
}

pub fn sup_samples(ensemble: &[SolutionField], window: &Window) -> Result<Vec<f64>, DensityError> {
    ensemble.iter().map(|f| sup_over_window(f, window)).collect()
}

/// ∫|p − q| on a common grid spanning both supports.
pub fn l1_distance(p: &DensityEstimate, q: &DensityEstimate) -> f64 {
    let lo = p.eval_grid[0].min(q.eval_grid[0]);
    let hi = p.eval_grid[p.eval_grid.len() - 1].max(q.eval_grid[q.eval_grid.len() - 1]);
    let n = 4 * GRID_POINTS;
    let xs: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
    let diff: Vec<f64> = xs.iter().map(|&x| (p.eval(x) - q.eval(x)).abs()).collect();
    trapezoid(&xs, &diff)
}

/// Density estimates at successive refinement levels and their neighbour distances.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementReport {
    pub estimates: Vec<Result<DensityEstimate, DensityError>>,
    /// L¹ distance between levels k and k+1. Two point masses at the same value
    /// are at distance 0; a point mass against anything else counts as 2.
    pub distances: Vec<f64>,
}

impl RefinementReport {
    pub fn strictly_decreasing(&self) -> bool {
        self.distances.windows(2).all(|w| w[1] < w[0])
    }

    pub fn any_degenerate(&self) -> bool {
        self.estimates.iter().any(|e| matches!(e, Err(DensityError::DegenerateLaw { .. })))
    }
}

/// Compare density estimates of samples drawn at successive coupled levels.
pub fn refinement_stability(levels: &[Vec<f64>], rule: BandwidthRule) -> Result<RefinementReport, DensityError> {
    if levels.len() < 2 {
        return Err(DensityError::EmptyWindow("need at least two levels".into()));
    }
    let estimates: Vec<_> = levels.iter().map(|v| estimate_density(v, rule)).collect();
    let mut distances = Vec::with_capacity(levels.len() - 1);
    for pair in estimates.windows(2) {
        let d = match (&pair[0], &pair[1]) {
            (Ok(p), Ok(q)) => l1_distance(p, q),
            (Err(DensityError::DegenerateLaw { value: a, .. }), Err(DensityError::DegenerateLaw { value: b, .. })) => {
                if a == b {
                    0.0
                } else {
                    2.0
                }
            }
            (Err(DensityError::DegenerateLaw { .. }), Ok(_)) | (Ok(_), Err(DensityError::DegenerateLaw { .. })) => 2.0,
            (Err(e), _) | (_, Err(e)) => return Err(e.clone()),
        };
        distances.push(d);
    }
    Ok(RefinementReport { estimates, distances })
}

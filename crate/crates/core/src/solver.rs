//! Mild solution u_n by Picard iteration, a finite-difference oracle, and path
//! statistics.
//!
//! The Picard map is discretized per sine mode. With c_n(t) the coefficient of
//! sin(nπx), every sweep runs the exact mode recursion
//!
//!   c_{m+1} = e^{−λΔt} c_m + φ_n Σ_k P[n,k] src_{m,k},
//!
//! where φ_n = (1 − e^{−λΔt})/(λΔt) is the time average of the kernel over a step,
//! P[n,k] the mean of 2 sin(nπ·) over cell k, and src_{m,k} = H_n f·ΔxΔt + H_n σ·ΔW
//! evaluated at the previous iterate's cell mean at t_m. Modes n = 1..nx−1 are kept.

use std::io::{self, Write};
use std::f64::consts::PI;
use std::sync::Arc;

use thiserror::Error;

use crate::coefficients::{truncated_diffusion, truncated_drift, CoefficientPair, CutoffSpec, InitialCondition};
use crate::noise::{write_grid_array, GridSpec, NoiseField};

pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_K_MAX: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("solver: k_max must be at least 1")]
    NoIterations,
    #[error("solver: tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("solver: explicit scheme unstable, dt = {dt} exceeds dx^2/2 = {limit}")]
    Unstable { dt: f64, limit: f64 },
}

/// Everything that defines the equation apart from the grid and the noise path.
#[derive(Debug, Clone)]
pub struct Model {
    pub pair: CoefficientPair,
    pub cutoff: CutoffSpec,
    pub u0: InitialCondition,
}

impl Model {
    pub fn new(pair: CoefficientPair, cutoff: CutoffSpec, u0: InitialCondition) -> Arc<Self> {
        Arc::new(Self { pair, cutoff, u0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub k_max: usize,
    pub tol: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { k_max: DEFAULT_K_MAX, tol: DEFAULT_TOL }
    }
}

/// Grid values of u_n with the iteration record.
#[derive(Debug, Clone)]
pub struct SolutionField {
    pub grid: GridSpec,
    values: Vec<f64>,
    /// Sup-norm difference between successive iterates, one entry per sweep.
    pub iterates: Vec<f64>,
    pub localized: bool,
    pub converged: bool,
    pub seed: u64,
    pub n_level: f64,
    noise: Arc<NoiseField>,
    model: Arc<Model>,
    /// Cell means of u at t_0..t_{nt−1} (spectral solutions only), nt × nx.
    cell_means: Option<Vec<f64>>,
}

impl SolutionField {
    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * (self.grid.nx + 1) + j]
    }

    /// Node values, row-major (nt+1) × (nx+1).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.grid.nx + 1;
        &self.values[i * w..(i + 1) * w]
    }

    pub fn noise(&self) -> &Arc<NoiseField> {
        &self.noise
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn cell_means(&self) -> Option<&[f64]> {
        self.cell_means.as_deref()
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Binary dump with the noise layout: header, then (nt+1)×(nx+1) values.
    pub fn write_binary<W: Write>(&self, w: W) -> io::Result<()> {
        write_grid_array(w, self.grid.nx as u32, self.grid.nt as u32, self.grid.t_final, &self.values)
    }

    /// JSON sidecar for [`SolutionField::write_binary`].
    pub fn sidecar_json(&self) -> String {
        serde_json::json!({
            "seed": self.seed,
            "n_level": self.n_level,
            "iterate_deltas": self.iterates,
            "localized": self.localized,
            "converged": self.converged,
            "nx": self.grid.nx,
            "nt": self.grid.nt,
            "t_final": self.grid.t_final,
        })
        .to_string()
    }
}

/// sin(πa/b) with the argument reduced exactly first.
fn sin_pi_ratio(a: usize, b: usize) -> f64 {
    let r = a % (2 * b);
    (PI * r as f64 / b as f64).sin()
}

fn cos_pi_ratio(a: usize, b: usize) -> f64 {
    let r = a % (2 * b);
    (PI * r as f64 / b as f64).cos()
}

/// Precomputed per-mode operators for one grid.
#[derive(Debug, Clone)]
pub(crate) struct Spectral {
    pub nx: usize,
    pub modes: usize,
    /// e^{−λ_n Δt}
    pub dec: Vec<f64>,
    /// (1 − e^{−λ_n Δt})/(λ_n Δt)
    pub phi: Vec<f64>,
    /// Cell means of 2 sin(nπ·), modes × nx.
    pub p: Vec<f64>,
    /// Transpose of `p` scaled by ½: cell means of sin(nπ·), nx × modes.
    pub half_pt: Vec<f64>,
    /// sin(nπx_j), (nx+1) × modes, boundary rows exactly zero.
    pub s: Vec<f64>,
}

impl Spectral {
    pub fn new(grid: &GridSpec) -> Self {
        let nx = grid.nx;
        let modes = nx - 1;
        let dt = grid.dt();
        let dx = grid.dx();
        let mut dec = Vec::with_capacity(modes);
        let mut phi = Vec::with_capacity(modes);
        for n in 1..=modes {
            let ld = PI * PI * (n * n) as f64 * dt;
            dec.push((-ld).exp());
            phi.push(-(-ld).exp_m1() / ld);
        }
        let mut p = vec![0.0; modes * nx];
        let mut half_pt = vec![0.0; nx * modes];
        for n in 1..=modes {
            for k in 0..nx {
                let v = 2.0 * (cos_pi_ratio(n * k, nx) - cos_pi_ratio(n * (k + 1), nx)) / (n as f64 * PI * dx);
                p[(n - 1) * nx + k] = v;
                half_pt[k * modes + n - 1] = 0.5 * v;
            }
        }
        let mut s = vec![0.0; (nx + 1) * modes];
        for j in 1..nx {
            for n in 1..=modes {
                s[j * modes + n - 1] = sin_pi_ratio(n * j, nx);
            }
        }
        Self { nx, modes, dec, phi, p, half_pt, s }
    }

    /// out[n] = Σ_k P[n,k] v[k]
    #[inline]
    pub fn project(&self, v: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.p.chunks_exact(self.nx)) {
            *o = dot(row, v);
        }
    }

    /// out[k] = Σ_n ½P[n,k] c[n]
    #[inline]
    pub fn cell_synth(&self, c: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.half_pt.chunks_exact(self.modes)) {
            *o = dot(row, c);
        }
    }

    /// out[j] = Σ_n sin(nπx_j) c[n]
    #[inline]
    pub fn node_synth(&self, c: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.s.chunks_exact(self.modes)) {
            *o = dot(row, c);
        }
    }

    /// out[k] = Σ_n P[n,k] g[n] (adjoint of `project`).
    #[inline]
    pub fn project_t(&self, g: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (gn, row) in g.iter().zip(self.p.chunks_exact(self.nx)) {
            for (o, pv) in out.iter_mut().zip(row) {
                *o += gn * pv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the loop vectorizable without changing with thread count.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn cell_midpoints(grid: &GridSpec) -> Vec<f64> {
    (0..grid.nx).map(|k| (k as f64 + 0.5) * grid.dx()).collect()
}

/// Deterministic heat flow G_t u₀ on the grid: node values and cell means.
fn heat_flow(ops: &Spectral, grid: &GridSpec, u0: &InitialCondition, values: &mut [f64], means: &mut [f64]) {
    let (nx, nt) = (grid.nx, grid.nt);
    let mut c = u0.modes(ops.modes);
    for j in 0..=nx {
        values[j] = u0.eval(grid.x(j));
    }
    ops.cell_synth(&c, &mut means[0..nx]);
    for m in 0..nt {
        c.iter_mut().zip(&ops.dec).for_each(|(cn, d)| *cn *= d);
        ops.node_synth(&c, &mut values[(m + 1) * (nx + 1)..(m + 2) * (nx + 1)]);
        if m + 1 < nt {
            ops.cell_synth(&c, &mut means[(m + 1) * nx..(m + 2) * nx]);
        }
    }
}

/// One application of the discrete Picard map.
fn picard_sweep(ops: &Spectral, grid: &GridSpec, model: &Model, noise: &NoiseField, mids: &[f64], prev_means: &[f64], values: &mut [f64], means: &mut [f64]) {
    let (nx, nt) = (grid.nx, grid.nt);
    let cell = grid.dx() * grid.dt();
    let mut c = model.u0.modes(ops.modes);
    for j in 0..=nx {
        values[j] = model.u0.eval(grid.x(j));
    }
    means[0..nx].copy_from_slice(&prev_means[0..nx]);
    let mut src = vec![0.0; nx];
    let mut proj = vec![0.0; ops.modes];
    for m in 0..nt {
        // Step m reads the noise row m and the state at t_m only.
        let row = noise.row(m);
        let state = &prev_means[m * nx..(m + 1) * nx];
        for k in 0..nx {
            let u = state[k];
            let drift = truncated_drift(&model.pair, &model.cutoff, mids[k], u);
            let diff = truncated_diffusion(&model.pair, &model.cutoff, mids[k], u);
            src[k] = drift * cell + diff * row[k];
        }
        ops.project(&src, &mut proj);
        for n in 0..ops.modes {
            c[n] = ops.dec[n] * c[n] + ops.phi[n] * proj[n];
        }
        ops.node_synth(&c, &mut values[(m + 1) * (nx + 1)..(m + 2) * (nx + 1)]);
        if m + 1 < nt {
            ops.cell_synth(&c, &mut means[(m + 1) * nx..(m + 2) * nx]);
        }
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Picard iteration for the truncated mild equation, started from u_{n,0} = G_t u₀.
///
/// Stops at the first sweep whose sup-norm delta is below `tol`, or after `k_max`
/// sweeps with `converged = false`. For a state-independent pair the second sweep
/// would reproduce the first exactly, so it is recorded as a zero delta without
/// being recomputed.
pub fn picard_solve(model: &Arc<Model>, noise: &Arc<NoiseField>, opts: PicardOptions) -> Result<SolutionField, SolverError> {
    if opts.k_max == 0 {
        return Err(SolverError::NoIterations);
    }
    if !(opts.tol > 0.0) {
        return Err(SolverError::BadTolerance(opts.tol));
    }
    let grid = noise.grid();
    let ops = Spectral::new(&grid);
    let mids = cell_midpoints(&grid);
    let (nv, nm) = ((grid.nt + 1) * (grid.nx + 1), grid.nt * grid.nx);
    let mut values = vec![0.0; nv];
    let mut means = vec![0.0; nm];
    heat_flow(&ops, &grid, &model.u0, &mut values, &mut means);
    let mut next_values = vec![0.0; nv];
    let mut next_means = vec![0.0; nm];
    let mut iterates = Vec::new();
    let mut converged = false;
    for k in 1..=opts.k_max {
        if k == 2 && model.pair.state_independent {
            iterates.push(0.0);
            converged = true;
            break;
        }
        picard_sweep(&ops, &grid, model, noise, &mids, &means, &mut next_values, &mut next_means);
        let delta = sup_diff(&values, &next_values);
        std::mem::swap(&mut values, &mut next_values);
        std::mem::swap(&mut means, &mut next_means);
        iterates.push(delta);
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    let n_level = model.cutoff.level();
    let mut field = SolutionField {
        grid,
        values,
        iterates,
        localized: false,
        converged,
        seed: noise.seed(),
        n_level,
        noise: Arc::clone(noise),
        model: Arc::clone(model),
        cell_means: Some(means),
    };
    field.localized = localization_check(&field, n_level);
    Ok(field)
}

/// True iff every grid value satisfies |u| < n_level.
pub fn localization_check(field: &SolutionField, n_level: f64) -> bool {
    field.sup_abs() < n_level
}

/// Finite-difference time stepping for the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdScheme {
    /// Forward Euler in time; requires Δt ≤ Δx²/2.
    Explicit,
    /// Crank–Nicolson Laplacian with explicit drift and noise.
    SemiImplicit,
}

/// Independent finite-difference solution on the nodes.
///
/// Node j is forced by the noise mass of its dual cell, σ·(ΔW_{j−1} + ΔW_j)/2 per
/// unit length Δx, with σ and the drift taken at the current node value.
pub fn fd_oracle_solve(model: &Arc<Model>, noise: &Arc<NoiseField>, scheme: FdScheme) -> Result<SolutionField, SolverError> {
    let grid = noise.grid();
    let (nx, nt) = (grid.nx, grid.nt);
    let (dx, dt) = (grid.dx(), grid.dt());
    let r = dt / (dx * dx);
    if scheme == FdScheme::Explicit && dt > 0.5 * dx * dx {
        return Err(SolverError::Unstable { dt, limit: 0.5 * dx * dx });
    }
    let w = nx + 1;
    let mut values = vec![0.0; (nt + 1) * w];
    for j in 1..nx {
        values[j] = model.u0.eval(grid.x(j));
    }
    let inner = nx - 1;
    // Thomas factorization of (1 + r) on the diagonal, −r/2 off it.
    let (diag, off) = (1.0 + r, -0.5 * r);
    let mut cprime = vec![0.0; inner];
    let mut denom = vec![0.0; inner];
    for i in 0..inner {
        let d = if i == 0 { diag } else { diag - off * cprime[i - 1] };
        denom[i] = d;
        cprime[i] = off / d;
    }
    let mut rhs = vec![0.0; inner];
    for m in 0..nt {
        let (prev, next) = values.split_at_mut((m + 1) * w);
        let u = &prev[m * w..];
        let row = noise.row(m);
        for j in 1..nx {
            let x = grid.x(j);
            let lap = u[j - 1] - 2.0 * u[j] + u[j + 1];
            let drift = truncated_drift(&model.pair, &model.cutoff, x, u[j]);
            let diff = truncated_diffusion(&model.pair, &model.cutoff, x, u[j]);
            let forcing = dt * drift + diff * 0.5 * (row[j - 1] + row[j]) / dx;
            rhs[j - 1] = match scheme {
                FdScheme::Explicit => u[j] + r * lap + forcing,
                FdScheme::SemiImplicit => u[j] + 0.5 * r * lap + forcing,
            };
        }
        let out = &mut next[..w];
        match scheme {
            FdScheme::Explicit => out[1..nx].copy_from_slice(&rhs),
            FdScheme::SemiImplicit => {
                let mut dprime = vec![0.0; inner];
                for i in 0..inner {
                    let prev_d = if i == 0 { 0.0 } else { dprime[i - 1] };
                    dprime[i] = (rhs[i] - off * prev_d) / denom[i];
                }
                for i in (0..inner).rev() {
                    let nextv = if i + 1 < inner { out[i + 2] } else { 0.0 };
                    out[i + 1] = dprime[i] - cprime[i] * nextv;
                }
            }
        }
        out[0] = 0.0;
        out[nx] = 0.0;
    }
    let n_level = model.cutoff.level();
    let mut field = SolutionField {
        grid,
        values,
        iterates: Vec::new(),
        localized: false,
        converged: true,
        seed: noise.seed(),
        n_level,
        noise: Arc::clone(noise),
        model: Arc::clone(model),
        cell_means: None,
    };
    field.localized = localization_check(&field, n_level);
    Ok(field)
}

/// ‖u(t_i,·)‖_∞ for every time index.
pub fn sup_norm_profile(field: &SolutionField) -> Vec<f64> {
    (0..=field.grid.nt).map(|i| field.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect()
}

/// max_i of the sample mean of ‖u(t_i,·)‖_∞^p over an ensemble of profiles.
pub fn moment_from_profiles(profiles: &[Vec<f64>], p: f64) -> f64 {
    assert!(!profiles.is_empty(), "moment of an empty ensemble");
    let len = profiles[0].len();
    let n = profiles.len() as f64;
    (0..len).map(|i| profiles.iter().map(|pr| pr[i].powf(p)).sum::<f64>() / n).fold(0.0, f64::max)
}

/// max over time indices of the sample mean of ‖u(t_i,·)‖_∞^p.
pub fn moment_report(ensemble: &[SolutionField], p: f64) -> f64 {
    let profiles: Vec<Vec<f64>> = ensemble.iter().map(sup_norm_profile).collect();
    moment_from_profiles(&profiles, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heat_kernel::{eval_hybrid, KernelSpec};
    use crate::noise::sample_noise;

    fn model(pair: CoefficientPair, u0: InitialCondition) -> Arc<Model> {
        Model::new(pair, CutoffSpec::new(5.0).unwrap(), u0)
    }

    #[test]
    fn spectral_operators_are_consistent() {
        let g = GridSpec::new(16, 4, 1.0).unwrap();
        let ops = Spectral::new(&g);
        // Cell means of sin(nπ·) integrate the nodal interpolant exactly for n = 1.
        let mut c = vec![0.0; ops.modes];
        c[0] = 1.0;
        let mut cells = vec![0.0; 16];
        ops.cell_synth(&c, &mut cells);
        for (k, v) in cells.iter().enumerate() {
            let exact = ((PI * k as f64 / 16.0).cos() - (PI * (k + 1) as f64 / 16.0).cos()) / (PI / 16.0);
            assert!((v - exact).abs() < 1e-14);
        }
        let mut nodes = vec![0.0; 17];
        ops.node_synth(&c, &mut nodes);
        assert_eq!(nodes[0], 0.0);
        assert_eq!(nodes[16], 0.0);
        // project_t is the transpose of project.
        let v: Vec<f64> = (0..16).map(|k| (k as f64 * 0.37).sin()).collect();
        let gm: Vec<f64> = (0..15).map(|n| (n as f64 * 0.91).cos()).collect();
        let mut pv = vec![0.0; 15];
        ops.project(&v, &mut pv);
        let mut ptg = vec![0.0; 16];
        ops.project_t(&gm, &mut ptg);
        assert!((dot(&pv, &gm) - dot(&v, &ptg)).abs() < 1e-12);
    }

    #[test]
    fn zero_data_gives_zero_field() {
        let g = GridSpec::new(16, 32, 0.1).unwrap();
        let noise = Arc::new(NoiseField::zeros(g));
        let m = model(CoefficientPair::additive(1.0), InitialCondition::sine(0.0));
        let f = picard_solve(&m, &noise, PicardOptions::default()).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
        assert!(f.localized && f.converged);
        let fd = fd_oracle_solve(&m, &noise, FdScheme::SemiImplicit).unwrap();
        assert!(fd.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn additive_second_sweep_is_exactly_zero() {
        let g = GridSpec::new(16, 64, 0.2).unwrap();
        let noise = Arc::new(sample_noise(g, 5));
        let mut pair = CoefficientPair::additive(1.0);
        let m = model(pair.clone(), InitialCondition::sine(0.0));
        let f = picard_solve(&m, &noise, PicardOptions::default()).unwrap();
        assert_eq!(f.iterates.len(), 2);
        assert_eq!(f.iterates[1], 0.0);
        // Same result with the shortcut disabled: the second sweep is recomputed.
        pair.state_independent = false;
        let m2 = model(pair, InitialCondition::sine(0.0));
        let f2 = picard_solve(&m2, &noise, PicardOptions::default()).unwrap();
        assert_eq!(f2.iterates[1], 0.0);
        assert_eq!(f2.values(), f.values());
    }

    #[test]
    fn deterministic_heat_flow_matches_kernel_quadrature() {
        let g = GridSpec::new(32, 50, 0.1).unwrap();
        let noise = Arc::new(NoiseField::zeros(g));
        let u0 = InitialCondition::custom(|x| x * (1.0 - x)).unwrap();
        let m = model(CoefficientPair::additive(1.0), u0);
        let f = picard_solve(&m, &noise, PicardOptions::default()).unwrap();
        let spec = KernelSpec::default();
        let (gx, gw) = crate::quadrature::gauss_legendre(16);
        for &i in &[10usize, 50] {
            let t = g.t(i);
            for j in [5usize, 16, 27] {
                let x = g.x(j);
                let mut q = 0.0;
                for p in 0..64 {
                    for (xi, wi) in gx.iter().zip(&gw) {
                        let y = (p as f64 + 0.5 * (xi + 1.0)) / 64.0;
                        q += wi * 0.5 / 64.0 * eval_hybrid(&spec, t, x, y).unwrap() * y * (1.0 - y);
                    }
                }
                assert!((f.value(i, j) - q).abs() < 1e-6, "t={t} x={x}: {} vs {q}", f.value(i, j));
            }
        }
    }

    #[test]
    fn dirichlet_rows_and_initial_row() {
        let g = GridSpec::new(16, 128, 0.25).unwrap();
        let noise = Arc::new(sample_noise(g, 11));
        let m = model(CoefficientPair::nonlinear(0.5, 1.0, 0.25), InitialCondition::sine(1.0));
        for f in [picard_solve(&m, &noise, PicardOptions::default()).unwrap(), fd_oracle_solve(&m, &noise, FdScheme::SemiImplicit).unwrap()] {
            for i in 0..=g.nt {
                assert_eq!(f.value(i, 0), 0.0);
                assert_eq!(f.value(i, g.nx), 0.0);
            }
            for j in 0..=g.nx {
                assert_eq!(f.value(0, j), m.u0.eval(g.x(j)));
            }
        }
    }

    #[test]
    fn explicit_scheme_rejects_large_steps() {
        let g = GridSpec::new(32, 10, 0.1).unwrap();
        let noise = Arc::new(NoiseField::zeros(g));
        let m = model(CoefficientPair::additive(1.0), InitialCondition::sine(1.0));
        assert!(matches!(fd_oracle_solve(&m, &noise, FdScheme::Explicit), Err(SolverError::Unstable { .. })));
    }

    #[test]
    fn fd_schemes_converge_to_heat_semigroup() {
        // u0 = sin(πx) decays as e^{−π²t} exactly.
        let m = model(CoefficientPair::additive(1.0), InitialCondition::sine(1.0));
        let mut errs = Vec::new();
        for &(nx, nt) in &[(16usize, 512usize), (32, 2048)] {
            let g = GridSpec::new(nx, nt, 0.1).unwrap();
            let noise = Arc::new(NoiseField::zeros(g));
            for scheme in [FdScheme::Explicit, FdScheme::SemiImplicit] {
                let f = fd_oracle_solve(&m, &noise, scheme).unwrap();
                let err = (0..=nx).map(|j| (f.value(nt, j) - (-PI * PI * 0.1).exp() * (PI * g.x(j)).sin()).abs()).fold(0.0, f64::max);
                errs.push(err);
            }
        }
        assert!(errs[2] < errs[0] / 3.0 && errs[3] < errs[1] / 3.0, "{errs:?}");
        assert!(errs[3] < 2e-3);
    }

    #[test]
    fn rejects_bad_options() {
        let g = GridSpec::new(4, 4, 0.1).unwrap();
        let noise = Arc::new(NoiseField::zeros(g));
        let m = model(CoefficientPair::additive(1.0), InitialCondition::sine(1.0));
        assert_eq!(picard_solve(&m, &noise, PicardOptions { k_max: 0, tol: 1e-4 }).unwrap_err(), SolverError::NoIterations);
        assert!(picard_solve(&m, &noise, PicardOptions { k_max: 3, tol: 0.0 }).is_err());
    }

    #[test]
    fn localization_examples() {
        let g = GridSpec::new(4, 2, 0.1).unwrap();
        let noise = Arc::new(NoiseField::zeros(g));
        let m = model(CoefficientPair::additive(1.0), InitialCondition::sine(0.0));
        let mut f = picard_solve(&m, &noise, PicardOptions::default()).unwrap();
        assert!(localization_check(&f, 1.0));
        f.values[7] = 2.0;
        assert!(!localization_check(&f, 1.0));
        assert_eq!(moment_report(&[f.clone()], 2.0), 4.0);
        f.values[7] = 0.0;
        assert_eq!(moment_report(&[f], 2.0), 0.0);
    }

    #[test]
    fn binary_dump_and_sidecar() {
        let g = GridSpec::new(4, 3, 0.5).unwrap();
        let noise = Arc::new(sample_noise(g, 3));
        let m = model(CoefficientPair::additive(1.0), InitialCondition::sine(1.0));
        let f = picard_solve(&m, &noise, PicardOptions::default()).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        let (nx, nt, t, data) = crate::noise::read_grid_array(&buf[..], |nx, nt| (nx + 1) * (nt + 1)).unwrap();
        assert_eq!((nx, nt, t), (4, 3, 0.5));
        assert_eq!(data, f.values());
        assert!(f.sidecar_json().contains("\"seed\":3"));
    }
}

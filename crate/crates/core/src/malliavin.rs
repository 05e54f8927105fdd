//! Malliavin derivative D_{s,y}u_n(t,x) of the discrete solution.
//!
//! D = a + b with the explicit source a(t,x) = G_{t−s}(x,y)·A, A = H_n(|u(s,y)|)σ(y,u(s,y)),
//! and b the solution of the linear mild equation
//!
//!   b(t,x) = ∫_s^t∫ G_{t−θ}(x,r) [m(θ,r) D(θ,r) dr dθ + m̂(θ,r) D(θ,r) W(dr,dθ)],
//!
//! discretized with the same mode recursion and noise cells as the base solve. Inside
//! the convolutions D enters through its cell means at the left end of each step. For
//! lags where M-mode truncation of the kernel is visible, the cell means of a come from
//! the exact kernel; beyond them the modal form is used.
//!
//! Two routes compute b. [`derivative_solve`] fixes (s,y) and iterates forward in t;
//! [`source_slice`] fixes (t,x) and runs the transposed recursion backward, giving
//! b for every (s,y) at once. They evaluate the same discrete functional.

use std::f64::consts::PI;
use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::coefficients::{multiplier_fields, truncated_diffusion};
use crate::heat_kernel::{cell_mean, eval_hybrid, l2_time_integral, KernelSpec};
use crate::noise::GridSpec;
use crate::quadrature::GradedRule;
use crate::solver::{dot, SolutionField, Spectral};

/// Exponent used by every ε^δ bound check.
pub const DELTA: f64 = 0.45;
/// Window lengths ε below this satisfy 2π²ε < 3/2, where 1 − e^{−z} ≥ z/2 holds.
pub const A2_BOUND_EPS_MAX: f64 = 3.0 / (4.0 * PI * PI);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MalliavinError {
    #[error("malliavin: base solution has no cell means (finite-difference bases are not supported)")]
    NoCellMeans,
    #[error("malliavin: index {what} = {index} out of range (limit {limit})")]
    OutOfRange { what: &'static str, index: usize, limit: usize },
    #[error("malliavin: base grid does not match the derivative context")]
    GridMismatch,
    #[error("malliavin: fields do not form a regular (s,y) sub-grid: {0}")]
    NotSubGrid(String),
    #[error("malliavin: exponent p = {0} must exceed 4")]
    ExponentTooSmall(f64),
    #[error("malliavin: x = {x} lies outside [l, 1 - l] with l = {l}")]
    OutsideCompact { x: f64, l: f64 },
    #[error("malliavin: empty ensemble")]
    EmptyEnsemble,
}

fn check_index(what: &'static str, index: usize, limit: usize) -> Result<(), MalliavinError> {
    if index > limit {
        return Err(MalliavinError::OutOfRange { what, index, limit });
    }
    Ok(())
}

/// Grid-level precomputation shared by all derivative solves on one grid.
#[derive(Debug, Clone)]
pub struct DerivativeContext {
    grid: GridSpec,
    kernel: KernelSpec,
    ops: Spectral,
    /// Number of leading lags whose integrand uses exact kernel cell means.
    exact_steps: usize,
    /// exact − modal cell means of G_τ(·, y_q): exact_steps × (nx+1) × nx.
    correction: Vec<f64>,
    /// exact − modal step response at node x_j to a unit source on cell k,
    /// l steps earlier (time-averaged over the step): exact_steps × (nx+1) × nx.
    node_correction: Vec<f64>,
    /// Same for the cell-k mean response to a unit source on cell k': exact_steps × nx × nx.
    cell_correction: Vec<f64>,
}

impl DerivativeContext {
    pub fn new(grid: GridSpec, kernel: KernelSpec) -> Self {
        let ops = Spectral::new(&grid);
        let (nx, modes) = (grid.nx, ops.modes);
        let dt = grid.dt();
        // Beyond this lag the modes above nx−1 carry less than ~1e−12.
        let tau_c = 28.0 / (PI * PI * (nx * nx) as f64);
        let exact_steps = ((tau_c / dt).ceil() as usize).clamp(1, grid.nt);
        let mut correction = vec![0.0; exact_steps * (nx + 1) * nx];
        let mut modal = vec![0.0; modes];
        let mut cells = vec![0.0; nx];
        for l in 0..exact_steps {
            let tau = l as f64 * dt;
            for q in 1..nx {
                let y = grid.x(q);
                for n in 0..modes {
                    let lam = PI * PI * ((n + 1) * (n + 1)) as f64;
                    modal[n] = 2.0 * (-lam * tau).exp() * ops.s[q * modes + n];
                }
                ops.cell_synth(&modal, &mut cells);
                let base = (l * (nx + 1) + q) * nx;
                for k in 0..nx {
                    let exact = if l == 0 {
                        if k + 1 == q || k == q {
                            0.5 / grid.dx()
                        } else {
                            0.0
                        }
                    } else {
                        cell_mean(&kernel, tau, y, grid.x(k), grid.x(k + 1)).expect("positive lag")
                    };
                    correction[base + k] = exact - cells[k];
                }
            }
        }
        let node_correction = node_corrections(&grid, &kernel, &ops, exact_steps);
        let cell_correction = cell_corrections(&grid, exact_steps);
        Self { grid, kernel, ops, exact_steps, correction, node_correction, cell_correction }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    #[inline]
    fn correction_row(&self, lag: usize, q: usize) -> Option<&[f64]> {
        self.table_row(&self.correction, lag, q)
    }

    #[inline]
    fn node_correction_row(&self, lag: usize, j: usize) -> Option<&[f64]> {
        self.table_row(&self.node_correction, lag, j)
    }

    #[inline]
    fn cell_correction(&self, lag: usize) -> Option<&[f64]> {
        let nx = self.grid.nx;
        (lag < self.exact_steps).then(|| &self.cell_correction[lag * nx * nx..(lag + 1) * nx * nx])
    }

    #[inline]
    fn table_row<'a>(&self, table: &'a [f64], lag: usize, q: usize) -> Option<&'a [f64]> {
        if lag < self.exact_steps {
            let nx = self.grid.nx;
            let base = (lag * (nx + 1) + q) * nx;
            Some(&table[base..base + nx])
        } else {
            None
        }
    }
}

/// Modes above the grid's M carry the whole difference: Σ_{n>M} e^{−λ_n lΔt} φ_n ½P[n,k]P[n,k'].
/// Terms decay at least like n^{-4}; the sum runs to 64·nx modes.
fn cell_corrections(grid: &GridSpec, exact_steps: usize) -> Vec<f64> {
    let nx = grid.nx;
    let (dt, dx) = (grid.dt(), grid.dx());
    let mut out = vec![0.0; exact_steps * nx * nx];
    let mut pn = vec![0.0; nx];
    for n in nx..=64 * nx {
        let nf = n as f64;
        let ld = PI * PI * nf * nf * dt;
        let phi = -(-ld).exp_m1() / ld;
        for (k, v) in pn.iter_mut().enumerate() {
            *v = 2.0 * ((nf * PI * k as f64 * dx).cos() - (nf * PI * (k + 1) as f64 * dx).cos()) / (nf * PI * dx);
        }
        for l in 0..exact_steps {
            let w = 0.5 * phi * (-ld * l as f64).exp();
            if w < 1e-300 {
                break;
            }
            let block = &mut out[l * nx * nx..(l + 1) * nx * nx];
            for k in 0..nx {
                let wk = w * pn[k];
                for (kk, v) in block[k * nx..(k + 1) * nx].iter_mut().enumerate() {
                    *v += wk * pn[kk];
                }
            }
        }
    }
    out
}

/// (1/Δt)∫ over [lΔt, (l+1)Δt] of the cell-k mean of G_θ(x_j, ·), minus its M-mode
/// counterpart Σ_n sin(nπx_j) e^{−λ_n lΔt} φ_n P[n,k].
fn node_corrections(grid: &GridSpec, kernel: &KernelSpec, ops: &Spectral, exact_steps: usize) -> Vec<f64> {
    let (nx, modes) = (grid.nx, ops.modes);
    let dt = grid.dt();
    let rule = GradedRule::new(2, 6, 8);
    let mut out = vec![0.0; exact_steps * (nx + 1) * nx];
    let mut weights = vec![0.0; modes];
    for l in 0..exact_steps {
        for n in 0..modes {
            weights[n] = ops.dec[n].powi(l as i32) * ops.phi[n];
        }
        for j in 1..nx {
            let x = grid.x(j);
            let base = (l * (nx + 1) + j) * nx;
            for k in 0..nx {
                let modal: f64 = (0..modes).map(|n| ops.s[j * modes + n] * weights[n] * ops.p[n * nx + k]).sum();
                // Graded toward the start of the step, where the l = 0 response is steep.
                let exact = rule.integrate(-((l + 1) as f64) * dt, -(l as f64) * dt, |_, gap| {
                    let theta = l as f64 * dt + gap;
                    if theta <= 0.0 {
                        0.0
                    } else {
                        cell_mean(kernel, theta, x, grid.x(k), grid.x(k + 1)).expect("positive lag")
                    }
                }) / dt;
                out[base + k] = exact - modal;
            }
        }
    }
    out
}

/// κ = m·ΔxΔt + m̂·ΔW on cells and the source amplitude A on nodes.
struct Multipliers {
    kappa: Vec<f64>,
    amp: Vec<f64>,
}

fn multipliers(base: &SolutionField) -> Result<Multipliers, MalliavinError> {
    let means = base.cell_means().ok_or(MalliavinError::NoCellMeans)?;
    let grid = base.grid;
    let (nx, nt) = (grid.nx, grid.nt);
    let model = base.model();
    let noise = base.noise();
    let cell = grid.dx() * grid.dt();
    let mut kappa = vec![0.0; nt * nx];
    for m in 0..nt {
        let row = noise.row(m);
        for k in 0..nx {
            let xm = (k as f64 + 0.5) * grid.dx();
            let (mf, ms) = multiplier_fields(&model.pair, &model.cutoff, xm, means[m * nx + k]);
            kappa[m * nx + k] = mf * cell + ms * row[k];
        }
    }
    let mut amp = vec![0.0; (nt + 1) * (nx + 1)];
    for i in 0..=nt {
        for j in 1..nx {
            amp[i * (nx + 1) + j] = truncated_diffusion(&model.pair, &model.cutoff, grid.x(j), base.value(i, j));
        }
    }
    Ok(Multipliers { kappa, amp })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeOptions {
    pub k_max: usize,
    pub tol: f64,
}

impl Default for DerivativeOptions {
    fn default() -> Self {
        Self { k_max: 60, tol: 1e-12 }
    }
}

/// D_{s,y}u_n on the grid for one source node (s_index, y_index).
#[derive(Debug, Clone)]
pub struct DerivativeField {
    pub base: Arc<SolutionField>,
    pub s_index: usize,
    pub y_index: usize,
    values: Vec<f64>,
    a_values: Vec<f64>,
    b_values: Vec<f64>,
    /// Sup-norm change of b per Picard sweep.
    pub iterates: Vec<f64>,
    pub converged: bool,
}

impl DerivativeField {
    fn width(&self) -> usize {
        self.base.grid.nx + 1
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width() + j]
    }

    #[inline]
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a_values[i * self.width() + j]
    }

    #[inline]
    pub fn b(&self, i: usize, j: usize) -> f64 {
        self.b_values[i * self.width() + j]
    }

    /// Row-major (nt+1) × (nx+1); rows with t_i ≤ s are zero.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Columns: t_index, x_index, t, x, value, a, b (rows with t_i > s only).
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let grid = self.base.grid;
        writeln!(w, "t_index,x_index,t,x,value,a,b")?;
        for i in self.s_index + 1..=grid.nt {
            for j in 0..=grid.nx {
                writeln!(w, "{},{},{:e},{:e},{:e},{:e},{:e}", i, j, grid.t(i), grid.x(j), self.value(i, j), self.a(i, j), self.b(i, j))?;
            }
        }
        Ok(())
    }
}

/// (a_values, b_values) of a solved field.
pub fn ab_decompose(field: &DerivativeField) -> (&[f64], &[f64]) {
    (&field.a_values, &field.b_values)
}

/// Fixed point of the linear equation for D_{s,y}u_n by Picard iteration on b.
pub fn derivative_solve(ctx: &DerivativeContext, base: &Arc<SolutionField>, s_index: usize, y_index: usize, opts: DerivativeOptions) -> Result<DerivativeField, MalliavinError> {
    let grid = base.grid;
    if grid != ctx.grid {
        return Err(MalliavinError::GridMismatch);
    }
    let (nx, nt) = (grid.nx, grid.nt);
    check_index("s_index", s_index, nt - 1)?;
    check_index("y_index", y_index, nx)?;
    let mult = multipliers(base)?;
    let ops = &ctx.ops;
    let modes = ops.modes;
    let w = nx + 1;
    let y = grid.x(y_index);
    let amp = mult.amp[s_index * w + y_index];

    let mut a_values = vec![0.0; (nt + 1) * w];
    if amp != 0.0 {
        for i in s_index + 1..=nt {
            let lag = (i - s_index) as f64 * grid.dt();
            for j in 1..nx {
                a_values[i * w + j] = amp * eval_hybrid(&ctx.kernel, lag, grid.x(j), y).expect("positive lag");
            }
        }
    }

    // Modal coefficients of b for rows s_index..=nt.
    let rows = nt - s_index + 1;
    let mut beta = vec![0.0; rows * modes];
    let mut next = vec![0.0; rows * modes];
    let mut b_nodes = vec![0.0; (nt + 1) * w];
    let mut b_next = vec![0.0; (nt + 1) * w];
    let mut iterates = Vec::new();
    let mut converged = false;
    let mut alpha = vec![0.0; modes];
    let mut cells = vec![0.0; nx];
    let mut mixed = vec![0.0; modes];
    let mut proj = vec![0.0; modes];
    // Cell sources κ⊙D̄ of the current sweep, one row per step.
    let mut sources = vec![0.0; (rows - 1) * nx];
    let mut prev_sources = vec![0.0; (rows - 1) * nx];
    for _ in 0..opts.k_max {
        for n in 0..modes {
            alpha[n] = 2.0 * ops.s[y_index * modes + n] * amp;
        }
        next[..modes].iter_mut().for_each(|v| *v = 0.0);
        for m in s_index..nt {
            let r = m - s_index;
            for n in 0..modes {
                mixed[n] = alpha[n] + beta[r * modes + n];
            }
            ops.cell_synth(&mixed, &mut cells);
            if let Some(corr) = ctx.correction_row(r, y_index) {
                for k in 0..nx {
                    cells[k] += amp * corr[k];
                }
            }
            for lag in 0..ctx.exact_steps.min(r) {
                let src = &prev_sources[(r - 1 - lag) * nx..(r - lag) * nx];
                let block = ctx.cell_correction(lag).expect("lag in range");
                for k in 0..nx {
                    cells[k] += dot(&block[k * nx..(k + 1) * nx], src);
                }
            }
            let kappa = &mult.kappa[m * nx..(m + 1) * nx];
            for k in 0..nx {
                cells[k] *= kappa[k];
            }
            sources[r * nx..(r + 1) * nx].copy_from_slice(&cells);
            ops.project(&cells, &mut proj);
            for n in 0..modes {
                next[(r + 1) * modes + n] = ops.dec[n] * next[r * modes + n] + ops.phi[n] * proj[n];
                alpha[n] *= ops.dec[n];
            }
        }
        for r in 1..rows {
            let i = s_index + r;
            ops.node_synth(&next[r * modes..(r + 1) * modes], &mut b_next[i * w..(i + 1) * w]);
            for lag in 0..ctx.exact_steps.min(r) {
                let src = &sources[(r - 1 - lag) * nx..(r - lag) * nx];
                for j in 1..nx {
                    b_next[i * w + j] += dot(ctx.node_correction_row(lag, j).expect("lag in range"), src);
                }
            }
        }
        let delta = b_nodes.iter().zip(&b_next).fold(0.0f64, |acc, (p, q)| acc.max((p - q).abs()));
        std::mem::swap(&mut beta, &mut next);
        std::mem::swap(&mut b_nodes, &mut b_next);
        std::mem::swap(&mut prev_sources, &mut sources);
        iterates.push(delta);
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    let values = a_values.iter().zip(&b_nodes).map(|(a, b)| a + b).collect();
    Ok(DerivativeField { base: Arc::clone(base), s_index, y_index, values, a_values, b_values: b_nodes, iterates, converged })
}

/// Deterministic data for slices at a fixed target (t_index, x_index).
#[derive(Debug, Clone)]
pub struct SliceContext {
    ctx: Arc<DerivativeContext>,
    t_index: usize,
    x_index: usize,
    /// G_{t−s_i}(x, y_k) for i < t_index.
    kernel_table: Vec<f64>,
    /// ∫ w(τ) dτ and ∫ τ w(τ) dτ over [t − s_{i+1}, t − s_i], w(τ) = ∫₀¹ G_τ(x,y)² dy.
    w0: Vec<f64>,
    w1: Vec<f64>,
}

/// Moments of w(τ) = G_{2τ}(x,x) over consecutive τ-intervals [τ_{r+1}, τ_r].
fn product_weights(kernel: &KernelSpec, x: f64, taus: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let rule = GradedRule::new(2, 24, 10);
    let w = |tau: f64| if tau <= 0.0 { 0.0 } else { eval_hybrid(kernel, 2.0 * tau, x, x).expect("positive lag") };
    let mut w0 = Vec::with_capacity(taus.len() - 1);
    let mut w1 = Vec::with_capacity(taus.len() - 1);
    for pair in taus.windows(2) {
        let (hi, lo) = (pair[0], pair[1]);
        w0.push(l2_time_integral(hi, x) - l2_time_integral(lo, x));
        // Graded toward the lower end, where w has its (τ^{-1/2}) singularity.
        w1.push(rule.integrate(-hi, -lo, |_, gap| {
            let tau = lo + gap;
            tau * w(tau)
        }));
    }
    (w0, w1)
}

impl SliceContext {
    pub fn new(ctx: Arc<DerivativeContext>, t_index: usize, x_index: usize) -> Result<Self, MalliavinError> {
        let grid = ctx.grid;
        check_index("t_index", t_index, grid.nt)?;
        check_index("x_index", x_index, grid.nx)?;
        let w = grid.nx + 1;
        let x = grid.x(x_index);
        let mut kernel_table = vec![0.0; t_index * w];
        for i in 0..t_index {
            let lag = (t_index - i) as f64 * grid.dt();
            for k in 1..grid.nx {
                kernel_table[i * w + k] = eval_hybrid(&ctx.kernel, lag, x, grid.x(k)).expect("positive lag");
            }
        }
        let taus: Vec<f64> = (0..=t_index).map(|i| (t_index - i) as f64 * grid.dt()).collect();
        let (w0, w1) = product_weights(&ctx.kernel, x, &taus);
        Ok(Self { ctx, t_index, x_index, kernel_table, w0, w1 })
    }

    pub fn t_index(&self) -> usize {
        self.t_index
    }

    pub fn x_index(&self) -> usize {
        self.x_index
    }

    pub fn grid(&self) -> GridSpec {
        self.ctx.grid
    }
}

/// D_{s_i,y_k}u(t,x) for every source node before a fixed target (t,x).
#[derive(Debug, Clone)]
pub struct SourceSlice {
    pub t_index: usize,
    pub x_index: usize,
    nx: usize,
    /// a, b: t_index × (nx+1); amp: A(s_i, y_k) for i = 0..=t_index.
    a: Vec<f64>,
    b: Vec<f64>,
    amp: Vec<f64>,
}

impl SourceSlice {
    #[inline]
    pub fn a(&self, i: usize, k: usize) -> f64 {
        self.a[i * (self.nx + 1) + k]
    }

    #[inline]
    pub fn b(&self, i: usize, k: usize) -> f64 {
        self.b[i * (self.nx + 1) + k]
    }

    #[inline]
    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.a(i, k) + self.b(i, k)
    }

    #[inline]
    pub fn amp(&self, i: usize, k: usize) -> f64 {
        self.amp[i * (self.nx + 1) + k]
    }
}

/// All D_{s,y}u(t,x) at a fixed target by the transposed recursion.
pub fn source_slice(sctx: &SliceContext, base: &SolutionField) -> Result<SourceSlice, MalliavinError> {
    let ctx = &sctx.ctx;
    let grid = ctx.grid;
    if base.grid != grid {
        return Err(MalliavinError::GridMismatch);
    }
    let mult = multipliers(base)?;
    let ops = &ctx.ops;
    let (nx, modes) = (grid.nx, ops.modes);
    let w = nx + 1;
    let tt = sctx.t_index;
    let xq = sctx.x_index;

    // λ_m and ζ_m for m = tt−1 down to 0; ρ_m kept for the exact-lag corrections.
    let mut lambda: Vec<f64> = ops.s[xq * modes..(xq + 1) * modes].to_vec();
    let mut zeta = vec![0.0; tt * modes];
    let mut rho = vec![0.0; tt * nx];
    let mut g = vec![0.0; modes];
    let mut cells = vec![0.0; nx];
    let mut z = vec![0.0; modes];
    for m in (0..tt).rev() {
        for n in 0..modes {
            g[n] = ops.phi[n] * lambda[n];
        }
        ops.project_t(&g, &mut cells);
        if let Some(direct) = ctx.node_correction_row(tt - 1 - m, xq) {
            for k in 0..nx {
                cells[k] += direct[k];
            }
        }
        for lag in 0..ctx.exact_steps {
            let later = m + 1 + lag;
            if later >= tt {
                break;
            }
            let block = ctx.cell_correction(lag).expect("lag in range");
            let r = &rho[later * nx..(later + 1) * nx];
            for (k, rk) in r.iter().enumerate() {
                for (c, v) in cells.iter_mut().zip(&block[k * nx..(k + 1) * nx]) {
                    *c += rk * v;
                }
            }
        }
        let kappa = &mult.kappa[m * nx..(m + 1) * nx];
        for k in 0..nx {
            cells[k] *= kappa[k];
        }
        rho[m * nx..(m + 1) * nx].copy_from_slice(&cells);
        ops.project(&cells, &mut z);
        for n in 0..modes {
            z[n] *= 0.5;
            lambda[n] = ops.dec[n] * lambda[n] + z[n];
        }
        zeta[m * modes..(m + 1) * modes].copy_from_slice(&z);
    }

    let mut a = vec![0.0; tt * w];
    let mut b = vec![0.0; tt * w];
    let amp = mult.amp[..(tt + 1) * w].to_vec();
    let mut psi = vec![0.0; modes];
    let mut two_psi = vec![0.0; modes];
    let mut row = vec![0.0; w];
    for i in (0..tt).rev() {
        for n in 0..modes {
            psi[n] = zeta[i * modes + n] + ops.dec[n] * psi[n];
            two_psi[n] = 2.0 * psi[n];
        }
        ops.node_synth(&two_psi, &mut row);
        for k in 1..nx {
            let mut acc = row[k];
            for lag in 0..ctx.exact_steps.min(tt - i) {
                if let Some(corr) = ctx.correction_row(lag, k) {
                    acc += dot(&rho[(i + lag) * nx..(i + lag + 1) * nx], corr);
                }
            }
            let amp_ik = amp[i * w + k];
            b[i * w + k] = amp_ik * acc;
            a[i * w + k] = amp_ik * sctx.kernel_table[i * w + k];
        }
    }
    Ok(SourceSlice { t_index: tt, x_index: xq, nx, a, b, amp })
}

/// ∫∫ a², ∫∫ ab, ∫∫ b² over a window [t − ε, t] × [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindowIntegrals {
    pub a2: f64,
    pub ab: f64,
    pub b2: f64,
}

impl WindowIntegrals {
    /// ∫∫ D² = a² + 2ab + b².
    pub fn total(&self) -> f64 {
        self.a2 + 2.0 * self.ab + self.b2
    }
}

/// Values on an (s,y) table with the s-rows ending just before the target time.
struct Table<'a> {
    rows: usize,
    ny: usize,
    ds: f64,
    dy: f64,
    a: &'a dyn Fn(usize, usize) -> f64,
    b: &'a dyn Fn(usize, usize) -> f64,
    g: &'a dyn Fn(usize, usize) -> f64,
    amp_y: &'a dyn Fn(usize, usize) -> f64,
    /// A(s_r, x) for r = 0..=rows (the last one at s = t).
    amp_x: &'a dyn Fn(usize) -> f64,
    w0: &'a [f64],
    w1: &'a [f64],
}

/// The a² term uses product integration in s against the exact ∫G²dy with A(s,x)²
/// linear between rows, plus a trapezoid correction for A(s,y)² − A(s,x)². The ab
/// and b² terms use the trapezoid rule in both variables; the row at s = t
/// contributes nothing (b vanishes there and the correction integrand tends to 0).
fn integrate_table(t: &Table, window_rows: usize) -> WindowIntegrals {
    let first = t.rows - window_rows;
    let mut out = WindowIntegrals::default();
    for r in first..t.rows {
        let (hi, lo) = ((t.amp_x)(r).powi(2), (t.amp_x)(r + 1).powi(2));
        let tau_lo = (t.rows - r - 1) as f64 * t.ds;
        out.a2 += lo * t.w0[r] + (hi - lo) * (t.w1[r] - tau_lo * t.w0[r]) / t.ds;
    }
    for r in first..t.rows {
        let wt = if r == first { 0.5 * t.ds } else { t.ds };
        let ax2 = (t.amp_x)(r).powi(2);
        let (mut corr, mut ab, mut b2) = (0.0, 0.0, 0.0);
        for k in 0..t.ny {
            let wy = if k == 0 || k + 1 == t.ny { 0.5 * t.dy } else { t.dy };
            let (av, bv) = ((t.a)(r, k), (t.b)(r, k));
            corr += wy * (t.g)(r, k).powi(2) * ((t.amp_y)(r, k).powi(2) - ax2);
            ab += wy * av * bv;
            b2 += wy * bv * bv;
        }
        out.a2 += wt * corr;
        out.ab += wt * ab;
        out.b2 += wt * b2;
    }
    out
}

/// Window integrals over the last `steps` time steps before the slice target.
pub fn window_integrals(sctx: &SliceContext, slice: &SourceSlice, steps: usize) -> WindowIntegrals {
    let steps = steps.min(slice.t_index);
    if steps == 0 {
        return WindowIntegrals::default();
    }
    let grid = sctx.ctx.grid;
    let w = grid.nx + 1;
    let xq = slice.x_index;
    let table = Table {
        rows: slice.t_index,
        ny: w,
        ds: grid.dt(),
        dy: grid.dx(),
        a: &|r, k| slice.a(r, k),
        b: &|r, k| slice.b(r, k),
        g: &|r, k| sctx.kernel_table[r * w + k],
        amp_y: &|r, k| slice.amp(r, k),
        amp_x: &|r| slice.amp(r, xq),
        w0: &sctx.w0,
        w1: &sctx.w1,
    };
    integrate_table(&table, steps)
}

/// ∫₀^t∫₀¹ |D_{s,y}u(t,x)|² dy ds from forward fields on a regular (s,y) sub-grid.
///
/// The fields must have s indices 0, h, ..., t_index − h and y indices on a regular
/// sub-grid of spacing g; fields at y = 0 or 1 may be omitted (they vanish).
pub fn malliavin_norm(fields: &[DerivativeField], t_index: usize, x_index: usize, kernel: &KernelSpec) -> Result<f64, MalliavinError> {
    if t_index == 0 {
        return Ok(0.0);
    }
    let first = fields.first().ok_or(MalliavinError::EmptyEnsemble)?;
    let grid = first.base.grid;
    check_index("t_index", t_index, grid.nt)?;
    check_index("x_index", x_index, grid.nx)?;
    let mut s_idx: Vec<usize> = fields.iter().map(|f| f.s_index).collect();
    s_idx.sort_unstable();
    s_idx.dedup();
    let mut y_idx: Vec<usize> = fields.iter().map(|f| f.y_index).filter(|&q| q != 0 && q != grid.nx).collect();
    y_idx.sort_unstable();
    y_idx.dedup();
    let hs = s_idx.get(1).map_or(t_index, |v| v - s_idx[0]);
    if s_idx[0] != 0 || hs == 0 || t_index % hs != 0 || s_idx.len() != t_index / hs || s_idx.iter().enumerate().any(|(r, &v)| v != r * hs) {
        return Err(MalliavinError::NotSubGrid(format!("s indices {s_idx:?} do not step evenly from 0 to {t_index}")));
    }
    let hy = y_idx.first().copied().unwrap_or(grid.nx);
    if grid.nx % hy != 0 || y_idx.iter().enumerate().any(|(k, &v)| v != (k + 1) * hy) || y_idx.len() + 1 != grid.nx / hy {
        return Err(MalliavinError::NotSubGrid(format!("y indices {y_idx:?} are not a regular sub-grid")));
    }
    let rows = s_idx.len();
    let ny = grid.nx / hy + 1;
    let mut lookup = vec![None; rows * ny];
    for f in fields {
        if f.y_index == 0 || f.y_index == grid.nx {
            continue;
        }
        lookup[(f.s_index / hs) * ny + f.y_index / hy] = Some(f);
    }
    if lookup.iter().enumerate().any(|(i, v)| v.is_none() && i % ny != 0 && i % ny != ny - 1) {
        return Err(MalliavinError::NotSubGrid("missing (s,y) fields".into()));
    }
    let ds = hs as f64 * grid.dt();
    let x = grid.x(x_index);
    let t = grid.t(t_index);
    let mult = multipliers(&first.base)?;
    let w = grid.nx + 1;
    let amp_x = |r: usize| mult.amp[(r * hs) * w + x_index];
    let amp_y = |r: usize, k: usize| mult.amp[(r * hs) * w + k * hy];
    let pick = |r: usize, k: usize, f: &dyn Fn(&DerivativeField) -> f64| lookup[r * ny + k].map_or(0.0, f);
    let a = |r: usize, k: usize| pick(r, k, &|d| d.a(t_index, x_index));
    let b = |r: usize, k: usize| pick(r, k, &|d| d.b(t_index, x_index));
    let g = |r: usize, k: usize| {
        let lag = t - (r * hs) as f64 * grid.dt();
        if k == 0 || k + 1 == ny {
            0.0
        } else {
            eval_hybrid(kernel, lag, x, grid.x(k * hy)).expect("positive lag")
        }
    };
    let taus: Vec<f64> = (0..=rows).map(|r| (rows - r) as f64 * ds).collect();
    let (w0, w1) = product_weights(kernel, x, &taus);
    let table = Table { rows, ny, ds, dy: hy as f64 * grid.dx(), a: &a, b: &b, g: &g, amp_y: &amp_y, amp_x: &amp_x, w0: &w0, w1: &w1 };
    Ok(integrate_table(&table, rows).total())
}

/// One row of the positivity probe table.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub eps: f64,
    /// Window actually used (a whole number of steps).
    pub eps_used: f64,
    pub steps: usize,
    pub mean_a2: f64,
    pub min_a2: f64,
    pub mean_b2: f64,
    /// Deterministic lower bound on ½∫∫a²: (c₁/4)·sin²(πl)·ε.
    pub half_a2_lower_bound: f64,
    /// Whether the lower bound applies (2π²ε < 3/2).
    pub bound_applies: bool,
    /// All seeds satisfy ½∫∫a² ≥ bound (vacuous when the bound does not apply).
    pub bound_holds: bool,
    pub fraction_positive: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTable {
    pub t: f64,
    pub x: f64,
    pub l: f64,
    /// Parseval constant c₁ = 2c0².
    pub c1: f64,
    pub seeds: usize,
    pub rows: Vec<ProbeRow>,
}

impl ProbeTable {
    /// Columns: eps, eps_used, steps, mean_a2, min_a2, mean_b2, half_a2_lower_bound,
    /// bound_applies, bound_holds, fraction_positive.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "eps,eps_used,steps,mean_a2,min_a2,mean_b2,half_a2_lower_bound,bound_applies,bound_holds,fraction_positive")?;
        for r in &self.rows {
            writeln!(
                w,
                "{:e},{:e},{},{:e},{:e},{:e},{:e},{},{},{}",
                r.eps, r.eps_used, r.steps, r.mean_a2, r.min_a2, r.mean_b2, r.half_a2_lower_bound, r.bound_applies, r.bound_holds, r.fraction_positive
            )?;
        }
        Ok(())
    }
}

/// Number of time steps closest to each ε (at least one).
pub fn eps_steps(grid: &GridSpec, eps: &[f64]) -> Vec<usize> {
    eps.iter().map(|e| ((e / grid.dt()).round() as usize).max(1)).collect()
}

/// Window integrals of one base for each window length.
pub fn probe_sample(sctx: &SliceContext, base: &SolutionField, steps: &[usize]) -> Result<Vec<WindowIntegrals>, MalliavinError> {
    let slice = source_slice(sctx, base)?;
    Ok(steps.iter().map(|&s| window_integrals(sctx, &slice, s)).collect())
}

/// Aggregate per-seed window integrals into the probe table.
pub fn summarize_probe(grid: &GridSpec, t: f64, x: f64, l: f64, c0: f64, eps: &[f64], samples: &[Vec<WindowIntegrals>]) -> ProbeTable {
    let steps = eps_steps(grid, eps);
    let c1 = 2.0 * c0 * c0;
    let floor = (PI * l).sin().powi(2).min((PI * (1.0 - l)).sin().powi(2));
    let n = samples.len() as f64;
    let rows = eps
        .iter()
        .zip(&steps)
        .enumerate()
        .map(|(e, (&eps, &st))| {
            let eps_used = st as f64 * grid.dt();
            let bound = 0.25 * c1 * floor * eps_used;
            let applies = eps_used < A2_BOUND_EPS_MAX;
            let col: Vec<WindowIntegrals> = samples.iter().map(|s| s[e]).collect();
            ProbeRow {
                eps,
                eps_used,
                steps: st,
                mean_a2: col.iter().map(|w| w.a2).sum::<f64>() / n,
                min_a2: col.iter().map(|w| w.a2).fold(f64::INFINITY, f64::min),
                mean_b2: col.iter().map(|w| w.b2).sum::<f64>() / n,
                half_a2_lower_bound: bound,
                bound_applies: applies,
                bound_holds: !applies || col.iter().all(|w| 0.5 * w.a2 >= bound),
                fraction_positive: col.iter().filter(|w| 0.5 * w.a2 - w.b2 > 0.0).count() as f64 / n,
            }
        })
        .collect();
    ProbeTable { t, x, l, c1, seeds: samples.len(), rows }
}

/// Positivity probe over an ensemble of bases at the slice target.
pub fn positivity_probe(sctx: &SliceContext, bases: &[Arc<SolutionField>], eps: &[f64], l: f64) -> Result<ProbeTable, MalliavinError> {
    let grid = sctx.grid();
    let x = grid.x(sctx.x_index);
    if !(l > 0.0 && x >= l && x <= 1.0 - l) {
        return Err(MalliavinError::OutsideCompact { x, l });
    }
    let first = bases.first().ok_or(MalliavinError::EmptyEnsemble)?;
    let steps = eps_steps(&grid, eps);
    let samples = bases.iter().map(|b| probe_sample(sctx, b, &steps)).collect::<Result<Vec<_>, _>>()?;
    Ok(summarize_probe(&grid, grid.t(sctx.t_index), x, l, first.model().pair.c0, eps, &samples))
}

/// Where increments are taken for the continuity fit.
#[derive(Debug, Clone, PartialEq)]
pub struct KolmogorovDesign {
    pub t_ref: usize,
    pub x_ref: usize,
    /// Spatial lags in nodes: pairs (x_ref, x_ref + h) at t_ref.
    pub spatial_lags: Vec<usize>,
    /// Temporal lags in steps: pairs (t_ref − τ, t_ref) at x_ref.
    pub temporal_lags: Vec<usize>,
}

/// Running sums of |increment|^p for the continuity fit.
#[derive(Debug, Clone)]
pub struct IncrementMoments {
    design: KolmogorovDesign,
    p: f64,
    spatial: Vec<f64>,
    temporal: Vec<f64>,
    count: usize,
}

impl IncrementMoments {
    pub fn new(design: KolmogorovDesign, p: f64) -> Result<Self, MalliavinError> {
        if !(p > 4.0) {
            return Err(MalliavinError::ExponentTooSmall(p));
        }
        let (ns, nt) = (design.spatial_lags.len(), design.temporal_lags.len());
        Ok(Self { design, p, spatial: vec![0.0; ns], temporal: vec![0.0; nt], count: 0 })
    }

    pub fn add(&mut self, field: &DerivativeField) {
        let d = &self.design;
        for (acc, &h) in self.spatial.iter_mut().zip(&d.spatial_lags) {
            *acc += (field.value(d.t_ref, d.x_ref + h) - field.value(d.t_ref, d.x_ref)).abs().powf(self.p);
        }
        for (acc, &tau) in self.temporal.iter_mut().zip(&d.temporal_lags) {
            *acc += (field.value(d.t_ref, d.x_ref) - field.value(d.t_ref - tau, d.x_ref)).abs().powf(self.p);
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &IncrementMoments) {
        self.spatial.iter_mut().zip(&other.spatial).for_each(|(a, b)| *a += b);
        self.temporal.iter_mut().zip(&other.temporal).for_each(|(a, b)| *a += b);
        self.count += other.count;
    }

    /// Mean p-th moments (spatial, temporal) per lag.
    pub fn means(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.count.max(1) as f64;
        (self.spatial.iter().map(|v| v / n).collect(), self.temporal.iter().map(|v| v / n).collect())
    }

    /// (α̂, β̂): log-log slopes against the temporal and spatial lags.
    pub fn fit(&self, grid: &GridSpec) -> (f64, f64) {
        let (sp, tm) = self.means();
        let hx: Vec<f64> = self.design.spatial_lags.iter().map(|&h| h as f64 * grid.dx()).collect();
        let ht: Vec<f64> = self.design.temporal_lags.iter().map(|&h| h as f64 * grid.dt()).collect();
        (log_slope(&ht, &tm), log_slope(&hx, &sp))
    }
}

/// Least-squares slope of ln y against ln x.
pub fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).map(|(a, b)| (a.ln(), b.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Fitted continuity exponents (α̂, β̂) from fields sharing one (s,y).
pub fn kolmogorov_fit(fields: &[DerivativeField], design: &KolmogorovDesign, p: f64) -> Result<(f64, f64), MalliavinError> {
    let first = fields.first().ok_or(MalliavinError::EmptyEnsemble)?;
    let mut acc = IncrementMoments::new(design.clone(), p)?;
    for f in fields {
        acc.add(f);
    }
    Ok(acc.fit(&first.base.grid))
}

//! The nine experiments. Each one records every assertion in the report and its
//! numeric output as artifacts; aggregation always runs in seed order.

use std::fmt::Display;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spde_core::coefficients::InitialCondition;
use spde_core::density::{estimate_density, ks_vs_normal, refinement_stability, sup_over_window, BandwidthRule, Window};
use spde_core::ensemble::map_seeds;
use spde_core::heat_kernel::{
    eval_images, eval_kernel, gaussian_bound_check, l2_time_integral, lemma_a1_ratio, lemma_a2_ratio, mass, semigroup_defect, KernelSpec, LemmaQuadrature,
};
use spde_core::malliavin::{
    derivative_solve, eps_steps, log_slope, malliavin_norm, probe_sample, summarize_probe, DerivativeContext, DerivativeOptions, IncrementMoments, KolmogorovDesign,
    SliceContext, WindowIntegrals, A2_BOUND_EPS_MAX,
};
use spde_core::noise::{sample_noise, GridSpec, NoiseField};
use spde_core::solver::{fd_oracle_solve, moment_from_profiles, picard_solve, sup_norm_profile, FdScheme, Model, PicardOptions, SolutionField};

use crate::config::{Experiment, RunConfig};
use crate::manifest::Coupling;
use crate::report::{Artifacts, Report};
use crate::RunError;

type Result<T> = std::result::Result<T, RunError>;

fn numerics<E: Display>(module: &'static str) -> impl Fn(E) -> RunError {
    move |e| RunError::Numerics { module, message: e.to_string() }
}

pub(crate) fn execute(cfg: &RunConfig, art: &mut Artifacts, report: &mut Report) -> Result<Vec<Coupling>> {
    let mut couplings = Vec::new();
    match cfg.experiment {
        Experiment::KernelChecks => kernel_checks(cfg, art, report)?,
        Experiment::PicardConvergence => picard_convergence(cfg, art, report)?,
        Experiment::SolverOracle => couplings = solver_oracle(cfg, art, report)?,
        Experiment::MalliavinAdditive => malliavin_additive(cfg, art, report)?,
        Experiment::PositivityProbe => positivity(cfg, art, report)?,
        Experiment::KolmogorovFit => kolmogorov(cfg, art, report)?,
        Experiment::DensityGaussian => density_gaussian(cfg, art, report)?,
        Experiment::SupDensity => couplings = sup_density(cfg, art, report)?,
        Experiment::MomentReport => moments(cfg, art, report)?,
    }
    Ok(couplings)
}

fn model(cfg: &RunConfig) -> Arc<Model> {
    Model::new(cfg.pair(), cfg.cutoff_spec(), InitialCondition::sine(cfg.u0_amplitude))
}

fn picard(cfg: &RunConfig) -> PicardOptions {
    PicardOptions { k_max: cfg.picard_k_max, tol: cfg.picard_tol }
}

fn solve(cfg: &RunConfig, model: &Arc<Model>, noise: NoiseField) -> Result<SolutionField> {
    picard_solve(model, &Arc::new(noise), picard(cfg)).map_err(numerics("solver"))
}

/// `f` over the configured seeds, in seed order.
fn over_seeds<T: Send>(cfg: &RunConfig, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    map_seeds(cfg.seeds.range(), f).into_iter().collect()
}

/// `f` over 0..n in parallel, in index order.
fn indexed<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    map_seeds(0..n as u64, |i| f(i as usize)).into_iter().collect()
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn kernel_checks(cfg: &RunConfig, art: &mut Artifacts, report: &mut Report) -> Result<()> {
    let spec = KernelSpec::default();
    let n = cfg.knobs.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.start);
    let mut unit = || rng.random::<f64>();
    // (t, x, y) with t ∈ [t_floor, 2].
    let triples: Vec<[f64; 3]> = (0..n).map(|_| [spec.t_floor() + (2.0 - spec.t_floor()) * unit(), unit(), unit()]).collect();
    // (s, t, x, y) for the semigroup identity.
    let quads: Vec<[f64; 4]> = (0..n).map(|_| [1e-3 + unit(), 1e-3 + unit(), unit(), unit()]).collect();
    let ev = |t, x, y| eval_kernel(&spec, t, x, y).map_err(numerics("heat_kernel"));
    let mut rows = Vec::new();

    let mut zeros = 0;
    let mut symmetric = 0;
    for &[t, x, y] in &triples {
        zeros += usize::from(ev(t, 0.0, y)? == 0.0 && ev(t, 1.0, y)? == 0.0);
        symmetric += usize::from(ev(t, x, y)?.to_bits() == ev(t, y, x)?.to_bits());
    }
    report.check("kernel boundary zeros", zeros == n, format!("{zeros}/{n} exact zeros at x = 0 and x = 1"));
    report.check("kernel symmetry", symmetric == n, format!("{symmetric}/{n} bit-identical swaps"));
    rows.push(format!("boundary,{n},{}", n - zeros));
    rows.push(format!("symmetry,{n},{}", n - symmetric));

    // The trapezoid rule is exact for sine products of total degree below twice its panel count.
    let panels = 2 * spec.n_terms() + 2;
    let defects = indexed(n, |k| {
        let [s, t, x, y] = quads[k];
        semigroup_defect(&spec, s, t, x, y, panels).map_err(numerics("heat_kernel"))
    })?;
    let worst = max_of(defects);
    let limit = cfg.threshold("semigroup_defect_max");
    report.check("kernel semigroup", worst < limit, format!("max defect {worst:e} < {limit:e} (N = {}, tail {:e})", spec.n_terms(), spec.tail_bound()));
    rows.push(format!("semigroup,{n},{worst:e}"));

    let rel = cfg.threshold("gaussian_excess_max");
    let doms = indexed(n, |k| {
        let [t, x, y] = triples[k];
        gaussian_bound_check(&spec, t, x, y).map_err(numerics("heat_kernel"))
    })?;
    let held = doms.iter().filter(|d| d.holds(rel)).count();
    let worst = max_of(doms.iter().filter(|d| d.kernel > d.abs_floor).map(|d| d.ratio));
    report.check("kernel gaussian domination", held == n, format!("{held}/{n} within 1 + {rel:e}; max ratio {worst:e}"));
    rows.push(format!("gaussian,{n},{worst:e}"));

    let bound = cfg.threshold("l2_bound");
    let worst = max_of(triples.iter().map(|&[t, x, _]| l2_time_integral(t, x)));
    report.check("series bound", worst <= bound, format!("max l2_time_integral {worst:e} <= {bound:e}"));
    rows.push(format!("series_bound,{n},{worst:e}"));

    let tol = cfg.threshold("odd_limit_tol");
    let limit = l2_time_integral(50.0, 0.5);
    let err = (limit - 0.125).abs();
    report.check("odd series limit", err < tol, format!("l2_time_integral(50, 0.5) = {limit:e}, |err| {err:e} < {tol:e}"));
    rows.push(format!("odd_limit,1,{err:e}"));

    let excess = cfg.threshold("mass_excess_max");
    let masses = indexed(n, |k| {
        let [t, x, _] = triples[k];
        mass(&spec, t, x, panels).map_err(numerics("heat_kernel"))
    })?;
    let (lo, hi) = (masses.iter().copied().fold(f64::INFINITY, f64::min), max_of(masses.iter().copied()));
    report.check("kernel mass", lo >= -excess && hi <= 1.0 + excess, format!("mass in [{lo:e}, {hi:e}] within [0, 1 + {excess:e}]"));
    rows.push(format!("mass,{n},{hi:e}"));

    art.csv("kernel_checks.csv", "check,samples,worst", rows)?;
    if cfg.knobs.lemma_sweeps {
        lemma_sweeps(cfg, &spec, art, report)?;
    }
    Ok(())
}

/// Difference-integral ratio maxima over random tuples, and their drift when the
/// series length and the quadrature order are both doubled.
fn lemma_sweeps(cfg: &RunConfig, spec: &KernelSpec, art: &mut Artifacts, report: &mut Report) -> Result<()> {
    let n = cfg.knobs.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.start ^ 0x5eed);
    let tuples: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            let t = cfg.t_final * (1.0 - rng.random::<f64>());
            [t * rng.random::<f64>(), t, rng.random(), rng.random()]
        })
        .collect();
    let fine = spec.with_terms(2 * spec.n_terms()).map_err(numerics("heat_kernel"))?;
    let quad = LemmaQuadrature::default();
    let drift_max = cfg.threshold("lemma_drift_max");
    let mut rows = Vec::new();
    for p in [None, Some(6.0), Some(12.0)] {
        let ratio = |spec: &KernelSpec, q: LemmaQuadrature, [s, t, x, y]: [f64; 4]| match p {
            None => lemma_a1_ratio(spec, s, t, x, y, q),
            Some(p) => lemma_a2_ratio(spec, s, t, x, y, p, q),
        };
        let pairs = indexed(n, |k| {
            let base = ratio(spec, quad, tuples[k]).map_err(numerics("heat_kernel"))?;
            let refined = ratio(&fine, quad.doubled(), tuples[k]).map_err(numerics("heat_kernel"))?;
            Ok((base, refined))
        })?;
        let m0 = max_of(pairs.iter().map(|p| p.0));
        let m1 = max_of(pairs.iter().map(|p| p.1));
        let drift = (m1 / m0 - 1.0).abs();
        let name = match p {
            None => "difference integral ratio (time-space)".to_string(),
            Some(p) => format!("difference integral ratio (moment p = {p})"),
        };
        report.check(&name, m0.is_finite() && m1.is_finite() && drift < drift_max, format!("max {m0:e}, refined {m1:e}, drift {drift:e} < {drift_max:e}"));
        rows.push(format!("{},{n},{m0:e},{m1:e},{drift:e}", p.map_or("a1".to_string(), |p| format!("a2_p{p}"))));
    }
    art.csv("lemma_sweeps.csv", "sweep,samples,max_base,max_refined,drift", rows)?;
    Ok(())
}

fn picard_convergence(cfg: &RunConfig, art: &mut Artifacts, report: &mut Report) -> Result<()> {
    let (model, grid) = (model(cfg), cfg.grid());
    let runs = over_seeds(cfg, |s| solve(cfg, &model, sample_noise(grid, s)).map(|u| (u.iterates, u.converged)))?;
    let n = runs.len();
    let from = cfg.threshold("decreasing_from") as usize;
    let decreasing = runs.iter().filter(|(it, _)| it.get(from..).is_none_or(|d| d.windows(2).all(|w| w[1] < w[0]))).count();
    let reached = runs.iter().filter(|(it, ok)| *ok && it.len() <= cfg.picard_k_max).count();
    let worst_k = runs.iter().map(|r| r.0.len()).max().unwrap_or(0);
    report.check("picard deltas decrease", decreasing == n, format!("{decreasing}/{n} seeds strictly decreasing from delta {from}"));
    report.check(
        "picard tolerance",
        reached == n,
        format!("{reached}/{n} seeds reach {:e} within {} sweeps (worst {worst_k})", cfg.picard_tol, cfg.picard_k_max),
    );
    let rows = runs.iter().zip(cfg.seeds.range()).flat_map(|((it, _), s)| it.iter().enumerate().map(move |(k, d)| format!("{s},{k},{d:e}")));
    art.csv("picard_iterates.csv", "seed,sweep,delta", rows.collect::<Vec<_>>())?;
    Ok(())
}

fn solver_oracle(cfg: &RunConfig, art: &mut Artifacts, report: &mut Report) -> Result<Vec<Coupling>> {
    let (model, grid) = (model(cfg), cfg.grid());
    let [rx, rt] = cfg.knobs.refine;
    let rel = |noise: NoiseField| -> Result<f64> {
        let noise = Arc::new(noise);
        let p = picard_solve(&model, &noise, picard(cfg)).map_err(numerics("solver"))?;
        let f = fd_oracle_solve(&model, &noise, FdScheme::SemiImplicit).map_err(numerics("solver"))?;
        let gap = p.values().iter().zip(f.values()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        Ok(gap / p.sup_abs())
    };
    let rows = over_seeds(cfg, |s| {
        let noise = sample_noise(grid, s);
        let fine = noise.refine(rx, rt).map_err(numerics("noise"))?;
        Ok((rel(noise)?, rel(fine)?))
    })?;
    let n = rows.len();
    let limit = cfg.threshold("rel_discrepancy_max");
    let worst = max_of(rows.iter().map(|r| r.0));
    let shrinking = rows.iter().filter(|r| r.1 < r.0).count();
    report.check("oracle agreement", worst < limit, format!("max relative sup discrepancy {worst:e} < {limit:e} at {}x{}", grid.nx, grid.nt));
    report.check("oracle refinement", shrinking == n, format!("{shrinking}/{n} seeds shrink under ({rx}, {rt}) refinement; worst refined {:e}", max_of(rows.iter().map(|r| r.1))));
    let csv = rows.iter().zip(cfg.seeds.range()).map(|(r, s)| format!("{s},{:e},{:e}", r.0, r.1));
    art.csv("solver_oracle.csv", "seed,rel_coarse,rel_fine", csv)?;
    Ok(vec![Coupling::new((grid.nx, grid.nt), [rx, rt], &cfg.seeds.to_string())])
}

fn malliavin_additive(cfg: &RunConfig, art: &mut Artifacts, report: &mut Report) -> Result<()> {
    let (model, grid) = (model(cfg), cfg.grid());
    let ctx = DerivativeContext::new(grid, KernelSpec::default());
    let base = Arc::new(solve(cfg, &model, sample_noise(grid, cfg.seeds.start))?);
    let (s, y) = (cfg.knobs.s_index, cfg.knobs.y_index);
    let one = DerivativeOptions { k_max: 1, ..DerivativeOptions::default() };
    let d = derivative_solve(&ctx, &base, s, y, one).map_err(numerics("malliavin"))?;
    let (mut err, mut norm) = (0.0, 0.0);
    for i in s + 1..=grid.nt {
        for j in 0..=grid.nx {
            // Method of images: independent of the series evaluator that builds the field.
            let g = model.pair.sigma(grid.x(y), base.value(s, y)) * eval_images(grid.t(i) - grid.t(s), grid.x(j), grid.x(y)).map_err(numerics("heat_kernel"))?;
            err += (d.value(i, j) - g).powi(2);
            norm += g * g;
        }
    }
    let rel = if norm > 0.0 { (err / norm).sqrt() } else { err.sqrt() };
    let limit = cfg.threshold("field_rel_l2_max");
    report.check("derivative equals kernel", rel < limit, format!("relative L2 error {rel:e} < {limit:e} after one iterate at (s, y) = ({s}, {y})"));
    art.write("derivative_field.csv", |w| d.write_csv(w))?;

    let sub = cfg.knobs.sub_grid;
    let (hs, hy) = (grid.nt / sub, grid.nx / sub);
    let sources: Vec<(usize, usize)> = (0..grid.nt).step_by(hs).flat_map(|s| (hy..grid.nx).step_by(hy).map(move |y| (s, y))).collect();
    let fields = indexed(sources.len(), |k| derivative_solve(&ctx, &base, sources[k].0, sources[k].1, DerivativeOptions::default()).map_err(numerics("malliavin")))?;
    let x_index = cfg.node(cfg.knobs.x);
    let got = malliavin_norm(&fields, grid.nt, x_index, ctx.kernel()).map_err(numerics("malliavin"))?;
    let sigma = model.pair.sigma(cfg.knobs.x, 0.0);
    let expected = sigma * sigma * l2_time_integral(cfg.t_final, cfg.knobs.x);
    let err = if expected > 0.0 { (got / expected - 1.0).abs() } else { got.abs() };
    let limit = cfg.threshold("norm_rel_err_max");
    report.check("malliavin norm", err < limit, format!("{got:e} vs series {expected:e} on a {sub}x{sub} sub-grid, relative error {err:e} < {limit:e}"));
    art.csv("malliavin_norm.csv", "t,x,sub_grid,norm,series", [format!("{:e},{:e},{sub},{got:e},{expected:e}", cfg.t_final, cfg.knobs.x)])?;
    Ok(())
}

fn positivity(cfg: &RunConfig, art: &mut Artifacts, report: &mut Report) -> Result<()> {
    let (model, grid) = (model(cfg), cfg.grid());
    let k = &cfg.knobs;
    let ctx = Arc::new(DerivativeContext::new(grid, KernelSpec::default()));
    let sctx = SliceContext::new(ctx, grid.nt, cfg.node(k.x)).map_err(numerics("malliavin"))?;
    let all_eps: Vec<f64> = k.eps.iter().chain(&k.eps_fit).copied().collect();
    let steps = eps_steps(&grid, &all_eps);
    let samples = over_seeds(cfg, |s| {
        let base = solve(cfg, &model, sample_noise(grid, s))?;
        probe_sample(&sctx, &base, &steps).map_err(numerics("malliavin"))
    })?;
    let (probe, fit): (Vec<Vec<WindowIntegrals>>, Vec<Vec<WindowIntegrals>>) = samples.into_iter().map(|mut v| {
        let tail = v.split_off(k.eps.len());
        (v, tail)
    }).unzip();
    let table = summarize_probe(&grid, cfg.t_final, k.x, k.l, model.pair.c0, &k.eps, &probe);

    let mut order: Vec<usize> = (0..table.rows.len()).collect();
    order.sort_by(|&a, &b| table.rows[b].eps.total_cmp(&table.rows[a].eps));
    let fractions: Vec<f64> = order.iter().map(|&i| table.rows[i].fraction_positive).collect();
    let monotone = fractions.windows(2).all(|w| w[1] >= w[0]);
    report.check("positive fraction monotone", monotone, format!("fraction with ½∫∫a² − ∫∫b² > 0 by decreasing ε: {fractions:?}"));
    let smallest = &table.rows[*order.last().expect("validated nonempty eps")];
    let need = cfg.threshold("fraction_at_smallest_min");
    report.check("positive fraction at smallest window", smallest.fraction_positive >= need, format!("{} at ε = {:e} (need {need})", smallest.fraction_positive, smallest.eps));
    let applicable: Vec<_> = table.rows.iter().filter(|r| r.eps < A2_BOUND_EPS_MAX).collect();
    let bound_ok = applicable.iter().all(|r| r.bound_applies && r.bound_holds);
    let margin = applicable.iter().map(|r| 0.5 * r.min_a2 / r.half_a2_lower_bound).fold(f64::INFINITY, f64::min);
    report.check(
        "a² lower bound",
        bound_ok,
        format!("½∫∫a² ≥ (c₁/4)·sin²(πl)·ε on every seed for {} windows below {A2_BOUND_EPS_MAX:.4}; worst ½min a² / bound = {margin:e}", applicable.len()),
    );
    art.write("positivity_probe.csv", |w| table.write_csv(w))?;

    let n = fit.len() as f64;
    let means: Vec<WindowIntegrals> = (0..k.eps_fit.len())
        .map(|e| WindowIntegrals {
            a2: fit.iter().map(|s| s[e].a2).sum::<f64>() / n,
            ab: fit.iter().map(|s| s[e].ab).sum::<f64>() / n,
            b2: fit.iter().map(|s| s[e].b2).sum::<f64>() / n,
        })
        .collect();
    let totals: Vec<f64> = means.iter().map(WindowIntegrals::total).collect();
    let slope = log_slope(&k.eps_fit, &totals);
    let need = cfg.threshold("norm_exponent_min");
    report.check("localized norm exponent", slope >= need, format!("fitted exponent {slope:.4} >= {need} over ε in [{:e}, {:e}]", k.eps_fit.iter().copied().fold(f64::INFINITY, f64::min), max_of(k.eps_fit.iter().copied())));
    let ratios: Vec<f64> = means.iter().map(|m| m.b2 / m.a2).collect();
    report.note(format!("∫∫b² / ∫∫a² exponent over the fit windows: {:.4}", log_slope(&k.eps_fit, &ratios)));
    let rows = k.eps_fit.iter().zip(&means).map(|(e, m)| format!("{e:e},{:e},{:e},{:e},{:e}", m.a2, m.ab, m.b2, m.total()));
    art.csv("localized_norm.csv", "eps,mean_a2,mean_ab,mean_b2,mean_total", rows)?;
    Ok(())
}

fn kolmogorov(cfg: &RunConfig, art: &mut Artifacts, report: &mut Report) -> Result<()> {
    let (model, grid) = (model(cfg), cfg.grid());
    let k = &cfg.knobs;
    let ctx = DerivativeContext::new(grid, KernelSpec::default());
    let design = KolmogorovDesign { t_ref: k.t_ref, x_ref: k.x_ref, spatial_lags: k.spatial_lags.clone(), temporal_lags: k.temporal_lags.clone() };
    let mut rows = Vec::new();
    for &p in &k.p {
        let per_seed = over_seeds(cfg, |s| {
            let base = Arc::new(solve(cfg, &model, sample_noise(grid, s))?);
            let d = derivative_solve(&ctx, &base, k.s_index, k.y_index, DerivativeOptions::default()).map_err(numerics("malliavin"))?;
            let mut m = IncrementMoments::new(design.clone(), p).map_err(numerics("malliavin"))?;
            m.add(&d);
            Ok(m)
        })?;
        let mut acc = IncrementMoments::new(design.clone(), p).map_err(numerics("malliavin"))?;
        per_seed.iter().for_each(|m| acc.merge(m));
        let (alpha, beta) = acc.fit(&grid);
        let (a_min, b_min, inv_max) = (cfg.threshold("alpha_min"), cfg.threshold("beta_min"), cfg.threshold("inverse_sum_max"));
        let inv = 1.0 / alpha + 1.0 / beta;
        report.check(format!("temporal exponent (p = {p})"), alpha > a_min, format!("α̂ = {alpha:.4} > {a_min}"));
        report.check(format!("spatial exponent (p = {p})"), beta > b_min, format!("β̂ = {beta:.4} > {b_min}"));
        report.check(format!("continuity criterion (p = {p})"), inv < inv_max, format!("1/α̂ + 1/β̂ = {inv:.4} < {inv_max}"));
        let (sp, tm) = acc.means();
        rows.extend(k.spatial_lags.iter().zip(&sp).map(|(h, m)| format!("{p},space,{h},{:e},{m:e}", *h as f64 * grid.dx())));
        rows.extend(k.temporal_lags.iter().zip(&tm).map(|(h, m)| format!("{p},time,{h},{:e},{m:e}", *h as f64 * grid.dt())));
    }
    art.csv("kolmogorov_moments.csv", "p,direction,lag_steps,lag,mean_abs_increment_pow_p", rows)?;
    Ok(())
}

fn density_gaussian(cfg: &RunConfig, art: &mut Artifacts, report: &mut Report) -> Result<()> {
    let (model, grid) = (model(cfg), cfg.grid());
    let (x, j) = (cfg.knobs.x, cfg.node(cfg.knobs.x));
    let values = over_seeds(cfg, |s| Ok(solve(cfg, &model, sample_noise(grid, s))?.value(grid.nt, j)))?;
    let t = cfg.t_final;
    let mean = model.u0.eval(x) * (-std::f64::consts::PI.powi(2) * t).exp();
    let sd = model.pair.sigma(x, 0.0).abs() * l2_time_integral(t, x).sqrt();
    let ks = ks_vs_normal(&values, mean, sd);
    let limit = cfg.threshold("ks_max");
    report.check("gaussian law", ks < limit, format!("KS {ks:e} < {limit:e} against Normal({mean:e}, {:e}) over {} seeds", sd * sd, values.len()));
    let est = estimate_density(&values, BandwidthRule::Silverman).map_err(numerics("density"))?.with_reference("ks_normal", ks);
    let tol = cfg.threshold("normalization_tol");
    let mass = est.integral();
    report.check("density normalized", (mass - 1.0).abs() < tol, format!("∫ density = {mass:e} within {tol:e}"));
    art.write("density.csv", |w| est.write_csv(w))?;
    art.csv("samples.csv", "seed,value", cfg.seeds.range().zip(&values).map(|(s, v)| format!("{s},{v:e}")))?;
    Ok(())
}

fn sup_density(cfg: &RunConfig, art: &mut Artifacts, report: &mut Report) -> Result<Vec<Coupling>> {
    let model = model(cfg);
    let k = &cfg.knobs;
    let [rx, rt] = k.refine;
    let mut grids = vec![cfg.grid()];
    for _ in 1..k.levels {
        let g = grids.last().expect("nonempty").refined(rx, rt).map_err(numerics("noise"))?;
        grids.push(g);
    }
    let window = Window::interior(k.l, cfg.t_final);
    // Diagnostic companion: the supremum over x at the final time only.
    let last = Window { t: (cfg.t_final - 0.5 * grids[0].dt(), cfg.t_final), x: window.x };
    let per_seed = over_seeds(cfg, |s| {
        let mut noise = sample_noise(grids[0], s);
        let mut out = Vec::with_capacity(grids.len());
        for level in 0..grids.len() {
            if level > 0 {
                noise = noise.refine(rx, rt).map_err(numerics("noise"))?;
            }
            let u = solve(cfg, &model, noise.clone())?;
            out.push((sup_over_window(&u, &window).map_err(numerics("density"))?, sup_over_window(&u, &last).map_err(numerics("density"))?));
        }
        Ok(out)
    })?;
    let column = |level: usize, pick: fn(&(f64, f64)) -> f64| per_seed.iter().map(|r| pick(&r[level])).collect::<Vec<f64>>();
    let levels: Vec<Vec<f64>> = (0..grids.len()).map(|l| column(l, |p| p.0)).collect();
    let finals: Vec<Vec<f64>> = (0..grids.len()).map(|l| column(l, |p| p.1)).collect();
    let rep = refinement_stability(&levels, BandwidthRule::Silverman).map_err(numerics("density"))?;

    let tol = cfg.threshold("normalization_tol");
    let mut masses = Vec::new();
    let mut degenerate = Vec::new();
    for (g, e) in grids.iter().zip(&rep.estimates) {
        match e {
            Ok(e) => masses.push(e.integral()),
            Err(err) => degenerate.push(format!("{}x{}: {err}", g.nx, g.nt)),
        }
    }
    report.check("sup law not degenerate", degenerate.is_empty(), if degenerate.is_empty() { format!("{} levels", grids.len()) } else { degenerate.join("; ") });
    let normalized = masses.len() == grids.len() && masses.iter().all(|m| (m - 1.0).abs() < tol);
    report.check("sup density normalized", normalized, format!("integrals {masses:?} within {tol:e}"));
    let limit = cfg.threshold("l1_max");
    let finest = rep.distances.last().copied().unwrap_or(f64::NAN);
    report.check(
        "sup density refinement",
        finest < limit,
        format!("L1 distance between the two finest levels {finest:e} < {limit:e}; all distances {:?}", rep.distances),
    );
    if let Ok(diag) = refinement_stability(&finals, BandwidthRule::Silverman) {
        report.note(format!("final-time sup L1 distances: {:?}", diag.distances));
    }

    for (g, e) in grids.iter().zip(&rep.estimates) {
        if let Ok(e) = e {
            art.write(&format!("sup_density_{}x{}.csv", g.nx, g.nt), |w| e.write_csv(w))?;
        }
    }
    let header = std::iter::once("seed".to_string())
        .chain(grids.iter().flat_map(|g| [format!("sup_{}x{}", g.nx, g.nt), format!("final_sup_{}x{}", g.nx, g.nt)]))
        .collect::<Vec<_>>()
        .join(",");
    art.write("sup_samples.csv", |w| {
        writeln!(w, "{header}")?;
        for (s, r) in cfg.seeds.range().zip(&per_seed) {
            write!(w, "{s}")?;
            for (a, b) in r {
                write!(w, ",{a:e},{b:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    let seeds = cfg.seeds.to_string();
    Ok(grids[..grids.len() - 1].iter().map(|g: &GridSpec| Coupling::new((g.nx, g.nt), [rx, rt], &seeds)).collect())
}

fn moments(cfg: &RunConfig, art: &mut Artifacts, report: &mut Report) -> Result<()> {
    let (model, grid) = (model(cfg), cfg.grid());
    let profiles = over_seeds(cfg, |s| Ok(sup_norm_profile(&solve(cfg, &model, sample_noise(grid, s))?)))?;
    let half = profiles.len() / 2;
    let limit = cfg.threshold("drift_max");
    let mut rows = Vec::new();
    for &p in &cfg.knobs.p {
        let (m_half, m_full) = (moment_from_profiles(&profiles[..half.max(1)], p), moment_from_profiles(&profiles, p));
        let drift = ((m_full - m_half) / m_full).abs();
        report.check(
            format!("sup moment (p = {p})"),
            m_full.is_finite() && drift < limit,
            format!("E sup|u|^p = {m_full:e} over {} seeds, {m_half:e} over {half}; drift {drift:e} < {limit:e}", profiles.len()),
        );
        rows.push(format!("{p},{half},{m_half:e},{},{m_full:e},{drift:e}", profiles.len()));
    }
    art.csv("moments.csv", "p,n_half,moment_half,n_full,moment_full,drift", rows)?;
    Ok(())
}

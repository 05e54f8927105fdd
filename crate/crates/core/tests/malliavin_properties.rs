use std::sync::Arc;

use spde_core::coefficients::{CoefficientPair, CutoffSpec, InitialCondition};
use spde_core::ensemble::map_seeds;
use spde_core::heat_kernel::{l2_time_integral, KernelSpec};
use spde_core::malliavin::*;
use spde_core::noise::{sample_noise, GridSpec};
use spde_core::solver::{picard_solve, Model, PicardOptions, SolutionField};

fn nonlinear() -> Arc<Model> {
    Model::new(CoefficientPair::nonlinear(0.5, 1.0, 0.25), CutoffSpec::new(5.0).unwrap(), InitialCondition::sine(1.0))
}

fn base(model: &Arc<Model>, grid: GridSpec, seed: u64) -> Arc<SolutionField> {
    Arc::new(picard_solve(model, &Arc::new(sample_noise(grid, seed)), PicardOptions::default()).unwrap())
}

#[test]
fn fields_vanish_before_the_source_and_split_exactly() {
    let grid = GridSpec::new(32, 128, 0.25).unwrap();
    let ctx = DerivativeContext::new(grid, KernelSpec::default());
    let model = nonlinear();
    for (seed, s, y) in [(0u64, 0usize, 16usize), (1, 40, 3), (2, 127, 30), (3, 90, 17)] {
        let d = derivative_solve(&ctx, &base(&model, grid, seed), s, y, DerivativeOptions::default()).unwrap();
        assert!(d.converged);
        for i in 0..=s {
            assert!((0..=grid.nx).all(|j| d.value(i, j) == 0.0));
        }
        for i in 0..=grid.nt {
            for j in 0..=grid.nx {
                assert_eq!(d.a(i, j) + d.b(i, j), d.value(i, j));
            }
        }
    }
}

#[test]
fn derivative_picard_converges_geometrically() {
    let grid = GridSpec::new(32, 256, 0.25).unwrap();
    let ctx = DerivativeContext::new(grid, KernelSpec::default());
    let d = derivative_solve(&ctx, &base(&nonlinear(), grid, 9), 30, 16, DerivativeOptions::default()).unwrap();
    assert!(d.converged && d.iterates.len() > 3);
    for w in d.iterates.windows(2) {
        assert!(w[1] < w[0], "{:?}", d.iterates);
    }
}

#[test]
fn malliavin_norm_is_positive_on_every_seed() {
    let grid = GridSpec::new(32, 256, 0.25).unwrap();
    let ctx = Arc::new(DerivativeContext::new(grid, KernelSpec::default()));
    let model = nonlinear();
    let tol = PicardOptions::default().tol;
    for (t_index, x_index) in [(256usize, 16usize), (64, 5), (200, 27)] {
        let sctx = SliceContext::new(Arc::clone(&ctx), t_index, x_index).unwrap();
        let norms = map_seeds(0..40, |s| {
            let slice = source_slice(&sctx, &base(&model, grid, s)).unwrap();
            window_integrals(&sctx, &slice, t_index).total()
        });
        assert!(norms.iter().all(|&n| n > 10.0 * tol * tol), "{norms:?}");
    }
}

#[test]
fn forward_sub_grid_norm_matches_the_slice() {
    let grid = GridSpec::new(16, 64, 0.2).unwrap();
    let ctx = Arc::new(DerivativeContext::new(grid, KernelSpec::default()));
    let b = base(&nonlinear(), grid, 5);
    let mut fields = Vec::new();
    for s in 0..64 {
        for y in 1..16 {
            fields.push(derivative_solve(&ctx, &b, s, y, DerivativeOptions::default()).unwrap());
        }
    }
    let forward = malliavin_norm(&fields, 64, 6, ctx.kernel()).unwrap();
    let sctx = SliceContext::new(Arc::clone(&ctx), 64, 6).unwrap();
    let slice = source_slice(&sctx, &b).unwrap();
    let adjoint = window_integrals(&sctx, &slice, 64).total();
    assert!((forward - adjoint).abs() < 1e-9 * adjoint, "{forward} {adjoint}");
    assert_eq!(malliavin_norm(&fields, 0, 6, ctx.kernel()).unwrap(), 0.0);
    assert!(matches!(malliavin_norm(&fields[..100], 64, 6, ctx.kernel()), Err(MalliavinError::NotSubGrid(_))));
}

#[test]
fn additive_sub_grid_norm_and_zero_sigma_control() {
    let grid = GridSpec::new(64, 256, 0.25).unwrap();
    let ctx = DerivativeContext::new(grid, KernelSpec::default());
    for (sigma, expected) in [(1.0, l2_time_integral(0.25, 0.375)), (0.0, 0.0)] {
        let model = Model::new(CoefficientPair::additive(sigma), CutoffSpec::new(5.0).unwrap(), InitialCondition::sine(0.0));
        let b = base(&model, grid, 1);
        let mut fields = Vec::new();
        for s in (0..256).step_by(8) {
            for y in (2..64).step_by(2) {
                fields.push(derivative_solve(&ctx, &b, s, y, DerivativeOptions::default()).unwrap());
            }
        }
        let norm = malliavin_norm(&fields, 256, 24, ctx.kernel()).unwrap();
        if expected == 0.0 {
            assert_eq!(norm, 0.0);
        } else {
            assert!((norm / expected - 1.0).abs() < 0.03, "{norm} {expected}");
        }
    }
}

/// Sample means of the window integrals at (t, x) = (0.25, 0.5).
fn window_means(eps: &[f64], seeds: u64) -> Vec<WindowIntegrals> {
    let grid = GridSpec::new(64, 1000, 0.25).unwrap();
    let ctx = Arc::new(DerivativeContext::new(grid, KernelSpec::default()));
    let sctx = SliceContext::new(ctx, 1000, 32).unwrap();
    let steps = eps_steps(&grid, eps);
    let model = nonlinear();
    let samples = map_seeds(0..seeds, |s| probe_sample(&sctx, &base(&model, grid, s), &steps).unwrap());
    let n = samples.len() as f64;
    (0..eps.len())
        .map(|e| WindowIntegrals {
            a2: samples.iter().map(|s| s[e].a2).sum::<f64>() / n,
            ab: samples.iter().map(|s| s[e].ab).sum::<f64>() / n,
            b2: samples.iter().map(|s| s[e].b2).sum::<f64>() / n,
        })
        .collect()
}

#[test]
fn localized_norm_and_b_share_shrink_with_the_window() {
    let eps = [0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001];
    let means = window_means(&eps, 60);
    let total: Vec<f64> = means.iter().map(|m| m.total()).collect();
    let norm_slope = log_slope(&eps, &total);
    assert!(norm_slope >= 0.4, "{norm_slope}");
    // Relative size of b against a, fitted over the small windows.
    let ratio: Vec<f64> = means.iter().map(|m| m.b2 / m.a2).collect();
    let ratio_slope = log_slope(&eps[3..], &ratio[3..]);
    assert!(ratio_slope >= DELTA, "{ratio_slope} {ratio:?}");
}

#[test]
fn b_is_dominated_by_a_shortly_after_the_source() {
    let grid = GridSpec::new(64, 1000, 0.25).unwrap();
    let ctx = DerivativeContext::new(grid, KernelSpec::default());
    let model = nonlinear();
    let (s, y) = (500usize, 32usize);
    let window = (0.01 / grid.dt()).round() as usize;
    let counts = map_seeds(0..20, |seed| {
        let d = derivative_solve(&ctx, &base(&model, grid, seed), s, y, DerivativeOptions::default()).unwrap();
        let mut good = 0usize;
        let mut all = 0usize;
        for i in s + 1..=s + window {
            for j in 1..grid.nx {
                all += 1;
                good += usize::from(d.b(i, j).abs() <= d.a(i, j).abs());
            }
        }
        (good, all)
    });
    let good: usize = counts.iter().map(|c| c.0).sum();
    let all: usize = counts.iter().map(|c| c.1).sum();
    let frac = good as f64 / all as f64;
    assert!(frac >= 0.95, "{frac}");
}

#[test]
fn additive_kolmogorov_exponents_reflect_kernel_smoothness() {
    let grid = GridSpec::new(64, 512, 0.25).unwrap();
    let ctx = DerivativeContext::new(grid, KernelSpec::default());
    let model = Model::new(CoefficientPair::additive(1.0), CutoffSpec::new(5.0).unwrap(), InitialCondition::sine(0.0));
    let design = KolmogorovDesign { t_ref: 512, x_ref: 16, spatial_lags: vec![1, 2, 4, 8], temporal_lags: vec![1, 2, 4, 8, 16] };
    let fields: Vec<_> = (0..3).map(|s| derivative_solve(&ctx, &base(&model, grid, s), 102, 32, DerivativeOptions::default()).unwrap()).collect();
    let (alpha, beta) = kolmogorov_fit(&fields, &design, 6.0).unwrap();
    assert!(beta >= 2.0, "{beta}");
    assert!(alpha >= 2.0, "{alpha}");
    assert!(kolmogorov_fit(&fields, &design, 3.0).is_err());
}

#[test]
fn nonlinear_positivity_fraction_is_monotone() {
    let grid = GridSpec::new(64, 1000, 0.25).unwrap();
    let ctx = Arc::new(DerivativeContext::new(grid, KernelSpec::default()));
    let sctx = SliceContext::new(ctx, 1000, 32).unwrap();
    let model = nonlinear();
    let bases: Vec<_> = (0..30).map(|s| base(&model, grid, s)).collect();
    let table = positivity_probe(&sctx, &bases, &[0.04, 0.02, 0.01, 0.005], 0.25).unwrap();
    assert_eq!(table.c1, 2.0 * 0.75 * 0.75);
    for w in table.rows.windows(2) {
        assert!(w[1].fraction_positive >= w[0].fraction_positive);
    }
    assert_eq!(table.rows[3].fraction_positive, 1.0);
    assert!(table.rows.iter().all(|r| r.bound_applies && r.bound_holds));
    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
}

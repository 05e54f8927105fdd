use std::sync::Arc;

use spde_core::coefficients::{CoefficientPair, CutoffSpec, InitialCondition};
use spde_core::ensemble::map_seeds;
use spde_core::heat_kernel::l2_time_integral;
use spde_core::malliavin::log_slope;
use spde_core::noise::{sample_noise, GridSpec};
use spde_core::solver::{fd_oracle_solve, moment_from_profiles, moment_report, picard_solve, sup_norm_profile, FdScheme, Model, PicardOptions, SolutionField};

fn solve(model: &Arc<Model>, grid: GridSpec, seed: u64) -> SolutionField {
    picard_solve(model, &Arc::new(sample_noise(grid, seed)), PicardOptions::default()).unwrap()
}

fn additive() -> Arc<Model> {
    Model::new(CoefficientPair::additive(1.0), CutoffSpec::new(5.0).unwrap(), InitialCondition::sine(0.0))
}

#[test]
fn additive_paths_stay_localized() {
    let grid = GridSpec::new(32, 256, 0.25).unwrap();
    let model = additive();
    let flags = map_seeds(0..1000, |s| solve(&model, grid, s).localized);
    let frac = flags.iter().filter(|&&f| f).count() as f64 / 1000.0;
    assert!(frac >= 0.99, "{frac}");
}

#[test]
fn additive_second_moment_is_bounded_by_the_variance_series() {
    let grid = GridSpec::new(32, 256, 0.25).unwrap();
    let model = additive();
    let ensemble = map_seeds(0..400, |s| solve(&model, grid, s));
    let m2 = moment_report(&ensemble, 2.0);
    let worst = (1..grid.nx).map(|j| l2_time_integral(0.25, grid.x(j))).fold(0.0f64, f64::max);
    assert!(m2.is_finite() && m2 > 0.0 && m2 <= 10.0 * worst, "{m2} vs {worst}");
    let still = Model::new(CoefficientPair::additive(0.0), CutoffSpec::new(5.0).unwrap(), InitialCondition::sine(0.0));
    let zeros = map_seeds(0..3, |s| solve(&still, grid, s));
    assert_eq!(moment_report(&zeros, 2.0), 0.0);
}

#[test]
fn nonlinear_eighth_moment_is_stable_under_doubling() {
    let grid = GridSpec::new(32, 256, 0.25).unwrap();
    let model = Model::new(CoefficientPair::nonlinear(0.5, 1.0, 0.25), CutoffSpec::new(5.0).unwrap(), InitialCondition::sine(1.0));
    let profiles = map_seeds(0..800, |s| sup_norm_profile(&solve(&model, grid, s)));
    let half = moment_from_profiles(&profiles[..400], 8.0);
    let full = moment_from_profiles(&profiles, 8.0);
    assert!(full.is_finite() && ((full - half) / full).abs() < 0.15, "{half} {full}");
}

#[test]
fn spatial_increments_scale_like_holder_one_half() {
    let grid = GridSpec::new(128, 2048, 0.25).unwrap();
    let model = additive();
    // Below ~4Δx the mode cutoff shortens increments, so the fit starts there.
    let lags = [4usize, 8, 16, 32];
    let sums = map_seeds(0..300, |s| {
        let u = solve(&model, grid, s);
        lags.map(|h| (u.value(grid.nt, 64 + h / 2) - u.value(grid.nt, 64 - h / 2)).powi(2))
    });
    let means: Vec<f64> = (0..lags.len()).map(|k| sums.iter().map(|r| r[k]).sum::<f64>() / sums.len() as f64).collect();
    let h: Vec<f64> = lags.iter().map(|&l| l as f64 * grid.dx()).collect();
    let slope = log_slope(&h, &means);
    assert!((0.85..=1.15).contains(&slope), "slope {slope} means {means:?}");
}

#[test]
fn nonlinear_picard_deltas_halve_after_the_second_sweep() {
    let grid = GridSpec::new(64, 2048, 0.5).unwrap();
    let model = Model::new(CoefficientPair::nonlinear(0.5, 1.0, 0.25), CutoffSpec::new(5.0).unwrap(), InitialCondition::sine(1.0));
    for seed in 0..5 {
        let u = solve(&model, grid, seed);
        assert!(u.converged);
        for w in u.iterates[1..].windows(2) {
            assert!(w[1] <= 0.5 * w[0], "seed {seed}: {:?}", u.iterates);
        }
    }
}

#[test]
fn oracle_gap_shrinks_under_coupled_refinement() {
    let coarse = GridSpec::new(16, 256, 0.25).unwrap();
    let model = Model::new(CoefficientPair::nonlinear(0.5, 1.0, 0.25), CutoffSpec::new(5.0).unwrap(), InitialCondition::sine(1.0));
    let rel = |noise: Arc<spde_core::noise::NoiseField>| {
        let p = picard_solve(&model, &noise, PicardOptions { k_max: 20, tol: 1e-10 }).unwrap();
        let f = fd_oracle_solve(&model, &noise, FdScheme::SemiImplicit).unwrap();
        let gap = p.values().iter().zip(f.values()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        gap / p.sup_abs()
    };
    for seed in 0..3 {
        let noise = sample_noise(coarse, seed);
        let fine = noise.refine(2, 4).unwrap();
        let (r0, r1) = (rel(Arc::new(noise)), rel(Arc::new(fine)));
        assert!(r1 < r0, "seed {seed}: {r0} -> {r1}");
    }
}

use proptest::prelude::*;
use spde_core::ensemble::map_seeds;
use spde_core::heat_kernel::{eval_hybrid, eval_kernel, eval_images, l2_time_integral, KernelSpec};
use spde_core::noise::{sample_noise, walsh_integral, GridSpec};

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

#[test]
fn total_increment_variance_is_t() {
    let grid = GridSpec::new(16, 32, 0.7).unwrap();
    let sums = map_seeds(0..10_000, |s| sample_noise(grid, s).increments().iter().sum::<f64>());
    let var = sample_variance(&sums);
    assert!((var / 0.7 - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn ito_isometry_against_the_kernel() {
    // Cell-midpoint kernel weights; Σ g² ΔtΔx approximates ∫∫G² to O(cell size).
    let (t, x) = (0.1, 0.5);
    let grid = GridSpec::new(32, 100, t).unwrap();
    let spec = KernelSpec::default();
    let mut weights = Vec::with_capacity(grid.nt * grid.nx);
    for i in 0..grid.nt {
        let lag = t - grid.t(i) - 0.5 * grid.dt();
        for j in 0..grid.nx {
            weights.push(eval_hybrid(&spec, lag, x, (j as f64 + 0.5) * grid.dx()).unwrap());
        }
    }
    let predicted: f64 = weights.iter().map(|g| g * g).sum::<f64>() * grid.dt() * grid.dx();
    let samples = map_seeds(0..10_000, |s| {
        let noise = sample_noise(grid, s);
        walsh_integral(&noise, |i, j| weights[i * grid.nx + j])
    });
    let var = sample_variance(&samples);
    assert!((var / predicted - 1.0).abs() < 0.05, "var {var} predicted {predicted}");
    assert!((var / l2_time_integral(t, x) - 1.0).abs() < 0.05, "var {var} series {}", l2_time_integral(t, x));
}

#[test]
fn disjoint_integrands_are_uncorrelated() {
    let grid = GridSpec::new(8, 16, 1.0).unwrap();
    let n = 4000;
    let pairs = map_seeds(0..n as u64, |s| {
        let noise = sample_noise(grid, s);
        let left = walsh_integral(&noise, |_, j| if j < 4 { 1.0 } else { 0.0 });
        let late = walsh_integral(&noise, |i, j| if j >= 4 && i >= 8 { (j as f64).sin() } else { 0.0 });
        (left, late)
    });
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let (ma, mb) = (a.iter().sum::<f64>() / n as f64, b.iter().sum::<f64>() / n as f64);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n as f64;
    let corr = cov / (sample_variance(&a) * sample_variance(&b)).sqrt();
    assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "{corr}");
}

#[test]
fn seeds_give_distinct_fields() {
    let grid = GridSpec::new(4, 4, 1.0).unwrap();
    let a = sample_noise(grid, 10);
    let b = sample_noise(grid, 11);
    assert_ne!(a.increments(), b.increments());
    assert_eq!(a.increments(), sample_noise(grid, 10).increments());
}

#[test]
fn refined_cells_have_the_right_variance() {
    let grid = GridSpec::new(4, 4, 1.0).unwrap();
    let cells = map_seeds(0..8000, |s| sample_noise(grid, s).refine(2, 4).unwrap().get(5, 3));
    let fine = grid.refined(2, 4).unwrap();
    let var = sample_variance(&cells);
    assert!((var / (fine.dt() * fine.dx()) - 1.0).abs() < 0.06, "{var}");
}

proptest! {
    #[test]
    fn kernel_is_symmetric_and_vanishes_on_the_boundary(t in 1e-4f64..2.0, x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let spec = KernelSpec::default();
        prop_assert_eq!(eval_kernel(&spec, t, x, y).unwrap(), eval_kernel(&spec, t, y, x).unwrap());
        prop_assert_eq!(eval_kernel(&spec, t, 0.0, y).unwrap(), 0.0);
        prop_assert_eq!(eval_kernel(&spec, t, 1.0, y).unwrap(), 0.0);
    }

    #[test]
    fn series_and_images_agree(t in 1e-3f64..0.5, x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let spec = KernelSpec::default();
        let s = eval_kernel(&spec, t, x, y).unwrap();
        let i = eval_images(t, x, y).unwrap();
        prop_assert!((s - i).abs() < 1e-10 * (1.0 + i.abs()));
    }
}

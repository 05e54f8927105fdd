//! Gauss–Legendre rules and a graded composite rule for endpoint singularities.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        // Tricomi's initial guess, then Newton on P_n.
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let step = p / d;
            z -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d.is_finite() { d } else { dp };
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Composite rule on [lo, hi] graded toward `hi`.
///
/// Uses r = hi − L·w^m, so an integrand behaving like (hi − r)^(−e) becomes
/// w^(m(1−e)−1) in w; with m(1−e) ≥ 1 it is bounded. The w-interval is further split
/// into geometric panels (ratio ½) so transition layers at tiny distances from `hi`
/// are resolved too.
#[derive(Debug, Clone)]
pub struct GradedRule {
    points: Vec<(f64, f64)>,
}

impl GradedRule {
    /// `power` is the substitution exponent m, `panels` the number of geometric
    /// panels, `order` the Gauss–Legendre order per panel.
    pub fn new(power: u32, panels: usize, order: usize) -> Self {
        let (x, w) = gauss_legendre(order);
        let m = power as f64;
        let mut points = Vec::with_capacity(panels * order);
        // Panels in w: [0, 2^-(P-1)], [2^-(P-1), 2^-(P-2)], ..., [1/2, 1].
        let mut edges = Vec::with_capacity(panels + 1);
        edges.push(0.0);
        for k in (0..panels).rev() {
            edges.push(0.5f64.powi(k as i32));
        }
        for pair in edges.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (b + a);
            for (xi, wi) in x.iter().zip(&w) {
                let wv = mid + half * xi;
                // Weight in units of L: dr = m L w^(m-1) dw, offset from hi in units of L.
                points.push((wv.powf(m), wi * half * m * wv.powf(m - 1.0)));
            }
        }
        Self { points }
    }

    /// Integrate `f` over [lo, hi]; `f` receives (r, hi − r) so callers can avoid
    /// cancellation in the distance to the singular endpoint.
    pub fn integrate(&self, lo: f64, hi: f64, mut f: impl FnMut(f64, f64) -> f64) -> f64 {
        let len = hi - lo;
        if len <= 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for &(off, wt) in &self.points {
            let gap = len * off;
            acc += wt * f(hi - gap, gap);
        }
        acc * len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_rule_integrates_polynomials_exactly() {
        for n in [1usize, 2, 5, 16, 33] {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} deg={deg} q={q}");
            }
        }
    }

    #[test]
    fn graded_rule_handles_inverse_square_root() {
        let rule = GradedRule::new(2, 30, 12);
        // ∫_0^2 (2-r)^(-1/2) dr = 2√2
        let q = rule.integrate(0.0, 2.0, |_, gap| gap.powf(-0.5));
        assert!((q - 2.0 * 2f64.sqrt()).abs() < 1e-12, "{q}");
        // ∫_0^1 (1-r)^(-3/4) dr = 4 with m = 4
        let rule4 = GradedRule::new(4, 30, 12);
        let q = rule4.integrate(0.0, 1.0, |_, gap| gap.powf(-0.75));
        assert!((q - 4.0).abs() < 1e-11, "{q}");
    }
}

//! Gauss–Legendre rules, composite panels for oscillatory integrands, and
//! Chebyshev interpolation on intervals.

use std::f64::consts::PI;

/// Panel order used by [`composite_gauss_legendre`].
pub const PANEL_ORDER: usize = 20;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss–Legendre rule mapped to [a, b].
pub fn gauss_legendre_on(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    (x.iter().map(|t| c + h * t).collect(), w.iter().map(|v| h * v).collect())
}

/// Equal panels of [`PANEL_ORDER`]-point Gauss–Legendre with at least `min_nodes` nodes in total.
pub fn composite_gauss_legendre(a: f64, b: f64, min_nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let panels = min_nodes.div_ceil(PANEL_ORDER).max(1);
    let (x, w) = gauss_legendre(PANEL_ORDER);
    let h = (b - a) / panels as f64;
    let mut nodes = Vec::with_capacity(panels * PANEL_ORDER);
    let mut weights = Vec::with_capacity(panels * PANEL_ORDER);
    for p in 0..panels {
        let c = a + h * (p as f64 + 0.5);
        for (t, v) in x.iter().zip(&w) {
            nodes.push(c + 0.5 * h * t);
            weights.push(0.5 * h * v);
        }
    }
    (nodes, weights)
}

/// Nodes per axis needed to resolve e^{itΦ_n}: 10 + 2·ceil(t·|n|·diam).
pub fn oscillatory_node_count(t: f64, mode_norm: f64, diameter: f64) -> usize {
    10 + 2 * (t.abs() * mode_norm * diameter).ceil() as usize
}

/// Chebyshev points of the first kind on [a, b] with barycentric weights.
#[derive(Clone, Debug)]
pub struct ChebyshevGrid {
    pub nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl ChebyshevGrid {
    pub fn new(a: f64, b: f64, p: usize) -> Self {
        assert!(p > 0);
        let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
        let nodes = (0..p)
            .map(|k| c + h * (PI * (2 * k + 1) as f64 / (2 * p) as f64).cos())
            .collect();
        let weights = (0..p)
            .map(|k| {
                let s = (PI * (2 * k + 1) as f64 / (2 * p) as f64).sin();
                if k % 2 == 0 { s } else { -s }
            })
            .collect();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Values at `x` of the Lagrange basis polynomials on the nodes.
    pub fn basis_at(&self, x: f64) -> Vec<f64> {
        if let Some(j) = self.nodes.iter().position(|&n| n == x) {
            let mut row = vec![0.0; self.len()];
            row[j] = 1.0;
            return row;
        }
        let q: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(n, w)| w / (x - n))
            .collect();
        let total: f64 = q.iter().sum();
        q.into_iter().map(|v| v / total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in [1usize, 2, 5, 16, 65] {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n).min(40) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg + 1) as f64 };
                assert!((q - exact).abs() < 1e-13, "n={n} deg={deg}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn composite_rule_resolves_oscillation() {
        let t = 500.0;
        let (x, w) = composite_gauss_legendre(1.0, 2.0, oscillatory_node_count(t, 1.0, 1.0));
        let re: f64 = x.iter().zip(&w).map(|(x, w)| w * (t * x).cos()).sum();
        let exact = ((2.0 * t).sin() - t.sin()) / t;
        assert!((re - exact).abs() < 1e-13);
    }

    #[test]
    fn chebyshev_interpolates_smooth_function() {
        let g = ChebyshevGrid::new(1.0, 1.2, 16);
        let f = |x: f64| (3.0 * x).sin() / x;
        let vals: Vec<f64> = g.nodes.iter().map(|&x| f(x)).collect();
        for i in 0..50 {
            let x = 1.0 + 0.2 * i as f64 / 49.0;
            let p: f64 = g.basis_at(x).iter().zip(&vals).map(|(b, v)| b * v).sum();
            assert!((p - f(x)).abs() < 1e-13, "x = {x}");
        }
    }
}

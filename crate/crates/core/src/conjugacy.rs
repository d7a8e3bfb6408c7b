//! The angular conjugacy Ψ_I(θ) = θ + ω(I) v_I(θ), which straightens the
//! flow θ̇ = a(θ) ω(I) into φ̇ = ā ω(I).

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohomology::{solve_v, solve_with, CohomologySolution};
use crate::error::{Error, Result};
use crate::fourier::{dot, grid_points, torus_distance, RealEvaluator, TorusSeries};
use crate::model::SystemModel;
use crate::stats::{percentile, stream_rng};

pub const INVERSE_TOL: f64 = 1e-12;
pub const INVERSE_MAX_ITER: usize = 50;

#[derive(Clone, Debug)]
pub struct Conjugacy {
    pub action: Vec<f64>,
    pub omega: Vec<f64>,
    pub a_bar: f64,
    pub v: TorusSeries,
    pub d_action_v: Vec<TorusSeries>,
    v_eval: RealEvaluator,
    /// Σ|v̂_n|, a bound on sup|v|.
    v_bound: f64,
    omega_norm: f64,
}

/// Conjugacy audit summary over an action grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyAudit {
    pub min_det: f64,
    pub max_jacobian_identity_error: f64,
    /// The degree estimate farthest from 1.
    pub degree: f64,
    #[serde(rename = "C_psi")]
    pub c_psi: f64,
    pub roundtrip_p99: f64,
}

impl Conjugacy {
    /// Solves for v_I and certifies det DΨ_I > 0 on the 2×-refined grid.
    pub fn new(model: &SystemModel, action: &[f64]) -> Result<Self> {
        let sol = solve_v(model, action)?;
        let conj = Self::from_solution(model, sol);
        let (min, theta) = conj.min_det(2)?;
        if !(min > 0.0) {
            return Err(Error::DiffeomorphismViolation { det: min, theta });
        }
        Ok(conj)
    }

    /// Builds Ψ_I without any certification; see [`ConjugacyProvider`].
    pub fn from_solution(model: &SystemModel, sol: CohomologySolution) -> Self {
        let omega_norm = sol.omega.iter().map(|w| w * w).sum::<f64>().sqrt();
        Self {
            v_eval: RealEvaluator::new(&sol.v),
            v_bound: sol.v.abs_sum(),
            action: sol.action,
            omega: sol.omega,
            a_bar: model.a_bar,
            v: sol.v,
            d_action_v: sol.d_action_v,
            omega_norm,
        }
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn v_value(&self, theta: &[f64]) -> f64 {
        self.v_eval.eval(theta)
    }

    /// θ + ω v(θ) on the universal cover.
    pub fn psi_lift(&self, theta: &[f64]) -> Vec<f64> {
        let v = self.v_eval.eval(theta);
        theta.iter().zip(&self.omega).map(|(t, w)| t + w * v).collect()
    }

    /// Ψ_I(θ) reduced to [0, 2π)^N.
    pub fn psi(&self, theta: &[f64]) -> Vec<f64> {
        self.psi_lift(theta).into_iter().map(|x| x.rem_euclid(TAU)).collect()
    }

    fn det_unchecked(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.v_eval.eval_grad(theta, &mut g);
        1.0 + self.omega.iter().zip(&g).map(|(w, d)| w * d).sum::<f64>()
    }

    /// det DΨ_I(θ) = 1 + ω·∇v(θ).
    pub fn jacobian_det(&self, theta: &[f64]) -> Result<f64> {
        let det = self.det_unchecked(theta);
        if !(det > 0.0) {
            return Err(Error::DiffeomorphismViolation { det, theta: theta.to_vec() });
        }
        Ok(det)
    }

    /// DΨ_I(θ) = Id + ω ⊗ ∇v(θ).
    pub fn jacobian_matrix(&self, theta: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut g = vec![0.0; n];
        self.v_eval.eval_grad(theta, &mut g);
        DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + self.omega[i] * g[j])
    }

    /// det DΨ as a series, 1 + Σ i(n·ω) v̂_n e^{in·θ}.
    fn det_series(&self) -> TorusSeries {
        let zero_mode = |n: &[i64]| n.iter().all(|&x| x == 0);
        self.v.map_modes(|n, c| {
            let d = Complex64::new(0.0, dot(n, &self.omega)) * c;
            if zero_mode(n) { d + 1.0 } else { d }
        })
    }

    /// Minimum of det DΨ on the grid of band refinement·K, and where it occurs.
    pub fn min_det(&self, refinement: usize) -> Result<(f64, Vec<f64>)> {
        let m = 2 * refinement.max(1) * self.v.band() + 1;
        let grid = self.det_series().to_grid(m)?;
        let (j, min) = grid
            .iter()
            .map(|z| z.re)
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty grid");
        Ok((min, crate::fourier::grid_point(j, m, self.dim())))
    }

    /// (2π)^{-N} ∫ det DΨ dθ by the refined-grid rule.
    pub fn degree_check(&self, refinement: usize) -> Result<f64> {
        let grid = self.det_series().to_refined_grid(refinement)?;
        let vals: Vec<f64> = grid.iter().map(|z| z.re).collect();
        Ok(crate::stats::pairwise_sum(&vals) / vals.len() as f64)
    }

    /// sup over the refined grid of |det DΨ − ā/a|.
    pub fn jacobian_identity_error(&self, model: &SystemModel, refinement: usize) -> Result<f64> {
        let band = self.v.band().max(model.a.band());
        let m = 2 * refinement.max(1) * band + 1;
        let det = self.det_series().resized(band).to_grid(m)?;
        let a = model.a.resized(band).to_grid(m)?;
        Ok(det
            .iter()
            .zip(&a)
            .map(|(d, a)| (d.re - self.a_bar / a.re).abs())
            .fold(0.0, f64::max))
    }

    /// Solves Ψ_I(θ) = φ for the lift θ.
    ///
    /// Any solution has the form θ = φ − ω s with s = v(θ), so the search runs
    /// over the scalar s, where F(s) = s − v(φ − ω s) has F' = det DΨ > 0 and a
    /// root in [−Σ|v̂|, Σ|v̂|]. Newton steps seeded at θ = φ are kept when they
    /// stay inside the current bracket and replaced by bisection otherwise.
    pub fn psi_inverse(&self, phi: &[f64], tol: f64) -> Result<Vec<f64>> {
        if self.v_bound == 0.0 || self.omega_norm == 0.0 {
            return Ok(phi.to_vec());
        }
        let n = self.dim();
        let mut grad = vec![0.0; n];
        let mut theta = phi.to_vec();
        let (mut lo, mut hi) = (-self.v_bound, self.v_bound);
        let mut s = 0.0;
        let mut resid = f64::INFINITY;
        for _ in 0..INVERSE_MAX_ITER {
            for k in 0..n {
                theta[k] = phi[k] - self.omega[k] * s;
            }
            let v = self.v_eval.eval_grad(&theta, &mut grad);
            let f = s - v;
            resid = self.omega_norm * f.abs();
            if resid <= tol {
                return Ok(theta);
            }
            if f > 0.0 {
                hi = s;
            } else {
                lo = s;
            }
            let fp = 1.0 + self.omega.iter().zip(&grad).map(|(w, g)| w * g).sum::<f64>();
            let newton = s - f / fp;
            let next = if fp > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if next == s {
                break;
            }
            s = next;
        }
        Err(Error::InversionFailure { iterations: INVERSE_MAX_ITER, residual: resid })
    }

    /// ∂_I Ψ_I(θ) = Dω(I) v(θ) + ω(I) ⊗ ∂_I v(θ).
    pub fn d_action_psi(&self, model: &SystemModel, theta: &[f64]) -> Result<DMatrix<f64>> {
        let d_omega = model.d_omega(&self.action)?;
        let v = self.v_eval.eval(theta);
        let dv = self
            .d_action_v
            .iter()
            .map(|s| s.eval_re(theta))
            .collect::<Result<Vec<f64>>>()?;
        let n = self.dim();
        Ok(DMatrix::from_fn(n, n, |k, j| d_omega[(k, j)] * v + self.omega[k] * dv[j]))
    }

    /// ā^{-1} f₀(I, Ψ_I^{-1}(φ)).
    pub fn pushforward_density(&self, f0: impl Fn(&[f64], &[f64]) -> f64, phi: &[f64]) -> Result<f64> {
        let theta = self.psi_inverse(phi, INVERSE_TOL)?;
        Ok(f0(&self.action, &theta) / self.a_bar)
    }
}

/// Builds conjugacies for many actions of one model. The Jacobian det DΨ_I
/// equals 1 + b on the band whatever I is, so positivity is certified once.
#[derive(Clone, Debug)]
pub struct ConjugacyProvider<'a> {
    model: &'a SystemModel,
    pub min_det: f64,
}

impl<'a> ConjugacyProvider<'a> {
    pub fn new(model: &'a SystemModel) -> Result<Self> {
        let det = model.b.map_modes(|n, c| if n.iter().all(|&x| x == 0) { c + 1.0 } else { c });
        let m = 4 * model.band + 1;
        let grid = det.to_grid(m)?;
        let (j, min) = grid
            .iter()
            .map(|z| z.re)
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty grid");
        if !(min > 0.0) {
            return Err(Error::DiffeomorphismViolation {
                det: min,
                theta: crate::fourier::grid_point(j, m, model.dim),
            });
        }
        Ok(Self { model, min_det: min })
    }

    pub fn model(&self) -> &'a SystemModel {
        self.model
    }

    pub fn at(&self, action: &[f64]) -> Result<Conjugacy> {
        let sol = solve_with(self.model, action, &self.model.b)?;
        Ok(Conjugacy::from_solution(self.model, sol))
    }
}

/// Largest spectral norm of ∂_IΨ over the `grid_n`^N cell-centred action grid
/// and the `theta_m`^N angle grid.
pub fn c_psi(model: &SystemModel, grid_n: usize, theta_m: usize) -> Result<f64> {
    let provider = ConjugacyProvider::new(model)?;
    let thetas = grid_points(theta_m, model.dim);
    let mut sup = 0.0f64;
    for action in model.domain.midpoint_grid(grid_n) {
        let conj = provider.at(&action)?;
        for theta in &thetas {
            let d = conj.d_action_psi(model, theta)?;
            let norm = d.singular_values().iter().cloned().fold(0.0, f64::max);
            sup = sup.max(norm);
        }
    }
    Ok(sup)
}

/// Runs every conjugacy check at each action of the `grid_n`^N cell-centred grid.
/// The round trip uses `samples` random angles per action.
pub fn conjugacy_audit(model: &SystemModel, grid_n: usize, samples: usize, seed: u64) -> Result<ConjugacyAudit> {
    let mut audit = ConjugacyAudit {
        min_det: f64::INFINITY,
        max_jacobian_identity_error: 0.0,
        degree: 1.0,
        c_psi: 0.0,
        roundtrip_p99: 0.0,
    };
    let mut errors = Vec::new();
    for (i, action) in model.domain.midpoint_grid(grid_n).iter().enumerate() {
        let conj = Conjugacy::new(model, action)?;
        audit.min_det = audit.min_det.min(conj.min_det(2)?.0);
        audit.max_jacobian_identity_error =
            audit.max_jacobian_identity_error.max(conj.jacobian_identity_error(model, 2)?);
        let degree = conj.degree_check(2)?;
        if (degree - 1.0).abs() > (audit.degree - 1.0).abs() {
            audit.degree = degree;
        }
        let mut rng = stream_rng(seed, i as u64);
        for _ in 0..samples {
            let theta: Vec<f64> = (0..model.dim).map(|_| rng.random::<f64>() * TAU).collect();
            let back = conj.psi_inverse(&conj.psi_lift(&theta), INVERSE_TOL)?;
            errors.push(torus_distance(&back, &theta));
        }
    }
    audit.c_psi = c_psi(model, grid_n, 16)?;
    audit.roundtrip_p99 = if errors.is_empty() { 0.0 } else { percentile(&errors, 0.99) };
    Ok(audit)
}

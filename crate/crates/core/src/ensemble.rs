//! Ensembles on Ω × T^N: initial densities f₀ = g(I) h(θ) / Z with respect to
//! μ* = ρ dθ dI, observables, Monte Carlo and mode-sum estimates of ⟨G⟩_t,
//! the equilibrium value, and the invariance audit of μ*.
//!
//! The mode expansion is taken in the straightened angle φ = Ψ_I(θ): with
//! G̃_n(I) the Fourier coefficients of φ ↦ G(I, Ψ_I^{-1}(φ)) and
//! M_n(I) = ∫ e^{in·Ψ_I(θ)} f₀ ρ dθ, one has
//! ⟨G⟩_t = Σ_n ∫_Ω A_n(I) e^{itΦ_n(I)} dI with A_n = G̃_n M_n and Φ_n = ā n·ω(I).

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugacy::{Conjugacy, ConjugacyProvider, INVERSE_TOL};
use crate::dynamics::flow_conjugated;
use crate::error::{Error, Result};
use crate::fourier::{dot, full_lattice, grid_points, norm2, shell, RealEvaluator, TorusSeries};
use crate::model::SystemModel;
use crate::poly::{Polynomial, TrigPolynomial};
use crate::quadrature::{composite_gauss_legendre, oscillatory_node_count, ChebyshevGrid, PANEL_ORDER};
use crate::stats::{mean_stderr, pairwise_sum, stream_rng};

/// Safety factor on the grid maximum used as rejection envelope.
pub const ENVELOPE_FACTOR: f64 = 1.2;
/// Relative agreement demanded of two node counts in [`ModeTable::mode_integral`].
pub const MODE_QUAD_RTOL: f64 = 1e-8;

/// Action profile g(I) = Π_k g₁(x_k), x_k ∈ [-1, 1] the rescaled coordinate on axis k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionProfile {
    /// g ≡ 1.
    Uniform,
    /// exp(1 − 1/(1 − y²)), y = x/(1 − margin); smooth, supported inside Ω.
    Bump {
        #[serde(default = "default_margin")]
        margin: f64,
    },
    /// 1 − (1 − edge) x², equal to `edge` on ∂Ω.
    Cap { edge: f64 },
}

fn default_margin() -> f64 {
    0.1
}

impl Default for ActionProfile {
    fn default() -> Self {
        Self::Bump { margin: default_margin() }
    }
}

impl ActionProfile {
    fn validate(&self) -> Result<()> {
        match *self {
            Self::Bump { margin } if !(0.0..1.0).contains(&margin) => {
                Err(Error::Density(format!("bump margin {margin} outside [0, 1)")))
            }
            Self::Cap { edge } if !(edge >= 0.0 && edge.is_finite()) => {
                Err(Error::Density(format!("cap edge value {edge} is negative")))
            }
            _ => Ok(()),
        }
    }

    /// Half-width of the support in x.
    fn support(&self) -> f64 {
        match *self {
            Self::Bump { margin } => 1.0 - margin,
            _ => 1.0,
        }
    }

    /// (g₁(x), dg₁/dx).
    pub fn eval_1d(&self, x: f64) -> (f64, f64) {
        match *self {
            Self::Uniform => (1.0, 0.0),
            Self::Cap { edge } => (1.0 - (1.0 - edge) * x * x, -2.0 * (1.0 - edge) * x),
            Self::Bump { margin } => {
                let w = 1.0 - margin;
                let y = x / w;
                if y.abs() >= 1.0 {
                    return (0.0, 0.0);
                }
                let s = 1.0 - y * y;
                let g = (1.0 - 1.0 / s).exp();
                (g, g * (-2.0 * y / (s * s)) / w)
            }
        }
    }
}

/// Initial density f₀(I, θ) = g(I) h(θ) / Z with respect to μ* = ρ dθ dI.
#[derive(Clone, Debug)]
pub struct InitialDensity {
    pub profile: ActionProfile,
    pub angle: TrigPolynomial,
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// ∫_Ω g dI.
    pub g_mass: f64,
    /// ∫_{T^N} h ρ dθ.
    pub h_mass: f64,
    /// 1-D rule on the support of g₁ in x, shared by every I-integral.
    rule: (Vec<f64>, Vec<f64>),
}

impl InitialDensity {
    pub fn new(model: &SystemModel, profile: ActionProfile, angle: TrigPolynomial, nodes: usize) -> Result<Self> {
        profile.validate()?;
        angle.check_dim(model.dim)?;
        let band = model.band.max(angle.band());
        let h = angle.to_series(model.dim, band)?;
        let m = 4 * band + 1;
        let h_grid = h.to_grid(m)?;
        let rho_grid = model.rho.resized(band).to_grid(m)?;
        let (j, min) = h_grid
            .iter()
            .zip(&rho_grid)
            .map(|(h, r)| h.re * r.re)
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty grid");
        if min < 0.0 {
            return Err(Error::Density(format!(
                "angular factor times rho is negative ({min:e}) at theta = {:?}",
                crate::fourier::grid_point(j, m, model.dim)
            )));
        }
        let rho = model.rho.resized(band);
        let h_mass: f64 = h
            .coeffs()
            .iter()
            .enumerate()
            .map(|(flat, c)| {
                let n = h.index(flat);
                let neg: Vec<i64> = n.iter().map(|x| -x).collect();
                (c * rho.coeff(&neg)).re
            })
            .sum::<f64>()
            * TAU.powi(model.dim as i32);
        let s = profile.support();
        let rule = composite_gauss_legendre(-s, s, nodes.max(PANEL_ORDER));
        let g1: f64 = rule.0.iter().zip(&rule.1).map(|(x, w)| w * profile.eval_1d(*x).0).sum();
        let g_mass = model.domain.widths().iter().map(|w| 0.5 * w * g1).product();
        Ok(Self {
            profile,
            angle,
            lower: model.domain.lower.clone(),
            upper: model.domain.upper.clone(),
            g_mass,
            h_mass,
            rule,
        })
    }

    pub fn z(&self) -> f64 {
        self.g_mass * self.h_mass
    }

    fn unit(&self, k: usize, x: f64) -> f64 {
        2.0 * (x - self.lower[k]) / (self.upper[k] - self.lower[k]) - 1.0
    }

    /// g(I).
    pub fn g(&self, action: &[f64]) -> f64 {
        action.iter().enumerate().map(|(k, &x)| self.profile.eval_1d(self.unit(k, x)).0).product()
    }

    /// g₁ on axis k at the physical coordinate x.
    pub fn g_axis(&self, k: usize, x: f64) -> f64 {
        self.profile.eval_1d(self.unit(k, x)).0
    }

    /// ∇g(I).
    pub fn grad_g(&self, action: &[f64]) -> Vec<f64> {
        let parts: Vec<(f64, f64)> = action
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let (g, d) = self.profile.eval_1d(self.unit(k, x));
                (g, d * 2.0 / (self.upper[k] - self.lower[k]))
            })
            .collect();
        (0..parts.len())
            .map(|j| parts.iter().enumerate().map(|(k, p)| if k == j { p.1 } else { p.0 }).product())
            .collect()
    }

    pub fn value(&self, action: &[f64], theta: &[f64]) -> f64 {
        self.g(action) * self.angle.eval(theta) / self.z()
    }

    /// Tensor rule on the support of g in Ω: (points, weights).
    pub fn action_rule(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let dim = self.lower.len();
        let (x, w) = &self.rule;
        let n = x.len();
        let total = n.pow(dim as u32);
        let mut pts = Vec::with_capacity(total);
        let mut wts = Vec::with_capacity(total);
        for mut flat in 0..total {
            let mut p = vec![0.0; dim];
            let mut wt = 1.0;
            for k in (0..dim).rev() {
                let j = flat % n;
                flat /= n;
                let half = 0.5 * (self.upper[k] - self.lower[k]);
                p[k] = self.lower[k] + half * (x[j] + 1.0);
                wt *= half * w[j];
            }
            pts.push(p);
            wts.push(wt);
        }
        (pts, wts)
    }
}

/// G(I, θ) = angle(θ) + action(I).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observable {
    #[serde(default)]
    pub angle: TrigPolynomial,
    #[serde(default)]
    pub action: Polynomial,
}

impl Observable {
    pub fn angular(angle: TrigPolynomial) -> Self {
        Self { angle, action: Polynomial::default() }
    }

    /// cos θ₁ in `dim` angles.
    pub fn cos_first(dim: usize) -> Self {
        let mut n = vec![0; dim];
        n[0] = 1;
        Self::angular(TrigPolynomial::default().with_cos(&n, 1.0))
    }

    pub fn value(&self, action: &[f64], theta: &[f64]) -> f64 {
        self.angle.eval(theta) + self.action.value(action)
    }

    /// True when G does not depend on θ.
    pub fn is_angle_independent(&self) -> bool {
        self.angle.is_constant()
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        self.angle.check_dim(dim)?;
        self.action.check_dim(dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(default)]
    pub profile: ActionProfile,
    /// Angular factor h of f₀; must make hρ nonnegative.
    #[serde(default = "unit_angle")]
    pub angle_density: TrigPolynomial,
    pub observable: Observable,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Minimum quadrature nodes per action axis.
    #[serde(default = "default_quad_nodes")]
    pub quad_nodes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Modes |n|∞ ≤ mode_band enter the mode sum.
    #[serde(default = "default_mode_band")]
    pub mode_band: usize,
    /// Angle quadrature points per axis.
    #[serde(default = "default_theta_grid")]
    pub theta_grid: usize,
    /// Chebyshev nodes per action axis for the amplitude tables.
    #[serde(default = "default_cheb_nodes")]
    pub cheb_nodes: usize,
}

fn unit_angle() -> TrigPolynomial {
    TrigPolynomial::constant(1.0)
}
pub fn default_samples() -> usize {
    100_000
}
pub fn default_quad_nodes() -> usize {
    65
}
pub fn default_mode_band() -> usize {
    16
}
pub fn default_theta_grid() -> usize {
    64
}
pub fn default_cheb_nodes() -> usize {
    16
}

impl EnsembleSpec {
    pub fn new(observable: Observable) -> Self {
        Self {
            profile: ActionProfile::default(),
            angle_density: unit_angle(),
            observable,
            samples: default_samples(),
            quad_nodes: default_quad_nodes(),
            seed: 0,
            mode_band: default_mode_band(),
            theta_grid: default_theta_grid(),
            cheb_nodes: default_cheb_nodes(),
        }
    }
}

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Both forms of the equilibrium expectation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    /// ∫ (∫Gρ / ∫ρ) W dI.
    pub direct: f64,
    /// ∫ G̃₀ M₀ dI.
    pub modes: f64,
}

impl Equilibrium {
    pub fn value(&self) -> f64 {
        self.direct
    }

    pub fn discrepancy(&self) -> f64 {
        (self.direct - self.modes).abs()
    }
}

/// Both estimates of ⟨G⟩_t.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub t: f64,
    pub mc: Option<McEstimate>,
    pub quad: f64,
    pub quad_error: f64,
}

/// How the invariance audit draws angles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleSampling {
    /// θ ∝ ρ, the invariant measure.
    Invariant,
    /// θ uniform.
    Lebesgue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceEntry {
    pub function: usize,
    pub t: f64,
    pub mean_initial: f64,
    pub mean_evolved: f64,
    /// Standard error of the mean paired difference.
    pub combined_stderr: f64,
    /// |difference| / combined standard error (0 when both are exact).
    pub sigmas: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub sampling: AngleSampling,
    pub samples: usize,
    pub tol_sigma: f64,
    pub entries: Vec<InvarianceEntry>,
}

impl InvarianceReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| !e.flagged)
    }

    pub fn max_sigmas(&self) -> f64 {
        self.entries.iter().map(|e| e.sigmas).fold(0.0, f64::max)
    }
}

/// An ensemble bound to a model.
pub struct Ensemble<'a> {
    pub model: &'a SystemModel,
    pub spec: EnsembleSpec,
    pub density: InitialDensity,
    pub provider: ConjugacyProvider<'a>,
    rho: RealEvaluator,
    /// Rejection envelope for hρ.
    envelope: f64,
    thetas: Vec<Vec<f64>>,
}

impl<'a> Ensemble<'a> {
    pub fn new(model: &'a SystemModel, spec: EnsembleSpec) -> Result<Self> {
        spec.observable.check_dim(model.dim)?;
        if spec.theta_grid < 4 || spec.cheb_nodes < 2 || spec.quad_nodes < 2 {
            return Err(Error::Domain("quadrature resolutions are too small".into()));
        }
        let density = InitialDensity::new(model, spec.profile.clone(), spec.angle_density.clone(), spec.quad_nodes)?;
        let provider = ConjugacyProvider::new(model)?;
        let rho = RealEvaluator::new(&model.rho);
        let probe = grid_points((4 * model.band.max(density.angle.band()) + 1).max(64), model.dim);
        let max = probe
            .iter()
            .map(|t| density.angle.eval(t) * rho.eval(t))
            .fold(0.0, f64::max);
        Ok(Self {
            model,
            density,
            provider,
            rho,
            envelope: ENVELOPE_FACTOR * max,
            thetas: grid_points(spec.theta_grid, model.dim),
            spec,
        })
    }

    fn theta_volume(&self) -> f64 {
        TAU.powi(self.model.dim as i32)
    }

    /// (W(I), W⁽¹⁾(I)) = (∫ f₀ρ dθ, ∫ |∂_I f₀| ρ dθ).
    pub fn marginal_w(&self, action: &[f64]) -> Result<(f64, f64)> {
        self.model.omega(action)?;
        let mut hr = Vec::with_capacity(self.thetas.len());
        for t in &self.thetas {
            let h = self.density.angle.eval(t);
            if h * self.rho.eval(t) < 0.0 {
                return Err(Error::Density(format!("negative density at theta = {t:?}")));
            }
            hr.push(h * self.rho.eval(t));
        }
        let mass = pairwise_sum(&hr) / hr.len() as f64 * self.theta_volume() / self.density.z();
        let grad = self.density.grad_g(action);
        let gnorm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok((self.density.g(action) * mass, gnorm * mass))
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        let dim = self.model.dim;
        let s = self.density.profile.support();
        let mut action = vec![0.0; dim];
        for (k, a) in action.iter_mut().enumerate() {
            loop {
                let x = s * (2.0 * rng.random::<f64>() - 1.0);
                if rng.random::<f64>() <= self.density.profile.eval_1d(x).0 {
                    let (l, u) = (self.model.domain.lower[k], self.model.domain.upper[k]);
                    *a = l + 0.5 * (u - l) * (x + 1.0);
                    break;
                }
            }
        }
        let theta = self.draw_angle(rng, AngleSampling::Invariant, true)?;
        Ok((action, theta))
    }

    fn draw_angle(&self, rng: &mut ChaCha8Rng, sampling: AngleSampling, weighted: bool) -> Result<Vec<f64>> {
        let dim = self.model.dim;
        loop {
            let theta: Vec<f64> = (0..dim).map(|_| TAU * rng.random::<f64>()).collect();
            if sampling == AngleSampling::Lebesgue {
                return Ok(theta);
            }
            let h = if weighted { self.density.angle.eval(&theta) } else { 1.0 };
            let value = h * self.rho.eval(&theta);
            let envelope = if weighted { self.envelope } else { ENVELOPE_FACTOR * self.rho_max() };
            if value > envelope {
                return Err(Error::Envelope { value, envelope });
            }
            if rng.random::<f64>() * envelope <= value {
                return Ok(theta);
            }
        }
    }

    fn rho_max(&self) -> f64 {
        self.model.rho.abs_sum()
    }

    /// `count` draws from f₀ρ dI dθ; draw i uses RNG stream i of `seed`.
    pub fn sample_initial(&self, count: usize, seed: u64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        (0..count)
            .into_par_iter()
            .map(|i| self.draw(&mut stream_rng(seed, i as u64)))
            .collect()
    }

    /// Monte Carlo ⟨G⟩_t for each t, evolving every sample along the conjugated flow.
    pub fn expect_mc(&self, times: &[f64], count: usize, seed: u64) -> Result<Vec<McEstimate>> {
        let g = &self.spec.observable;
        let rows: Vec<Vec<f64>> = (0..count)
            .into_par_iter()
            .map(|i| {
                let (action, theta) = self.draw(&mut stream_rng(seed, i as u64))?;
                let conj = self.provider.at(&action)?;
                let phi0 = conj.psi_lift(&theta);
                times
                    .iter()
                    .map(|&t| {
                        let th = evolve_from(&conj, &theta, &phi0, t)?;
                        Ok(g.value(&action, &th))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok((0..times.len())
            .map(|j| {
                let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                let (mean, stderr) = mean_stderr(&col);
                McEstimate { mean, stderr }
            })
            .collect())
    }

    /// Per-action angular integrals on the θ grid:
    /// G̃_n(I) and m_n(I) = (2π)^N mean(e^{in·Ψ} h ρ) for every |n|∞ ≤ band.
    fn angular_coefficients(&self, action: &[f64], band: usize) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
        let conj = self.provider.at(action)?;
        let dim = self.model.dim;
        let width = 2 * band + 1;
        let npts = self.thetas.len();
        // powers[k][j][p] = e^{i (j - band) Ψ_k(θ_p)}
        let mut powers = vec![vec![vec![Complex64::new(1.0, 0.0); npts]; width]; dim];
        let mut gdet = Vec::with_capacity(npts);
        let mut hrho = Vec::with_capacity(npts);
        let mut grad = vec![0.0; dim];
        let v_eval = RealEvaluator::new(&conj.v);
        for (p, theta) in self.thetas.iter().enumerate() {
            let v = v_eval.eval_grad(theta, &mut grad);
            let det = 1.0 + dot_f(&conj.omega, &grad);
            gdet.push(self.spec.observable.value(action, theta) * det);
            hrho.push(self.density.angle.eval(theta) * self.rho.eval(theta));
            for k in 0..dim {
                let e = Complex64::cis(theta[k] + conj.omega[k] * v);
                for j in 1..=band {
                    let prev = powers[k][band + j - 1][p];
                    powers[k][band + j][p] = prev * e;
                    powers[k][band - j][p] = (prev * e).conj();
                }
            }
        }
        let modes = full_lattice(dim, band);
        let scale = 1.0 / npts as f64;
        let vol = self.theta_volume();
        let mut gn = Vec::with_capacity(modes.len());
        let mut mn = Vec::with_capacity(modes.len());
        let mut phase = vec![Complex64::new(0.0, 0.0); npts];
        for n in &modes {
            phase.iter_mut().for_each(|x| *x = Complex64::new(1.0, 0.0));
            for (k, &nk) in n.iter().enumerate() {
                let row = &powers[k][(nk + band as i64) as usize];
                for (x, r) in phase.iter_mut().zip(row) {
                    *x *= r;
                }
            }
            let g: Complex64 = phase.iter().zip(&gdet).map(|(e, w)| e.conj() * w).sum::<Complex64>() * scale;
            let m: Complex64 = phase.iter().zip(&hrho).map(|(e, w)| e * w).sum::<Complex64>() * scale * vol;
            gn.push(g);
            mn.push(m);
        }
        Ok((gn, mn))
    }

    /// M_n(I) = ∫ e^{in·Ψ_I(θ)} f₀(I, θ) ρ(θ) dθ.
    pub fn m_n(&self, n: &[i64], action: &[f64]) -> Result<Complex64> {
        let band = shell(n);
        let (_, mn) = self.angular_coefficients(action, band)?;
        Ok(mn[mode_offset(n, band)] * self.density.g(action) / self.density.z())
    }

    /// A_n(I) = G̃_n(I) M_n(I).
    pub fn a_n(&self, n: &[i64], action: &[f64]) -> Result<Complex64> {
        let band = shell(n);
        let (gn, mn) = self.angular_coefficients(action, band)?;
        let j = mode_offset(n, band);
        Ok(gn[j] * mn[j] * self.density.g(action) / self.density.z())
    }

    /// Φ_n(I) = ā n·ω(I).
    pub fn phi_n(&self, n: &[i64], action: &[f64]) -> Result<f64> {
        Ok(self.model.a_bar * dot(n, &self.model.omega(action)?))
    }

    /// ⟨G⟩_eq in both forms, on the shared action rule.
    pub fn expect_eq(&self) -> Result<Equilibrium> {
        let (pts, wts) = self.density.action_rule();
        let rho_mean = self.model.rho.mean().re;
        let parts: Vec<(f64, f64)> = pts
            .par_iter()
            .zip(&wts)
            .map(|(action, w)| {
                let g = self.density.g(action);
                if g == 0.0 {
                    return Ok((0.0, 0.0));
                }
                let (wi, _) = self.marginal_w(action)?;
                let gr: Vec<f64> = self
                    .thetas
                    .iter()
                    .map(|t| self.spec.observable.value(action, t) * self.rho.eval(t))
                    .collect();
                let direct = pairwise_sum(&gr) / gr.len() as f64 / rho_mean * wi;
                let (gn, mn) = self.angular_coefficients(action, 0)?;
                let modes = (gn[0] * mn[0]).re * g / self.density.z();
                Ok((w * direct, w * modes))
            })
            .collect::<Result<_>>()?;
        let direct: Vec<f64> = parts.iter().map(|p| p.0).collect();
        let modes: Vec<f64> = parts.iter().map(|p| p.1).collect();
        Ok(Equilibrium { direct: pairwise_sum(&direct), modes: pairwise_sum(&modes) })
    }

    /// ∫ f₀ dμ* by the action rule and the angle grid; 1 up to quadrature error.
    pub fn normalization(&self) -> Result<f64> {
        let (pts, wts) = self.density.action_rule();
        let parts: Vec<f64> = pts
            .iter()
            .zip(&wts)
            .map(|(a, w)| Ok(w * self.marginal_w(a)?.0))
            .collect::<Result<_>>()?;
        Ok(pairwise_sum(&parts))
    }

    /// Tabulates the amplitudes on a Chebyshev tensor grid over Ω.
    pub fn mode_table(&self) -> Result<ModeTable> {
        let dim = self.model.dim;
        let band = self.spec.mode_band;
        let p = self.spec.cheb_nodes;
        let grids: Vec<ChebyshevGrid> = (0..dim)
            .map(|k| ChebyshevGrid::new(self.model.domain.lower[k], self.model.domain.upper[k], p))
            .collect();
        let nodes: Vec<Vec<f64>> = tensor(&grids.iter().map(|g| g.nodes.clone()).collect::<Vec<_>>());
        let per_node: Vec<Vec<Complex64>> = nodes
            .par_iter()
            .map(|action| {
                let (gn, mn) = self.angular_coefficients(action, band)?;
                Ok(gn.iter().zip(&mn).map(|(g, m)| g * m / self.density.z()).collect())
            })
            .collect::<Result<_>>()?;
        let modes = full_lattice(dim, band);
        let values: Vec<Vec<Complex64>> = (0..modes.len())
            .map(|j| per_node.iter().map(|row| row[j]).collect())
            .collect();

        // interpolation check at interior points between nodes
        let checks = tensor(&vec![vec![0.21, 0.5, 0.79]; dim]);
        let mut interp_error = vec![0.0f64; modes.len()];
        for u in &checks {
            let action = self.model.domain.from_unit(u);
            let (gn, mn) = self.angular_coefficients(&action, band)?;
            let basis: Vec<Vec<f64>> = grids.iter().zip(&action).map(|(g, &x)| g.basis_at(x)).collect();
            for (j, vals) in values.iter().enumerate() {
                let exact = gn[j] * mn[j] / self.density.z();
                let approx = contract_real_basis(vals, &basis);
                interp_error[j] = interp_error[j].max((exact - approx).norm());
            }
        }

        let mut max_abs = vec![0.0f64; modes.len()];
        for (j, vals) in values.iter().enumerate() {
            max_abs[j] = vals.iter().map(|z| z.norm()).fold(0.0, f64::max);
        }
        let separable = self.model.hamiltonian.is_separable();
        let diameter = frequency_diameter(self.model);
        Ok(ModeTable {
            dim,
            band,
            modes,
            values,
            grids,
            interp_error,
            max_abs,
            density: self.density.clone(),
            a_bar: self.model.a_bar,
            hamiltonian: self.model.hamiltonian.clone(),
            separable,
            diameter,
            min_nodes: self.spec.quad_nodes,
            center: self.model.domain.center(),
        })
    }

    /// ⟨G⟩_t by the mode sum, with Monte Carlo alongside when `mc_samples` > 0.
    pub fn expect_t(&self, table: &ModeTable, t: f64, mc_samples: usize) -> Result<Expectation> {
        if t < 0.0 {
            return Err(Error::Domain(format!("negative time {t}")));
        }
        let quad = table.total(t)?;
        let mc = if mc_samples > 0 {
            Some(self.expect_mc(&[t], mc_samples, self.spec.seed)?[0])
        } else {
            None
        };
        Ok(Expectation { t, mc, quad: quad.re, quad_error: table.error_estimate() })
    }

    /// ⟨G⟩_t by tensor quadrature of the evolved density, without the mode
    /// expansion. Cost grows with t; meant as a cross-check at modest times.
    pub fn expect_direct(&self, t: f64) -> Result<f64> {
        let (pts, wts) = self.density.action_rule();
        let vals: Vec<f64> = pts
            .par_iter()
            .zip(&wts)
            .map(|(action, w)| {
                let g = self.density.g(action);
                if g == 0.0 {
                    return Ok(0.0);
                }
                let conj = self.provider.at(action)?;
                let inner: Vec<f64> = self
                    .thetas
                    .iter()
                    .map(|th| {
                        let evolved = flow_conjugated(&conj, th, t)?;
                        Ok(self.spec.observable.value(action, &evolved)
                            * self.density.angle.eval(th)
                            * self.rho.eval(th))
                    })
                    .collect::<Result<_>>()?;
                Ok(w * g * pairwise_sum(&inner) / inner.len() as f64 * self.theta_volume() / self.density.z())
            })
            .collect::<Result<_>>()?;
        Ok(pairwise_sum(&vals))
    }
}

fn evolve_from(conj: &Conjugacy, theta: &[f64], phi0: &[f64], t: f64) -> Result<Vec<f64>> {
    if t == 0.0 {
        return Ok(theta.to_vec());
    }
    let phi: Vec<f64> = phi0.iter().zip(&conj.omega).map(|(p, w)| p + conj.a_bar * w * t).collect();
    conj.psi_inverse(&phi, INVERSE_TOL)
}

fn dot_f(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mode_offset(n: &[i64], band: usize) -> usize {
    let w = 2 * band as i64 + 1;
    n.iter().fold(0i64, |acc, &x| acc * w + x + band as i64) as usize
}

/// Tensor product of per-axis point lists, last axis fastest.
fn tensor(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for &x in axis {
                let mut p = prefix.clone();
                p.push(x);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// Σ_{i₁..i_N} vals[i] Π_k basis[k][i_k].
fn contract_real_basis(vals: &[Complex64], basis: &[Vec<f64>]) -> Complex64 {
    match basis {
        [] => vals[0],
        [last] => vals.iter().zip(last).map(|(v, b)| v * b).sum(),
        [first, rest @ ..] => {
            let stride = vals.len() / first.len();
            first
                .iter()
                .enumerate()
                .map(|(i, b)| contract_real_basis(&vals[i * stride..(i + 1) * stride], rest) * b)
                .sum()
        }
    }
}

/// As [`contract_real_basis`] with complex per-axis vectors.
fn contract_complex(vals: &[Complex64], vecs: &[Vec<Complex64>]) -> Complex64 {
    match vecs {
        [] => vals[0],
        [last] => vals.iter().zip(last).map(|(v, b)| v * b).sum(),
        [first, rest @ ..] => {
            let stride = vals.len() / first.len();
            first
                .iter()
                .enumerate()
                .map(|(i, b)| contract_complex(&vals[i * stride..(i + 1) * stride], rest) * b)
                .sum()
        }
    }
}

/// Largest distance between frequencies ω(I) over a fine sample of Ω.
fn frequency_diameter(model: &SystemModel) -> f64 {
    let pts: Vec<Vec<f64>> = model
        .domain
        .midpoint_grid(9)
        .into_iter()
        .chain(tensor(
            &model.domain.lower.iter().zip(&model.domain.upper).map(|(l, u)| vec![*l, *u]).collect::<Vec<_>>(),
        ))
        .map(|a| model.hamiltonian.gradient(&a))
        .collect();
    let mut d = 0.0f64;
    for a in &pts {
        for b in &pts {
            d = d.max(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
        }
    }
    d
}

/// Interpolated amplitudes B_n = A_n / g on a Chebyshev grid; the mode
/// integrals multiply back the exact profile g at each quadrature node.
#[derive(Clone, Debug)]
pub struct ModeTable {
    pub dim: usize,
    pub band: usize,
    pub modes: Vec<Vec<i64>>,
    values: Vec<Vec<Complex64>>,
    grids: Vec<ChebyshevGrid>,
    /// Largest interpolation error of B_n seen at the check points.
    pub interp_error: Vec<f64>,
    /// max over the Chebyshev grid of |B_n|.
    pub max_abs: Vec<f64>,
    density: InitialDensity,
    a_bar: f64,
    hamiltonian: Polynomial,
    separable: bool,
    diameter: f64,
    min_nodes: usize,
    center: Vec<f64>,
}

impl ModeTable {
    fn index(&self, n: &[i64]) -> Result<usize> {
        if n.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, found: n.len() });
        }
        if shell(n) > self.band {
            return Err(Error::Domain(format!("mode {n:?} outside tabulated band {}", self.band)));
        }
        Ok(mode_offset(n, self.band))
    }

    /// Interpolated A_n(I).
    pub fn amplitude(&self, n: &[i64], action: &[f64]) -> Result<Complex64> {
        let j = self.index(n)?;
        let basis: Vec<Vec<f64>> = self.grids.iter().zip(action).map(|(g, &x)| g.basis_at(x)).collect();
        Ok(contract_real_basis(&self.values[j], &basis) * self.density.g(action))
    }

    fn nodes_for(&self, n: &[i64], t: f64) -> usize {
        let osc = oscillatory_node_count(t, norm2(n), self.diameter * self.a_bar);
        osc.max(self.min_nodes).max(self.grids[0].len())
    }

    /// ∫_Ω A_n e^{itΦ_n} dI, checked against a finer rule.
    pub fn mode_integral(&self, n: &[i64], t: f64) -> Result<Complex64> {
        let j = self.index(n)?;
        let nodes = self.nodes_for(n, t);
        let coarse = self.integrate(j, n, t, nodes)?;
        let fine_nodes = nodes + PANEL_ORDER.max(nodes / 2);
        let fine = self.integrate(j, n, t, fine_nodes)?;
        let scale = self.max_abs[j] * self.density.g_mass;
        let estimate = (fine - coarse).norm();
        if estimate > MODE_QUAD_RTOL * scale.max(fine.norm()) && estimate > 1e-15 {
            return Err(Error::OscillatoryQuadrature { mode: n.to_vec(), time: t, nodes: fine_nodes, estimate });
        }
        Ok(fine)
    }

    fn axis_rule(&self, k: usize, nodes: usize) -> (Vec<f64>, Vec<f64>) {
        let (l, u) = (self.density.lower[k], self.density.upper[k]);
        let c = 0.5 * (l + u);
        let h = 0.5 * (u - l) * self.density.profile.support();
        composite_gauss_legendre(c - h, c + h, nodes)
    }

    fn integrate(&self, j: usize, n: &[i64], t: f64, nodes: usize) -> Result<Complex64> {
        let vals = &self.values[j];
        if self.separable || self.dim == 1 {
            let vecs: Vec<Vec<Complex64>> = (0..self.dim)
                .map(|k| {
                    let (xs, ws) = self.axis_rule(k, nodes);
                    let mut acc = vec![Complex64::new(0.0, 0.0); self.grids[k].len()];
                    let mut probe = self.center.clone();
                    for (x, w) in xs.iter().zip(&ws) {
                        probe[k] = *x;
                        let wk = self.hamiltonian.gradient(&probe)[k];
                        let e = Complex64::cis(t * self.a_bar * n[k] as f64 * wk) * (w * self.density.g_axis(k, *x));
                        for (a, b) in acc.iter_mut().zip(self.grids[k].basis_at(*x)) {
                            *a += e * b;
                        }
                    }
                    acc
                })
                .collect();
            return Ok(contract_complex(vals, &vecs));
        }
        if self.dim != 2 {
            return Err(Error::Domain(
                "mode integrals for coupled Hamiltonians are implemented for N <= 2".into(),
            ));
        }
        let (xs, wx) = self.axis_rule(0, nodes);
        let (ys, wy) = self.axis_rule(1, nodes);
        let p0 = self.grids[0].len();
        let p1 = self.grids[1].len();
        let lx: Vec<Vec<f64>> = xs.iter().map(|&x| self.grids[0].basis_at(x)).collect();
        let ly: Vec<Vec<f64>> = ys.iter().map(|&y| self.grids[1].basis_at(y)).collect();
        let total: Complex64 = xs
            .par_iter()
            .enumerate()
            .map(|(q, &x)| {
                // row[j1] = Σ_i L_i(x) B[i][j1]
                let mut row = vec![Complex64::new(0.0, 0.0); p1];
                for i in 0..p0 {
                    let b = lx[q][i];
                    for (r, v) in row.iter_mut().zip(&vals[i * p1..(i + 1) * p1]) {
                        *r += v * b;
                    }
                }
                let gx = self.density.g_axis(0, x);
                let mut acc = Complex64::new(0.0, 0.0);
                for (r, &y) in ys.iter().enumerate() {
                    let amp: Complex64 = row.iter().zip(&ly[r]).map(|(a, b)| a * b).sum();
                    let w = self.hamiltonian.gradient(&[x, y]);
                    let phase = t * self.a_bar * (n[0] as f64 * w[0] + n[1] as f64 * w[1]);
                    acc += amp * Complex64::cis(phase) * (wy[r] * gx * self.density.g_axis(1, y));
                }
                acc * wx[q]
            })
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        Ok(total)
    }

    /// Σ_{n≠0} 𝓘_n(t), the deviation of ⟨G⟩_t from equilibrium.
    pub fn deviation(&self, t: f64) -> Result<Complex64> {
        let zero = vec![0i64; self.dim];
        let parts: Vec<Complex64> = self
            .modes
            .par_iter()
            .filter(|n| **n != zero)
            .map(|n| self.mode_integral(n, t))
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().sum())
    }

    /// Σ_n 𝓘_n(t).
    pub fn total(&self, t: f64) -> Result<Complex64> {
        Ok(self.equilibrium()? + self.deviation(t)?)
    }

    /// 𝓘₀ = ∫ A₀ dI.
    pub fn equilibrium(&self) -> Result<Complex64> {
        self.mode_integral(&vec![0; self.dim], 0.0)
    }

    /// Bound on the error of [`deviation`](Self::deviation) from interpolation
    /// and from the modes beyond the band (estimated by the outermost shell).
    pub fn error_estimate(&self) -> f64 {
        let mass = self.density.g_mass;
        let interp: f64 = self.interp_error.iter().sum::<f64>() * mass;
        let tail: f64 = self
            .modes
            .iter()
            .zip(&self.max_abs)
            .filter(|(n, _)| shell(n) == self.band)
            .map(|(_, a)| a * mass)
            .sum();
        interp + tail
    }

    /// max over the grid of |A_n| on each shell 1..=band.
    pub fn shell_maxima(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.band + 1];
        for (n, a) in self.modes.iter().zip(&self.max_abs) {
            let s = shell(n);
            out[s] = out[s].max(*a);
        }
        out
    }
}

/// V_n(I) = Dω(I)ᵀn / (ā ‖Dω(I)ᵀn‖²).
pub fn v_field(model: &SystemModel, n: &[i64], action: &[f64]) -> Result<Vec<f64>> {
    let d = model.d_omega(action)?;
    let nv = DMatrix::from_iterator(n.len(), 1, n.iter().map(|&x| x as f64));
    let g = d.transpose() * nv;
    let norm2 = g.norm_squared();
    if !(norm2.sqrt() > crate::model::RESONANCE_FLOOR) {
        return Err(Error::DegenerateField { mode: n.to_vec(), norm: norm2.sqrt() });
    }
    Ok(g.iter().map(|x| x / (model.a_bar * norm2)).collect())
}

/// ∇Φ_n(I) = ā Dω(I)ᵀ n.
pub fn grad_phi_n(model: &SystemModel, n: &[i64], action: &[f64]) -> Result<Vec<f64>> {
    let d = model.d_omega(action)?;
    Ok((0..n.len())
        .map(|j| model.a_bar * n.iter().enumerate().map(|(k, &nk)| d[(k, j)] * nk as f64).sum::<f64>())
        .collect())
}

/// Compares Monte Carlo means of each test function at t = 0 and at each t,
/// on the same samples with I uniform on Ω and θ drawn by `sampling`.
pub fn invariance_audit(
    model: &SystemModel,
    test_fns: &[Observable],
    t_list: &[f64],
    n_samples: usize,
    tol_sigma: f64,
    sampling: AngleSampling,
    seed: u64,
) -> Result<InvarianceReport> {
    for f in test_fns {
        f.check_dim(model.dim)?;
    }
    let spec = EnsembleSpec {
        profile: ActionProfile::Uniform,
        ..EnsembleSpec::new(Observable::default())
    };
    let ens = Ensemble::new(model, spec)?;
    let rows: Vec<Vec<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let u: Vec<f64> = (0..model.dim).map(|_| rng.random::<f64>()).collect();
            let action = model.domain.from_unit(&u);
            let theta = ens.draw_angle(&mut rng, sampling, false)?;
            let conj = ens.provider.at(&action)?;
            let phi0 = conj.psi_lift(&theta);
            let mut row = Vec::with_capacity(test_fns.len() * (t_list.len() + 1));
            for f in test_fns {
                row.push(f.value(&action, &theta));
            }
            for &t in t_list {
                let th = evolve_from(&conj, &theta, &phi0, t)?;
                for f in test_fns {
                    row.push(f.value(&action, &th));
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let column = |j: usize| -> Vec<f64> { rows.iter().map(|r| r[j]).collect() };
    let nf = test_fns.len();
    let mut entries = Vec::new();
    for (fi, _) in test_fns.iter().enumerate() {
        let initial = column(fi);
        let (m0, _) = mean_stderr(&initial);
        for (ti, &t) in t_list.iter().enumerate() {
            let evolved = column(nf * (ti + 1) + fi);
            let (mt, _) = mean_stderr(&evolved);
            // both means come from the same draws, so the error of their
            // difference is that of the paired differences
            let paired: Vec<f64> = evolved.iter().zip(&initial).map(|(a, b)| a - b).collect();
            let (_, combined) = mean_stderr(&paired);
            let diff = (mt - m0).abs();
            let sigmas = if diff == 0.0 { 0.0 } else { diff / combined };
            entries.push(InvarianceEntry {
                function: fi,
                t,
                mean_initial: m0,
                mean_evolved: mt,
                combined_stderr: combined,
                sigmas,
                flagged: sigmas > tol_sigma,
            });
        }
    }
    Ok(InvarianceReport { sampling, samples: n_samples, tol_sigma, entries })
}

/// Counts of Ψ_I(θ) over `bins` cells per axis for `count` draws of θ from ρ dθ.
pub fn pushforward_histogram(model: &SystemModel, action: &[f64], count: usize, bins: usize, seed: u64) -> Result<Vec<u64>> {
    let spec = EnsembleSpec { profile: ActionProfile::Uniform, ..EnsembleSpec::new(Observable::default()) };
    let ens = Ensemble::new(model, spec)?;
    let conj = ens.provider.at(action)?;
    let cells: Vec<usize> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let theta = ens.draw_angle(&mut rng, AngleSampling::Invariant, false)?;
            let phi = conj.psi(&theta);
            Ok(phi.iter().fold(0usize, |acc, &p| acc * bins + ((p / TAU * bins as f64) as usize).min(bins - 1)))
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0u64; bins.pow(model.dim as u32)];
    for c in cells {
        counts[c] += 1;
    }
    Ok(counts)
}

/// TorusSeries of the angular factor h at the model's band, for dumps.
pub fn angle_density_series(model: &SystemModel, spec: &EnsembleSpec) -> Result<TorusSeries> {
    spec.angle_density.to_series(model.dim, model.band.max(spec.angle_density.band()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};

    fn sys_a() -> SystemModel {
        build_model(&ModelSpec::sys_a(24)).unwrap()
    }

    #[test]
    fn profiles_and_derivatives() {
        for p in [ActionProfile::Uniform, ActionProfile::Bump { margin: 0.1 }, ActionProfile::Cap { edge: 0.3 }] {
            for x in [-0.7, -0.2, 0.0, 0.4, 0.85] {
                let h = 1e-6;
                let fd = (p.eval_1d(x + h).0 - p.eval_1d(x - h).0) / (2.0 * h);
                assert!((fd - p.eval_1d(x).1).abs() < 1e-6, "{p:?} at {x}");
            }
        }
        assert_eq!(ActionProfile::Bump { margin: 0.1 }.eval_1d(0.95).0, 0.0);
        assert!((ActionProfile::Cap { edge: 0.3 }.eval_1d(1.0).0 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn marginal_of_uniform_density() {
        let m = sys_a();
        let spec = EnsembleSpec { profile: ActionProfile::Uniform, ..EnsembleSpec::new(Observable::cos_first(1)) };
        let e = Ensemble::new(&m, spec).unwrap();
        let (w, w1) = e.marginal_w(&[1.3]).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        assert_eq!(w1, 0.0);
    }

    #[test]
    fn equilibrium_values_for_sys_a() {
        let m = sys_a();
        for (obs, expected) in [
            (Observable::cos_first(1), 0.25),
            (Observable::angular(TrigPolynomial::default().with_sin(&[1], 1.0)), 0.0),
            (Observable::angular(TrigPolynomial::constant(2.5)), 2.5),
        ] {
            let e = Ensemble::new(&m, EnsembleSpec::new(obs)).unwrap();
            let eq = e.expect_eq().unwrap();
            assert!((eq.direct - expected).abs() < 1e-10, "{eq:?}");
            assert!(eq.discrepancy() < 1e-8, "{eq:?}");
        }
    }

    #[test]
    fn mode_sum_at_zero_time_matches_initial_mean() {
        let m = sys_a();
        let spec = EnsembleSpec {
            profile: ActionProfile::Cap { edge: 0.4 },
            angle_density: TrigPolynomial::constant(1.0).with_cos(&[1], 0.4),
            mode_band: 20,
            theta_grid: 256,
            ..EnsembleSpec::new(Observable::cos_first(1))
        };
        let e = Ensemble::new(&m, spec).unwrap();
        let table = e.mode_table().unwrap();
        let quad = table.total(0.0).unwrap().re;
        let direct = e.expect_direct(0.0).unwrap();
        assert!((quad - direct).abs() < 1e-8, "{quad} vs {direct}");
        let at3 = e.expect_direct(3.0).unwrap();
        assert!((table.total(3.0).unwrap().re - at3).abs() < 1e-8);
    }

    #[test]
    fn v_field_identities() {
        let m = build_model(&ModelSpec::unweighted(vec![1.0, 1.0], vec![2.0, 2.0], 2)).unwrap();
        assert_eq!(v_field(&m, &[1, 0], &[1.5, 1.5]).unwrap(), vec![1.0, 0.0]);
        let v = v_field(&m, &[3, 4], &[1.5, 1.5]).unwrap();
        assert!((v[0] - 3.0 / 25.0).abs() < 1e-16 && (v[1] - 4.0 / 25.0).abs() < 1e-16);
        assert!(matches!(v_field(&m, &[0, 0], &[1.5, 1.5]), Err(Error::DegenerateField { .. })));
    }

    #[test]
    fn empty_sample() {
        let m = sys_a();
        let e = Ensemble::new(&m, EnsembleSpec::new(Observable::cos_first(1))).unwrap();
        assert!(e.sample_initial(0, 1).unwrap().is_empty());
    }
}

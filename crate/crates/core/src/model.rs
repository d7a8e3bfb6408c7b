//! Weighted integrable systems: the weight m on T^N, the Hamiltonian H on a
//! box Ω of actions, the derived speed a = m^{-1/N}, invariant density
//! ρ = m^{1/N}, mean speed ā and the zero-mean defect b = ā/a − 1.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{dot, grid_points, half_lattice, norm2, TorusSeries};
use crate::poly::{Monomial, Polynomial, TrigPolynomial};

/// Grid resolution per axis used to locate the minimum of a random exponent.
const RANDOM_WEIGHT_SCAN: usize = 128;

/// Threshold below which a small divisor or singular value counts as zero.
pub const RESONANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ActionBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension { expected: lower.len(), found: upper.len() });
        }
        for (k, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) || l >= u {
                return Err(Error::Domain(format!(
                    "empty action box on axis {k}: [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn volume(&self) -> f64 {
        self.widths().iter().product()
    }

    /// True when `x` lies in the closed box, with a relative slack of 1e-12.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(&v, (&l, &u))| {
                let slack = 1e-12 * (u - l).max(l.abs().max(u.abs()));
                v >= l - slack && v <= u + slack
            })
    }

    /// Cell-centred tensor grid with `n` points per axis, last axis fastest.
    pub fn midpoint_grid(&self, n: usize) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let total = n.pow(dim as u32);
        (0..total)
            .map(|mut flat| {
                let mut x = vec![0.0; dim];
                for k in (0..dim).rev() {
                    let j = flat % n;
                    flat /= n;
                    x[k] = self.lower[k] + (self.upper[k] - self.lower[k]) * (j as f64 + 0.5) / n as f64;
                }
                x
            })
            .collect()
    }

    /// Affine image of a point of the unit cube.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, h))| l + t * (h - l))
            .collect()
    }
}

/// How the weight m is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    /// m = p(θ)^exponent for a trigonometric polynomial p.
    Trig {
        #[serde(default)]
        mean: f64,
        #[serde(default)]
        terms: Vec<crate::poly::TrigTerm>,
        #[serde(default = "one")]
        exponent: f64,
    },
    /// m = exp(c·s) with s a random zero-mean band-limited series; c is chosen
    /// so that the minimum of m on a fine grid equals `min_value`.
    RandomExp { band: usize, seed: u64, min_value: f64 },
    /// Values of m on the (2K+1)^N grid.
    Samples { values: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

impl WeightSpec {
    pub fn trig(p: TrigPolynomial, exponent: f64) -> Self {
        Self::Trig { mean: p.mean, terms: p.terms, exponent }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    #[serde(default = "default_band")]
    pub band: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub hamiltonian: Polynomial,
    pub weight: WeightSpec,
}

pub fn default_band() -> usize {
    16
}

impl ModelSpec {
    /// m ≡ 1, H = |I|²/2 on the given box.
    pub fn unweighted(lower: Vec<f64>, upper: Vec<f64>, band: usize) -> Self {
        let dim = lower.len();
        Self {
            dim,
            band,
            lower,
            upper,
            hamiltonian: Polynomial::half_square_norm(dim),
            weight: WeightSpec::trig(TrigPolynomial::constant(1.0), 1.0),
        }
    }

    /// N = 1, Ω = [1, 2], H = I²/2, m = 1 + 0.5 cos θ.
    pub fn sys_a(band: usize) -> Self {
        Self {
            dim: 1,
            band,
            lower: vec![1.0],
            upper: vec![2.0],
            hamiltonian: Polynomial::half_square_norm(1),
            weight: WeightSpec::trig(TrigPolynomial::constant(1.0).with_cos(&[1], 0.5), 1.0),
        }
    }

    /// N = 2, Ω = [1, 1.2] × [1.55, 1.7], H = |I|²/2,
    /// m = (1 + 0.3 cos θ1 + 0.2 sin(θ1 + θ2))².
    pub fn sys_b(band: usize) -> Self {
        let rho = TrigPolynomial::constant(1.0)
            .with_cos(&[1, 0], 0.3)
            .with_sin(&[1, 1], 0.2);
        Self {
            dim: 2,
            band,
            lower: vec![1.0, 1.55],
            upper: vec![1.2, 1.70],
            hamiltonian: Polynomial::half_square_norm(2),
            weight: WeightSpec::trig(rho, 2.0),
        }
    }

    /// As [`sys_b`](Self::sys_b) with m = exp of a random band-4 series, min m = 0.3, seed 42.
    pub fn sys_c(band: usize) -> Self {
        Self {
            weight: WeightSpec::RandomExp { band: 4, seed: 42, min_value: 0.3 },
            ..Self::sys_b(band)
        }
    }

    /// Named reference system: "sys-a", "sys-b", "sys-c" or "unweighted" (N = 1, Ω = [1, 2]).
    pub fn reference(name: &str, band: usize) -> Option<Self> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "sys-a" | "a" => Some(Self::sys_a(band)),
            "sys-b" | "b" => Some(Self::sys_b(band)),
            "sys-c" | "c" => Some(Self::sys_c(band)),
            "unweighted" => Some(Self::unweighted(vec![1.0], vec![2.0], band)),
            _ => None,
        }
    }

    pub fn with_hamiltonian(mut self, h: Polynomial) -> Self {
        self.hamiltonian = h;
        self
    }
}

/// Pointwise evaluator of m resolved from a [`WeightSpec`].
enum WeightFn {
    Trig(TrigPolynomial, f64),
    Exp(TrigPolynomial, f64),
}

impl WeightFn {
    fn resolve(spec: &WeightSpec, dim: usize) -> Result<Option<Self>> {
        match spec {
            WeightSpec::Trig { mean, terms, exponent } => {
                let p = TrigPolynomial { mean: *mean, terms: terms.clone() };
                p.check_dim(dim)?;
                Ok(Some(Self::Trig(p, *exponent)))
            }
            WeightSpec::RandomExp { band, seed, min_value } => {
                if !(*min_value > 0.0 && *min_value < 1.0) {
                    return Err(Error::Domain(format!(
                        "random weight minimum must lie in (0, 1), got {min_value}"
                    )));
                }
                let s = TrigPolynomial::random(dim, *band, *seed, 1.0);
                let s_min = grid_points(RANDOM_WEIGHT_SCAN, dim)
                    .iter()
                    .map(|t| s.eval(t))
                    .fold(f64::INFINITY, f64::min);
                Ok(Some(Self::Exp(s, min_value.ln() / s_min)))
            }
            WeightSpec::Samples { .. } => Ok(None),
        }
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        match self {
            Self::Trig(p, e) => {
                let base = p.eval(theta);
                if *e == 1.0 { base } else { base.powf(*e) }
            }
            Self::Exp(s, c) => (c * s.eval(theta)).exp(),
        }
    }
}

/// A built weighted system. Immutable after [`build_model`].
#[derive(Clone, Debug)]
pub struct SystemModel {
    pub dim: usize,
    pub band: usize,
    pub domain: ActionBox,
    pub hamiltonian: Polynomial,
    pub weight_m: TorusSeries,
    pub a: TorusSeries,
    pub rho: TorusSeries,
    pub a_bar: f64,
    pub b: TorusSeries,
    pub spec: ModelSpec,
}

/// Builds the system described by `spec` at band `spec.band`.
pub fn build_model(spec: &ModelSpec) -> Result<SystemModel> {
    let dim = spec.dim;
    if dim == 0 {
        return Err(Error::Domain("torus dimension must be positive".into()));
    }
    if spec.band == 0 {
        return Err(Error::Domain("band must be positive".into()));
    }
    let domain = ActionBox::new(spec.lower.clone(), spec.upper.clone())?;
    if domain.dim() != dim {
        return Err(Error::Dimension { expected: dim, found: domain.dim() });
    }
    spec.hamiltonian.check_dim(dim)?;

    let k = spec.band;
    let m_grid = 2 * k + 1;
    let thetas = grid_points(m_grid, dim);
    let m_vals: Vec<f64> = match WeightFn::resolve(&spec.weight, dim)? {
        Some(f) => thetas.iter().map(|t| f.eval(t)).collect(),
        None => match &spec.weight {
            WeightSpec::Samples { values } => {
                if values.len() != thetas.len() {
                    return Err(Error::Shape { expected: thetas.len(), found: values.len() });
                }
                values.clone()
            }
            _ => unreachable!(),
        },
    };
    let (imin, &min) = m_vals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("grid is nonempty");
    if !(min > 0.0) || m_vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Positivity { min, theta: thetas[imin].clone() });
    }

    let inv_n = 1.0 / dim as f64;
    let rho_vals: Vec<f64> = m_vals.iter().map(|m| m.powf(inv_n)).collect();
    let a_vals: Vec<f64> = m_vals.iter().map(|m| m.powf(-inv_n)).collect();
    let weight_m = TorusSeries::from_grid(dim, k, &m_vals)?;
    let rho = TorusSeries::from_grid(dim, k, &rho_vals)?;
    let a = TorusSeries::from_grid(dim, k, &a_vals)?;
    let a_bar = 1.0 / rho.mean().re;
    let b_vals: Vec<f64> = rho_vals.iter().map(|r| a_bar * r - 1.0).collect();
    let zero = vec![0i64; dim];
    let b = TorusSeries::from_grid(dim, k, &b_vals)?
        .map_modes(|n, c| if n == zero.as_slice() { Complex64::new(0.0, 0.0) } else { c });

    Ok(SystemModel {
        dim,
        band: k,
        domain,
        hamiltonian: spec.hamiltonian.clone(),
        weight_m,
        a,
        rho,
        a_bar,
        b,
        spec: spec.clone(),
    })
}

/// Effective Diophantine and nondegeneracy constants on a finite band and action grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResonanceAudit {
    pub alpha_eff: f64,
    pub tau: f64,
    pub lambda_eff: f64,
    pub k_audit: usize,
    pub grid_points: usize,
    /// Action and mode attaining `alpha_eff`.
    pub worst_action: Vec<f64>,
    pub worst_mode: Vec<i64>,
    /// Action attaining `lambda_eff`.
    pub worst_degenerate_action: Vec<f64>,
}

impl ResonanceAudit {
    pub fn passed(&self) -> bool {
        self.alpha_eff > RESONANCE_FLOOR && self.lambda_eff > RESONANCE_FLOOR
    }

    /// Turns a failed audit into the matching error.
    pub fn into_result(self) -> Result<Self> {
        if self.alpha_eff <= RESONANCE_FLOOR {
            return Err(Error::Resonance {
                action: self.worst_action,
                mode: self.worst_mode,
                value: self.alpha_eff,
            });
        }
        if self.lambda_eff <= RESONANCE_FLOOR {
            return Err(Error::Degeneracy {
                action: self.worst_degenerate_action,
                sigma_min: self.lambda_eff,
            });
        }
        Ok(self)
    }
}

impl SystemModel {
    fn check_action(&self, action: &[f64]) -> Result<()> {
        if action.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, found: action.len() });
        }
        if !self.domain.contains(action) {
            return Err(Error::Domain(format!("action {action:?} lies outside the action box")));
        }
        Ok(())
    }

    /// ω(I) = ∇H(I).
    pub fn omega(&self, action: &[f64]) -> Result<Vec<f64>> {
        self.check_action(action)?;
        Ok(self.hamiltonian.gradient(action))
    }

    /// Dω(I), the Hessian of H.
    pub fn d_omega(&self, action: &[f64]) -> Result<DMatrix<f64>> {
        self.check_action(action)?;
        Ok(self.hamiltonian.hessian(action))
    }

    /// Scans the cell-centred `grid_n`^N action grid for small divisors on the
    /// half lattice 0 < |n|∞ ≤ `band` and for near-singular Dω. Always returns
    /// the measured constants; see [`resonance_audit`](Self::resonance_audit).
    pub fn resonance_scan(&self, band: usize, grid_n: usize, tau: f64) -> Result<ResonanceAudit> {
        if band == 0 {
            return Err(Error::Domain("audit band must be at least 1".into()));
        }
        if grid_n < 2 {
            return Err(Error::Domain("audit grid needs at least 2 points per axis".into()));
        }
        if !(tau >= self.dim as f64 - 1.0) {
            return Err(Error::Domain(format!(
                "tau = {tau} violates tau >= N - 1 = {}",
                self.dim - 1
            )));
        }
        let mut modes = half_lattice(self.dim, band);
        modes.sort_by(|x, y| norm2(x).total_cmp(&norm2(y)).then_with(|| x.cmp(y)));
        let weights: Vec<f64> = modes.iter().map(|n| norm2(n).powf(tau)).collect();

        let grid = self.domain.midpoint_grid(grid_n);
        let mut audit = ResonanceAudit {
            alpha_eff: f64::INFINITY,
            tau,
            lambda_eff: f64::INFINITY,
            k_audit: band,
            grid_points: grid.len(),
            worst_action: vec![],
            worst_mode: vec![],
            worst_degenerate_action: vec![],
        };
        for action in &grid {
            let w = self.hamiltonian.gradient(action);
            for (n, weight) in modes.iter().zip(&weights) {
                let value = dot(n, &w).abs() * weight;
                if value < audit.alpha_eff {
                    audit.alpha_eff = value;
                    audit.worst_action = action.clone();
                    audit.worst_mode = n.clone();
                }
            }
            let eig = SymmetricEigen::new(self.hamiltonian.hessian(action)).eigenvalues;
            let sigma = eig.iter().map(|e| e.abs()).fold(f64::INFINITY, f64::min);
            if sigma < audit.lambda_eff {
                audit.lambda_eff = sigma;
                audit.worst_degenerate_action = action.clone();
            }
        }
        Ok(audit)
    }

    /// [`resonance_scan`](Self::resonance_scan), failing on a resonance or degeneracy.
    pub fn resonance_audit(&self, band: usize, grid_n: usize, tau: f64) -> Result<ResonanceAudit> {
        self.resonance_scan(band, grid_n, tau)?.into_result()
    }

    /// Rebuilds the same system at another band.
    pub fn rebuilt(&self, band: usize) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.band = band;
        if let WeightSpec::Samples { .. } = spec.weight {
            let values: Vec<f64> = self
                .weight_m
                .resized(band)
                .to_grid(2 * band + 1)?
                .iter()
                .map(|z| z.re)
                .collect();
            spec.weight = WeightSpec::Samples { values };
        }
        build_model(&spec)
    }
}

/// I₁²/2 + c·I₁I₂ + I₂²/2.
pub fn coupled_quadratic(c: f64) -> Polynomial {
    Polynomial::new(vec![
        Monomial { coeff: 0.5, powers: vec![2, 0] },
        Monomial { coeff: c, powers: vec![1, 1] },
        Monomial { coeff: 0.5, powers: vec![0, 2] },
    ])
}

//! Multivariate real polynomials in the action variables, and real
//! trigonometric polynomials in the angles.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{dot, half_lattice, shell, TorusSeries};
use crate::stats::stream_rng;
use num_complex::Complex64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

/// Σ coeff · Π I_k^{p_k}.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

fn ipow(x: f64, p: u32) -> f64 {
    x.powi(p as i32)
}

impl Polynomial {
    pub fn new(terms: Vec<Monomial>) -> Self {
        Self { terms }
    }

    /// |I|² / 2 in `dim` variables.
    pub fn half_square_norm(dim: usize) -> Self {
        Self::new(
            (0..dim)
                .map(|k| {
                    let mut powers = vec![0; dim];
                    powers[k] = 2;
                    Monomial { coeff: 0.5, powers }
                })
                .collect(),
        )
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        for t in &self.terms {
            if t.powers.len() != dim {
                return Err(Error::Dimension { expected: dim, found: t.powers.len() });
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coeff == 0.0)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coeff * t.powers.iter().zip(x).map(|(&p, &v)| ipow(v, p)).product::<f64>())
            .sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for t in &self.terms {
            for (j, gj) in g.iter_mut().enumerate() {
                let pj = t.powers[j];
                if pj == 0 {
                    continue;
                }
                let mut prod = t.coeff * pj as f64 * ipow(x[j], pj - 1);
                for (k, (&p, &v)) in t.powers.iter().zip(x).enumerate() {
                    if k != j {
                        prod *= ipow(v, p);
                    }
                }
                *gj += prod;
            }
        }
        g
    }

    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let mut h = DMatrix::zeros(n, n);
        for t in &self.terms {
            for i in 0..n {
                for j in 0..n {
                    let mut powers = t.powers.clone();
                    let mut c = t.coeff;
                    for axis in [i, j] {
                        if powers[axis] == 0 {
                            c = 0.0;
                            break;
                        }
                        c *= powers[axis] as f64;
                        powers[axis] -= 1;
                    }
                    if c == 0.0 {
                        continue;
                    }
                    h[(i, j)] += c * powers.iter().zip(x).map(|(&p, &v)| ipow(v, p)).product::<f64>();
                }
            }
        }
        h
    }

    /// True when no monomial couples two variables, so ∂H/∂I_k depends on I_k alone.
    pub fn is_separable(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.coeff == 0.0 || t.powers.iter().filter(|&&p| p > 0).count() <= 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub n: Vec<i64>,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

/// mean + Σ (cos · cos(n·θ) + sin · sin(n·θ)).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigPolynomial {
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

impl TrigPolynomial {
    pub fn constant(mean: f64) -> Self {
        Self { mean, terms: vec![] }
    }

    pub fn with_cos(mut self, n: &[i64], amplitude: f64) -> Self {
        self.terms.push(TrigTerm { n: n.to_vec(), cos: amplitude, sin: 0.0 });
        self
    }

    pub fn with_sin(mut self, n: &[i64], amplitude: f64) -> Self {
        self.terms.push(TrigTerm { n: n.to_vec(), cos: 0.0, sin: amplitude });
        self
    }

    /// Zero-mean random polynomial on 0 < |n|∞ ≤ band with Gaussian amplitudes
    /// scaled by (1+|n|)^{-decay}.
    pub fn random(dim: usize, band: usize, seed: u64, decay: f64) -> Self {
        let mut rng = stream_rng(seed, 0);
        let terms = half_lattice(dim, band)
            .into_iter()
            .map(|n| {
                let scale = (1.0 + crate::fourier::norm2(&n)).powf(-decay);
                let c: f64 = rng.sample(StandardNormal);
                let s: f64 = rng.sample(StandardNormal);
                TrigTerm { n, cos: scale * c, sin: scale * s }
            })
            .collect();
        Self { mean: 0.0, terms }
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        for t in &self.terms {
            if t.n.len() != dim {
                return Err(Error::Dimension { expected: dim, found: t.n.len() });
            }
        }
        Ok(())
    }

    pub fn band(&self) -> usize {
        self.terms.iter().map(|t| shell(&t.n)).max().unwrap_or(0)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| (t.cos == 0.0 && t.sin == 0.0) || t.n.iter().all(|&x| x == 0))
    }

    pub fn eval(&self, theta: &[f64]) -> f64 {
        self.mean
            + self
                .terms
                .iter()
                .map(|t| {
                    let (s, c) = dot(&t.n, theta).sin_cos();
                    t.cos * c + t.sin * s
                })
                .sum::<f64>()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        for t in &self.terms {
            let (s, c) = dot(&t.n, theta).sin_cos();
            let d = -t.cos * s + t.sin * c;
            for (gk, &nk) in g.iter_mut().zip(&t.n) {
                *gk += d * nk as f64;
            }
        }
        g
    }

    /// Exact Fourier coefficients; requires `band` ≥ [`band`](Self::band).
    pub fn to_series(&self, dim: usize, band: usize) -> Result<TorusSeries> {
        self.check_dim(dim)?;
        let mut modes: Vec<(Vec<i64>, Complex64)> = vec![(vec![0; dim], Complex64::new(self.mean, 0.0))];
        for t in &self.terms {
            let neg: Vec<i64> = t.n.iter().map(|x| -x).collect();
            modes.push((t.n.clone(), Complex64::new(0.5 * t.cos, -0.5 * t.sin)));
            modes.push((neg, Complex64::new(0.5 * t.cos, 0.5 * t.sin)));
        }
        TorusSeries::from_modes(dim, band, modes.iter().map(|(n, c)| (n.as_slice(), *c)))
    }
}

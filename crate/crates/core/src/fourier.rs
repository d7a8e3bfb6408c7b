//! Truncated Fourier series on the torus T^N.
//!
//! A [`TorusSeries`] stores every coefficient ĉ_n with |n|∞ ≤ K in a dense
//! array, lexicographic in n with the last axis fastest. Real functions are
//! represented with Hermitian symmetry ĉ_{-n} = conj(ĉ_n).

use std::f64::consts::TAU;
use std::io::Write;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};

/// Moduli at or below this fraction of the largest shell representative are
/// treated as numerical zeros by [`TorusSeries::decay_audit`].
pub const DECAY_FLOOR_REL: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq)]
pub struct TorusSeries {
    dim: usize,
    band: usize,
    coeffs: Vec<Complex64>,
}

/// Least-squares fit of log|ĉ| against log(1 + s) over shell representatives.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    pub shells_used: usize,
}

impl TorusSeries {
    pub fn zeros(dim: usize, band: usize) -> Self {
        assert!(dim > 0, "torus dimension must be positive");
        let width = 2 * band + 1;
        Self {
            dim,
            band,
            coeffs: vec![Complex64::new(0.0, 0.0); width.pow(dim as u32)],
        }
    }

    pub fn constant(dim: usize, band: usize, value: f64) -> Self {
        let mut s = Self::zeros(dim, band);
        let zero = s.offset(&vec![0; dim]);
        s.coeffs[zero] = Complex64::new(value, 0.0);
        s
    }

    /// Builds a series by evaluating `f` at every index vector of the band.
    pub fn from_fn(dim: usize, band: usize, mut f: impl FnMut(&[i64]) -> Complex64) -> Self {
        let mut s = Self::zeros(dim, band);
        let mut n = vec![0i64; dim];
        for flat in 0..s.coeffs.len() {
            s.index_into(flat, &mut n);
            s.coeffs[flat] = f(&n);
        }
        s
    }

    /// Builds a series from sparse (n, ĉ_n) pairs; indices outside the band are rejected.
    pub fn from_modes<'a>(
        dim: usize,
        band: usize,
        modes: impl IntoIterator<Item = (&'a [i64], Complex64)>,
    ) -> Result<Self> {
        let mut s = Self::zeros(dim, band);
        for (n, c) in modes {
            if n.len() != dim {
                return Err(Error::Dimension { expected: dim, found: n.len() });
            }
            if shell(n) > band {
                return Err(Error::Domain(format!("mode {n:?} lies outside band {band}")));
            }
            let k = s.offset(n);
            s.coeffs[k] += c;
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn band(&self) -> usize {
        self.band
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    fn width(&self) -> usize {
        2 * self.band + 1
    }

    fn offset(&self, n: &[i64]) -> usize {
        let w = self.width() as i64;
        let k = self.band as i64;
        n.iter().fold(0i64, |acc, &nk| acc * w + nk + k) as usize
    }

    /// Writes the index vector of the flat position `flat` into `n`.
    pub fn index_into(&self, mut flat: usize, n: &mut [i64]) {
        let w = self.width();
        for nk in n.iter_mut().rev() {
            *nk = (flat % w) as i64 - self.band as i64;
            flat /= w;
        }
    }

    pub fn index(&self, flat: usize) -> Vec<i64> {
        let mut n = vec![0; self.dim];
        self.index_into(flat, &mut n);
        n
    }

    /// ĉ_n, or zero outside the band.
    pub fn coeff(&self, n: &[i64]) -> Complex64 {
        assert_eq!(n.len(), self.dim);
        if shell(n) > self.band {
            Complex64::new(0.0, 0.0)
        } else {
            self.coeffs[self.offset(n)]
        }
    }

    pub fn mean(&self) -> Complex64 {
        self.coeff(&vec![0; self.dim])
    }

    pub fn abs_sum(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).sum()
    }

    /// Returns a series of the same shape with ĉ_n replaced by `f(n, ĉ_n)`.
    pub fn map_modes(&self, mut f: impl FnMut(&[i64], Complex64) -> Complex64) -> Self {
        let mut out = self.clone();
        let mut n = vec![0i64; self.dim];
        for flat in 0..self.coeffs.len() {
            self.index_into(flat, &mut n);
            out.coeffs[flat] = f(&n, self.coeffs[flat]);
        }
        out
    }

    /// Copies the coefficients into a series of band `band`, truncating or zero-padding.
    pub fn resized(&self, band: usize) -> Self {
        Self::from_fn(self.dim, band, |n| self.coeff(n))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
            ..self.clone()
        }
    }

    /// Coefficient-wise difference; the result has the larger band.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::Dimension { expected: self.dim, found: other.dim });
        }
        let band = self.band.max(other.band);
        Ok(Self::from_fn(self.dim, band, |n| self.coeff(n) - other.coeff(n)))
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        let mut n = vec![0i64; self.dim];
        (0..self.coeffs.len()).all(|flat| {
            self.index_into(flat, &mut n);
            let neg: Vec<i64> = n.iter().map(|x| -x).collect();
            (self.coeffs[flat] - self.coeffs[self.offset(&neg)].conj()).norm() <= tol
        })
    }

    /// Projects onto the Hermitian subspace: ĉ_n ← (ĉ_n + conj ĉ_{-n}) / 2.
    pub fn symmetrized(&self) -> Self {
        let mut neg = vec![0i64; self.dim];
        self.map_modes(|n, c| {
            for (m, x) in neg.iter_mut().zip(n) {
                *m = -x;
            }
            0.5 * (c + self.coeffs[self.offset(&neg)].conj())
        })
    }

    fn check_point(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, found: theta.len() });
        }
        Ok(())
    }

    /// e^{i j θ_k} for j = -K..=K on every axis.
    fn phase_tables(&self, theta: &[f64]) -> Vec<Vec<Complex64>> {
        let k = self.band;
        theta
            .iter()
            .map(|&t| {
                let base = Complex64::cis(t.rem_euclid(TAU));
                let mut row = vec![Complex64::new(0.0, 0.0); 2 * k + 1];
                row[k] = Complex64::new(1.0, 0.0);
                for j in 1..=k {
                    row[k + j] = row[k + j - 1] * base;
                    row[k - j] = row[k + j].conj();
                }
                row
            })
            .collect()
    }

    /// Σ_n ĉ_n e^{i n·θ}.
    pub fn eval(&self, theta: &[f64]) -> Result<Complex64> {
        self.check_point(theta)?;
        let tables = self.phase_tables(theta);
        let refs: Vec<&[Complex64]> = tables.iter().map(|t| t.as_slice()).collect();
        Ok(contract(&self.coeffs, &refs))
    }

    /// Real part of [`eval`](Self::eval), for Hermitian series.
    pub fn eval_re(&self, theta: &[f64]) -> Result<f64> {
        self.eval(theta).map(|z| z.re)
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<Complex64>> {
        self.eval_with_gradient(theta).map(|(_, g)| g)
    }

    /// Value and θ-gradient in one pass over the coefficients.
    pub fn eval_with_gradient(&self, theta: &[f64]) -> Result<(Complex64, Vec<Complex64>)> {
        self.check_point(theta)?;
        let tables = self.phase_tables(theta);
        let k = self.band as i64;
        let derived: Vec<Vec<Complex64>> = tables
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, e)| Complex64::new(0.0, (j as i64 - k) as f64) * e)
                    .collect()
            })
            .collect();
        let mut refs: Vec<&[Complex64]> = tables.iter().map(|t| t.as_slice()).collect();
        let value = contract(&self.coeffs, &refs);
        let mut grad = Vec::with_capacity(self.dim);
        for axis in 0..self.dim {
            refs[axis] = &derived[axis];
            grad.push(contract(&self.coeffs, &refs));
            refs[axis] = &tables[axis];
        }
        Ok((value, grad))
    }

    /// Re Σ ĉ_n e^{in·θ} for a Hermitian series, summing only the rows n₁ ≥ 0.
    fn real_contract(&self, tables: &[&[Complex64]]) -> f64 {
        let k = self.band;
        let stride = self.coeffs.len() / self.width();
        let (first, rest) = tables.split_first().expect("dim > 0");
        let mut acc = 0.0;
        for j in k..self.width() {
            let inner = contract(&self.coeffs[j * stride..(j + 1) * stride], rest);
            let term = (first[j] * inner).re;
            acc += if j == k { term } else { 2.0 * term };
        }
        acc
    }

    /// Value of a Hermitian series; about half the cost of [`eval`](Self::eval).
    pub fn eval_real(&self, theta: &[f64]) -> Result<f64> {
        self.check_point(theta)?;
        let tables = self.phase_tables(theta);
        let refs: Vec<&[Complex64]> = tables.iter().map(|t| t.as_slice()).collect();
        Ok(self.real_contract(&refs))
    }

    /// Value and gradient of a Hermitian series, gradient written into `grad`.
    pub fn eval_real_with_gradient(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check_point(theta)?;
        let tables = self.phase_tables(theta);
        let k = self.band as i64;
        let derived: Vec<Vec<Complex64>> = tables
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, e)| Complex64::new(0.0, (j as i64 - k) as f64) * e)
                    .collect()
            })
            .collect();
        let mut refs: Vec<&[Complex64]> = tables.iter().map(|t| t.as_slice()).collect();
        let value = self.real_contract(&refs);
        for (axis, g) in grad.iter_mut().enumerate().take(self.dim) {
            refs[axis] = &derived[axis];
            *g = self.real_contract(&refs);
            refs[axis] = &tables[axis];
        }
        Ok(value)
    }

    /// Band-limited interpolant of real samples on the (2K+1)^N grid θ_j = 2πj/(2K+1).
    pub fn from_grid(dim: usize, band: usize, samples: &[f64]) -> Result<Self> {
        let data: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        Ok(Self::from_complex_grid(dim, band, &data)?.symmetrized())
    }

    /// As [`from_grid`](Self::from_grid) for complex samples; no symmetry is imposed.
    pub fn from_complex_grid(dim: usize, band: usize, samples: &[Complex64]) -> Result<Self> {
        let m = 2 * band + 1;
        let expected = m.pow(dim as u32);
        if samples.len() != expected {
            return Err(Error::Shape { expected, found: samples.len() });
        }
        let mut data = samples.to_vec();
        fft_nd(&mut data, dim, m, FftDirection::Forward);
        let scale = 1.0 / expected as f64;
        let mut out = Self::zeros(dim, band);
        let mut n = vec![0i64; dim];
        for flat in 0..out.coeffs.len() {
            out.index_into(flat, &mut n);
            out.coeffs[flat] = data[grid_offset(&n, m)] * scale;
        }
        Ok(out)
    }

    /// Values on the uniform grid with `m` points per axis (m ≥ 2K+1), by inverse FFT.
    pub fn to_grid(&self, m: usize) -> Result<Vec<Complex64>> {
        if m < self.width() {
            return Err(Error::Shape { expected: self.width(), found: m });
        }
        let mut data = vec![Complex64::new(0.0, 0.0); m.pow(self.dim as u32)];
        let mut n = vec![0i64; self.dim];
        for (flat, c) in self.coeffs.iter().enumerate() {
            self.index_into(flat, &mut n);
            data[grid_offset(&n, m)] = *c;
        }
        fft_nd(&mut data, self.dim, m, FftDirection::Inverse);
        Ok(data)
    }

    /// Values on the grid of a band `refinement·K` series, i.e. 2·refinement·K + 1 points per axis.
    pub fn to_refined_grid(&self, refinement: usize) -> Result<Vec<Complex64>> {
        self.to_grid(2 * refinement.max(1) * self.band.max(1) + 1)
    }

    /// Fits |ĉ_n| ~ (1+s)^slope using the largest modulus on each shell s = |n|∞ ≥ 1.
    pub fn decay_audit(&self) -> Result<DecayFit> {
        let mut reps = vec![0.0f64; self.band + 1];
        let mut n = vec![0i64; self.dim];
        for (flat, c) in self.coeffs.iter().enumerate() {
            self.index_into(flat, &mut n);
            let s = shell(&n);
            reps[s] = reps[s].max(c.norm());
        }
        let top = reps[1..].iter().cloned().fold(0.0, f64::max);
        let pts: Vec<(f64, f64)> = reps
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &r)| r > 0.0 && r > DECAY_FLOOR_REL * top)
            .map(|(s, &r)| ((1.0 + s as f64).ln(), r.ln()))
            .collect();
        if pts.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "{} nonzero shells, need at least 2",
                pts.len()
            )));
        }
        let (slope, intercept, residual) = crate::stats::least_squares(&pts);
        Ok(DecayFit { slope, intercept, residual, shells_used: pts.len() })
    }

    /// CSV with columns n_1..n_N, re, im.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (1..=self.dim).map(|k| format!("n_{k}")).collect();
        writeln!(w, "{},re,im", header.join(","))?;
        let mut n = vec![0i64; self.dim];
        for (flat, c) in self.coeffs.iter().enumerate() {
            self.index_into(flat, &mut n);
            let idx: Vec<String> = n.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{},{:e},{:e}", idx.join(","), c.re, c.im)?;
        }
        Ok(())
    }
}

/// Coefficients below this fraction of Σ|ĉ_n| are dropped by [`RealEvaluator::new`].
pub const SPARSE_DROP_REL: f64 = 1e-16;

/// Half-lattice mode count up to which [`RealEvaluator`] uses direct summation.
const SPARSE_MAX_MODES: usize = 48;

/// Evaluator for a real function stored as a Hermitian series. Few-mode
/// series are summed directly as c₀ + Σ 2 Re(ĉ_n e^{in·θ}) over a half
/// lattice; dense ones fall back to the tensor contraction.
#[derive(Clone, Debug)]
pub enum RealEvaluator {
    Sparse {
        dim: usize,
        mean: f64,
        modes: Vec<f64>,
        coeffs: Vec<Complex64>,
    },
    Dense(TorusSeries),
}

impl RealEvaluator {
    pub fn new(series: &TorusSeries) -> Self {
        let floor = SPARSE_DROP_REL * series.abs_sum();
        let mut modes = Vec::new();
        let mut coeffs = Vec::new();
        let mut n = vec![0i64; series.dim];
        for (flat, c) in series.coeffs.iter().enumerate() {
            series.index_into(flat, &mut n);
            let positive = n.iter().find(|&&x| x != 0).is_some_and(|&x| x > 0);
            if positive && c.norm() > floor {
                modes.extend(n.iter().map(|&x| x as f64));
                coeffs.push(2.0 * c);
            }
        }
        if coeffs.len() > SPARSE_MAX_MODES {
            return Self::Dense(series.clone());
        }
        Self::Sparse { dim: series.dim, mean: series.mean().re, modes, coeffs }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Sparse { dim, .. } => *dim,
            Self::Dense(s) => s.dim,
        }
    }

    pub fn eval(&self, theta: &[f64]) -> f64 {
        match self {
            Self::Sparse { dim, mean, modes, coeffs } => {
                let mut acc = *mean;
                for (n, c) in modes.chunks_exact(*dim).zip(coeffs) {
                    let phase: f64 = n.iter().zip(theta).map(|(a, b)| a * b).sum();
                    let (s, co) = phase.sin_cos();
                    acc += c.re * co - c.im * s;
                }
                acc
            }
            Self::Dense(s) => s.eval_real(theta).unwrap_or(f64::NAN),
        }
    }

    /// Value, with the gradient written into `grad`.
    pub fn eval_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            Self::Sparse { dim, mean, modes, coeffs } => {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let mut acc = *mean;
                for (n, c) in modes.chunks_exact(*dim).zip(coeffs) {
                    let phase: f64 = n.iter().zip(theta).map(|(a, b)| a * b).sum();
                    let (s, co) = phase.sin_cos();
                    acc += c.re * co - c.im * s;
                    let d = -c.re * s - c.im * co;
                    for (g, nk) in grad.iter_mut().zip(n) {
                        *g += d * nk;
                    }
                }
                acc
            }
            Self::Dense(s) => s.eval_real_with_gradient(theta, grad).unwrap_or(f64::NAN),
        }
    }
}

/// |n|∞.
pub fn shell(n: &[i64]) -> usize {
    n.iter().map(|x| x.unsigned_abs() as usize).max().unwrap_or(0)
}

/// Euclidean norm of an integer vector.
pub fn norm2(n: &[i64]) -> f64 {
    n.iter().map(|&x| (x * x) as f64).sum::<f64>().sqrt()
}

pub fn dot(n: &[i64], x: &[f64]) -> f64 {
    n.iter().zip(x).map(|(&a, b)| a as f64 * b).sum()
}

/// Every n ∈ Z^N with 0 < |n|∞ ≤ band whose first nonzero entry is positive,
/// ordered by Euclidean norm then lexicographically.
pub fn half_lattice(dim: usize, band: usize) -> Vec<Vec<i64>> {
    let probe = TorusSeries::zeros(dim, band);
    let mut out: Vec<Vec<i64>> = (0..probe.len())
        .map(|flat| probe.index(flat))
        .filter(|n| n.iter().find(|&&x| x != 0).is_some_and(|&x| x > 0))
        .collect();
    out.sort_by(|a, b| {
        let na: i64 = a.iter().map(|x| x * x).sum();
        let nb: i64 = b.iter().map(|x| x * x).sum();
        na.cmp(&nb).then_with(|| a.cmp(b))
    });
    out
}

/// Every n with |n|∞ ≤ band, lexicographic.
pub fn full_lattice(dim: usize, band: usize) -> Vec<Vec<i64>> {
    let probe = TorusSeries::zeros(dim, band);
    (0..probe.len()).map(|flat| probe.index(flat)).collect()
}

/// Point `flat` of the uniform grid with `m` points per axis (last axis fastest).
pub fn grid_point(mut flat: usize, m: usize, dim: usize) -> Vec<f64> {
    let mut theta = vec![0.0; dim];
    for t in theta.iter_mut().rev() {
        *t = TAU * (flat % m) as f64 / m as f64;
        flat /= m;
    }
    theta
}

pub fn grid_points(m: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..m.pow(dim as u32)).map(|j| grid_point(j, m, dim)).collect()
}

/// Distance on T^N between two lifts: componentwise difference reduced to
/// [-π, π), then Euclidean norm.
pub fn torus_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y + std::f64::consts::PI).rem_euclid(TAU) - std::f64::consts::PI;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn grid_offset(n: &[i64], m: usize) -> usize {
    n.iter()
        .fold(0usize, |acc, &nk| acc * m + nk.rem_euclid(m as i64) as usize)
}

fn contract(coeffs: &[Complex64], tables: &[&[Complex64]]) -> Complex64 {
    match tables {
        [] => coeffs[0],
        [last] => coeffs.iter().zip(last.iter()).map(|(c, e)| c * e).sum(),
        [first, rest @ ..] => {
            let stride = coeffs.len() / first.len();
            first
                .iter()
                .enumerate()
                .map(|(j, e)| e * contract(&coeffs[j * stride..(j + 1) * stride], rest))
                .sum()
        }
    }
}

/// Unnormalized N-dimensional DFT in place on an m^N row-major array.
fn fft_nd(data: &mut [Complex64], dim: usize, m: usize, direction: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft(m, direction);
    let mut line = vec![Complex64::new(0.0, 0.0); m];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for axis in 0..dim {
        let stride = m.pow((dim - 1 - axis) as u32);
        let block = stride * m;
        for outer in (0..data.len()).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                for (j, x) in line.iter_mut().enumerate() {
                    *x = data[base + j * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (j, x) in line.iter().enumerate() {
                    data[base + j * stride] = *x;
                }
            }
        }
    }
}

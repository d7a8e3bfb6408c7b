//! The cohomological equation ω(I)·∇_θ v = b on T^N, solved mode by mode.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{dot, TorusSeries, SPARSE_DROP_REL};
use crate::model::{SystemModel, RESONANCE_FLOOR};
use crate::stats::stream_rng;

/// Zero-mean solution v_I together with its action derivatives.
#[derive(Clone, Debug)]
pub struct CohomologySolution {
    pub action: Vec<f64>,
    pub omega: Vec<f64>,
    pub v: TorusSeries,
    /// ∂v/∂I_j for j = 1..N.
    pub d_action_v: Vec<TorusSeries>,
    pub residual_sup: f64,
    pub min_divisor: f64,
}

/// Result of [`uniqueness_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Uniqueness {
    pub unique: bool,
    /// A mode carrying a surviving homogeneous solution, if any.
    pub kernel_mode: Option<Vec<i64>>,
}

/// Smallest |n·ω| over the modes where `rhs` is active, with the mode attaining it.
fn smallest_divisor(omega: &[f64], rhs: &TorusSeries, floor: f64) -> (f64, Vec<i64>) {
    let mut n = vec![0i64; omega.len()];
    let mut best = (f64::INFINITY, vec![]);
    for (flat, c) in rhs.coeffs().iter().enumerate() {
        rhs.index_into(flat, &mut n);
        if c.norm() <= floor || n.iter().all(|&x| x == 0) {
            continue;
        }
        let d = dot(&n, omega).abs();
        if d < best.0 {
            best = (d, n.clone());
        }
    }
    best
}

/// Solves ω(I)·∇v = b for the model's own b, with residual measured on the 2×-refined grid.
pub fn solve_v(model: &SystemModel, action: &[f64]) -> Result<CohomologySolution> {
    let mut sol = solve_with(model, action, &model.b)?;
    sol.residual_sup = residual(&sol, model, 2)?;
    Ok(sol)
}

/// Solves ω(I)·∇v = rhs without computing the residual (`residual_sup` is NaN).
/// Coefficients of `rhs` below [`SPARSE_DROP_REL`]·Σ|ĉ| count as exact zeros,
/// so resonances on modes the right-hand side does not excite are harmless.
pub fn solve_with(model: &SystemModel, action: &[f64], rhs: &TorusSeries) -> Result<CohomologySolution> {
    if rhs.dim() != model.dim {
        return Err(Error::Dimension { expected: model.dim, found: rhs.dim() });
    }
    let omega = model.omega(action)?;
    let d_omega = model.d_omega(action)?;
    let floor = SPARSE_DROP_REL * rhs.abs_sum();
    let (min_divisor, worst) = smallest_divisor(&omega, rhs, floor);
    if min_divisor <= RESONANCE_FLOOR {
        let divisor = dot(&worst, &omega);
        return Err(Error::SmallDivisor { mode: worst, divisor });
    }
    let zero = Complex64::new(0.0, 0.0);
    let v = rhs.map_modes(|n, c| {
        if c.norm() <= floor || n.iter().all(|&x| x == 0) {
            return zero;
        }
        c / Complex64::new(0.0, dot(n, &omega))
    });
    // ∂v̂_n/∂I_j = i b̂_n (Dωᵀ n)_j / (n·ω)²
    let d_action_v = (0..model.dim)
        .map(|j| {
            rhs.map_modes(|n, c| {
                if c.norm() <= floor || n.iter().all(|&x| x == 0) {
                    return zero;
                }
                let d = dot(n, &omega);
                let dn: f64 = n.iter().enumerate().map(|(k, &nk)| d_omega[(k, j)] * nk as f64).sum();
                Complex64::new(0.0, dn / (d * d)) * c
            })
        })
        .collect();
    Ok(CohomologySolution {
        action: action.to_vec(),
        omega,
        v,
        d_action_v,
        residual_sup: f64::NAN,
        min_divisor,
    })
}

/// sup over the grid of band refinement·K of |ω·∇v − b|, with b the model's own defect.
pub fn residual(sol: &CohomologySolution, model: &SystemModel, refinement: usize) -> Result<f64> {
    let band = sol.v.band().max(model.b.band());
    let v = sol.v.resized(band);
    let b = model.b.resized(band);
    let omega = &sol.omega;
    let lhs = v.map_modes(|n, c| Complex64::new(0.0, dot(n, omega)) * c);
    let diff = lhs.sub(&b)?;
    let grid = diff.to_refined_grid(refinement.max(2))?;
    Ok(grid.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Projects `trials` random zero-mean series onto the kernel of ω(I)·∇ on the
/// model's band and reports whether anything survives.
pub fn uniqueness_check(model: &SystemModel, action: &[f64], trials: usize, seed: u64) -> Result<Uniqueness> {
    let omega = model.omega(action)?;
    for trial in 0..trials {
        let mut rng = stream_rng(seed, trial as u64);
        let w = TorusSeries::from_fn(model.dim, model.band, |n| {
            if n.iter().all(|&x| x == 0) {
                return Complex64::new(0.0, 0.0);
            }
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let projected = w.map_modes(|n, c| {
            if dot(n, &omega).abs() <= RESONANCE_FLOOR { c } else { Complex64::new(0.0, 0.0) }
        });
        let mut survivor = None;
        for flat in 0..projected.len() {
            if projected.coeffs()[flat].norm() > 0.0 {
                survivor = Some(projected.index(flat));
                break;
            }
        }
        if let Some(n) = survivor {
            return Ok(Uniqueness { unique: false, kernel_mode: Some(n) });
        }
    }
    Ok(Uniqueness { unique: true, kernel_mode: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};

    #[test]
    fn sys_a_closed_form() {
        let m = build_model(&ModelSpec::sys_a(16)).unwrap();
        let sol = solve_v(&m, &[1.5]).unwrap();
        let c = sol.v.coeff(&[1]);
        // (1/3) sin θ = (1/3)(e^{iθ} − e^{−iθ})/(2i)
        assert!((c - Complex64::new(0.0, -1.0 / 6.0)).norm() < 1e-14);
        assert!((sol.v.eval_re(&[std::f64::consts::FRAC_PI_2]).unwrap() - 1.0 / 3.0).abs() < 1e-13);
        assert!(sol.residual_sup < 1e-12);
        assert!(sol.v.mean().norm() <= 1e-14);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let m = build_model(&ModelSpec::unweighted(vec![1.0], vec![2.0], 6)).unwrap();
        let sol = solve_v(&m, &[1.3]).unwrap();
        assert_eq!(sol.v.abs_sum(), 0.0);
    }

    #[test]
    fn sys_b_closed_form_at_origin() {
        let m = build_model(&ModelSpec::sys_b(8)).unwrap();
        let sol = solve_v(&m, &[1.0, 1.618]).unwrap();
        let v0 = sol.v.eval_re(&[0.0, 0.0]).unwrap();
        assert!((v0 + 0.2 / 2.618).abs() < 1e-13);
    }

    #[test]
    fn perturbed_solution_residual() {
        let m = build_model(&ModelSpec::sys_a(8)).unwrap();
        let mut sol = solve_v(&m, &[1.5]).unwrap();
        let bump = TorusSeries::from_modes(1, 8, [(&[1i64][..], Complex64::new(1e-3, 0.0))]).unwrap();
        sol.v = TorusSeries::from_fn(1, 8, |n| sol.v.coeff(n) + bump.coeff(n));
        let r = residual(&sol, &m, 2).unwrap();
        assert!((r - 1.5e-3).abs() < 1e-12, "residual {r}");
    }

    #[test]
    fn action_derivative_matches_finite_differences() {
        let m = build_model(&ModelSpec::sys_b(8)).unwrap();
        let action = [1.1, 1.6];
        let sol = solve_v(&m, &action).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut up = action;
            let mut dn = action;
            up[j] += h;
            dn[j] -= h;
            let vu = solve_v(&m, &up).unwrap().v;
            let vd = solve_v(&m, &dn).unwrap().v;
            for flat in 0..vu.len() {
                let fd = (vu.coeffs()[flat] - vd.coeffs()[flat]) / (2.0 * h);
                assert!((fd - sol.d_action_v[j].coeffs()[flat]).norm() < 1e-7);
            }
        }
    }

    #[test]
    fn resonant_action_is_rejected_and_has_kernel() {
        let m = build_model(&ModelSpec::unweighted(vec![0.5, 0.5], vec![2.0, 2.0], 4)).unwrap();
        let rhs = TorusSeries::from_modes(2, 4, [(&[1i64, -1][..], Complex64::new(0.1, 0.0)), (&[-1i64, 1][..], Complex64::new(0.1, 0.0))]).unwrap();
        match solve_with(&m, &[1.0, 1.0], &rhs) {
            Err(Error::SmallDivisor { mode, .. }) => assert_eq!(mode[0], -mode[1]),
            other => panic!("expected small divisor, got {other:?}"),
        }
        assert_eq!(solve_v(&m, &[1.0, 1.0]).unwrap().v.abs_sum(), 0.0);
        let u = uniqueness_check(&m, &[1.0, 1.0], 3, 1).unwrap();
        assert!(!u.unique);
        let n = u.kernel_mode.unwrap();
        assert_eq!(n[0], -n[1]);
        assert!(uniqueness_check(&m, &[1.0, 1.618], 3, 1).unwrap().unique);
    }
}

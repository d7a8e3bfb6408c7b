//! Angular flow θ̇ = a(θ) ω(I) with I frozen: direct adaptive integration and
//! the closed-form conjugated path θ(t) = Ψ_I^{-1}(Ψ_I(θ₀) + ā ω(I) t).

use serde::{Deserialize, Serialize};

use crate::conjugacy::{Conjugacy, INVERSE_TOL};
use crate::error::{Error, Result};
use crate::fourier::{torus_distance, RealEvaluator};
use crate::model::SystemModel;

/// Accepted range of local error tolerances.
pub const TOL_RANGE: (f64, f64) = (1e-13, 1e-6);
const MAX_STEPS: usize = 10_000_000;

/// A point of phase space along a trajectory; the action never changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub action: Vec<f64>,
    pub theta: Vec<f64>,
    pub time: f64,
}

// Dormand–Prince 5(4) tableau; the system is autonomous so the nodes c_i are not needed.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand–Prince integration of the scalar autonomous ODE y' = f(y)
/// through the sorted checkpoints `times` (all of one sign, starting from 0).
/// The local error estimate, scaled by `scale`, is kept below tol·|h|.
fn dopri5_scalar(
    f: impl Fn(f64) -> f64,
    y0: f64,
    times: &[f64],
    tol: f64,
    scale: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(times.len());
    let (mut t, mut y) = (0.0f64, y0);
    let mut k = [0.0f64; 7];
    k[0] = f(y);
    let mut h = 0.0f64;
    let mut steps = 0usize;
    for &target in times {
        let dir = if target >= t { 1.0 } else { -1.0 };
        if h == 0.0 || h.signum() != dir {
            h = dir * (tol.powf(0.2) / (1.0 + k[0].abs() * scale)).min((target - t).abs().max(1e-3));
        }
        while (target - t) * dir > 0.0 {
            let last = (t + h - target) * dir >= 0.0;
            let step = if last { target - t } else { h };
            for s in 1..7 {
                let mut acc = y;
                for j in 0..s {
                    acc += step * A[s][j] * k[j];
                }
                k[s] = f(acc);
            }
            let y_new = y + step * (A[6][0] * k[0] + A[6][2] * k[2] + A[6][3] * k[3] + A[6][4] * k[4] + A[6][5] * k[5]);
            let err = (step * E.iter().zip(&k).map(|(e, kk)| e * kk).sum::<f64>()).abs() * scale;
            let allowed = tol * step.abs();
            let ratio = err / allowed;
            if ratio <= 1.0 {
                t = if last { target } else { t + step };
                y = y_new;
                k[0] = k[6];
            }
            let factor = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.25)).clamp(0.2, 5.0) };
            let proposed = step * factor;
            if ratio <= 1.0 && last {
                // keep the pre-clipping step for the next segment
                h = h.abs().max(proposed.abs()) * dir;
            } else {
                h = proposed;
            }
            if h.abs() < 1e-14 * (1.0 + t.abs()) {
                return Err(Error::Stiffness { time: t, step: h });
            }
            steps += 1;
            if steps > MAX_STEPS {
                return Err(Error::Stiffness { time: t, step: h });
            }
        }
        out.push(y);
    }
    Ok(out)
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol >= TOL_RANGE.0 && tol <= TOL_RANGE.1) {
        return Err(Error::Domain(format!(
            "integration tolerance {tol:e} outside [{:e}, {:e}]",
            TOL_RANGE.0, TOL_RANGE.1
        )));
    }
    Ok(())
}

/// Direct integration of θ̇ = a(θ) ω(I) to every time in `times`.
///
/// The orbit stays on the line θ₀ + ω σ, so the scalar σ̇ = a(θ₀ + ω σ) is
/// integrated instead; errors are measured in θ (scaled by |ω|). Times must be
/// sorted by absolute value and share one sign; the returned angles are lifts.
pub fn integrate_direct_grid(
    model: &SystemModel,
    action: &[f64],
    theta0: &[f64],
    times: &[f64],
    tol: f64,
) -> Result<Vec<Vec<f64>>> {
    check_tol(tol)?;
    if theta0.len() != model.dim {
        return Err(Error::Dimension { expected: model.dim, found: theta0.len() });
    }
    let omega = model.omega(action)?;
    let omega_norm = omega.iter().map(|w| w * w).sum::<f64>().sqrt();
    let a = RealEvaluator::new(&model.a);
    let rhs = |sigma: f64| {
        let p: Vec<f64> = theta0.iter().zip(&omega).map(|(t, w)| t + w * sigma).collect();
        a.eval(&p)
    };
    let sigmas = dopri5_scalar(rhs, 0.0, times, tol, omega_norm.max(1e-300))?;
    Ok(sigmas
        .into_iter()
        .map(|s| theta0.iter().zip(&omega).map(|(t, w)| t + w * s).collect())
        .collect())
}

/// θ(t_end) by direct integration; negative times run the flow backwards.
pub fn integrate_direct(
    model: &SystemModel,
    action: &[f64],
    theta0: &[f64],
    t_end: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    Ok(integrate_direct_grid(model, action, theta0, &[t_end], tol)?.remove(0))
}

/// Ψ_I^{-1}(Ψ_I(θ₀) + ā ω(I) t) as a lift.
pub fn flow_conjugated(conj: &Conjugacy, theta0: &[f64], t: f64) -> Result<Vec<f64>> {
    if t == 0.0 {
        return Ok(theta0.to_vec());
    }
    let mut phi = conj.psi_lift(theta0);
    for (p, w) in phi.iter_mut().zip(&conj.omega) {
        *p += conj.a_bar * w * t;
    }
    conj.psi_inverse(&phi, INVERSE_TOL)
}

/// One row of a trajectory comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub direct: Vec<f64>,
    pub conjugated: Vec<f64>,
    pub defect: f64,
}

/// Both evaluators on a nonnegative, increasing time grid.
pub fn trajectory(
    model: &SystemModel,
    conj: &Conjugacy,
    theta0: &[f64],
    t_grid: &[f64],
    tol: f64,
) -> Result<Vec<TrajectoryPoint>> {
    if t_grid.iter().any(|t| *t < 0.0) || t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("time grid must be nonnegative and increasing".into()));
    }
    let direct = integrate_direct_grid(model, &conj.action, theta0, t_grid, tol)?;
    t_grid
        .iter()
        .zip(direct)
        .map(|(&t, d)| {
            let c = flow_conjugated(conj, theta0, t)?;
            let defect = torus_distance(&d, &c);
            Ok(TrajectoryPoint { t, direct: d, conjugated: c, defect })
        })
        .collect()
}

/// max over `t_grid` of the torus distance between the two evaluators.
pub fn linearity_defect(
    model: &SystemModel,
    conj: &Conjugacy,
    theta0: &[f64],
    t_grid: &[f64],
    tol: f64,
) -> Result<f64> {
    Ok(trajectory(model, conj, theta0, t_grid, tol)?
        .iter()
        .map(|p| p.defect)
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};
    use std::f64::consts::PI;

    #[test]
    fn constant_speed_when_unweighted() {
        let m = build_model(&ModelSpec::unweighted(vec![1.0], vec![2.0], 4)).unwrap();
        let th = integrate_direct(&m, &[1.5], &[0.0], 2.0, 1e-10).unwrap();
        assert!((th[0] - 3.0).abs() < 1e-12);
        let c = Conjugacy::new(&m, &[1.5]).unwrap();
        assert!(linearity_defect(&m, &c, &[0.3], &[0.0, 1.0, 50.0], 1e-10).unwrap() <= 1e-12);
    }

    #[test]
    fn sys_a_cross_oracle_and_reversal() {
        let m = build_model(&ModelSpec::sys_a(24)).unwrap();
        let c = Conjugacy::new(&m, &[1.5]).unwrap();
        let tol = 1e-10;
        let direct = integrate_direct(&m, &[1.5], &[0.0], 10.0, tol).unwrap();
        let conj = flow_conjugated(&c, &[0.0], 10.0).unwrap();
        assert!(torus_distance(&direct, &conj) <= 10.0 * tol);
        let back = integrate_direct(&m, &[1.5], &direct, -10.0, tol).unwrap();
        assert!(back[0].abs() <= 10.0 * tol);
        let grid: Vec<f64> = (0..=20).map(|k| 5.0 * k as f64).collect();
        assert!(linearity_defect(&m, &c, &[1.0], &grid, tol).unwrap() <= 1e-7);
    }

    #[test]
    fn conjugated_path_from_fixed_point() {
        let m = build_model(&ModelSpec::sys_a(24)).unwrap();
        let c = Conjugacy::new(&m, &[1.5]).unwrap();
        let t = 3.7;
        let th = flow_conjugated(&c, &[PI], t).unwrap();
        assert!((c.psi_lift(&th)[0] - (PI + 1.5 * t)).abs() < 1e-11);
        assert_eq!(flow_conjugated(&c, &[PI], 0.0).unwrap(), vec![PI]);
    }

    #[test]
    fn divergence_is_nonzero_for_sys_a() {
        let m = build_model(&ModelSpec::sys_a(24)).unwrap();
        let g = m.a.gradient(&[PI / 2.0]).unwrap()[0].re;
        assert!((1.5 * g).abs() > 0.1);
    }

    #[test]
    fn tolerance_range_is_enforced() {
        let m = build_model(&ModelSpec::sys_a(4)).unwrap();
        assert!(matches!(integrate_direct(&m, &[1.5], &[0.0], 1.0, 1e-3), Err(Error::Domain(_))));
    }
}

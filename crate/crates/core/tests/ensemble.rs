use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use torus_ensemble::ensemble::{
    grad_phi_n, invariance_audit, v_field, ActionProfile, AngleSampling, Ensemble, EnsembleSpec, Observable,
};
use torus_ensemble::model::{build_model, ModelSpec, SystemModel};
use torus_ensemble::poly::{Monomial, Polynomial, TrigPolynomial};
use torus_ensemble::stats::{ks_test, stream_rng};

fn sys_a() -> SystemModel {
    build_model(&ModelSpec::sys_a(24)).unwrap()
}

fn uniform_spec(observable: Observable) -> EnsembleSpec {
    EnsembleSpec { profile: ActionProfile::Uniform, ..EnsembleSpec::new(observable) }
}

fn tilted(dim: usize) -> TrigPolynomial {
    let mut n = vec![0; dim];
    n[0] = 1;
    TrigPolynomial::constant(1.0).with_cos(&n, 0.3).with_sin(&n, -0.2)
}

#[test]
fn marginal_of_uniform_densities() {
    let m = build_model(&ModelSpec::unweighted(vec![1.0, 1.0], vec![2.0, 3.0], 4)).unwrap();
    let ens = Ensemble::new(&m, uniform_spec(Observable::cos_first(2))).unwrap();
    for action in [[1.1, 1.2], [1.9, 2.8]] {
        let (w, w1) = ens.marginal_w(&action).unwrap();
        assert!((w - 0.5).abs() < 1e-12);
        assert_eq!(w1, 0.0);
    }
    let a = sys_a();
    let ens = Ensemble::new(&a, EnsembleSpec::new(Observable::cos_first(1))).unwrap();
    for x in [1.2, 1.5, 1.7] {
        let (w, w1) = ens.marginal_w(&[x]).unwrap();
        let g = ens.density.g(&[x]) / ens.density.g_mass;
        assert!((w - g).abs() < 1e-12, "{w} vs {g}");
        let dg = ens.density.grad_g(&[x])[0].abs() / ens.density.g_mass;
        assert!((w1 - dg).abs() < 1e-12);
    }
}

#[test]
fn densities_are_normalized() {
    let a = sys_a();
    let spec = EnsembleSpec { angle_density: tilted(1), ..EnsembleSpec::new(Observable::cos_first(1)) };
    assert!((Ensemble::new(&a, spec).unwrap().normalization().unwrap() - 1.0).abs() <= 1e-6);
    let b = build_model(&ModelSpec::sys_b(8)).unwrap();
    let spec = EnsembleSpec { angle_density: tilted(2), ..EnsembleSpec::new(Observable::cos_first(2)) };
    assert!((Ensemble::new(&b, spec).unwrap().normalization().unwrap() - 1.0).abs() <= 1e-6);
}

#[test]
fn negative_angle_density_is_rejected() {
    let a = sys_a();
    let spec = EnsembleSpec {
        angle_density: TrigPolynomial::constant(1.0).with_cos(&[1], 2.0),
        ..EnsembleSpec::new(Observable::cos_first(1))
    };
    assert!(Ensemble::new(&a, spec).is_err());
}

#[test]
fn samples_are_uniform_when_unweighted() {
    let m = build_model(&ModelSpec::unweighted(vec![1.0], vec![2.0], 4)).unwrap();
    let ens = Ensemble::new(&m, uniform_spec(Observable::cos_first(1))).unwrap();
    let draws = ens.sample_initial(100_000, 3).unwrap();
    let actions: Vec<f64> = draws.iter().map(|d| d.0[0]).collect();
    let angles: Vec<f64> = draws.iter().map(|d| d.1[0]).collect();
    assert!(ks_test(&actions, |x| (x - 1.0).clamp(0.0, 1.0)).1 > 0.01);
    assert!(ks_test(&angles, |x| (x / TAU).clamp(0.0, 1.0)).1 > 0.01);
}

#[test]
fn sys_a_angle_marginal_follows_rho() {
    let a = sys_a();
    let ens = Ensemble::new(&a, uniform_spec(Observable::cos_first(1))).unwrap();
    let draws = ens.sample_initial(100_000, 6).unwrap();
    let angles: Vec<f64> = draws.iter().map(|d| d.1[0]).collect();
    let (_, p) = ks_test(&angles, |x| (x + 0.5 * x.sin()) / TAU);
    assert!(p > 0.01, "p = {p}");
    let actions: Vec<f64> = draws.iter().map(|d| d.0[0]).collect();
    assert!(ks_test(&actions, |x| (x - 1.0).clamp(0.0, 1.0)).1 > 0.01);
}

#[test]
fn sampling_is_reproducible_and_empty_at_zero() {
    let a = sys_a();
    let ens = Ensemble::new(&a, EnsembleSpec::new(Observable::cos_first(1))).unwrap();
    assert!(ens.sample_initial(0, 1).unwrap().is_empty());
    assert_eq!(ens.sample_initial(500, 9).unwrap(), ens.sample_initial(500, 9).unwrap());
    assert_ne!(ens.sample_initial(500, 9).unwrap(), ens.sample_initial(500, 10).unwrap());
}

#[test]
fn equilibrium_values() {
    let a = sys_a();
    let cos = Ensemble::new(&a, EnsembleSpec::new(Observable::cos_first(1))).unwrap().expect_eq().unwrap();
    assert!((cos.value() - 0.25).abs() < 1e-10);
    assert!(cos.discrepancy() <= 1e-8);
    let sin = Observable::angular(TrigPolynomial::default().with_sin(&[1], 1.0));
    let sin = Ensemble::new(&a, EnsembleSpec::new(sin)).unwrap().expect_eq().unwrap();
    assert!(sin.value().abs() < 1e-12);
    let c = Observable::angular(TrigPolynomial::constant(2.5));
    let c = Ensemble::new(&a, EnsembleSpec::new(c)).unwrap().expect_eq().unwrap();
    assert!((c.value() - 2.5).abs() < 1e-10 && c.discrepancy() <= 1e-8);
}

#[test]
fn estimators_agree_at_time_zero() {
    let a = sys_a();
    let spec = EnsembleSpec { angle_density: tilted(1), mode_band: 20, theta_grid: 256, ..EnsembleSpec::new(Observable::cos_first(1)) };
    let ens = Ensemble::new(&a, spec).unwrap();
    let table = ens.mode_table().unwrap();
    let e = ens.expect_t(&table, 0.0, 50_000).unwrap();
    let direct = ens.expect_direct(0.0).unwrap();
    assert!((e.quad - direct).abs() <= 1e-9);
    let mc = e.mc.unwrap();
    assert!((mc.mean - direct).abs() <= 3.0 * mc.stderr);
}

#[test]
fn action_only_observable_is_constant_in_time() {
    let a = sys_a();
    let g = Observable { angle: TrigPolynomial::default(), action: Polynomial::new(vec![Monomial { coeff: 1.0, powers: vec![1] }]) };
    let ens = Ensemble::new(&a, EnsembleSpec { angle_density: tilted(1), ..EnsembleSpec::new(g) }).unwrap();
    let table = ens.mode_table().unwrap();
    let eq = ens.expect_eq().unwrap().value();
    assert!((eq - 1.5).abs() < 1e-10);
    let at_rest = ens.expect_t(&table, 0.0, 0).unwrap().quad;
    assert!((at_rest - eq).abs() <= 1e-8);
    for t in [3.0, 400.0] {
        assert!((ens.expect_t(&table, t, 0).unwrap().quad - at_rest).abs() < 1e-14);
    }
    let mc = ens.expect_mc(&[0.0, 5.0, 90.0], 2_000, 1).unwrap();
    assert!(mc.iter().all(|m| m.mean == mc[0].mean));
}

#[test]
fn monte_carlo_and_mode_sum_agree() {
    let a = sys_a();
    let spec = EnsembleSpec { angle_density: tilted(1), ..EnsembleSpec::new(Observable::cos_first(1)) };
    let ens = Ensemble::new(&a, spec).unwrap();
    let table = ens.mode_table().unwrap();
    let mut rng = stream_rng(21, 0);
    let times: Vec<f64> = (0..10).map(|_| 20.0 * rng.random::<f64>()).collect();
    let mc = ens.expect_mc(&times, 40_000, 2).unwrap();
    for (t, m) in times.iter().zip(&mc) {
        let quad = table.total(*t).unwrap().re;
        let se = (m.stderr.powi(2) + table.error_estimate().powi(2)).sqrt();
        assert!((m.mean - quad).abs() <= 3.0 * se, "t = {t}: {} vs {quad} ({se})", m.mean);
    }
}

#[test]
fn fourier_moments_are_dominated_by_marginal() {
    let b = build_model(&ModelSpec::sys_b(8)).unwrap();
    let spec = EnsembleSpec { angle_density: tilted(2), theta_grid: 32, ..EnsembleSpec::new(Observable::cos_first(2)) };
    let ens = Ensemble::new(&b, spec).unwrap();
    let mut rng = stream_rng(8, 0);
    for _ in 0..10 {
        let action = b.domain.from_unit(&[rng.random(), rng.random()]);
        let (w, _) = ens.marginal_w(&action).unwrap();
        for n0 in -4..=4i64 {
            for n1 in -4..=4i64 {
                assert!(ens.m_n(&[n0, n1], &action).unwrap().norm() <= w + 1e-9);
            }
        }
    }
}

#[test]
fn mode_integral_at_rest_is_amplitude_mass() {
    let a = sys_a();
    let spec = EnsembleSpec { angle_density: tilted(1), profile: ActionProfile::Cap { edge: 0.5 }, ..EnsembleSpec::new(Observable::cos_first(1)) };
    let ens = Ensemble::new(&a, spec).unwrap();
    let table = ens.mode_table().unwrap();
    for n in [1i64, -2, 3] {
        let steps = 400;
        let h = 1.0 / steps as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..=steps {
            let w = if k == 0 || k == steps { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += ens.a_n(&[n], &[1.0 + k as f64 * h]).unwrap() * w;
        }
        acc *= h / 3.0;
        let integral = table.mode_integral(&[n], 0.0).unwrap();
        assert!((integral - acc).norm() <= 1e-9, "n = {n}: {integral} vs {acc}");
    }
}

#[test]
fn absent_modes_integrate_to_zero() {
    let m = build_model(&ModelSpec::unweighted(vec![1.0], vec![2.0], 4)).unwrap();
    let spec = EnsembleSpec { angle_density: tilted(1), ..EnsembleSpec::new(Observable::cos_first(1)) };
    let ens = Ensemble::new(&m, spec).unwrap();
    let table = ens.mode_table().unwrap();
    for t in [0.0, 2.0, 50.0] {
        assert!(table.mode_integral(&[2], t).unwrap().norm() < 1e-15);
        assert!(table.mode_integral(&[-3], t).unwrap().norm() < 1e-15);
    }
    assert!(table.mode_integral(&[1], 0.0).unwrap().norm() > 0.01);
}

#[test]
fn first_mode_of_sys_a_decays_like_one_over_t() {
    let a = sys_a();
    let spec = EnsembleSpec { profile: ActionProfile::Uniform, angle_density: tilted(1), ..EnsembleSpec::new(Observable::cos_first(1)) };
    let ens = Ensemble::new(&a, spec).unwrap();
    let table = ens.mode_table().unwrap();
    let at_10 = 10.0 * table.mode_integral(&[1], 10.0).unwrap().norm();
    let mut sup = 0.0f64;
    for k in 0..=400 {
        let t = 10.0 * 100f64.powf(k as f64 / 400.0);
        sup = sup.max(t * table.mode_integral(&[1], t).unwrap().norm());
    }
    assert!(sup.is_finite() && sup <= 10.0 * at_10, "{sup} vs {at_10}");
}

#[test]
fn v_field_examples() {
    let m = build_model(&ModelSpec::unweighted(vec![1.0, 1.0], vec![2.0, 2.0], 4)).unwrap();
    assert_eq!(v_field(&m, &[1, 0], &[1.5, 1.5]).unwrap(), vec![1.0, 0.0]);
    let v = v_field(&m, &[3, 4], &[1.2, 1.7]).unwrap();
    assert!((v[0] - 3.0 / 25.0).abs() < 1e-16 && (v[1] - 4.0 / 25.0).abs() < 1e-16);
    let b = build_model(&ModelSpec::sys_b(8)).unwrap();
    let mut rng = stream_rng(17, 0);
    for _ in 0..100 {
        let action = b.domain.from_unit(&[rng.random(), rng.random()]);
        let n = loop {
            let n = [rng.random_range(-5..=5i64), rng.random_range(-5..=5i64)];
            if n != [0, 0] {
                break n;
            }
        };
        let v = v_field(&b, &n, &action).unwrap();
        let g = grad_phi_n(&b, &n, &action).unwrap();
        assert!((v[0] * g[0] + v[1] * g[1] - 1.0).abs() <= 1e-12);
    }
    assert!(v_field(&m, &[0, 0], &[1.5, 1.5]).is_err());
}

#[test]
fn invariance_examples() {
    let a = sys_a();
    let action_only = Observable { angle: TrigPolynomial::default(), action: Polynomial::new(vec![Monomial { coeff: 2.0, powers: vec![1] }]) };
    let report = invariance_audit(&a, &[action_only], &[1.0, 30.0], 5_000, 3.0, AngleSampling::Invariant, 1).unwrap();
    assert!(report.entries.iter().all(|e| e.mean_initial == e.mean_evolved && e.sigmas == 0.0));

    let cos = Observable::cos_first(1);
    let report = invariance_audit(&a, &[cos.clone()], &[7.3], 200_000, 3.0, AngleSampling::Invariant, 2).unwrap();
    assert!(report.passed(), "{report:?}");
    let report = invariance_audit(&a, &[cos], &[1.0], 200_000, 5.0, AngleSampling::Lebesgue, 2).unwrap();
    assert!(report.max_sigmas() > 5.0, "{report:?}");
}

use torus_ensemble::cohomology::{residual, solve_v, solve_with, uniqueness_check};
use torus_ensemble::fourier::TorusSeries;
use torus_ensemble::model::{build_model, coupled_quadratic, ModelSpec};
use torus_ensemble::Error;

#[test]
fn unweighted_model_is_trivial() {
    let m = build_model(&ModelSpec::unweighted(vec![1.0, 1.0], vec![2.0, 2.0], 6)).unwrap();
    assert!((m.a_bar - 1.0).abs() < 1e-15);
    assert!(m.b.abs_sum() < 1e-15);
    assert!((m.rho.mean().re - 1.0).abs() < 1e-14 && (m.rho.abs_sum() - 1.0).abs() < 1e-14);
    assert!((m.a.abs_sum() - 1.0).abs() < 1e-14);
}

#[test]
fn reference_defects() {
    let a = build_model(&ModelSpec::sys_a(16)).unwrap();
    assert!((a.a_bar - 1.0).abs() < 1e-14);
    assert!((a.b.eval_re(&[0.0]).unwrap() - 0.5).abs() < 1e-14);
    assert!((a.a.eval_re(&[0.0]).unwrap() - 1.0 / 1.5).abs() < 1e-12);
    let b = build_model(&ModelSpec::sys_b(16)).unwrap();
    assert!((b.a_bar - 1.0).abs() < 1e-14);
    let theta = [0.4f64, 2.0];
    let expected = 0.3 * theta[0].cos() + 0.2 * (theta[0] + theta[1]).sin();
    assert!((b.b.eval_re(&theta).unwrap() - expected).abs() < 1e-13);
}

#[test]
fn frequency_maps() {
    let a = build_model(&ModelSpec::sys_a(4)).unwrap();
    assert_eq!(a.omega(&[1.5]).unwrap(), vec![1.5]);
    let b = build_model(&ModelSpec::sys_b(4)).unwrap();
    assert_eq!(b.omega(&[1.0, 1.618]).unwrap(), vec![1.0, 1.618]);
    assert_eq!(b.d_omega(&[1.1, 1.6]).unwrap(), nalgebra::DMatrix::identity(2, 2));
    let c = build_model(
        &ModelSpec::unweighted(vec![0.5, 0.5], vec![2.0, 2.0], 4).with_hamiltonian(coupled_quadratic(0.25)),
    )
    .unwrap();
    let w = c.omega(&[1.0, 1.0]).unwrap();
    assert!((w[0] - 1.25).abs() < 1e-15 && (w[1] - 1.25).abs() < 1e-15);
    let d = c.d_omega(&[1.0, 1.0]).unwrap();
    assert_eq!(d, nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.25, 0.25, 1.0]));
    assert!(matches!(b.omega(&[3.0, 1.6]), Err(Error::Domain(_))));
}

#[test]
fn resonance_audit_examples() {
    let a = build_model(&ModelSpec::sys_a(16)).unwrap();
    let audit = a.resonance_audit(16, 32, 1.0).unwrap();
    assert!(audit.alpha_eff >= 1.0);
    assert!((audit.lambda_eff - 1.0).abs() < 1e-15);
    // I₂/I₁ = 2 at the cell centre (1.25, 2.5)
    let r = build_model(&ModelSpec::unweighted(vec![1.0, 1.75], vec![2.0, 2.75], 4)).unwrap();
    match r.resonance_audit(4, 2, 1.0) {
        Err(Error::Resonance { mode, .. }) => {
            let sign = mode[0].signum();
            assert_eq!((mode[0] * sign, mode[1] * sign), (2, -1));
        }
        other => panic!("expected resonance, got {other:?}"),
    }
}

#[test]
fn closed_form_solutions() {
    let a = build_model(&ModelSpec::sys_a(16)).unwrap();
    let sol = solve_v(&a, &[1.5]).unwrap();
    assert!((sol.v.eval_re(&[std::f64::consts::FRAC_PI_2]).unwrap() - 1.0 / 3.0).abs() < 1e-14);
    let b = build_model(&ModelSpec::sys_b(16)).unwrap();
    let sol = solve_v(&b, &[1.0, 1.618]).unwrap();
    for theta in [[0.0f64, 0.0], [0.3, 1.2], [2.5, 5.0]] {
        let exact = 0.3 * theta[0].sin() / 1.0 - 0.2 * (theta[0] + theta[1]).cos() / 2.618;
        assert!((sol.v.eval_re(&theta).unwrap() - exact).abs() < 1e-13);
    }
    assert!((sol.v.eval_re(&[0.0, 0.0]).unwrap() + 0.0763941).abs() < 1e-7);
    assert!(sol.residual_sup <= 1e-10 * (1.0 + b.b.abs_sum()));
}

#[test]
fn truncated_rhs_leaves_its_tail_as_residual() {
    let m = build_model(&ModelSpec::sys_c(16)).unwrap();
    let action = [1.1, 1.62];
    let truncated = TorusSeries::from_fn(2, 16, |n| {
        if n.iter().all(|x| x.abs() <= 8) { m.b.coeff(n) } else { Default::default() }
    });
    let mut sol = solve_with(&m, &action, &truncated).unwrap();
    sol.residual_sup = residual(&sol, &m, 2).unwrap();
    let tail = m.b.sub(&truncated).unwrap();
    let tail_sup = tail.to_refined_grid(2).unwrap().iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(tail_sup > 0.0);
    assert!((sol.residual_sup - tail_sup).abs() <= 1e-12 + 1e-9 * tail_sup, "{} vs {tail_sup}", sol.residual_sup);
}

#[test]
fn uniqueness_on_reference_systems() {
    let a = build_model(&ModelSpec::sys_a(16)).unwrap();
    assert!(uniqueness_check(&a, &[1.5], 10, 0).unwrap().unique);
    let b = build_model(&ModelSpec::sys_b(16)).unwrap();
    let audit = b.resonance_audit(16, 8, 2.0).unwrap();
    assert!(uniqueness_check(&b, &audit.worst_action, 10, 0).unwrap().unique);
}

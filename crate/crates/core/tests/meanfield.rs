use expotwist::girsanov::normalize_weights;
use expotwist::meanfield::{solve_on_costs, twist_costs, MeanFieldProblem};
use expotwist::model::CostSpec;
use expotwist::Error;

fn costs() -> Vec<f64> {
    (0..400).map(|i| ((i * 37) % 101) as f64 / 40.0).collect()
}

#[test]
fn linear_objective_is_a_plain_twist() {
    let phi = costs();
    let mut p = MeanFieldProblem::linear(1.3, CostSpec::zero());
    p.damping = 1.0;
    let s = solve_on_costs(&p, &phi).unwrap();
    assert!((s.c_star - 1.3).abs() < 1e-12);
    let scaled: Vec<f64> = phi.iter().map(|p| 1.3 * p).collect();
    let e = normalize_weights(&scaled).unwrap();
    let m: f64 = e.weights.iter().zip(&phi).map(|(w, p)| w * p).sum::<f64>() / phi.len() as f64;
    assert!((s.m_star.value - m).abs() < 1e-12);
}

#[test]
fn half_square_fixed_point_solves_the_scalar_equation() {
    let phi = costs();
    let s = solve_on_costs(&MeanFieldProblem::half_square(CostSpec::zero()), &phi).unwrap();
    let at = twist_costs(&phi, s.c_star).unwrap();
    assert!(
        (s.c_star - at.m.value).abs() < 2e-3,
        "{} vs {}",
        s.c_star,
        at.m.value
    );
    let objs: Vec<f64> = s.trace.iter().map(|e| e.c).collect();
    assert!(objs.len() >= 2);
}

#[test]
fn non_convergence_returns_the_trace() {
    let phi = costs();
    let mut p = MeanFieldProblem::half_square(CostSpec::zero());
    p.max_iter = 2;
    p.tol = 1e-14;
    match solve_on_costs(&p, &phi) {
        Err(Error::NotConverged {
            iterations, trace, ..
        }) => {
            assert_eq!(iterations, 2);
            assert_eq!(trace.len(), 2);
        }
        other => panic!("expected NotConverged, got {other:?}"),
    }
}

#[test]
fn negative_multiplier_is_rejected() {
    assert!(twist_costs(&costs(), -0.1).is_err());
}

use binmhe::costs::unstack;
use binmhe::experiments::{example1_setup, oscillator_continuous};
use binmhe::linsys::discretize;
use binmhe::observability::{observability_matrix, switching_density_condition};
use binmhe::solvers::solve_lsmhe;
use binmhe::{BinarySensorBank, EstimatorConfig, Level, LtiModel, MeasurementWindow, WindowProblem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[derive(Debug)]
struct Case {
    model: LtiModel,
    sensors: BinarySensorBank,
    config: EstimatorConfig,
    window: MeasurementWindow,
    prediction: DVector<f64>,
}

impl Case {
    fn problem(&self) -> WindowProblem<'_> {
        WindowProblem::new(&self.model, &self.sensors, &self.config, &self.window, &self.prediction).unwrap()
    }
}

prop_compose! {
    fn case()(n in 1usize..4, horizon in 1usize..7, p in 1usize..3)
        (a in prop::collection::vec(-0.9f64..0.9, n * n),
         c in prop::collection::vec(-1.0f64..1.0, p * n),
         tau in prop::collection::vec(-1.0f64..1.0, p),
         weights in prop::collection::vec(0.1f64..3.0, n + 2),
         signs in prop::collection::vec(prop::collection::vec(prop::bool::ANY, p), horizon + 1),
         prediction in prop::collection::vec(-2.0f64..2.0, n),
         n in Just(n), horizon in Just(horizon), p in Just(p)) -> Case {
        let model = LtiModel::autonomous(DMatrix::from_row_slice(n, n, &a), DMatrix::from_row_slice(p, n, &c)).unwrap();
        let sensors = BinarySensorBank::new(tau, vec![0.05; p]).unwrap();
        let mut config = EstimatorConfig::scaled_identity(n, p, weights[0], weights[1], 1.0, horizon);
        config.output_weights = (0..p).map(|i| weights[(2 + i) % weights.len()]).collect();
        let outputs = signs
            .iter()
            .map(|row| row.iter().map(|&b| if b { Level::High } else { Level::Low }).collect())
            .collect();
        let window = MeasurementWindow::new(3, vec![DVector::zeros(0); horizon], outputs).unwrap();
        Case { model, sensors, config, window, prediction: DVector::from_vec(prediction) }
    }
}

/// Least-squares cost summed term by term from the definitions.
fn direct_ls_cost(case: &Case, chi: &DVector<f64>) -> f64 {
    let xs = unstack(chi, case.model.n());
    let dx = &xs[0] - &case.prediction;
    let mut cost = (dx.transpose() * &case.config.arrival_weight * &dx)[0];
    for k in 0..case.window.horizon() {
        let w = &xs[k + 1] - case.model.a() * &xs[k];
        cost += (w.transpose() * &case.config.process_weight * &w)[0];
    }
    for i in 0..case.model.p() {
        for k in 0..case.window.horizon() {
            if case.window.reading(k, i) != case.window.reading(k + 1, i) {
                let z = (case.model.c().row(i) * &xs[k])[0];
                cost += case.config.output_weights[i] * (z - case.sensors.threshold(i)).powi(2);
            }
        }
    }
    cost
}

fn point(case: &Case, raw: &[f64]) -> DVector<f64> {
    let dim = case.model.n() * (case.window.horizon() + 1);
    DVector::from_iterator(dim, raw.iter().copied().cycle().take(dim))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ls_cost_matches_direct_summation(case in case(), raw in prop::collection::vec(-3.0f64..3.0, 30)) {
        let chi = point(&case, &raw);
        let direct = direct_ls_cost(&case, &chi);
        let problem = case.problem();
        prop_assert!((problem.cost_ls(&chi) - direct).abs() <= 1e-10 * (1.0 + direct));
        prop_assert!((problem.quadratic_ls().evaluate(&chi) - direct).abs() <= 1e-9 * (1.0 + direct));
    }

    #[test]
    fn ls_hessian_is_positive_definite(case in case()) {
        let h = case.problem().quadratic_ls().dense_h();
        prop_assert!(h.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn ls_solution_beats_perturbations(case in case(), raw in prop::collection::vec(-1.0f64..1.0, 30), r in 1e-4f64..1.0) {
        let problem = case.problem();
        let chi = solve_lsmhe(&problem).unwrap().estimate.stacked();
        let other = &chi + point(&case, &raw) * r;
        prop_assert!(problem.cost_ls(&chi) <= problem.cost_ls(&other) + 1e-12);
    }

    #[test]
    fn pw_gradient_matches_central_differences(case in case(), raw in prop::collection::vec(-3.0f64..3.0, 30)) {
        let chi = point(&case, &raw);
        let problem = case.problem();
        let g = problem.gradient_pw(&chi);
        let h = 1e-6;
        for j in 0..chi.len() {
            let mut plus = chi.clone();
            let mut minus = chi.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd = (problem.cost_pw(&plus) - problem.cost_pw(&minus)) / (2.0 * h);
            prop_assert!((g[j] - fd).abs() <= 1e-5 * g.amax().max(1.0), "component {}: {} vs {}", j, g[j], fd);
        }
    }

    #[test]
    fn pw_cost_is_convex(case in case(),
                         a in prop::collection::vec(-3.0f64..3.0, 30),
                         b in prop::collection::vec(-3.0f64..3.0, 30),
                         t in 0.0f64..1.0) {
        let problem = case.problem();
        let (x, y) = (point(&case, &a), point(&case, &b));
        let mid = &x * t + &y * (1.0 - t);
        let bound = t * problem.cost_pw(&x) + (1.0 - t) * problem.cost_pw(&y);
        prop_assert!(problem.cost_pw(&mid) <= bound + 1e-9 * (1.0 + bound));
    }

    #[test]
    fn pw_cost_vanishes_on_consistent_noise_free_trajectories(case in case(), raw in prop::collection::vec(-2.0f64..2.0, 3)) {
        // the propagated prediction, with readings regenerated from it
        let n = case.model.n();
        let x0 = DVector::from_iterator(n, raw.iter().copied().cycle().take(n));
        let mut xs = vec![x0.clone()];
        for _ in 0..case.window.horizon() {
            let next = case.model.a() * xs.last().unwrap();
            xs.push(next);
        }
        let outputs: Vec<Vec<Level>> = xs.iter().map(|x| case.sensors.measure(&(case.model.c() * x))).collect();
        let window = MeasurementWindow::new(0, vec![DVector::zeros(0); case.window.horizon()], outputs).unwrap();
        let problem = WindowProblem::new(&case.model, &case.sensors, &case.config, &window, &x0).unwrap();
        prop_assert!(problem.cost_pw(&binmhe::costs::stack(&xs)) <= 1e-20);
    }

    #[test]
    fn zero_order_hold_is_a_semigroup(t1 in 0.01f64..0.3, t2 in 0.01f64..0.3, k in 1.0f64..20.0) {
        let ac = oscillator_continuous(1.0, 2.0, k, 10.0);
        let b = DMatrix::zeros(4, 0);
        let (a1, _) = discretize(&ac, &b, t1).unwrap();
        let (a2, _) = discretize(&ac, &b, t2).unwrap();
        let (a12, _) = discretize(&ac, &b, t1 + t2).unwrap();
        prop_assert!((a12 - a1 * a2).amax() < 1e-10);
    }
}

#[test]
fn example1_plant_is_undamped() {
    let s = example1_setup().unwrap();
    for l in s.model.a().complex_eigenvalues().iter() {
        assert!((l.norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn density_condition_is_only_sufficient_on_example1() {
    // about six crossings per 10 s window against a required ν ≥ 2(n−1) + Nω/π ≈ 22.3
    let s = example1_setup().unwrap();
    let traj = s.simulate(21, 600).unwrap();
    let readings: Vec<Vec<Level>> = traj.outputs.iter().map(|z| s.sensors.measure(z)).collect();
    let horizon = s.config.horizon;
    for start in (0..=600 - horizon).step_by(25) {
        let window =
            MeasurementWindow::new(start, vec![DVector::zeros(0); horizon], readings[start..=start + horizon].to_vec()).unwrap();
        assert!(!switching_density_condition(&s.model, window.switching_count(), horizon));
        assert_eq!(observability_matrix(&s.model, &window).rank, 4, "window at {start}");
    }
    assert!(switching_density_condition(&s.model, 23, horizon));
    assert!(!switching_density_condition(&s.model, 22, horizon));
}

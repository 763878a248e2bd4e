use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::*;
use crate::scenarios::{lq_scenario, make_lq_scalar, riccati_oracle, LqParams};

fn linear_lq(a: DMatrix<f64>, c: DMatrix<f64>, sigma: DVector<f64>) -> LqParams {
    let n = a.nrows();
    LqParams {
        a,
        b: DMatrix::zeros(n, 1),
        c,
        d: DMatrix::zeros(n, 1),
        sigma,
        m_run: DMatrix::identity(n, n),
        n_run: DMatrix::identity(1, 1),
        g_term: DMatrix::identity(n, n),
    }
}

fn linear_scenario(op: OperatorSpec, lq: &LqParams, x0: SpectralVector) -> Scenario {
    lq_scenario(
        "linear",
        op,
        lq,
        ControlSet::Box { lo: vec![-1.0], hi: vec![1.0] },
        10.0,
        1.0,
        x0,
    )
    .unwrap()
}

fn zero_control(n_steps: usize) -> ControlProcess {
    ControlProcess::zero(1, n_steps)
}

#[test]
fn zero_coefficients_follow_the_semigroup() {
    let op = OperatorSpec::dirichlet_laplacian(3, 1.0).unwrap();
    let mut a = DMatrix::zeros(3, 3);
    for k in 0..3 {
        a[(k, k)] = op.eigenvalues()[k];
    }
    let lq = linear_lq(a, DMatrix::zeros(3, 3), DVector::zeros(3));
    let e1 = SpectralVector::from_vec(vec![1.0, 0.0, 0.0]);
    let s = linear_scenario(op.clone(), &lq, e1.clone());
    let ens = BrownianEnsemble::sample(TimeGrid::new(0.0, 0.5, 50).unwrap(), 3, 1).unwrap();
    let traj = simulate_controlled(&s, &initial_state(&e1), &zero_control(50), &ens).unwrap();
    for p in 0..3 {
        for j in 0..=50 {
            let exact = op.semigroup_apply(j as f64 * 0.01, &e1).unwrap();
            let x = traj.state_vec(p, j);
            assert!((x - &exact).amax() <= 1e-12 * exact.amax().max(1e-300) + 1e-300, "step {j}");
        }
    }
}

#[test]
fn homogeneous_linear_flow_scales_exactly() {
    let op = OperatorSpec::dirichlet_laplacian(2, 2.0).unwrap();
    let a = DMatrix::from_row_slice(2, 2, &[-2.0, 0.3, 0.1, -9.0]);
    let c = DMatrix::from_row_slice(2, 2, &[0.4, 0.0, -0.2, 0.3]);
    let lq = linear_lq(a, c, DVector::zeros(2));
    let x0 = SpectralVector::from_vec(vec![0.7, -0.4]);
    let s = linear_scenario(op, &lq, x0.clone());
    let ens = BrownianEnsemble::sample(TimeGrid::new(0.0, 1.0, 40).unwrap(), 20, 9).unwrap();
    let t1 = simulate_controlled(&s, &initial_state(&x0), &zero_control(40), &ens).unwrap();
    let t2 = simulate_controlled(&s, &initial_state(&(&x0 * 2.0)), &zero_control(40), &ens).unwrap();
    for p in 0..20 {
        for j in 0..=40 {
            assert_eq!(t2.state_vec(p, j), t1.state_vec(p, j) * 2.0);
        }
    }
}

#[test]
fn brownian_motion_variance() {
    let op = OperatorSpec::new(vec![0.0], 1.0).unwrap();
    let lq = linear_lq(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), DVector::from_element(1, 1.0));
    let x0 = SpectralVector::zeros(1);
    let s = linear_scenario(op, &lq, x0.clone());
    let ens = BrownianEnsemble::sample(TimeGrid::new(0.0, 1.0, 50).unwrap(), 10_000, 3).unwrap();
    let traj = simulate_controlled(&s, &initial_state(&x0), &zero_control(50), &ens).unwrap();
    let xs = traj.coordinate(50, 0);
    let m = stats::mean(&xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
    let (var, se) = stats::mean_stderr(&sq);
    assert!((var - 1.0).abs() <= 3.0 * se, "var {var} se {se}");
}

#[test]
fn linear_test_equation_examples() {
    let op = OperatorSpec::new(vec![0.0, -3.0], 1.0).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let ens = BrownianEnsemble::sample(grid, 4000, 11).unwrap();
    let zero = VectorProcess::zeros(2, 100);
    let eta = SpectralVector::from_vec(vec![0.5, 2.0]);

    let z = simulate_linear_test(&op, 25, &initial_state(&eta), &zero, &zero, &ens).unwrap();
    for j in 25..=100 {
        let exact = op.semigroup_apply((j - 25) as f64 * 0.01, &eta).unwrap();
        assert!((z.state_vec(7, j) - exact).amax() < 1e-12);
    }
    assert_eq!(z.state_vec(0, 10), SpectralVector::zeros(2));

    let c = VectorProcess::constant(&SpectralVector::from_vec(vec![1.5, 0.0]), 100);
    let z = simulate_linear_test(&op, 40, &initial_state(&SpectralVector::zeros(2)), &c, &zero, &ens).unwrap();
    assert!((z.state(3, 100)[0] - 1.5 * 0.6).abs() < 1e-12);

    let one = VectorProcess::constant(&SpectralVector::from_vec(vec![1.0, 0.0]), 100);
    let z = simulate_linear_test(&op, 0, &initial_state(&SpectralVector::zeros(2)), &zero, &one, &ens).unwrap();
    let (m, se) = stats::mean_stderr(&z.coordinate(100, 0));
    assert!(m.abs() <= 3.0 * se);
}

#[test]
fn linearized_second_moment_matches_euler_recursion() {
    let op = OperatorSpec::new(vec![0.0], 1.0).unwrap();
    let (n_steps, kappa) = (100, 0.5);
    let grid = TimeGrid::new(0.0, 1.0, n_steps).unwrap();
    let ens = BrownianEnsemble::sample(grid, 20_000, 5).unwrap();
    let zero = VectorProcess::zeros(1, n_steps);
    let j = MatrixProcess::zeros(1, n_steps);
    let k = MatrixProcess::constant(&DMatrix::from_element(1, 1, kappa), n_steps);
    let xi = initial_state(&SpectralVector::from_element(1, 1.0));
    let x = simulate_linearized(&op, &j, &k, 0, &xi, &zero, &zero, &ens).unwrap();
    let sq: Vec<f64> = x.coordinate(n_steps, 0).iter().map(|v| v * v).collect();
    let (m, se) = stats::mean_stderr(&sq);
    let exact = (1.0 + kappa * kappa * grid.dt()).powi(n_steps as i32);
    assert!((m - exact).abs() <= 3.0 * se, "{m} vs {exact} ± {se}");
}

#[test]
fn linearized_superposition() {
    let op = OperatorSpec::dirichlet_laplacian(3, 1.0).unwrap();
    let n_steps = 60;
    let grid = TimeGrid::new(0.0, 0.6, n_steps).unwrap();
    let ens = BrownianEnsemble::sample(grid, 50, 2).unwrap();
    let jm = MatrixProcess::deterministic(3, n_steps, |j| DMatrix::from_fn(3, 3, |r, c| 0.1 * (r as f64 - c as f64) + 0.01 * j as f64));
    let km = MatrixProcess::constant(&(DMatrix::identity(3, 3) * 0.4), n_steps);
    let zero = VectorProcess::zeros(3, n_steps);
    let v = VectorProcess::deterministic(3, n_steps, |j| SpectralVector::from_vec(vec![1.0, -0.5, (j as f64 * 0.1).sin()]));
    let xi = initial_state(&SpectralVector::from_vec(vec![0.3, 0.2, -0.1]));
    let xi0 = initial_state(&SpectralVector::zeros(3));
    let a = simulate_linearized(&op, &jm, &km, 5, &xi0, &zero, &v, &ens).unwrap();
    let b = simulate_linearized(&op, &jm, &km, 5, &xi, &zero, &zero, &ens).unwrap();
    let ab = simulate_linearized(&op, &jm, &km, 5, &xi, &zero, &v, &ens).unwrap();
    for p in 0..50 {
        for j in 5..=n_steps {
            let diff = ab.state_vec(p, j) - a.state_vec(p, j) - b.state_vec(p, j);
            assert!(diff.amax() < 1e-12);
        }
    }
}

#[test]
fn simulation_is_adapted() {
    let (s, _) = make_lq_scalar();
    let grid = TimeGrid::new(0.0, 1.0, 40).unwrap();
    let ens = BrownianEnsemble::sample(grid, 30, 4).unwrap();
    let cut = 17;
    let mut incs = ens.increments().to_vec();
    for p in 0..30 {
        for j in cut..40 {
            incs[p * 40 + j] = ((p * 31 + j) as f64).sin() * 0.3;
        }
    }
    let ens2 = BrownianEnsemble::from_increments(grid, 30, 4, incs).unwrap();
    let ctl = ControlProcess::feedback(|_, _, x| -x.clone());
    let a = simulate_controlled(&s, &initial_state(&s.x0), &ctl, &ens).unwrap();
    let b = simulate_controlled(&s, &initial_state(&s.x0), &ctl, &ens2).unwrap();
    for p in 0..30 {
        for j in 0..=cut {
            assert_eq!(a.state(p, j), b.state(p, j));
        }
        assert_ne!(a.state(p, 40), b.state(p, 40));
    }
}

/// Euler strong error against the exact geometric Brownian motion.
#[test]
fn strong_order_window() {
    let (drift, vol) = (0.5, 0.8);
    let op = OperatorSpec::new(vec![0.0], 1.0).unwrap();
    let lq = linear_lq(
        DMatrix::from_element(1, 1, drift),
        DMatrix::from_element(1, 1, vol),
        DVector::zeros(1),
    );
    let x0 = SpectralVector::from_element(1, 1.0);
    let s = linear_scenario(op, &lq, x0.clone());
    let fine_n = 128;
    let fine = BrownianEnsemble::sample(TimeGrid::new(0.0, 1.0, fine_n).unwrap(), 1000, 21).unwrap();
    let coarse_incs: Vec<f64> = (0..1000)
        .flat_map(|p| {
            let row = fine.path(p);
            (0..fine_n / 2).map(move |j| row[2 * j] + row[2 * j + 1])
        })
        .collect();
    let coarse = BrownianEnsemble::from_increments(TimeGrid::new(0.0, 1.0, fine_n / 2).unwrap(), 1000, 21, coarse_incs).unwrap();
    let err = |ens: &BrownianEnsemble| {
        let n = ens.grid().n_steps();
        let traj = simulate_controlled(&s, &initial_state(&x0), &zero_control(n), ens).unwrap();
        let e: Vec<f64> = (0..1000)
            .map(|p| {
                let w: f64 = ens.path(p).iter().sum();
                let exact = ((drift - 0.5 * vol * vol) + vol * w).exp();
                (traj.state(p, n)[0] - exact).abs()
            })
            .collect();
        stats::mean(&e)
    };
    let ratio = err(&coarse) / err(&fine);
    assert!((1.2..=3.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn second_moments_scale_quadratically() {
    let op = OperatorSpec::dirichlet_laplacian(2, 3.0).unwrap();
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.2, 0.0, -4.0]);
    let c = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
    let lq = linear_lq(a, c, DVector::zeros(2));
    let v = SpectralVector::from_vec(vec![1.0, -1.0]);
    let s = linear_scenario(op, &lq, v.clone());
    let ens = BrownianEnsemble::sample(TimeGrid::new(0.0, 1.0, 50).unwrap(), 200, 8).unwrap();
    let m = |x0: SpectralVector| {
        simulate_controlled(&s, &initial_state(&x0), &zero_control(50), &ens)
            .unwrap()
            .mean_square_norms()
    };
    let (m1, m2, m4) = (m(v.clone()), m(&v * 2.0), m(&v * 4.0));
    let sup = m1.iter().cloned().fold(0.0, f64::max);
    assert!(sup.is_finite());
    for j in 0..=50 {
        assert!((m2[j] - 4.0 * m1[j]).abs() <= 1e-12 * m2[j]);
        assert!((m4[j] - 16.0 * m1[j]).abs() <= 1e-12 * m4[j]);
    }
}

#[test]
fn divergence_is_reported() {
    let op = OperatorSpec::new(vec![0.0], 1.0).unwrap();
    let lq = linear_lq(DMatrix::from_element(1, 1, 2000.0), DMatrix::zeros(1, 1), DVector::zeros(1));
    let x0 = SpectralVector::from_element(1, 1.0);
    let s = linear_scenario(op, &lq, x0.clone());
    let ens = BrownianEnsemble::sample(TimeGrid::new(0.0, 1.0, 10).unwrap(), 2, 1).unwrap();
    let r = simulate_controlled(&s, &initial_state(&x0), &zero_control(10), &ens);
    assert!(matches!(r, Err(Error::Diverged { path: 0, .. })), "{r:?}");
}

struct UnitCost;
impl Coefficients for UnitCost {
    fn drift(&self, _t: f64, x: &SpectralVector, _u: &DVector<f64>) -> SpectralVector {
        x * 0.0
    }
    fn diffusion(&self, _t: f64, x: &SpectralVector, _u: &DVector<f64>) -> SpectralVector {
        x * 0.0 + SpectralVector::from_element(x.len(), 1.0)
    }
    fn running_cost(&self, _t: f64, _x: &SpectralVector, _u: &DVector<f64>) -> f64 {
        1.0
    }
    fn terminal_cost(&self, _x: &SpectralVector) -> f64 {
        0.0
    }
}

#[test]
fn cost_examples() {
    let (s, mut lq) = make_lq_scalar();
    let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
    let ens = BrownianEnsemble::sample(grid, 500, 3).unwrap();

    lq.m_run *= 0.0;
    lq.n_run[(0, 0)] = 1e-300;
    lq.g_term *= 0.0;
    let zero = lq_scenario("zero", s.op.clone(), &lq, s.control_set.clone(), 1.0, 1.0, s.x0.clone()).unwrap();
    let c = estimate_cost(&zero, &initial_state(&s.x0), &ControlProcess::zero(1, 200), &ens).unwrap();
    assert_eq!((c.estimate, c.stderr), (0.0, 0.0));

    let unit = Scenario {
        coeffs: Arc::new(UnitCost),
        ..s.clone()
    };
    let c = estimate_cost(&unit, &initial_state(&s.x0), &ControlProcess::zero(1, 200), &ens).unwrap();
    assert!((c.estimate - 1.0).abs() < 1e-12 && c.stderr == 0.0);
}

#[test]
fn riccati_feedback_cost_matches_oracle() {
    let (s, lq) = make_lq_scalar();
    let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
    let ens = BrownianEnsemble::sample(grid, 10_000, 7).unwrap();
    let oracle = riccati_oracle(&lq, &grid).unwrap();
    let c = estimate_cost(&s, &initial_state(&s.x0), &oracle.feedback(), &ens).unwrap();
    let v = oracle.value_at(&s.x0);
    // left-endpoint bias of the Euler scheme is about dt·v
    assert!((c.estimate - v).abs() <= 3.0 * c.stderr + 1.0 * grid.dt(), "{} vs {v}", c.estimate);
}

#[test]
fn per_path_initial_state_and_open_loop_shape_checks() {
    let (s, _) = make_lq_scalar();
    let ens = BrownianEnsemble::sample(TimeGrid::new(0.0, 1.0, 10).unwrap(), 4, 1).unwrap();
    let x0 = VectorProcess::per_path(4, 1, 1, |p, _| SpectralVector::from_element(1, p as f64));
    let t = simulate_controlled(&s, &x0, &ControlProcess::zero(1, 10), &ens).unwrap();
    assert_eq!(t.state(3, 0), &[3.0]);
    let bad = ControlProcess::OpenLoop(VectorProcess::zeros(1, 5));
    assert!(simulate_controlled(&s, &x0, &bad, &ens).is_err());
    // controls outside the box are clamped
    let big = ControlProcess::constant(&DVector::from_element(1, 10.0), 10);
    let t = simulate_controlled(&s, &x0, &big, &ens).unwrap();
    assert_eq!(t.control(0, 0), &[4.0]);
}

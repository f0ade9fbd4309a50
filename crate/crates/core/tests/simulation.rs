mod common;

use distkf_core::gain::{riccati_recursion, steady_state, SteadyStateOptions};
use distkf_core::simulator::{generate_measurements, generate_truth, monte_carlo, GainPlan};
use distkf_core::AgentId;
use nalgebra::{DMatrix, DVector};

#[test]
fn truth_covariance_matches_propagation() {
    let model = common::scenario("chain");
    let sys = &model.system;
    let runs = 20_000;
    let horizon = 5;
    let mut sum = DMatrix::zeros(2, 2);
    let mut mean = DVector::zeros(2);
    for r in 0..runs {
        let x = &generate_truth(sys, horizon, r)[horizon];
        mean += x;
        sum.ger(1.0, x, x, 1.0);
    }
    mean /= runs as f64;
    let cov = sum / runs as f64 - &mean * mean.transpose();
    let mut p = sys.p0.clone();
    let mut mu = sys.x0_mean.clone();
    for _ in 0..horizon {
        p = &sys.f * p * sys.f.transpose() + &sys.q;
        mu = &sys.f * mu;
    }
    assert!(common::rel_err(&cov, &p) < 0.05, "{cov} vs {p}");
    assert!((mean - mu).amax() < 0.1);
}

#[test]
fn measurement_noise_has_requested_covariance() {
    let model = common::scenario("disconnected_pair");
    let runs = 20_000;
    let mut s = DMatrix::zeros(2, 2);
    for r in 0..runs {
        let x = generate_truth(&model.system, 1, r);
        let z = generate_measurements(&x, &model, r);
        let v = DVector::from_iterator(2, model.agents.iter().enumerate().map(|(i, a)| (&z[1][i] - &a.h * &x[1])[0]));
        s.ger(1.0, &v, &v, 1.0);
    }
    s /= runs as f64;
    // R_1 = 1, R_2 = 2, independent
    assert!((s[(0, 0)] - 1.0).abs() < 0.05);
    assert!((s[(1, 1)] - 2.0).abs() < 0.1);
    assert!(s[(0, 1)].abs() < 0.05);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let model = common::scenario("chain");
    let sched = riccati_recursion(&model, 10).unwrap();
    let plan = GainPlan::from_schedule(&sched);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| monte_carlo(&model, &plan, 10, 1000, 77).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.stats().sum_outer, b.stats().sum_outer);
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn measurement_innovations_are_white() {
    let model = common::scenario("chain");
    let sched = riccati_recursion(&model, 20).unwrap();
    let s = monte_carlo(&model, &GainPlan::from_schedule(&sched), 20, 20_000, 3).unwrap();
    for w in &s.whiteness {
        assert!(w.max_abs_z_measurement < 4.5, "{w:?}");
        assert!(w.max_abs_z_mean < 4.5, "{w:?}");
    }
    assert!(s.whiteness[0].max_abs_z_consensus.is_none());
}

#[test]
fn steady_gains_track_steady_covariance() {
    let model = common::scenario("unstable_ring");
    let ss = steady_state(&model, SteadyStateOptions::default()).unwrap();
    let s = monte_carlo(&model, &GainPlan::steady(&ss), 40, 20_000, 9).unwrap();
    for id in model.ids() {
        let analytic = s.row(40, id).unwrap().analytic_trace_p_plus;
        assert!((analytic - ss.p_plus[id.index()].trace()).abs() < 1e-6 * analytic);
        let mse = s.stats().mse(40, id);
        assert!((mse - analytic).abs() < 0.05 * analytic, "{id}: {mse} vs {analytic}");
    }
    assert!(s.spectral_radii.iter().all(|&r| r < 1.0));
    assert_eq!(s.row(1, AgentId(1)).unwrap().k, 1);
}

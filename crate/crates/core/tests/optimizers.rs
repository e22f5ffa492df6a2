mod common;

use apg_core::eval::policy_gradient;
use apg_core::experiments::{builtin_env, mdp5x5, random_mdp};
use apg_core::optim::{
    apg_clipped_step, apg_normalized_step, apg_step, ghadimi_ag_step, hbpg_step, napg_step, pg_step,
    sampled_gradient, step, OptimizerState,
};
use apg_core::run::run_observed;
use apg_core::schedule::smoothness_constant;
use apg_core::{run, Algorithm, LogSpacing, PolicyParams, RunConfig, StepSchedule};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn uniform() -> (apg_core::Mdp, PolicyParams) {
    let env = builtin_env("mdp5x5-uniform").unwrap();
    (env.mdp, env.init_theta)
}

#[test]
fn pg_is_monotone() {
    let (mdp, theta) = uniform();
    let schedule = StepSchedule::constant(&mdp);
    let mut state = OptimizerState::new(theta);
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let out = pg_step(&state, &mdp, &schedule).unwrap();
        let v = out.v_theta.dot(mdp.mu());
        assert!(v >= prev - 1e-12, "t {}", out.state.t);
        prev = v;
        state = out.state;
    }
}

#[test]
fn row_sums_are_conserved() {
    let (mdp, _) = uniform();
    let theta0 = PolicyParams::from_rows(&common::random_theta(4, 5, 5, 2.0)).unwrap();
    let sums0 = theta0.row_sums();
    for algo in [Algorithm::Pg, Algorithm::Apg, Algorithm::Napg, Algorithm::Hbpg { momentum: 0.9 }] {
        let schedule = algo.default_schedule(&mdp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = OptimizerState::new(theta0.clone());
        for _ in 0..5_000 {
            state = step(&algo, &state, &mdp, &schedule, &mut rng).unwrap().state;
        }
        for (a, b) in state.theta.row_sums().iter().zip(&sums0) {
            assert!((a - b).abs() < 1e-8, "{}: {a} vs {b}", algo.name());
        }
    }
}

#[test]
fn apg_invariants_over_long_run() {
    let (mdp, theta) = uniform();
    let mut cfg = RunConfig::new(Algorithm::Apg, &mdp, 100_000).unwrap();
    cfg.log = LogSpacing::Every { every: 10_000 };
    let sums0 = theta.row_sums();
    let mut prev_omega_mu = f64::NEG_INFINITY;
    let mut worst_statewise = f64::INFINITY;
    let mut worst_sum = 0.0f64;
    run_observed(&mdp, &theta, &cfg, |ev| {
        let out = ev.outcome;
        let v_omega_mu = out.v_omega.dot(mdp.mu());
        assert!(v_omega_mu >= prev_omega_mu, "V(omega) decreased at t {}", out.state.t);
        prev_omega_mu = v_omega_mu;
        if ev.prev.t > 0 {
            worst_statewise = worst_statewise.min((&out.v_theta - ev.prev_v_omega).min());
        }
        for (a, b) in out.state.theta.row_sums().iter().zip(&sums0) {
            worst_sum = worst_sum.max((a - b).abs());
        }
    })
    .unwrap();
    assert!(worst_statewise >= -1e-10, "{worst_statewise}");
    assert!(worst_sum < 1e-8, "{worst_sum}");
}

#[test]
fn napg_tracks_apg_until_first_restart() {
    let env = builtin_env("bandit3-nonmonotone").unwrap();
    let schedule = StepSchedule::nearly_constant(&env.mdp);
    let mut apg = OptimizerState::new(env.init_theta.clone());
    let mut napg = apg.clone();
    let mut restarted = false;
    for _ in 0..1_000 {
        let a = apg_step(&apg, &env.mdp, &schedule).unwrap();
        let n = napg_step(&napg, &env.mdp, &schedule).unwrap();
        if a.restarted {
            restarted = true;
            assert_eq!(a.state.theta, n.state.theta);
            assert_ne!(a.state.omega, n.state.omega);
            break;
        }
        assert_eq!(a.state.theta, n.state.theta);
        assert_eq!(a.state.omega, n.state.omega);
        apg = a.state;
        napg = n.state;
    }
    assert!(restarted, "apg never restarted on the non-monotone bandit");
}

#[test]
fn sampled_gradient_is_unbiased() {
    // E[sparse gradient] = sum_{s,a} d(s) pi(a|s) grad[s,a] e_{s,a}, compared coordinatewise
    // within three standard errors.
    let mdp = random_mdp(11, 2, 2, 0.8).unwrap();
    let theta = PolicyParams::from_rows(&[vec![0.3, -0.2], vec![-0.5, 0.4]]).unwrap();
    let exact = policy_gradient(&mdp, &theta, mdp.mu()).unwrap();
    let pi = common::policy_of(&theta.to_rows());
    let d = common::visitation_series(&mdp, &pi, &common::vec_of(mdp.mu()));
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sum = DMatrix::zeros(2, 2);
    let mut sum_sq = DMatrix::zeros(2, 2);
    for _ in 0..n {
        let g = sampled_gradient(&mdp, &theta, &mut rng, 1).unwrap();
        sum += &g;
        sum_sq += g.component_mul(&g);
    }
    for s in 0..2 {
        for a in 0..2 {
            let mean = sum[(s, a)] / n as f64;
            let var = sum_sq[(s, a)] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            let expected = d[s] * pi[s][a] * exact[(s, a)];
            assert!((mean - expected).abs() <= 3.0 * se, "({s},{a}): {mean} vs {expected} (se {se})");
        }
    }
}

#[test]
fn stochastic_runs_are_reproducible() {
    let (mdp, theta) = uniform();
    for algo in [Algorithm::Sapg { batch: 1 }, Algorithm::Spg { batch: 3 }] {
        let mut cfg = RunConfig::new(algo, &mdp, 2_000).unwrap();
        cfg.seed = 42;
        let a = run(&mdp, &theta, &cfg).unwrap();
        let b = run(&mdp, &theta, &cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed = 43;
        assert_ne!(run(&mdp, &theta, &cfg).unwrap().records, a.records);
    }
}

#[test]
fn three_sequence_form_matches_apg() {
    let (mdp, theta) = uniform();
    let schedule = StepSchedule::nearly_constant(&mdp);
    let mut apg = OptimizerState::new(theta);
    for _ in 0..1_000 {
        apg = apg_step(&apg, &mdp, &schedule).unwrap().state;
    }
    let (mut ag, t_shift) = OptimizerState::ag_from_apg(&apg);
    let l = smoothness_constant(&mdp);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let a = apg_step(&apg, &mdp, &schedule).unwrap();
        assert!(!a.restarted);
        apg = a.state;
        ag = ghadimi_ag_step(&ag, &mdp, t_shift, l).unwrap().state;
        worst = worst.max((apg.theta.matrix() - ag.theta.matrix()).amax());
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn clipped_update_is_bounded_per_coordinate() {
    let (mdp, theta) = uniform();
    let schedule = StepSchedule::exponential_clipped_default(&mdp, apg_core::schedule::c_inf_surrogate(&mdp)).unwrap();
    let k = schedule.clip().unwrap();
    let mut state = OptimizerState::new(theta);
    for _ in 0..5_000 {
        let out = apg_clipped_step(&state, &mdp, &schedule).unwrap();
        let jump = out.state.theta.matrix() - state.omega.matrix();
        assert!(jump.amax() <= k * (1.0 + 1e-12), "t {}", out.state.t);
        state = out.state;
    }
}

#[test]
fn normalized_step_has_fixed_length() {
    let (mdp, theta) = uniform();
    let schedule = StepSchedule::normalized(&mdp, apg_core::schedule::c_inf_surrogate(&mdp)).unwrap();
    let StepSchedule::Normalized { scale, .. } = schedule else { panic!("wrong schedule kind") };
    let mut state = OptimizerState::new(theta);
    for _ in 0..500 {
        let out = apg_normalized_step(&state, &mdp, &schedule).unwrap();
        let len = (out.state.theta.matrix() - state.omega.matrix()).norm();
        assert!((len - scale).abs() < 1e-9 * scale.max(1.0), "{len} vs {scale}");
        state = out.state;
    }
}

#[test]
fn heavy_ball_without_momentum_is_pg() {
    let mdp = mdp5x5();
    let schedule = StepSchedule::constant(&mdp);
    let mut hb = OptimizerState::new(PolicyParams::zeros(5, 5));
    let mut pg = hb.clone();
    for _ in 0..100 {
        hb = hbpg_step(&hb, &mdp, &schedule, 0.0).unwrap().state;
        pg = pg_step(&pg, &mdp, &schedule).unwrap().state;
    }
    assert!((hb.theta.matrix() - pg.theta.matrix()).amax() < 1e-12);
    assert!(hbpg_step(&hb, &mdp, &schedule, 1.0).is_err());
}

#[test]
fn hard_initialization_improves_under_every_method() {
    let env = builtin_env("mdp5x5-hard").unwrap();
    for algo in [Algorithm::Pg, Algorithm::Apg, Algorithm::Hbpg { momentum: 0.9 }, Algorithm::ApgClip] {
        let mut cfg = RunConfig::new(algo, &env.mdp, 5_000).unwrap();
        cfg.log = LogSpacing::Every { every: 1_000 };
        let trace = run(&env.mdp, &env.init_theta, &cfg).unwrap();
        assert!(trace.final_gap() < trace.records[0].gap_rho, "{}", algo.name());
    }
}

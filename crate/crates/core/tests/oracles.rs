mod common;

use apg_core::diagnostics::bandit_hessian_eigs;
use apg_core::eval::{objective, performance_difference, policy_gradient, q_and_advantage, state_values, visitation};
use apg_core::experiments::{builtin_env, mdp5x5, random_mdp};
use apg_core::{optimal_solution, softmax_policy, Policy, PolicyParams};
use common::*;
use nalgebra::{DMatrix, DVector};

#[test]
fn values_match_power_series() {
    for seed in 0..10 {
        let mdp = random_mdp(seed, 3, 3, 0.9).unwrap();
        let theta = random_theta(seed + 100, 3, 3, 2.0);
        let v = state_values(&mdp, &softmax_policy(&PolicyParams::from_rows(&theta).unwrap())).unwrap();
        let oracle = values_series(&mdp, &policy_of(&theta));
        for (a, b) in v.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn visitation_matches_power_series() {
    for seed in 0..10 {
        let mdp = random_mdp(seed, 4, 3, 0.8).unwrap();
        let theta = random_theta(seed + 7, 4, 3, 1.0);
        let pi = softmax_policy(&PolicyParams::from_rows(&theta).unwrap());
        let d = visitation(&mdp, &pi, mdp.mu()).unwrap();
        let oracle = visitation_series(&mdp, &policy_of(&theta), &vec_of(mdp.mu()));
        for (a, b) in d.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn myopic_visitation_is_start_distribution() {
    let mdp = random_mdp(3, 4, 2, 0.0).unwrap();
    let pi = softmax_policy(&PolicyParams::zeros(4, 2));
    let d = visitation(&mdp, &pi, mdp.mu()).unwrap();
    assert!((d - mdp.mu()).amax() < 1e-15);
}

#[test]
fn bellman_residual_is_tiny() {
    for seed in 0..10 {
        let mdp = random_mdp(seed, 5, 4, 0.95).unwrap();
        let theta = PolicyParams::from_rows(&random_theta(seed, 5, 4, 3.0)).unwrap();
        let pi = softmax_policy(&theta);
        let v = state_values(&mdp, &pi).unwrap();
        let (q, _) = q_and_advantage(&mdp, &v);
        for s in 0..5 {
            let backup: f64 = (0..4).map(|a| pi.prob(s, a) * q[(s, a)]).sum();
            assert!((backup - v[s]).abs() < 1e-10);
        }
    }
}

#[test]
fn gradient_matches_central_differences() {
    let h = 1e-5;
    for seed in 0..20 {
        let (ns, na) = (1 + seed as usize % 4, 2 + seed as usize % 3);
        let mdp = random_mdp(seed, ns, na, 0.5 + 0.02 * seed as f64).unwrap();
        let rows = random_theta(seed + 1000, ns, na, 2.0);
        let g = policy_gradient(&mdp, &PolicyParams::from_rows(&rows).unwrap(), mdp.mu()).unwrap();
        let mu = vec_of(mdp.mu());
        for s in 0..ns {
            for a in 0..na {
                let mut plus = rows.clone();
                let mut minus = rows.clone();
                plus[s][a] += h;
                minus[s][a] -= h;
                let fd = (objective_series(&mdp, &plus, &mu) - objective_series(&mdp, &minus, &mu)) / (2.0 * h);
                let err = (fd - g[(s, a)]).abs();
                assert!(err <= (1e-6 * g[(s, a)].abs()).max(1e-9), "seed {seed} ({s},{a}): {fd} vs {}", g[(s, a)]);
            }
        }
    }
}

#[test]
fn performance_difference_against_series_values() {
    let mdp = mdp5x5();
    for seed in 0..10 {
        let t1 = random_theta(seed, 5, 5, 3.0);
        let t2 = random_theta(seed + 50, 5, 5, 3.0);
        let pi = softmax_policy(&PolicyParams::from_rows(&t1).unwrap());
        let pi2 = softmax_policy(&PolicyParams::from_rows(&t2).unwrap());
        let (lhs, rhs) = performance_difference(&mdp, &pi, &pi2, mdp.rho()).unwrap();
        let rho = vec_of(mdp.rho());
        let direct = objective_series(&mdp, &t1, &rho) - objective_series(&mdp, &t2, &rho);
        assert!((lhs - direct).abs() < 1e-9);
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn five_state_optimum_matches_exhaustive_search() {
    let mdp = mdp5x5();
    let opt = optimal_solution(&mdp, 1e-12).unwrap();
    let (actions, best) = brute_force_optimum(&mdp, &vec_of(mdp.rho()));
    assert_eq!(opt.a_star, actions);
    assert!((opt.value(mdp.rho()) - best).abs() < 1e-9);
    // Reported optimum of the five-state environment.
    assert!((opt.value(mdp.rho()) - 9.41).abs() < 0.05);
    assert!(opt.vi_delta < 1e-12);
    assert!(opt.bellman_residual < 1e-10);
    for s in 0..5 {
        assert!((opt.v_star[s] - opt.q_star[(s, opt.a_star[s])]).abs() < 1e-12);
    }
}

#[test]
fn optimum_of_random_mdps_matches_exhaustive_search() {
    for seed in 0..10 {
        let mdp = random_mdp(seed, 3, 3, 0.8).unwrap();
        let opt = optimal_solution(&mdp, 1e-12).unwrap();
        let (actions, best) = brute_force_optimum(&mdp, &vec_of(mdp.rho()));
        assert_eq!(opt.a_star, actions, "seed {seed}");
        assert!((opt.value(mdp.rho()) - best).abs() < 1e-9);
    }
}

#[test]
fn five_state_tables_are_normalized() {
    let mdp = mdp5x5();
    for s in 0..5 {
        for a in 0..5 {
            let sum: f64 = mdp.next_dist(s, a).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(mdp.gamma(), 0.9);
    assert_eq!(vec_of(mdp.rho()), vec![0.3, 0.2, 0.1, 0.15, 0.25]);
}

#[test]
fn bandit_objective_and_initial_policies() {
    let env = builtin_env("bandit3-uniform").unwrap();
    let f = objective(&env.mdp, &env.init_theta, env.mdp.rho()).unwrap();
    assert!((f - 1.99 / 3.0).abs() < 1e-15);
    let expected = [0.01588, 0.11731, 0.86681];
    let pi = softmax_policy(&builtin_env("bandit3-hard").unwrap().init_theta);
    for (a, e) in expected.iter().enumerate() {
        assert!((pi.prob(0, a) - e).abs() < 5e-6);
    }
}

#[test]
fn advantage_is_bounded_by_horizon() {
    for seed in 0..10 {
        let mdp = random_mdp(seed, 4, 3, 0.9).unwrap();
        let pi = softmax_policy(&PolicyParams::from_rows(&random_theta(seed, 4, 3, 4.0)).unwrap());
        let v = state_values(&mdp, &pi).unwrap();
        let (_, adv) = q_and_advantage(&mdp, &v);
        assert!(adv.amax() <= 1.0 / (1.0 - mdp.gamma()));
    }
}

#[test]
fn two_armed_advantage_at_uniform() {
    let env = builtin_env("bandit2").unwrap();
    let v = state_values(&env.mdp, &softmax_policy(&env.init_theta)).unwrap();
    let (q, adv) = q_and_advantage(&env.mdp, &v);
    assert_eq!(q.as_slice(), &[1.0, 0.0]);
    assert_eq!(adv.as_slice(), &[0.5, -0.5]);
}

#[test]
fn visitation_ratio_bound() {
    // V*(rho) - V(rho) <= 1/(1-gamma) ||d*_rho / mu||_inf (V*(mu) - V(mu))
    for seed in 0..10 {
        let mdp = random_mdp(seed, 4, 3, 0.85).unwrap();
        let opt = optimal_solution(&mdp, 1e-12).unwrap();
        let d_star = visitation(&mdp, &opt.policy(3), mdp.rho()).unwrap();
        let ratio = d_star.component_div(mdp.mu()).max();
        for k in 0..5 {
            let theta = PolicyParams::from_rows(&random_theta(seed * 10 + k, 4, 3, 3.0)).unwrap();
            let v = state_values(&mdp, &softmax_policy(&theta)).unwrap();
            let lhs = opt.value(mdp.rho()) - v.dot(mdp.rho());
            let rhs = ratio / (1.0 - mdp.gamma()) * (opt.value(mdp.mu()) - v.dot(mdp.mu()));
            assert!(lhs <= rhs + 1e-9, "seed {seed}: {lhs} > {rhs}");
        }
    }
}

#[test]
fn bandit_hessian_matches_finite_differences() {
    // Hessian of pi_theta(a*) for two arms at theta = (ln 3, 0), where pi(a*) = 3/4.
    let p = |t0: f64, t1: f64| softmax(&[t0, t1])[0];
    let (x, y, h) = (3f64.ln(), 0.0, 1e-4);
    let hxx = (p(x + h, y) - 2.0 * p(x, y) + p(x - h, y)) / (h * h);
    let hyy = (p(x, y + h) - 2.0 * p(x, y) + p(x, y - h)) / (h * h);
    let hxy = (p(x + h, y + h) - p(x + h, y - h) - p(x - h, y + h) + p(x - h, y - h)) / (4.0 * h * h);
    let tr = hxx + hyy;
    let det = hxx * hyy - hxy * hxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (e1, e2) = (tr / 2.0 - disc, tr / 2.0 + disc);
    let (l1, l2) = bandit_hessian_eigs(0.75).unwrap();
    assert!((e1 - l1).abs() < 1e-5, "{e1} vs {l1}");
    assert!((e2 - l2).abs() < 1e-5, "{e2} vs {l2}");
}

#[test]
fn deterministic_policy_values() {
    let mdp = mdp5x5();
    let pi = Policy::deterministic(&[0, 3, 4, 3, 4], 5);
    let v = state_values(&mdp, &pi).unwrap();
    let pi_rows: Vec<Vec<f64>> = pi.matrix().row_iter().map(|r| r.iter().copied().collect()).collect();
    let oracle = values_series(&mdp, &pi_rows);
    assert!((v - DVector::from_vec(oracle)).amax() < 1e-8);
    assert!(Policy::from_matrix(DMatrix::from_row_slice(1, 2, &[0.7, 0.2])).is_err());
}

//! Numerical self-checks of an environment.

use apg_core::optim::{apg_step, OptimizerState};
use apg_core::{objective, performance_difference, policy_gradient, softmax_policy, value_bundle};
use apg_core::{Mdp, PolicyParams, Result, StepSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, value: f64, tol: f64) -> Check {
    Check { name, pass: value < tol, detail: format!("{value:.3e} (tol {tol:.0e})") }
}

fn random_params(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> Result<PolicyParams> {
    let rows: Vec<Vec<f64>> = (0..ns).map(|_| (0..na).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    PolicyParams::from_rows(&rows)
}

/// Relative error of the analytic gradient against central differences.
fn gradient_error(mdp: &Mdp, theta: &PolicyParams) -> Result<f64> {
    let h = 1e-5;
    let g = policy_gradient(mdp, theta, mdp.mu())?;
    let rows = theta.to_rows();
    let mut diff = 0.0f64;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let mut plus = rows.clone();
            let mut minus = rows.clone();
            plus[s][a] += h;
            minus[s][a] -= h;
            let fd = (objective(mdp, &PolicyParams::from_rows(&plus)?, mdp.mu())?
                - objective(mdp, &PolicyParams::from_rows(&minus)?, mdp.mu())?)
                / (2.0 * h);
            diff = diff.max((fd - g[(s, a)]).abs());
        }
    }
    Ok(diff / g.amax().max(1e-12))
}

/// `max_s |V(s) - sum_a pi(a|s) (r(s,a) + gamma sum_s' P(s'|s,a) V(s'))|`.
fn bellman_residual(mdp: &Mdp, theta: &PolicyParams) -> Result<f64> {
    let pi = softmax_policy(theta);
    let v = value_bundle(mdp, &pi)?.v;
    let mut worst = 0.0f64;
    for s in 0..mdp.n_states() {
        let backup: f64 = (0..mdp.n_actions())
            .map(|a| {
                let next: f64 = mdp.next_dist(s, a).iter().enumerate().map(|(s2, p)| p * v[s2]).sum();
                pi.prob(s, a) * (mdp.reward()[(s, a)] + mdp.gamma() * next)
            })
            .sum();
        worst = worst.max((v[s] - backup).abs());
    }
    Ok(worst)
}

/// Runs the gradient, identity and conservation checks at the initial
/// parameters and at random ones.
pub fn run_checks(mdp: &Mdp, init: &PolicyParams, seed: u64) -> Result<Vec<Check>> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![init.clone()];
    for _ in 0..3 {
        points.push(random_params(&mut rng, ns, na)?);
    }

    let grad_tol = if mdp.is_bandit() { 1e-8 } else { 1e-6 };
    let mut grad = 0.0f64;
    let mut bellman = 0.0f64;
    let mut visitation = 0.0f64;
    for p in &points {
        grad = grad.max(gradient_error(mdp, p)?);
        bellman = bellman.max(bellman_residual(mdp, p)?);
        visitation = visitation.max((value_bundle(mdp, &softmax_policy(p))?.d_mu.sum() - 1.0).abs());
    }
    let mut pdl = 0.0f64;
    for pair in points.windows(2) {
        let (lhs, rhs) = performance_difference(mdp, &softmax_policy(&pair[0]), &softmax_policy(&pair[1]), mdp.mu())?;
        pdl = pdl.max((lhs - rhs).abs());
    }

    let schedule = StepSchedule::nearly_constant(mdp);
    let sums0 = points[1].row_sums();
    let mut state = OptimizerState::new(points[1].clone());
    for _ in 0..200 {
        state = apg_step(&state, mdp, &schedule)?.state;
    }
    let drift = state.theta.row_sums().iter().zip(&sums0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    Ok(vec![
        check("gradient", grad, grad_tol),
        check("performance-difference", pdl, 1e-10),
        check("bellman-residual", bellman, 1e-10),
        check("visitation-mass", visitation, 1e-12),
        check("row-sum-conservation", drift, 1e-10),
    ])
}

//! Exact policy evaluation by dense linear solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::Mdp;
use crate::policy::{softmax_rows, Policy, PolicyParams};

/// Value function, action values, advantage and visitation distribution of one policy.
#[derive(Clone, Debug)]
pub struct ValueBundle {
    pub v: DVector<f64>,
    pub q: DMatrix<f64>,
    pub adv: DMatrix<f64>,
    pub d_mu: DVector<f64>,
}

/// State transition matrix under `pi`: `P_pi[(s, s2)] = sum_a pi(a|s) P(s2|s,a)`.
pub fn policy_transition(mdp: &Mdp, pi: &DMatrix<f64>) -> DMatrix<f64> {
    let n = mdp.n_states();
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let w = pi[(s, a)];
            for (s2, &prob) in mdp.next_dist(s, a).iter().enumerate() {
                p[(s, s2)] += w * prob;
            }
        }
    }
    p
}

fn policy_reward(mdp: &Mdp, pi: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(mdp.n_states(), |s, _| pi.row(s).dot(&mdp.reward().row(s)))
}

/// Solves `(I - gamma P_pi) V = r_pi`.
pub fn state_values(mdp: &Mdp, policy: &Policy) -> Result<DVector<f64>> {
    values_of(mdp, policy.matrix())
}

pub(crate) fn values_of(mdp: &Mdp, pi: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = mdp.n_states();
    let p = policy_transition(mdp, pi);
    let system = DMatrix::identity(n, n) - p * mdp.gamma();
    let v = system
        .lu()
        .solve(&policy_reward(mdp, pi))
        .ok_or(Error::Singular("state values"))?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("state values"));
    }
    Ok(v)
}

/// Values of the softmax policy of a raw logit matrix.
pub(crate) fn values_at(mdp: &Mdp, theta: &DMatrix<f64>) -> Result<DVector<f64>> {
    values_of(mdp, &softmax_rows(theta))
}

/// `Q(s,a) = r(s,a) + gamma sum_s2 P(s2|s,a) V(s2)` and `A = Q - V`.
pub fn q_and_advantage(mdp: &Mdp, v: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let q = DMatrix::from_fn(ns, na, |s, a| {
        let next: f64 = mdp.next_dist(s, a).iter().zip(v.iter()).map(|(p, x)| p * x).sum();
        mdp.reward()[(s, a)] + mdp.gamma() * next
    });
    let adv = DMatrix::from_fn(ns, na, |s, a| q[(s, a)] - v[s]);
    (q, adv)
}

/// Discounted state visitation `d = (1 - gamma) start + gamma P_pi^T d`.
pub fn visitation(mdp: &Mdp, policy: &Policy, start: &DVector<f64>) -> Result<DVector<f64>> {
    visitation_of(mdp, policy.matrix(), start)
}

pub(crate) fn visitation_of(mdp: &Mdp, pi: &DMatrix<f64>, start: &DVector<f64>) -> Result<DVector<f64>> {
    let n = mdp.n_states();
    if start.len() != n {
        return Err(Error::Dimension { what: "start distribution", expected: n, got: start.len() });
    }
    let g = mdp.gamma();
    let system = DMatrix::identity(n, n) - policy_transition(mdp, pi).transpose() * g;
    let d = system
        .lu()
        .solve(&(start * (1.0 - g)))
        .ok_or(Error::Singular("visitation distribution"))?;
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("visitation distribution"));
    }
    Ok(d)
}

/// Everything about a policy under the optimizer's start distribution `mu`.
pub fn value_bundle(mdp: &Mdp, policy: &Policy) -> Result<ValueBundle> {
    let v = state_values(mdp, policy)?;
    let (q, adv) = q_and_advantage(mdp, &v);
    let d_mu = visitation(mdp, policy, mdp.mu())?;
    Ok(ValueBundle { v, q, adv, d_mu })
}

/// `V^{pi_theta}(dist) = sum_s dist(s) V(s)`.
pub fn objective(mdp: &Mdp, theta: &PolicyParams, dist: &DVector<f64>) -> Result<f64> {
    Ok(values_at(mdp, theta.matrix())?.dot(dist))
}

/// Exact softmax policy gradient of `V^{pi_theta}(mu)`:
/// `grad[s, a] = d_mu(s) pi(a|s) A(s, a) / (1 - gamma)`.
pub fn policy_gradient(mdp: &Mdp, theta: &PolicyParams, mu: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(gradient_at(mdp, theta.matrix(), mu)?.grad)
}

pub(crate) struct GradientEval {
    pub grad: DMatrix<f64>,
    pub v: DVector<f64>,
    pub d: DVector<f64>,
    pub pi: DMatrix<f64>,
}

pub(crate) fn gradient_at(mdp: &Mdp, theta: &DMatrix<f64>, mu: &DVector<f64>) -> Result<GradientEval> {
    let pi = softmax_rows(theta);
    let v = values_of(mdp, &pi)?;
    let (_, adv) = q_and_advantage(mdp, &v);
    let d = visitation_of(mdp, &pi, mu)?;
    let scale = 1.0 / (1.0 - mdp.gamma());
    let grad = DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
        scale * d[s] * pi[(s, a)] * adv[(s, a)]
    });
    Ok(GradientEval { grad, v, d, pi })
}

/// Both sides of the performance difference identity
/// `V^pi(dist) - V^pi'(dist) = 1/(1-gamma) sum_s d^pi_dist(s) sum_a pi(a|s) A^pi'(s,a)`.
pub fn performance_difference(
    mdp: &Mdp,
    pi: &Policy,
    pi_prime: &Policy,
    dist: &DVector<f64>,
) -> Result<(f64, f64)> {
    let v = state_values(mdp, pi)?;
    let v_prime = state_values(mdp, pi_prime)?;
    let lhs = v.dot(dist) - v_prime.dot(dist);
    let (_, adv_prime) = q_and_advantage(mdp, &v_prime);
    let d = visitation(mdp, pi, dist)?;
    let inner: f64 = (0..mdp.n_states())
        .map(|s| d[s] * pi.matrix().row(s).dot(&adv_prime.row(s)))
        .sum();
    Ok((lhs, inner / (1.0 - mdp.gamma())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::softmax_policy;

    fn bandit(rewards: &[f64]) -> Mdp {
        let na = rewards.len();
        Mdp::new(&vec![vec![vec![1.0]]; na], &[rewards.to_vec()], 0.0, vec![1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn myopic_values_are_expected_rewards() {
        let mdp = bandit(&[1.0, 0.0]);
        let theta = PolicyParams::zeros(1, 2);
        let pi = softmax_policy(&theta);
        let v = state_values(&mdp, &pi).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
        let (q, adv) = q_and_advantage(&mdp, &v);
        assert_eq!(q[(0, 0)], 1.0);
        assert!((adv[(0, 0)] - 0.5).abs() < 1e-15 && (adv[(0, 1)] + 0.5).abs() < 1e-15);
        let d = visitation(&mdp, &pi, mdp.mu()).unwrap();
        assert_eq!(d[0], 1.0);
    }

    #[test]
    fn bandit_gradient_at_uniform() {
        let mdp = bandit(&[1.0, 0.0]);
        let g = policy_gradient(&mdp, &PolicyParams::zeros(1, 2), mdp.mu()).unwrap();
        assert!((g[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((g[(0, 1)] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn three_arm_objective() {
        let mdp = bandit(&[1.0, 0.99, 0.0]);
        let f = objective(&mdp, &PolicyParams::zeros(1, 3), mdp.rho()).unwrap();
        assert!((f - 1.99 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn near_deterministic_optimum_has_vanishing_gradient() {
        let mdp = bandit(&[1.0, 0.0]);
        let theta = PolicyParams::from_rows(&[vec![40.0, 0.0]]).unwrap();
        let g = policy_gradient(&mdp, &theta, mdp.mu()).unwrap();
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn performance_difference_in_bandit_is_reward_difference() {
        let mdp = bandit(&[0.2, 0.9, 0.4]);
        let pi = Policy::from_matrix(DMatrix::from_row_slice(1, 3, &[0.5, 0.25, 0.25])).unwrap();
        let pi2 = Policy::from_matrix(DMatrix::from_row_slice(1, 3, &[0.1, 0.1, 0.8])).unwrap();
        let (lhs, rhs) = performance_difference(&mdp, &pi, &pi2, mdp.rho()).unwrap();
        let exact = (0.5 * 0.2 + 0.25 * 0.9 + 0.25 * 0.4) - (0.1 * 0.2 + 0.1 * 0.9 + 0.8 * 0.4);
        assert!((lhs - exact).abs() < 1e-15);
        assert!((rhs - exact).abs() < 1e-15);
        let (l0, r0) = performance_difference(&mdp, &pi, &pi, mdp.rho()).unwrap();
        assert_eq!((l0, r0.abs() < 1e-16), (0.0, true));
    }
}

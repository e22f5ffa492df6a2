use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{q_and_advantage, values_of};
use crate::mdp::Mdp;
use crate::policy::Policy;

/// Q* gaps at or below this are reported as ties.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct OptimalSolution {
    pub v_star: DVector<f64>,
    pub q_star: DMatrix<f64>,
    /// Unique optimal action per state.
    pub a_star: Vec<usize>,
    /// Second-best optimal action value `Q*(s, a_2(s))`.
    pub a2_q: Vec<f64>,
    /// Value-iteration sweeps performed.
    pub sweeps: usize,
    /// `||V_k - V_{k-1}||_inf` at the last value-iteration sweep.
    pub vi_delta: f64,
    /// `max_s |max_a Q*(s,a) - V*(s)|` of the returned solution.
    pub bellman_residual: f64,
}

impl OptimalSolution {
    pub fn value(&self, dist: &DVector<f64>) -> f64 {
        self.v_star.dot(dist)
    }

    pub fn policy(&self, n_actions: usize) -> Policy {
        Policy::deterministic(&self.a_star, n_actions)
    }
}

/// Value iteration until successive iterates differ by less than `tol` in the
/// sup norm, followed by exact evaluation (and, if needed, improvement) of the
/// greedy policy so that `V*` is accurate to solver precision.
pub fn optimal_solution(mdp: &Mdp, tol: f64) -> Result<OptimalSolution> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("value iteration tolerance must be positive, got {tol}")));
    }
    let n = mdp.n_states();
    let mut v = DVector::zeros(n);
    let mut sweeps = 0;
    let vi_delta = loop {
        let (q, _) = q_and_advantage(mdp, &v);
        let next = DVector::from_fn(n, |s, _| q.row(s).max());
        sweeps += 1;
        let delta = (&next - &v).amax();
        v = next;
        if delta < tol {
            break delta;
        }
        if sweeps > 10_000_000 {
            return Err(Error::Config("value iteration did not converge".into()));
        }
    };

    // Policy iteration polish from the greedy policy.
    let mut actions = greedy(mdp, &v);
    for _ in 0..1000 {
        let pi = Policy::deterministic(&actions, mdp.n_actions());
        let v_exact = values_of(mdp, pi.matrix())?;
        let improved = improve(mdp, &v_exact, &actions);
        v = v_exact;
        if improved == actions {
            break;
        }
        actions = improved;
    }

    let (q_star, _) = q_and_advantage(mdp, &v);
    let mut a_star = Vec::with_capacity(n);
    let mut a2_q = Vec::with_capacity(n);
    let mut bellman_residual: f64 = 0.0;
    for s in 0..n {
        let mut order: Vec<usize> = (0..mdp.n_actions()).collect();
        order.sort_by(|&a, &b| q_star[(s, b)].total_cmp(&q_star[(s, a)]));
        let gap = q_star[(s, order[0])] - q_star[(s, order[1])];
        if gap <= TIE_TOL {
            return Err(Error::TiedOptimalActions { state: s, gap });
        }
        a_star.push(order[0]);
        a2_q.push(q_star[(s, order[1])]);
        bellman_residual = bellman_residual.max((q_star[(s, order[0])] - v[s]).abs());
    }
    Ok(OptimalSolution { v_star: v, q_star, a_star, a2_q, sweeps, vi_delta, bellman_residual })
}

fn greedy(mdp: &Mdp, v: &DVector<f64>) -> Vec<usize> {
    let (q, _) = q_and_advantage(mdp, v);
    (0..mdp.n_states()).map(|s| q.row(s).transpose().argmax().0).collect()
}

/// Switches action only on strict improvement, so policy iteration terminates.
fn improve(mdp: &Mdp, v: &DVector<f64>, current: &[usize]) -> Vec<usize> {
    let (q, _) = q_and_advantage(mdp, v);
    (0..mdp.n_states())
        .map(|s| {
            let (best, qmax) = q.row(s).transpose().argmax();
            if qmax > q[(s, current[s])] + 1e-13 { best } else { current[s] }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandit_optimum() {
        let mdp = Mdp::new(&vec![vec![vec![1.0]]; 3], &[vec![1.0, 0.99, 0.0]], 0.0, vec![1.0], vec![1.0]).unwrap();
        let opt = optimal_solution(&mdp, 1e-12).unwrap();
        assert_eq!(opt.a_star, vec![0]);
        assert_eq!(opt.v_star[0], 1.0);
        assert_eq!(opt.a2_q, vec![0.99]);
    }

    #[test]
    fn ties_are_reported() {
        let mdp = Mdp::new(&vec![vec![vec![1.0]]; 2], &[vec![0.5, 0.5]], 0.0, vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(optimal_solution(&mdp, 1e-12), Err(Error::TiedOptimalActions { state: 0, .. })));
    }

    #[test]
    fn rejects_bad_tolerance() {
        let mdp = Mdp::new(&vec![vec![vec![1.0]]; 2], &[vec![1.0, 0.5]], 0.0, vec![1.0], vec![1.0]).unwrap();
        assert!(optimal_solution(&mdp, 0.0).is_err());
    }
}

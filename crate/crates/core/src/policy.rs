//! Tabular softmax parameterization.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Softmax logits, one per (state, action). Entries are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams(DMatrix<f64>);

/// A stochastic policy `pi[(s, a)] = pi(a | s)`; rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy(DMatrix<f64>);

impl PolicyParams {
    pub fn new(theta: DMatrix<f64>) -> Result<Self> {
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("policy parameters"));
        }
        Ok(PolicyParams(theta))
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        PolicyParams(DMatrix::zeros(n_states, n_actions))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_actions) {
            return Err(Error::Dimension { what: "parameter row", expected: n_actions, got: bad.len() });
        }
        Self::new(DMatrix::from_fn(n_states, n_actions, |s, a| rows[s][a]))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    /// Per-state row sums, conserved by zero-sum gradient updates.
    pub fn row_sums(&self) -> Vec<f64> {
        self.0.row_iter().map(|r| r.sum()).collect()
    }

    /// `min_s min_{a != a*(s)} theta[s, a*(s)] - theta[s, a]`.
    pub fn min_gap(&self, a_star: &[usize]) -> f64 {
        min_action_gap(&self.0, a_star)
    }
}

impl Serialize for PolicyParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PolicyParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        PolicyParams::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

impl Policy {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Wraps an explicit row-stochastic matrix (e.g. a deterministic policy).
    pub fn from_matrix(pi: DMatrix<f64>) -> Result<Self> {
        for (s, row) in pi.row_iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) || (row.sum() - 1.0).abs() > 1e-12 {
                return Err(Error::Distribution { name: "policy row", reason: format!("state {s}") });
            }
        }
        Ok(Policy(pi))
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        Policy(DMatrix::from_fn(actions.len(), n_actions, |s, a| f64::from(u8::from(actions[s] == a))))
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.0[(s, a)]
    }
}

/// `pi(a | s) = exp(theta[s, a]) / sum_b exp(theta[s, b])`, computed with the
/// per-row maximum subtracted.
pub fn softmax_policy(theta: &PolicyParams) -> Policy {
    Policy(softmax_rows(theta.matrix()))
}

pub(crate) fn softmax_rows(theta: &DMatrix<f64>) -> DMatrix<f64> {
    let mut pi = theta.clone();
    for mut row in pi.row_iter_mut() {
        let max = row.max();
        row.iter_mut().for_each(|x| *x = (*x - max).exp());
        let total = row.sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
    pi
}

pub(crate) fn min_action_gap(m: &DMatrix<f64>, a_star: &[usize]) -> f64 {
    let mut gap = f64::INFINITY;
    for (s, &best) in a_star.iter().enumerate() {
        for a in (0..m.ncols()).filter(|&a| a != best) {
            gap = gap.min(m[(s, best)] - m[(s, a)]);
        }
    }
    gap
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Vec<f64> {
        let p = PolicyParams::from_rows(&[v.to_vec()]).unwrap();
        softmax_policy(&p).matrix().iter().copied().collect()
    }

    #[test]
    fn zero_logits_are_uniform() {
        for p in row(&[0.0, 0.0, 0.0]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hard_bandit_initializations() {
        let expected = [0.01588, 0.11731, 0.86681];
        for (p, e) in row(&[1.0, 3.0, 5.0]).iter().zip(expected) {
            assert!((p - e).abs() < 5e-6, "{p} vs {e}");
        }
        let expected = [0.00005, 0.00091, 0.99904];
        for (p, e) in row(&[0.0, 3.0, 10.0]).iter().zip(expected) {
            assert!((p - e).abs() < 5e-6, "{p} vs {e}");
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let p = row(&[1000.0, 0.0, -1000.0]);
        assert_eq!(p[0], 1.0);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(PolicyParams::from_rows(&[vec![0.0, f64::NAN]]).is_err());
        assert!(PolicyParams::from_rows(&[vec![f64::INFINITY, 0.0]]).is_err());
        assert!(PolicyParams::from_rows(&[vec![0.0, 1.0], vec![0.0]]).is_err());
    }
}

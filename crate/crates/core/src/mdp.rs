//! Finite discounted MDPs and their on-disk description.
//!
//! The JSON document accepted by [`load_mdp`] has the keys
//!
//! | key         | shape                    | meaning                                   |
//! |-------------|--------------------------|-------------------------------------------|
//! | `n_states`  | integer ≥ 1              | \|S\|                                      |
//! | `n_actions` | integer ≥ 2              | \|A\|                                      |
//! | `gamma`     | number in [0, 1)         | discount factor                           |
//! | `rho`       | `[n_states]`             | evaluation start distribution             |
//! | `mu`        | `[n_states]`, optional   | start distribution used by the optimizer  |
//! | `mu_seed`   | integer, optional        | seed for sampling `mu` when it is absent  |
//! | `reward`    | `[n_states][n_actions]`  | `reward[s][a] = r(s, a)`                  |
//! | `transition`| `[n_actions][n_states][n_states]` | `transition[a][s][s2] = P(s2 \| s, a)` |
//!
//! When `mu` is absent it is drawn from the symmetric Dirichlet(1, ..., 1)
//! distribution with `mu_seed` (default 0).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// A finite MDP with rewards in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major `(s * n_actions + a) * n_states + s2`.
    transition: Vec<f64>,
    reward: DMatrix<f64>,
    gamma: f64,
    rho: DVector<f64>,
    mu: DVector<f64>,
}

/// Serialized form of an [`Mdp`]; see the module docs for the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub rho: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_seed: Option<u64>,
    pub reward: Vec<Vec<f64>>,
    pub transition: Vec<Vec<Vec<f64>>>,
}

impl Mdp {
    /// Builds and validates an MDP. `transition` is indexed `[a][s][s2]`.
    pub fn new(
        transition: &[Vec<Vec<f64>>],
        reward: &[Vec<f64>],
        gamma: f64,
        rho: Vec<f64>,
        mu: Vec<f64>,
    ) -> Result<Self> {
        let n_states = rho.len();
        let n_actions = transition.len();
        if n_states == 0 {
            return Err(Error::Config("n_states must be at least 1".into()));
        }
        if n_actions < 2 {
            return Err(Error::Config("n_actions must be at least 2".into()));
        }
        check_len("reward rows", n_states, reward.len())?;
        let mut r = DMatrix::zeros(n_states, n_actions);
        for (s, row) in reward.iter().enumerate() {
            check_len("reward columns", n_actions, row.len())?;
            for (a, &v) in row.iter().enumerate() {
                r[(s, a)] = v;
            }
        }
        let mut flat = vec![0.0; n_states * n_actions * n_states];
        for (a, per_action) in transition.iter().enumerate() {
            check_len("transition states", n_states, per_action.len())?;
            for (s, next) in per_action.iter().enumerate() {
                check_len("transition next states", n_states, next.len())?;
                let base = (s * n_actions + a) * n_states;
                flat[base..base + n_states].copy_from_slice(next);
            }
        }
        Self::from_flat(n_states, n_actions, flat, r, gamma, rho, mu)
    }

    pub(crate) fn from_flat(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: DMatrix<f64>,
        gamma: f64,
        rho: Vec<f64>,
        mu: Vec<f64>,
    ) -> Result<Self> {
        check_len("mu", n_states, mu.len())?;
        check_len("rho", n_states, rho.len())?;
        let mdp = Mdp {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            rho: DVector::from_vec(rho),
            mu: DVector::from_vec(mu),
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && (0.0..1.0).contains(&self.gamma)) {
            return Err(Error::Discount(self.gamma));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let r = self.reward[(s, a)];
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::RewardOutOfRange { state: s, action: a, value: r });
                }
                let row = self.next_dist(s, a);
                if let Some((next, &value)) =
                    row.iter().enumerate().find(|(_, p)| !(**p >= 0.0 && p.is_finite()))
                {
                    return Err(Error::NegativeTransition { state: s, action: a, next, value });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > SUM_TOL {
                    return Err(Error::TransitionNotNormalized { state: s, action: a, sum });
                }
            }
        }
        check_distribution("rho", self.rho.as_slice())?;
        check_distribution("mu", self.mu.as_slice())?;
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward(&self) -> &DMatrix<f64> {
        &self.reward
    }

    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// `P(s2 | s, a)`.
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    /// Next-state distribution `P(. | s, a)`.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    /// One-state MDPs with `gamma = 0` are multi-armed bandits.
    pub fn is_bandit(&self) -> bool {
        self.n_states == 1 && self.gamma == 0.0
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut m = self.clone();
        m.gamma = gamma;
        m.validate()?;
        Ok(m)
    }

    pub fn with_mu(&self, mu: Vec<f64>) -> Result<Self> {
        check_len("mu", self.n_states, mu.len())?;
        let mut m = self.clone();
        m.mu = DVector::from_vec(mu);
        m.validate()?;
        Ok(m)
    }

    /// Full description with `mu` written out explicitly.
    pub fn to_spec(&self) -> MdpSpec {
        let (ns, na) = (self.n_states, self.n_actions);
        MdpSpec {
            n_states: ns,
            n_actions: na,
            gamma: self.gamma,
            rho: self.rho.iter().copied().collect(),
            mu: Some(self.mu.iter().copied().collect()),
            mu_seed: None,
            reward: (0..ns)
                .map(|s| (0..na).map(|a| self.reward[(s, a)]).collect())
                .collect(),
            transition: (0..na)
                .map(|a| (0..ns).map(|s| self.next_dist(s, a).to_vec()).collect())
                .collect(),
        }
    }

    /// SHA-256 of the canonical JSON description.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.to_spec()).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

impl MdpSpec {
    pub fn build(&self) -> Result<Mdp> {
        check_len("rho", self.n_states, self.rho.len())?;
        check_len("reward rows", self.n_states, self.reward.len())?;
        check_len("transition actions", self.n_actions, self.transition.len())?;
        let mu = match &self.mu {
            Some(mu) => mu.clone(),
            None => dirichlet_uniform(self.n_states, self.mu_seed.unwrap_or(0)),
        };
        Mdp::new(&self.transition, &self.reward, self.gamma, self.rho.clone(), mu)
    }
}

/// Parses and validates an MDP document.
pub fn load_mdp(json: &str) -> Result<Mdp> {
    let spec: MdpSpec = serde_json::from_str(json)?;
    spec.build()
}

pub fn load_mdp_file(path: &std::path::Path) -> Result<Mdp> {
    load_mdp(&std::fs::read_to_string(path)?)
}

/// A draw from the symmetric Dirichlet(1, ..., 1) distribution, i.e. uniform on
/// the probability simplex.
pub fn dirichlet_uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_simplex(&mut rng, n)
}

pub(crate) fn sample_simplex<R: rand::Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { what, expected, got });
    }
    Ok(())
}

fn check_distribution(name: &'static str, v: &[f64]) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
        return Err(Error::Distribution { name, reason: format!("entry {x} is negative or non-finite") });
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::Distribution { name, reason: format!("sums to {sum}") });
    }
    Ok(())
}

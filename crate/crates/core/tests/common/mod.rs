//! Reference computations that avoid the library's linear solves.
#![allow(dead_code)]

use apg_core::Mdp;

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn policy_of(theta: &[Vec<f64>]) -> Vec<Vec<f64>> {
    theta.iter().map(|r| softmax(r)).collect()
}

fn p_pi(mdp: &Mdp, pi: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = mdp.n_states();
    (0..n)
        .map(|s| {
            (0..n)
                .map(|s2| (0..mdp.n_actions()).map(|a| pi[s][a] * mdp.p(s, a, s2)).sum())
                .collect()
        })
        .collect()
}

fn horizon(gamma: f64, eps: f64) -> usize {
    if gamma == 0.0 {
        1
    } else {
        (eps.ln() / gamma.ln()).ceil() as usize + 1
    }
}

/// `sum_{t <= T} gamma^t (P_pi)^t r_pi`.
pub fn values_series(mdp: &Mdp, pi: &[Vec<f64>]) -> Vec<f64> {
    let n = mdp.n_states();
    let p = p_pi(mdp, pi);
    let r: Vec<f64> =
        (0..n).map(|s| (0..mdp.n_actions()).map(|a| pi[s][a] * mdp.reward()[(s, a)]).sum()).collect();
    let mut term = r.clone();
    let mut v = r;
    for _ in 0..horizon(mdp.gamma(), 1e-13) {
        term = (0..n).map(|s| mdp.gamma() * (0..n).map(|j| p[s][j] * term[j]).sum::<f64>()).collect();
        v.iter_mut().zip(&term).for_each(|(x, y)| *x += y);
    }
    v
}

/// `(1 - gamma) sum_{t <= T} gamma^t start^T (P_pi)^t`.
pub fn visitation_series(mdp: &Mdp, pi: &[Vec<f64>], start: &[f64]) -> Vec<f64> {
    let n = mdp.n_states();
    let p = p_pi(mdp, pi);
    let g = mdp.gamma();
    let mut row = start.to_vec();
    let mut d: Vec<f64> = start.iter().map(|x| x * (1.0 - g)).collect();
    let mut w = 1.0 - g;
    for _ in 0..horizon(g, 1e-13) {
        row = (0..n).map(|j| (0..n).map(|s| row[s] * p[s][j]).sum()).collect();
        w *= g;
        d.iter_mut().zip(&row).for_each(|(x, y)| *x += w * y);
    }
    d
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn objective_series(mdp: &Mdp, theta: &[Vec<f64>], dist: &[f64]) -> f64 {
    dot(&values_series(mdp, &policy_of(theta)), dist)
}

/// Best deterministic policy by exhaustive enumeration, scored on `dist`.
pub fn brute_force_optimum(mdp: &Mdp, dist: &[f64]) -> (Vec<usize>, f64) {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut best = (vec![], f64::NEG_INFINITY);
    for code in 0..na.pow(ns as u32) {
        let actions: Vec<usize> = (0..ns).map(|s| code / na.pow(s as u32) % na).collect();
        let pi: Vec<Vec<f64>> =
            actions.iter().map(|&a| (0..na).map(|b| if a == b { 1.0 } else { 0.0 }).collect()).collect();
        let v = dot(&values_series(mdp, &pi), dist);
        if v > best.1 {
            best = (actions, v);
        }
    }
    best
}

pub fn random_theta(seed: u64, ns: usize, na: usize, scale: f64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..ns).map(|_| (0..na).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn vec_of(v: &nalgebra::DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

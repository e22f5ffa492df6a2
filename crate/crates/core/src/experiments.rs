//! Built-in environments and experiment drivers.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostics::{
    condition_onset, default_k_grid, diagnose_records, last_decade, loglog_slope, near_concavity_violation,
    normalize_rows, TraceDiagnosis,
};
use crate::error::{Error, Result};
use crate::mdp::{sample_simplex, Mdp};
use crate::optim::Algorithm;
use crate::optimal::optimal_solution;
use crate::policy::PolicyParams;
use crate::run::{run, run_observed, LogSpacing, RunConfig, OPTIMUM_TOL};
use crate::schedule::StepSchedule;
use crate::trace::{write_run, RunManifest, RunSummary, RunTrace, MANIFEST_VERSION};

pub const PRESETS: [&str; 6] =
    ["mdp5x5-uniform", "mdp5x5-hard", "bandit3-uniform", "bandit3-hard", "bandit3-nonmonotone", "bandit2"];

/// Discount of the five-state environment.
pub const MDP5X5_GAMMA: f64 = 0.9;

const MDP5X5_RHO: [f64; 5] = [0.3, 0.2, 0.1, 0.15, 0.25];

const MDP5X5_REWARD: [[f64; 5]; 5] = [
    [1.0, 0.8, 0.6, 0.7, 0.4],
    [0.5, 0.3, 0.1, 1.0, 0.6],
    [0.6, 0.9, 0.8, 0.7, 1.0],
    [0.1, 0.2, 0.6, 0.7, 0.4],
    [0.8, 0.4, 0.6, 0.2, 0.9],
];

/// `MDP5X5_TRANSITION[s][s2][a] = P(s2 | s, a)`: one table per current state,
/// rows are next states and columns are actions.
const MDP5X5_TRANSITION: [[[f64; 5]; 5]; 5] = [
    [
        [0.1, 0.6, 0.5, 0.4, 0.2],
        [0.5, 0.1, 0.1, 0.3, 0.1],
        [0.1, 0.1, 0.1, 0.1, 0.1],
        [0.2, 0.1, 0.2, 0.1, 0.1],
        [0.1, 0.1, 0.1, 0.1, 0.5],
    ],
    [
        [0.1, 0.4, 0.1, 0.4, 0.2],
        [0.5, 0.1, 0.4, 0.1, 0.2],
        [0.2, 0.2, 0.3, 0.1, 0.2],
        [0.1, 0.2, 0.1, 0.1, 0.2],
        [0.1, 0.1, 0.1, 0.3, 0.2],
    ],
    [
        [0.6, 0.2, 0.3, 0.1, 0.2],
        [0.1, 0.4, 0.3, 0.4, 0.1],
        [0.1, 0.1, 0.2, 0.3, 0.1],
        [0.1, 0.2, 0.1, 0.1, 0.1],
        [0.1, 0.1, 0.1, 0.1, 0.5],
    ],
    [
        [0.6, 0.1, 0.2, 0.4, 0.5],
        [0.1, 0.5, 0.1, 0.3, 0.1],
        [0.1, 0.1, 0.1, 0.1, 0.1],
        [0.1, 0.2, 0.1, 0.1, 0.2],
        [0.1, 0.1, 0.5, 0.1, 0.1],
    ],
    [
        [0.2, 0.4, 0.4, 0.1, 0.2],
        [0.2, 0.1, 0.1, 0.4, 0.5],
        [0.2, 0.2, 0.1, 0.2, 0.1],
        [0.2, 0.2, 0.3, 0.1, 0.1],
        [0.2, 0.1, 0.1, 0.2, 0.1],
    ],
];

const MDP5X5_HARD_THETA: [[f64; 5]; 5] = [
    [1.0, 2.0, 3.0, 4.0, 5.0],
    [3.0, 4.0, 5.0, 1.0, 2.0],
    [5.0, 2.0, 3.0, 4.0, 1.0],
    [5.0, 4.0, 2.0, 1.0, 3.0],
    [2.0, 4.0, 3.0, 5.0, 1.0],
];

#[derive(Clone, Debug)]
pub struct EnvPreset {
    pub name: &'static str,
    pub mdp: Mdp,
    pub init_theta: PolicyParams,
    pub recommended_iters: u64,
}

/// The five-state, five-action environment. The optimizer distribution `mu`
/// equals `rho`.
pub fn mdp5x5() -> Mdp {
    let transition: Vec<Vec<Vec<f64>>> = (0..5)
        .map(|a| (0..5).map(|s| (0..5).map(|s2| MDP5X5_TRANSITION[s][s2][a]).collect()).collect())
        .collect();
    let reward: Vec<Vec<f64>> = MDP5X5_REWARD.iter().map(|r| r.to_vec()).collect();
    Mdp::new(&transition, &reward, MDP5X5_GAMMA, MDP5X5_RHO.to_vec(), MDP5X5_RHO.to_vec())
        .expect("built-in tables are valid")
}

/// A multi-armed bandit as a one-state MDP with `gamma = 0`.
pub fn bandit(rewards: &[f64]) -> Result<Mdp> {
    Mdp::new(&vec![vec![vec![1.0]]; rewards.len()], &[rewards.to_vec()], 0.0, vec![1.0], vec![1.0])
}

pub fn builtin_env(name: &str) -> Result<EnvPreset> {
    let row = |v: &[f64]| PolicyParams::from_rows(&[v.to_vec()]);
    let (name, mdp, init_theta, recommended_iters) = match name {
        "mdp5x5-uniform" => ("mdp5x5-uniform", mdp5x5(), PolicyParams::zeros(5, 5), 100_000),
        "mdp5x5-hard" => {
            let rows: Vec<Vec<f64>> = MDP5X5_HARD_THETA.iter().map(|r| r.to_vec()).collect();
            ("mdp5x5-hard", mdp5x5(), PolicyParams::from_rows(&rows)?, 100_000)
        }
        "bandit3-uniform" => ("bandit3-uniform", bandit(&[1.0, 0.99, 0.0])?, PolicyParams::zeros(1, 3), 10_000),
        "bandit3-hard" => ("bandit3-hard", bandit(&[1.0, 0.99, 0.0])?, row(&[1.0, 3.0, 5.0])?, 10_000),
        "bandit3-nonmonotone" => {
            ("bandit3-nonmonotone", bandit(&[1.0, 0.8, 0.0])?, row(&[0.0, 3.0, 10.0])?, 10_000)
        }
        "bandit2" => ("bandit2", bandit(&[1.0, 0.0])?, PolicyParams::zeros(1, 2), 10_000),
        other => {
            return Err(Error::UnknownName { kind: "environment", name: other.to_string(), valid: PRESETS.join(", ") })
        }
    };
    Ok(EnvPreset { name, mdp, init_theta, recommended_iters })
}

/// Random MDP: Dirichlet(1) next-state distributions, rewards uniform on
/// [0, 1), uniform `rho`, and `mu` drawn from Dirichlet(1).
pub fn random_mdp(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> Result<Mdp> {
    if n_states == 0 || n_actions < 2 {
        return Err(Error::Config(format!(
            "random MDP needs at least 1 state and 2 actions, got {n_states} x {n_actions}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transition: Vec<Vec<Vec<f64>>> = (0..n_actions)
        .map(|_| (0..n_states).map(|_| sample_simplex(&mut rng, n_states)).collect())
        .collect();
    let reward: Vec<Vec<f64>> =
        (0..n_states).map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect()).collect();
    let mu = sample_simplex(&mut rng, n_states);
    Mdp::new(&transition, &reward, gamma, vec![1.0 / n_states as f64; n_states], mu)
}

/// Runs `cfg` on an environment and assembles the reproducibility sidecar.
pub fn execute(env: &str, mdp: &Mdp, init_theta: &PolicyParams, cfg: &RunConfig) -> Result<(RunTrace, RunManifest)> {
    let trace = run(mdp, init_theta, cfg)?;
    let opt = optimal_solution(mdp, OPTIMUM_TOL)?;
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        env: env.to_string(),
        env_sha256: mdp.fingerprint(),
        mdp: mdp.to_spec(),
        init_theta: init_theta.clone(),
        algorithm: cfg.algorithm,
        schedule: cfg.schedule.clone(),
        n_iters: cfg.n_iters,
        seed: cfg.seed,
        log: cfg.log,
        condition_m: cfg.condition_threshold(mdp)?,
        v_star_rho: opt.value(mdp.rho()),
        summary: RunSummary::of(&trace),
    };
    Ok((trace, manifest))
}

/// [`execute`] on a preset, writing the CSV trace and JSON sidecar to `out_path`.
pub fn run_experiment(
    preset: &EnvPreset,
    algorithm: Algorithm,
    schedule: StepSchedule,
    n_iters: u64,
    seed: u64,
    out_path: &Path,
) -> Result<(RunTrace, RunManifest)> {
    let cfg = RunConfig { algorithm, schedule, n_iters, seed, log: LogSpacing::default(), condition_m: None };
    let (trace, manifest) = execute(preset.name, &preset.mdp, &preset.init_theta, &cfg)?;
    write_run(out_path, &trace, &manifest)?;
    Ok((trace, manifest))
}

/// Reruns the experiment described by a sidecar.
pub fn replay(manifest: &RunManifest) -> Result<RunTrace> {
    let mdp = manifest.mdp.build()?;
    let cfg = RunConfig {
        algorithm: manifest.algorithm,
        schedule: manifest.schedule.clone(),
        n_iters: manifest.n_iters,
        seed: manifest.seed,
        log: manifest.log,
        condition_m: Some(manifest.condition_m),
    };
    run(&mdp, &manifest.init_theta, &cfg)
}

/// Near-concavity grid check along the unit-row update direction
/// `theta(t) - theta(t-1)`, taken at `theta(t)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConcavitySample {
    pub t: u64,
    pub max_violation: f64,
    pub worst_k: f64,
    pub threshold_m: f64,
    pub theta_gap_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosisReport {
    pub env: String,
    pub algorithm: Algorithm,
    pub n_iters: u64,
    pub condition_m: f64,
    pub trace: TraceDiagnosis,
    /// Every restart, logged or not.
    pub restart_iters: Vec<u64>,
    pub concavity_c: f64,
    pub concavity: Vec<ConcavitySample>,
}

/// Runs `cfg` and diagnoses the result, with near-concavity checks (constant
/// `c`) at the last `samples` logged iterations.
pub fn diagnose_live(
    env: &str,
    mdp: &Mdp,
    init_theta: &PolicyParams,
    cfg: &RunConfig,
    samples: usize,
    c: f64,
) -> Result<(RunTrace, DiagnosisReport)> {
    let logged = cfg.log.logged_iterations(cfg.n_iters);
    let wanted: Vec<u64> = logged.iter().rev().take(samples).copied().collect();
    let mut captured = Vec::new();
    let trace = run_observed(mdp, init_theta, cfg, |ev| {
        let t = ev.outcome.state.t;
        if wanted.contains(&t) {
            let d = ev.outcome.state.theta.matrix() - ev.prev.theta.matrix();
            captured.push((t, ev.outcome.state.theta.clone(), normalize_rows(&d)));
        }
    })?;
    let opt = optimal_solution(mdp, OPTIMUM_TOL)?;
    let grid = default_k_grid();
    let concavity = captured
        .iter()
        .map(|(t, theta, d)| {
            let rep = near_concavity_violation(mdp, mdp.mu(), theta, d, c, &grid, &opt.a_star)?;
            Ok(ConcavitySample {
                t: *t,
                max_violation: rep.max_violation,
                worst_k: rep.worst_k,
                threshold_m: rep.threshold_m,
                theta_gap_ok: rep.theta_gap_ok,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = DiagnosisReport {
        env: env.to_string(),
        algorithm: cfg.algorithm,
        n_iters: cfg.n_iters,
        condition_m: cfg.condition_threshold(mdp)?,
        trace: diagnose_records(&trace.records)?,
        restart_iters: trace.restart_iters.clone(),
        concavity_c: c,
        concavity,
    };
    Ok((trace, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub preset: String,
    pub algorithm: String,
    pub iters: u64,
    pub final_gap: f64,
    /// Log-log slope over the last decade, when the window is usable.
    pub slope: Option<f64>,
    pub restarts: u64,
    pub condition_onset: Option<u64>,
    /// First logged iteration with gap below 1e-3.
    pub t_gap_1e3: Option<u64>,
}

impl CompareRow {
    pub fn of(preset: &str, algorithm: &Algorithm, trace: &RunTrace) -> Self {
        let (lo, hi) = last_decade(&trace.records);
        CompareRow {
            preset: preset.to_string(),
            algorithm: algorithm.name().to_string(),
            iters: trace.last().t,
            final_gap: trace.final_gap(),
            slope: loglog_slope(&trace.gap_points(), lo.max(1.0), hi).ok(),
            restarts: trace.last().restart_count,
            condition_onset: condition_onset(&trace.records),
            t_gap_1e3: trace.first_below(1e-3),
        }
    }
}

/// Thread pool capped by `APG_LAB_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("APG_LAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("APG_LAB_THREADS must be a positive integer, got '{v}'")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

/// Runs every (preset, algorithm) pair with the algorithm's default schedule.
/// Rows come back in preset-major order regardless of scheduling.
pub fn compare(presets: &[&str], algorithms: &[Algorithm], n_iters: u64, seed: u64) -> Result<Vec<CompareRow>> {
    let envs: Vec<EnvPreset> = presets.iter().map(|p| builtin_env(p)).collect::<Result<_>>()?;
    let jobs: Vec<(&EnvPreset, &Algorithm)> =
        envs.iter().flat_map(|e| algorithms.iter().map(move |a| (e, a))).collect();
    thread_pool()?.install(|| {
        jobs.par_iter()
            .map(|(env, algo)| {
                let mut cfg = RunConfig::new(**algo, &env.mdp, n_iters)?;
                cfg.seed = seed;
                let trace = run(&env.mdp, &env.init_theta, &cfg)?;
                Ok(CompareRow::of(env.name, algo, &trace))
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub final_gap: f64,
    pub restarts: u64,
}

/// One run per seed of a (typically stochastic) algorithm.
pub fn seed_sweep(preset: &EnvPreset, cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    thread_pool()?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let cfg = RunConfig { seed, ..cfg.clone() };
                let trace = run(&preset.mdp, &preset.init_theta, &cfg)?;
                Ok(SweepRow { seed, final_gap: trace.final_gap(), restarts: trace.last().restart_count })
            })
            .collect()
    })
}

fn opt_cell<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), T::to_string)
}

/// Fixed-width text table of comparison rows.
pub fn render_compare_table(rows: &[CompareRow]) -> String {
    let mut out = format!(
        "{:<20} {:<9} {:>8} {:>12} {:>7} {:>8} {:>8} {:>9}\n",
        "preset", "algo", "iters", "final_gap", "slope", "restarts", "onset", "t(1e-3)"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<20} {:<9} {:>8} {:>12.4e} {:>7} {:>8} {:>8} {:>9}\n",
            r.preset,
            r.algorithm,
            r.iters,
            r.final_gap,
            r.slope.map_or_else(|| "-".to_string(), |s| format!("{s:.3}")),
            r.restarts,
            opt_cell(&r.condition_onset),
            opt_cell(&r.t_gap_1e3),
        ));
    }
    out
}

pub fn compare_csv(rows: &[CompareRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        for name in PRESETS {
            let p = builtin_env(name).unwrap();
            assert_eq!(p.name, name);
            assert_eq!(p.init_theta.shape(), (p.mdp.n_states(), p.mdp.n_actions()));
        }
        let err = builtin_env("gridworld").unwrap_err().to_string();
        assert!(err.contains("bandit3-nonmonotone"), "{err}");
    }

    #[test]
    fn random_mdp_is_seeded() {
        assert_eq!(random_mdp(4, 3, 2, 0.8).unwrap(), random_mdp(4, 3, 2, 0.8).unwrap());
        assert_ne!(random_mdp(4, 3, 2, 0.8).unwrap(), random_mdp(5, 3, 2, 0.8).unwrap());
        assert!(random_mdp(1, 0, 2, 0.5).is_err());
        assert!(random_mdp(1, 2, 1, 0.5).is_err());
    }

    #[test]
    fn one_row_comparison() {
        let rows = compare(&["bandit2"], &[Algorithm::Pg], 50, 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].iters, 50);
        assert!(render_compare_table(&rows).lines().count() == 2);
    }
}

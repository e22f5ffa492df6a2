//! The shared optimizer loop.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{conditions_from, in_feasible_domain, m_c_threshold};
use crate::error::{Error, Result};
use crate::eval::{gradient_at, values_at};
use crate::mdp::Mdp;
use crate::optim::{step, Algorithm, OptimizerState, StepOutcome};
use crate::optimal::{optimal_solution, OptimalSolution};
use crate::policy::PolicyParams;
use crate::schedule::StepSchedule;
use crate::trace::{RunTrace, Termination, TraceRecord};

/// Runs stop once `V*(rho) - V(rho)` drops below this.
pub const CONVERGED_GAP: f64 = 1e-14;

/// Value-iteration tolerance used for the reference optimum.
pub const OPTIMUM_TOL: f64 = 1e-12;

/// Which iterations get a trace record. `t = 0` and the final iteration are
/// always logged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogSpacing {
    Every { every: u64 },
    /// Every iteration up to `dense_until`, then about `per_decade` records per
    /// factor of ten.
    Geometric { dense_until: u64, per_decade: u32 },
}

impl Default for LogSpacing {
    fn default() -> Self {
        LogSpacing::Geometric { dense_until: 100, per_decade: 100 }
    }
}

impl LogSpacing {
    /// The logged iteration following `t`.
    pub fn next_after(&self, t: u64) -> u64 {
        match *self {
            LogSpacing::Every { every } => t + every.max(1),
            LogSpacing::Geometric { dense_until, per_decade } => {
                if t < dense_until.max(1) {
                    t + 1
                } else {
                    let ratio = 10f64.powf(1.0 / f64::from(per_decade.max(1)));
                    ((t as f64 * ratio).ceil() as u64).max(t + 1)
                }
            }
        }
    }

    /// Every iteration a run of `n_iters` would log after `t = 0`, assuming it
    /// does not stop early.
    pub fn logged_iterations(&self, n_iters: u64) -> Vec<u64> {
        let mut out = Vec::new();
        let mut t = 0;
        while t < n_iters {
            t = self.next_after(t).min(n_iters);
            out.push(t);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub schedule: StepSchedule,
    pub n_iters: u64,
    /// Seeds the sampler of the stochastic methods; unused otherwise.
    pub seed: u64,
    pub log: LogSpacing,
    /// Threshold for condition (i); `None` means `M_C` at `C = 3/2`.
    pub condition_m: Option<f64>,
}

impl RunConfig {
    /// The algorithm's default schedule and logging.
    pub fn new(algorithm: Algorithm, mdp: &Mdp, n_iters: u64) -> Result<Self> {
        Ok(RunConfig {
            schedule: algorithm.default_schedule(mdp)?,
            algorithm,
            n_iters,
            seed: 0,
            log: LogSpacing::default(),
            condition_m: None,
        })
    }

    pub fn condition_threshold(&self, mdp: &Mdp) -> Result<f64> {
        match self.condition_m {
            Some(m) => Ok(m),
            None => m_c_threshold(1.5, mdp),
        }
    }
}

/// One completed iteration, as seen by a run observer.
pub struct StepEvent<'a> {
    pub prev: &'a OptimizerState,
    /// State values of `omega(t-1)`.
    pub prev_v_omega: &'a DVector<f64>,
    pub outcome: &'a StepOutcome,
}

pub fn run(mdp: &Mdp, init_theta: &PolicyParams, cfg: &RunConfig) -> Result<RunTrace> {
    run_observed(mdp, init_theta, cfg, |_| {})
}

/// [`run`] with a callback after every iteration.
pub fn run_observed<F>(mdp: &Mdp, init_theta: &PolicyParams, cfg: &RunConfig, mut observe: F) -> Result<RunTrace>
where
    F: FnMut(&StepEvent<'_>),
{
    let (ns, na) = init_theta.shape();
    if ns != mdp.n_states() {
        return Err(Error::Dimension { what: "initial parameter rows", expected: mdp.n_states(), got: ns });
    }
    if na != mdp.n_actions() {
        return Err(Error::Dimension { what: "initial parameter columns", expected: mdp.n_actions(), got: na });
    }
    let opt = optimal_solution(mdp, OPTIMUM_TOL)?;
    let logger = Logger { mdp, opt: &opt, m: cfg.condition_threshold(mdp)? };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut state = OptimizerState::new(init_theta.clone());
    let v0 = values_at(mdp, state.theta.matrix())?;
    let mut records = vec![logger.record(&state, None, &v0, &v0, 0.0, false)?];
    let mut restart_iters = Vec::new();
    let mut termination = Termination::Completed;
    let mut next_log = cfg.log.next_after(0);
    let mut v_omega = v0;

    while state.t < cfg.n_iters {
        let outcome = match step(&cfg.algorithm, &state, mdp, &cfg.schedule, &mut rng) {
            Ok(o) => o,
            Err(Error::VanishingGradient(t)) => {
                termination = Termination::VanishingGradient { t };
                break;
            }
            Err(e) => return Err(e),
        };
        observe(&StepEvent { prev: &state, prev_v_omega: &v_omega, outcome: &outcome });
        let t = outcome.state.t;
        if outcome.restarted {
            restart_iters.push(t);
        }

        let v_rho = outcome.v_theta.dot(mdp.rho());
        let last = records.last_mut().expect("initial record");
        if last.t + 1 == t {
            last.v_next_rho = Some(v_rho);
            last.grad_improve = Some(v_rho - last.v_omega_rho);
        }

        let converged = opt.value(mdp.rho()) - v_rho < CONVERGED_GAP;
        if t == next_log || t == cfg.n_iters || converged {
            records.push(logger.record(
                &outcome.state,
                Some(&state),
                &outcome.v_theta,
                &outcome.v_omega,
                outcome.eta,
                outcome.restarted,
            )?);
            while next_log <= t {
                next_log = cfg.log.next_after(next_log);
            }
        }
        v_omega = outcome.v_omega;
        state = outcome.state;
        if converged {
            termination = Termination::Converged { t };
            break;
        }
    }
    Ok(RunTrace { records, restart_iters, termination })
}

struct Logger<'a> {
    mdp: &'a Mdp,
    opt: &'a OptimalSolution,
    m: f64,
}

impl Logger<'_> {
    fn record(
        &self,
        state: &OptimizerState,
        prev: Option<&OptimizerState>,
        v_theta: &DVector<f64>,
        v_omega: &DVector<f64>,
        eta: f64,
        restarted: bool,
    ) -> Result<TraceRecord> {
        let mdp = self.mdp;
        let grad_omega = gradient_at(mdp, state.omega.matrix(), mdp.mu())?.grad;
        let flags = conditions_from(state.theta.matrix(), state.omega.matrix(), v_theta, &grad_omega, self.opt, self.m);
        let feasible = prev.is_some_and(|p| {
            in_feasible_domain(&(state.theta.matrix() - p.theta.matrix()), &self.opt.a_star)
        });
        let (v_rho, v_mu) = (v_theta.dot(mdp.rho()), v_theta.dot(mdp.mu()));
        let v_omega_rho = v_omega.dot(mdp.rho());
        let values = [eta, v_rho, v_mu, v_omega_rho, grad_omega.norm()];
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("trace record"));
        }
        Ok(TraceRecord {
            t: state.t,
            eta,
            v_mu,
            v_rho,
            v_omega_rho,
            v_next_rho: None,
            gap_rho: self.opt.value(mdp.rho()) - v_rho,
            gap_mu: self.opt.value(mdp.mu()) - v_mu,
            restart_active: u8::from(restarted),
            restart_count: state.restart_count,
            grad_norm: grad_omega.norm(),
            mom_improve: v_omega_rho - v_rho,
            grad_improve: None,
            min_theta_gap: state.theta.min_gap(&self.opt.a_star),
            feasible_domain: u8::from(feasible),
            cond_i: u8::from(flags.cond_i),
            cond_ii: u8::from(flags.cond_ii),
            cond_iii: u8::from(flags.cond_iii),
            cond_iv: u8::from(flags.cond_iv),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bandit() -> Mdp {
        Mdp::new(&vec![vec![vec![1.0]]; 2], &[vec![1.0, 0.0]], 0.0, vec![1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn zero_iterations_log_initial_point() {
        let mdp = bandit();
        let cfg = RunConfig::new(Algorithm::Apg, &mdp, 0).unwrap();
        let trace = run(&mdp, &PolicyParams::zeros(1, 2), &cfg).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].t, 0);
        assert!((trace.records[0].gap_rho - 0.5).abs() < 1e-15);
    }

    #[test]
    fn geometric_spacing_is_dense_then_sparse() {
        let log = LogSpacing::default();
        let mut t = 0;
        let mut logged = vec![];
        while t < 100_000 {
            t = log.next_after(t);
            logged.push(t);
        }
        assert!(logged[..100].iter().enumerate().all(|(i, &t)| t == i as u64 + 1));
        let decade = logged.iter().filter(|&&t| t > 10_000 && t <= 100_000).count();
        assert!((95..=105).contains(&decade), "{decade}");
    }

    #[test]
    fn final_iteration_is_logged() {
        let mdp = bandit();
        let mut cfg = RunConfig::new(Algorithm::Pg, &mdp, 237).unwrap();
        cfg.log = LogSpacing::Every { every: 50 };
        let trace = run(&mdp, &PolicyParams::zeros(1, 2), &cfg).unwrap();
        let ts: Vec<u64> = trace.records.iter().map(|r| r.t).collect();
        assert_eq!(ts, vec![0, 50, 100, 150, 200, 237]);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let mdp = bandit();
        let cfg = RunConfig::new(Algorithm::Pg, &mdp, 3).unwrap();
        assert!(matches!(run(&mdp, &PolicyParams::zeros(1, 3), &cfg), Err(Error::Dimension { .. })));
    }
}

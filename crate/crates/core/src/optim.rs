//! Policy optimizers over the softmax logits.
//!
//! Every step function maps an [`OptimizerState`] to a [`StepOutcome`] and
//! evaluates gradients exactly. Momentum methods evaluate the gradient at the
//! lookahead point `omega`, never at `theta`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{gradient_at, values_at};
use crate::mdp::Mdp;
use crate::policy::PolicyParams;
use crate::schedule::{smoothness_constant, StepSchedule};

/// Default heavy-ball momentum factor.
pub const DEFAULT_HB_MOMENTUM: f64 = 0.9;

/// Gradient norms at or below this end a normalized-step run.
pub const MIN_GRAD_NORM: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Algorithm {
    /// Plain gradient ascent.
    Pg,
    /// Nesterov momentum with monotone restart.
    Apg,
    /// Nesterov momentum without restart.
    Napg,
    /// Heavy-ball momentum.
    Hbpg { momentum: f64 },
    /// APG with exponentially growing, element-wise clipped steps.
    ApgClip,
    /// APG with gradient-norm normalized steps.
    ApgNorm,
    /// APG on sparse sampled gradients.
    Sapg { batch: usize },
    /// Gradient ascent on sparse sampled gradients.
    Spg { batch: usize },
    /// Three-sequence accelerated gradient started at shift `t_shift`.
    Ag { t_shift: u64 },
}

impl Algorithm {
    pub const NAMES: [&'static str; 9] =
        ["pg", "apg", "napg", "hbpg", "apg-clip", "apg-norm", "sapg", "spg", "ag"];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Pg => "pg",
            Algorithm::Apg => "apg",
            Algorithm::Napg => "napg",
            Algorithm::Hbpg { .. } => "hbpg",
            Algorithm::ApgClip => "apg-clip",
            Algorithm::ApgNorm => "apg-norm",
            Algorithm::Sapg { .. } => "sapg",
            Algorithm::Spg { .. } => "spg",
            Algorithm::Ag { .. } => "ag",
        }
    }

    /// True for algorithms whose iterates carry a momentum lookahead.
    pub fn has_momentum(&self) -> bool {
        !matches!(self, Algorithm::Pg | Algorithm::Spg { .. } | Algorithm::Hbpg { .. })
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, Algorithm::Sapg { .. } | Algorithm::Spg { .. })
    }

    /// The schedule each algorithm is analysed with.
    pub fn default_schedule(&self, mdp: &Mdp) -> Result<StepSchedule> {
        use crate::schedule::c_inf_surrogate;
        Ok(match self {
            Algorithm::Pg | Algorithm::Hbpg { .. } | Algorithm::Spg { .. } => StepSchedule::constant(mdp),
            Algorithm::Apg | Algorithm::Napg | Algorithm::Sapg { .. } | Algorithm::Ag { .. } => {
                StepSchedule::nearly_constant(mdp)
            }
            Algorithm::ApgClip => StepSchedule::exponential_clipped_default(mdp, c_inf_surrogate(mdp))?,
            Algorithm::ApgNorm => StepSchedule::normalized(mdp, c_inf_surrogate(mdp))?,
        })
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    /// Parses a bare algorithm name with default hyper-parameters.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pg" => Algorithm::Pg,
            "apg" => Algorithm::Apg,
            "napg" => Algorithm::Napg,
            "hbpg" => Algorithm::Hbpg { momentum: DEFAULT_HB_MOMENTUM },
            "apg-clip" => Algorithm::ApgClip,
            "apg-norm" => Algorithm::ApgNorm,
            "sapg" => Algorithm::Sapg { batch: 1 },
            "spg" => Algorithm::Spg { batch: 1 },
            "ag" => Algorithm::Ag { t_shift: 0 },
            other => {
                return Err(Error::UnknownName {
                    kind: "algorithm",
                    name: other.to_string(),
                    valid: Algorithm::NAMES.join(", "),
                })
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub theta: PolicyParams,
    /// Lookahead point; the accelerated-gradient mid point for [`Algorithm::Ag`].
    pub omega: PolicyParams,
    pub theta_prev: PolicyParams,
    pub t: u64,
    pub restart_count: u64,
    /// `theta(t) - theta(t-1)`, accumulated from the update terms. Read by heavy ball.
    pub velocity: DMatrix<f64>,
    /// `omega(t) - theta(t)`, kept separately so momentum never differences two
    /// large, rounded parameter matrices.
    pub omega_offset: DMatrix<f64>,
    /// The `hat theta` sequence of the three-sequence form.
    pub ag_hat_theta: DMatrix<f64>,
}

impl OptimizerState {
    /// `omega(0) = theta(0)` and `theta(-1) = theta(0)`.
    pub fn new(theta0: PolicyParams) -> Self {
        let (ns, na) = theta0.shape();
        OptimizerState {
            omega: theta0.clone(),
            theta_prev: theta0.clone(),
            velocity: DMatrix::zeros(ns, na),
            omega_offset: DMatrix::zeros(ns, na),
            ag_hat_theta: theta0.matrix().clone(),
            theta: theta0,
            t: 0,
            restart_count: 0,
        }
    }

    /// Maps an APG state at iteration `T` (restart inactive from `T` on) to the
    /// three-sequence initialization: `theta_ag(0) = theta(T)`,
    /// `m = -(omega(T) - theta(T)) / alpha(1)`, `hat theta(0) = theta_ag(0) - m`.
    /// Returns the mapped state and the shift `T`.
    pub fn ag_from_apg(apg: &OptimizerState) -> (OptimizerState, u64) {
        let t_shift = apg.t;
        let alpha1 = ag_alpha(1, t_shift);
        let m_init = -&apg.omega_offset / alpha1;
        let mut state = OptimizerState::new(apg.theta.clone());
        state.ag_hat_theta = apg.theta.matrix() - m_init;
        (state, t_shift)
    }

    fn check_shape(&self, mdp: &Mdp) -> Result<()> {
        let (ns, na) = self.theta.shape();
        if ns != mdp.n_states() {
            return Err(Error::Dimension { what: "parameter rows", expected: mdp.n_states(), got: ns });
        }
        if na != mdp.n_actions() {
            return Err(Error::Dimension { what: "parameter columns", expected: mdp.n_actions(), got: na });
        }
        Ok(())
    }
}

/// Result of one optimizer iteration.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: OptimizerState,
    pub eta: f64,
    /// The monotone test rejected the momentum point.
    pub restarted: bool,
    /// Euclidean norm of the (possibly sampled) gradient used by the step.
    pub grad_norm: f64,
    /// State values of the new `theta`.
    pub v_theta: DVector<f64>,
    /// State values of the new `omega`.
    pub v_omega: DVector<f64>,
}

/// `[x]^{+K}`: every entry clipped to `[-K, K]`.
pub fn clip_elementwise(x: &DMatrix<f64>, k: f64) -> Result<DMatrix<f64>> {
    if !(k > 0.0) {
        return Err(Error::Config(format!("clip bound must be positive, got {k}")));
    }
    Ok(x.map(|v| v.clamp(-k, k)))
}

/// Nesterov coefficient `(t-1)/(t+2)`; exactly zero at `t = 1`.
pub fn momentum_coefficient(t: u64) -> f64 {
    (t as f64 - 1.0) / (t as f64 + 2.0)
}

fn params(m: DMatrix<f64>, what: &'static str) -> Result<PolicyParams> {
    PolicyParams::new(m).map_err(|_| Error::NonFinite(what))
}

/// `theta(t+1) = theta(t) + eta grad V(mu) at theta(t)`.
pub fn pg_step(state: &OptimizerState, mdp: &Mdp, schedule: &StepSchedule) -> Result<StepOutcome> {
    state.check_shape(mdp)?;
    if !matches!(
        schedule,
        StepSchedule::Constant { .. } | StepSchedule::NearlyConstantMdp { .. } | StepSchedule::NearlyConstantBandit
    ) {
        return Err(Error::Config(format!("pg needs a constant or nearly constant schedule, got {}", schedule.kind())));
    }
    let t = state.t + 1;
    let g = gradient_at(mdp, state.theta.matrix(), mdp.mu())?;
    let grad_norm = g.grad.norm();
    let eta = schedule.eta(t, grad_norm);
    plain_outcome(state, mdp, &g.grad * eta, "pg update", eta, grad_norm)
}

/// Applies `increment` to `theta` for the methods without a lookahead point.
fn plain_outcome(
    state: &OptimizerState,
    mdp: &Mdp,
    increment: DMatrix<f64>,
    what: &'static str,
    eta: f64,
    grad_norm: f64,
) -> Result<StepOutcome> {
    let theta = params(state.theta.matrix() + &increment, what)?;
    let v_theta = values_at(mdp, theta.matrix())?;
    let (ns, na) = theta.shape();
    let next = OptimizerState {
        velocity: increment,
        omega_offset: DMatrix::zeros(ns, na),
        theta_prev: state.theta.clone(),
        omega: theta.clone(),
        theta,
        t: state.t + 1,
        restart_count: state.restart_count,
        ag_hat_theta: state.ag_hat_theta.clone(),
    };
    Ok(StepOutcome { state: next, eta, restarted: false, grad_norm, v_omega: v_theta.clone(), v_theta })
}

/// Gradient step `theta(t) = omega(t-1) + increment`, momentum extrapolation
/// `phi = theta(t) + (t-1)/(t+2) (theta(t) - theta(t-1))` and, when `restart`
/// is set, the monotone test `omega = phi if V^phi(mu) >= V^theta(mu) else theta`.
///
/// `theta(t) - theta(t-1)` is formed as `(omega(t-1) - theta(t-1)) + increment`.
fn extrapolate(
    state: &OptimizerState,
    mdp: &Mdp,
    increment: DMatrix<f64>,
    eta: f64,
    grad_norm: f64,
    restart: bool,
) -> Result<StepOutcome> {
    let t = state.t + 1;
    let velocity = &state.omega_offset + &increment;
    let offset = &velocity * momentum_coefficient(t);
    let theta = params(state.omega.matrix() + increment, "gradient update")?;
    let phi = params(theta.matrix() + &offset, "momentum point")?;
    let v_theta = values_at(mdp, theta.matrix())?;
    let v_phi = values_at(mdp, phi.matrix())?;
    let accept = !restart || v_phi.dot(mdp.mu()) >= v_theta.dot(mdp.mu());
    let (omega, omega_offset, v_omega) = if accept {
        (phi, offset, v_phi)
    } else {
        (theta.clone(), DMatrix::zeros(offset.nrows(), offset.ncols()), v_theta.clone())
    };
    let next = OptimizerState {
        velocity,
        omega_offset,
        theta_prev: state.theta.clone(),
        theta,
        omega,
        t,
        restart_count: state.restart_count + u64::from(!accept),
        ag_hat_theta: state.ag_hat_theta.clone(),
    };
    Ok(StepOutcome { state: next, eta, restarted: !accept, grad_norm, v_theta, v_omega })
}

fn lookahead_gradient(state: &OptimizerState, mdp: &Mdp) -> Result<DMatrix<f64>> {
    state.check_shape(mdp)?;
    Ok(gradient_at(mdp, state.omega.matrix(), mdp.mu())?.grad)
}

/// Accelerated policy gradient: gradient step from `omega(t-1)`, Nesterov
/// extrapolation and monotone restart.
pub fn apg_step(state: &OptimizerState, mdp: &Mdp, schedule: &StepSchedule) -> Result<StepOutcome> {
    let g = lookahead_gradient(state, mdp)?;
    let grad_norm = g.norm();
    let eta = schedule.eta(state.t + 1, grad_norm);
    extrapolate(state, mdp, &g * eta, eta, grad_norm, true)
}

/// As [`apg_step`] with `omega(t) = phi(t)` unconditionally.
pub fn napg_step(state: &OptimizerState, mdp: &Mdp, schedule: &StepSchedule) -> Result<StepOutcome> {
    let g = lookahead_gradient(state, mdp)?;
    let grad_norm = g.norm();
    let eta = schedule.eta(state.t + 1, grad_norm);
    extrapolate(state, mdp, &g * eta, eta, grad_norm, false)
}

/// `theta(t) = theta(t-1) + eta grad(theta(t-1)) + beta (theta(t-1) - theta(t-2))`.
pub fn hbpg_step(state: &OptimizerState, mdp: &Mdp, schedule: &StepSchedule, momentum: f64) -> Result<StepOutcome> {
    state.check_shape(mdp)?;
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("heavy-ball momentum must lie in [0, 1), got {momentum}")));
    }
    let t = state.t + 1;
    let g = gradient_at(mdp, state.theta.matrix(), mdp.mu())?;
    let grad_norm = g.grad.norm();
    let eta = schedule.eta(t, grad_norm);
    let increment = &g.grad * eta + &state.velocity * momentum;
    plain_outcome(state, mdp, increment, "heavy-ball update", eta, grad_norm)
}

/// APG whose gradient term is `[eta(t) grad]^{+K}`.
pub fn apg_clipped_step(state: &OptimizerState, mdp: &Mdp, schedule: &StepSchedule) -> Result<StepOutcome> {
    let Some(k) = schedule.clip() else {
        return Err(Error::Config("apg-clip needs an exponential_clipped schedule".into()));
    };
    let g = lookahead_gradient(state, mdp)?;
    let grad_norm = g.norm();
    let eta = schedule.eta(state.t + 1, grad_norm);
    let update = clip_elementwise(&(&g * eta), k)?;
    extrapolate(state, mdp, update, eta, grad_norm, true)
}

/// APG with `eta(t) = scale / ||grad||`, so the gradient step has constant length.
pub fn apg_normalized_step(state: &OptimizerState, mdp: &Mdp, schedule: &StepSchedule) -> Result<StepOutcome> {
    if !matches!(schedule, StepSchedule::Normalized { .. }) {
        return Err(Error::Config("apg-norm needs a normalized schedule".into()));
    }
    let g = lookahead_gradient(state, mdp)?;
    let grad_norm = g.norm();
    if !(grad_norm > MIN_GRAD_NORM) {
        return Err(Error::VanishingGradient(state.t + 1));
    }
    let eta = schedule.eta(state.t + 1, grad_norm);
    extrapolate(state, mdp, &g * eta, eta, grad_norm, true)
}

/// Sparse stochastic gradient at `theta`: `batch` pairs are drawn with
/// `s ~ d^{pi_theta}_mu` and `a ~ pi_theta(.|s)`; each sampled coordinate
/// carries its exact partial derivative, summed over duplicates.
pub fn sampled_gradient<R: Rng + ?Sized>(
    mdp: &Mdp,
    theta: &PolicyParams,
    rng: &mut R,
    batch: usize,
) -> Result<DMatrix<f64>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let g = gradient_at(mdp, theta.matrix(), mdp.mu())?;
    let mut sparse = DMatrix::zeros(mdp.n_states(), mdp.n_actions());
    for _ in 0..batch {
        let s = sample_index(rng, g.d.iter().copied());
        let a = sample_index(rng, g.pi.row(s).iter().copied());
        sparse[(s, a)] += g.grad[(s, a)];
    }
    Ok(sparse)
}

fn sample_index<R: Rng + ?Sized>(rng: &mut R, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
        }
        u -= w;
    }
    last
}

/// Stochastic APG: [`sampled_gradient`] at `omega`, then the APG update with restart.
pub fn sapg_step<R: Rng + ?Sized>(
    state: &OptimizerState,
    mdp: &Mdp,
    schedule: &StepSchedule,
    rng: &mut R,
    batch: usize,
) -> Result<StepOutcome> {
    state.check_shape(mdp)?;
    let v = sampled_gradient(mdp, &state.omega, rng, batch)?;
    let grad_norm = v.norm();
    let eta = schedule.eta(state.t + 1, grad_norm);
    extrapolate(state, mdp, &v * eta, eta, grad_norm, true)
}

/// Stochastic PG baseline: [`sampled_gradient`] at `theta`, no momentum.
pub fn spg_step<R: Rng + ?Sized>(
    state: &OptimizerState,
    mdp: &Mdp,
    schedule: &StepSchedule,
    rng: &mut R,
    batch: usize,
) -> Result<StepOutcome> {
    state.check_shape(mdp)?;
    let v = sampled_gradient(mdp, &state.theta, rng, batch)?;
    let grad_norm = v.norm();
    let eta = schedule.eta(state.t + 1, grad_norm);
    plain_outcome(state, mdp, &v * eta, "stochastic pg update", eta, grad_norm)
}

/// `alpha(t) = 2 / (t + 1 + T_shift)`.
pub fn ag_alpha(t: u64, t_shift: u64) -> f64 {
    2.0 / ((t + 1 + t_shift) as f64)
}

/// `beta(t) = (t + T_shift) / (t + 1 + T_shift) / (2L)`.
pub fn ag_beta(t: u64, t_shift: u64, smoothness: f64) -> f64 {
    let shifted = (t + t_shift) as f64;
    shifted / (shifted + 1.0) / (2.0 * smoothness)
}

/// `lambda(t) = (t + 1 + T_shift) / 2 * beta(t)`, so that `alpha lambda = beta`.
pub fn ag_lambda(t: u64, t_shift: u64, smoothness: f64) -> f64 {
    ((t + 1 + t_shift) as f64) / 2.0 * ag_beta(t, t_shift, smoothness)
}

/// One iteration of the three-sequence accelerated gradient method (ascent form):
///
/// ```text
/// md(t)    = (1 - alpha) ag(t-1) + alpha hat(t-1)
/// hat(t)   = hat(t-1) + lambda grad(md(t))
/// ag(t)    = md(t)    + beta   grad(md(t))
/// ```
///
/// `theta` holds `ag`, `omega` holds `md`.
pub fn ghadimi_ag_step(state: &OptimizerState, mdp: &Mdp, t_shift: u64, smoothness: f64) -> Result<StepOutcome> {
    state.check_shape(mdp)?;
    let t = state.t + 1;
    let alpha = ag_alpha(t, t_shift);
    let beta = ag_beta(t, t_shift, smoothness);
    let lambda = ag_lambda(t, t_shift, smoothness);
    let md = state.theta.matrix() * (1.0 - alpha) + &state.ag_hat_theta * alpha;
    let g = gradient_at(mdp, &md, mdp.mu())?;
    let hat = &state.ag_hat_theta + &g.grad * lambda;
    let ag = params(&md + &g.grad * beta, "accelerated gradient update")?;
    let v_theta = values_at(mdp, ag.matrix())?;
    let next = OptimizerState {
        theta_prev: state.theta.clone(),
        theta: ag,
        omega: params(md, "accelerated gradient mid point")?,
        t,
        restart_count: state.restart_count,
        velocity: state.velocity.clone(),
        omega_offset: state.omega_offset.clone(),
        ag_hat_theta: hat,
    };
    Ok(StepOutcome { state: next, eta: beta, restarted: false, grad_norm: g.grad.norm(), v_theta, v_omega: g.v })
}

/// Dispatches one iteration of `algorithm`. `rng` is only drawn from by the
/// sampled-gradient methods.
pub fn step<R: Rng + ?Sized>(
    algorithm: &Algorithm,
    state: &OptimizerState,
    mdp: &Mdp,
    schedule: &StepSchedule,
    rng: &mut R,
) -> Result<StepOutcome> {
    match *algorithm {
        Algorithm::Pg => pg_step(state, mdp, schedule),
        Algorithm::Apg => apg_step(state, mdp, schedule),
        Algorithm::Napg => napg_step(state, mdp, schedule),
        Algorithm::Hbpg { momentum } => hbpg_step(state, mdp, schedule, momentum),
        Algorithm::ApgClip => apg_clipped_step(state, mdp, schedule),
        Algorithm::ApgNorm => apg_normalized_step(state, mdp, schedule),
        Algorithm::Sapg { batch } => sapg_step(state, mdp, schedule, rng, batch),
        Algorithm::Spg { batch } => spg_step(state, mdp, schedule, rng, batch),
        Algorithm::Ag { t_shift } => ghadimi_ag_step(state, mdp, t_shift, smoothness_constant(mdp)),
    }
}

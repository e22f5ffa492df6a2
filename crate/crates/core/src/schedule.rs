//! Step-size schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Mdp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `eta(t) = t/(t+1) * (1-gamma)^3 / 16`.
    NearlyConstantMdp { gamma: f64 },
    /// `eta(t) = t/(t+1) / 5`.
    NearlyConstantBandit,
    /// Fixed `eta`, by default `1/L`.
    Constant { eta: f64 },
    /// `eta(t) = beta^t (1-gamma)^3 / 8`, applied through element-wise clipping at `clip`.
    ExponentialClipped { gamma: f64, beta: f64, clip: f64, c_inf: f64 },
    /// `eta(t) = scale / ||grad||_2` with
    /// `scale = (1-gamma) / (6(1-gamma) + 8(c_inf - (1-gamma))) / sqrt(|S|)`.
    Normalized { scale: f64, c_inf: f64 },
}

/// Smoothness constant of `theta -> V(mu)`: `8/(1-gamma)^3`, or `5/2` for bandits.
pub fn smoothness_constant(mdp: &Mdp) -> f64 {
    if mdp.is_bandit() {
        2.5
    } else {
        8.0 / (1.0 - mdp.gamma()).powi(3)
    }
}

/// The bound `C_inf <= 1 / min_s mu(s)`.
pub fn c_inf_surrogate(mdp: &Mdp) -> f64 {
    1.0 / mdp.mu().min()
}

/// `(1-gamma) / (4 C_inf - (1-gamma)) / (sqrt|A| |S|)`, shared by the growth
/// bound on `beta` and the clip level.
fn clip_base(mdp: &Mdp, c_inf: f64) -> f64 {
    let one_minus = 1.0 - mdp.gamma();
    one_minus / (4.0 * c_inf - one_minus) / ((mdp.n_actions() as f64).sqrt() * mdp.n_states() as f64)
}

/// Open upper end of the admissible growth interval `1 < beta < upper`.
pub fn beta_upper_bound(mdp: &Mdp, c_inf: f64) -> f64 {
    (clip_base(mdp, c_inf) / 8.0).exp()
}

impl StepSchedule {
    /// The nearly constant schedule matching the environment type.
    pub fn nearly_constant(mdp: &Mdp) -> Self {
        if mdp.is_bandit() {
            StepSchedule::NearlyConstantBandit
        } else {
            StepSchedule::NearlyConstantMdp { gamma: mdp.gamma() }
        }
    }

    /// `eta = 1/L`.
    pub fn constant(mdp: &Mdp) -> Self {
        StepSchedule::Constant { eta: 1.0 / smoothness_constant(mdp) }
    }

    pub fn constant_eta(eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {eta}")));
        }
        Ok(StepSchedule::Constant { eta })
    }

    /// Exponentially growing clipped steps. `beta` must lie in the open interval
    /// `(1, beta_upper_bound(mdp, c_inf))`; the clip level is
    /// `K = clip_base / 4 + 2 ln beta`.
    pub fn exponential_clipped(mdp: &Mdp, beta: f64, c_inf: f64) -> Result<Self> {
        check_c_inf(c_inf)?;
        if !(beta > 1.0) {
            return Err(Error::Config(format!("beta must exceed 1, got {beta}")));
        }
        let upper = beta_upper_bound(mdp, c_inf);
        if !(beta < upper) {
            return Err(Error::Config(format!(
                "beta = {beta} is outside the admissible interval (1, {upper}) for C_inf = {c_inf}"
            )));
        }
        let clip = clip_base(mdp, c_inf) / 4.0 + 2.0 * beta.ln();
        Ok(StepSchedule::ExponentialClipped { gamma: mdp.gamma(), beta, clip, c_inf })
    }

    /// Clipped schedule at the geometric midpoint of the admissible `beta` interval.
    pub fn exponential_clipped_default(mdp: &Mdp, c_inf: f64) -> Result<Self> {
        check_c_inf(c_inf)?;
        let beta = (beta_upper_bound(mdp, c_inf).ln() / 2.0).exp();
        Self::exponential_clipped(mdp, beta, c_inf)
    }

    pub fn normalized(mdp: &Mdp, c_inf: f64) -> Result<Self> {
        check_c_inf(c_inf)?;
        let one_minus = 1.0 - mdp.gamma();
        let scale = one_minus / (6.0 * one_minus + 8.0 * (c_inf - one_minus)) / (mdp.n_states() as f64).sqrt();
        Ok(StepSchedule::Normalized { scale, c_inf })
    }

    /// Step size at iteration `t >= 1`. `grad_norm` is only read by the normalized schedule.
    pub fn eta(&self, t: u64, grad_norm: f64) -> f64 {
        let t = t as f64;
        match *self {
            StepSchedule::NearlyConstantMdp { gamma } => t / (t + 1.0) * (1.0 - gamma).powi(3) / 16.0,
            StepSchedule::NearlyConstantBandit => t / (t + 1.0) / 5.0,
            StepSchedule::Constant { eta } => eta,
            StepSchedule::ExponentialClipped { gamma, beta, .. } => beta.powf(t) * (1.0 - gamma).powi(3) / 8.0,
            StepSchedule::Normalized { scale, .. } => scale / grad_norm,
        }
    }

    pub fn clip(&self) -> Option<f64> {
        match *self {
            StepSchedule::ExponentialClipped { clip, .. } => Some(clip),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            StepSchedule::NearlyConstantMdp { .. } => "nearly_constant_mdp",
            StepSchedule::NearlyConstantBandit => "nearly_constant_bandit",
            StepSchedule::Constant { .. } => "constant",
            StepSchedule::ExponentialClipped { .. } => "exponential_clipped",
            StepSchedule::Normalized { .. } => "normalized",
        }
    }
}

fn check_c_inf(c_inf: f64) -> Result<()> {
    if !(c_inf >= 1.0 && c_inf.is_finite()) {
        return Err(Error::Config(format!("C_inf must be a finite value >= 1, got {c_inf}")));
    }
    Ok(())
}

//! Numerical checks of the local structure that accelerated policy gradient
//! relies on, and rate measurements on traces.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{gradient_at, values_at};
use crate::mdp::Mdp;
use crate::optim::OptimizerState;
use crate::optimal::OptimalSolution;
use crate::policy::{min_action_gap, PolicyParams};
use crate::trace::TraceRecord;

/// Minimum number of trace points a rate window must contain.
pub const MIN_WINDOW_POINTS: usize = 20;

/// True iff every row has its strict maximum at `a_star[s]`.
pub fn in_feasible_domain(d: &DMatrix<f64>, a_star: &[usize]) -> bool {
    infeasible_state(d, a_star).is_none()
}

fn infeasible_state(d: &DMatrix<f64>, a_star: &[usize]) -> Option<usize> {
    (0..d.nrows()).find(|&s| {
        let best = d[(s, a_star[s])];
        (0..d.ncols()).any(|a| a != a_star[s] && !(best > d[(s, a)]))
    })
}

/// `M_C = ln[|S| |A|^2 / ((C - 1) (1 - gamma)^2 min_s mu(s))]`.
pub fn m_c_threshold(c: f64, mdp: &Mdp) -> Result<f64> {
    if !(c > 1.0) {
        return Err(Error::Config(format!("near-concavity constant must exceed 1, got {c}")));
    }
    let (ns, na) = (mdp.n_states() as f64, mdp.n_actions() as f64);
    let denom = (c - 1.0) * (1.0 - mdp.gamma()).powi(2) * mdp.mu().min();
    Ok((ns * na * na / denom).ln())
}

/// `M_d = 2 max_{s, a != a*} { ln[2(|A| - 1)] - ln(d[s, a*] - d[s, a]) }` for a
/// direction whose rows have unit Euclidean norm.
pub fn m_d_threshold(d: &DMatrix<f64>, a_star: &[usize]) -> Result<f64> {
    if a_star.len() != d.nrows() {
        return Err(Error::Dimension { what: "optimal actions", expected: d.nrows(), got: a_star.len() });
    }
    if let Some(s) = infeasible_state(d, a_star) {
        return Err(Error::InfeasibleDirection(s));
    }
    for (s, row) in d.row_iter().enumerate() {
        let norm = row.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("direction row {s} has norm {norm}, expected 1")));
        }
    }
    let base = (2.0 * (d.ncols() as f64 - 1.0)).ln();
    let mut worst = f64::NEG_INFINITY;
    for (s, &best) in a_star.iter().enumerate() {
        for a in (0..d.ncols()).filter(|&a| a != best) {
            worst = worst.max(base - (d[(s, best)] - d[(s, a)]).ln());
        }
    }
    Ok(2.0 * worst)
}

/// `M_{C,d} = max(M_d, M_C)`.
pub fn m_cd_threshold(c: f64, mdp: &Mdp, d: &DMatrix<f64>, a_star: &[usize]) -> Result<f64> {
    Ok(m_d_threshold(d, a_star)?.max(m_c_threshold(c, mdp)?))
}

/// Scales every row of `d` to unit Euclidean norm. Zero rows are left as is.
pub fn normalize_rows(d: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = d.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Geometric grid of `n` step sizes from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|i| lo * (ratio * i as f64).exp()).collect()
}

/// Default step grid: 16 points from 1e-3 to 1.
pub fn default_k_grid() -> Vec<f64> {
    geometric_grid(1e-3, 1.0, 16)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConcavityReport {
    pub c_value: f64,
    #[serde(serialize_with = "ser_rows")]
    pub direction: DMatrix<f64>,
    pub k_grid: Vec<f64>,
    /// `max_k f(theta + k d) - f(theta) - C k <grad f(theta), d>`; `<= 0` means no violation found.
    pub max_violation: f64,
    pub worst_k: f64,
    /// `M_{C,d}` of the row-normalized direction, or `+inf` when it leaves the feasible domain.
    pub threshold_m: f64,
    /// `min theta-gap > M_{C,d}`.
    pub theta_gap_ok: bool,
}

fn ser_rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for row in m.row_iter() {
        seq.serialize_element(&row.iter().copied().collect::<Vec<_>>())?;
    }
    seq.end()
}

/// Grid test of `f(theta + k d) <= f(theta) + C <grad f(theta), k d>` with
/// `f = V^{pi_theta}(dist)`.
pub fn near_concavity_violation(
    mdp: &Mdp,
    dist: &DVector<f64>,
    theta: &PolicyParams,
    d: &DMatrix<f64>,
    c: f64,
    k_grid: &[f64],
    a_star: &[usize],
) -> Result<ConcavityReport> {
    if k_grid.is_empty() || k_grid.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
        return Err(Error::Config("step grid must be non-empty with positive entries".into()));
    }
    if d.shape() != theta.shape() {
        return Err(Error::Dimension { what: "direction rows", expected: theta.shape().0, got: d.nrows() });
    }
    let g = gradient_at(mdp, theta.matrix(), dist)?;
    let f0 = g.v.dot(dist);
    let slope = g.grad.dot(d);
    let mut max_violation = f64::NEG_INFINITY;
    let mut worst_k = k_grid[0];
    for &k in k_grid {
        let f = values_at(mdp, &(theta.matrix() + d * k))?.dot(dist);
        let violation = f - f0 - c * k * slope;
        if violation > max_violation {
            max_violation = violation;
            worst_k = k;
        }
    }
    let threshold_m = match m_cd_threshold(c, mdp, &normalize_rows(d), a_star) {
        Ok(m) => m,
        Err(Error::InfeasibleDirection(_)) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok(ConcavityReport {
        c_value: c,
        direction: d.clone(),
        k_grid: k_grid.to_vec(),
        max_violation,
        worst_k,
        threshold_m,
        theta_gap_ok: theta.min_gap(a_star) > threshold_m,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConditionFlags {
    /// `min_{s, a != a*} theta[s,a*] - theta[s,a] > M`.
    pub cond_i: bool,
    /// `V^{pi_theta}(s) > Q*(s, a_2(s))` for every state.
    pub cond_ii: bool,
    /// Gradient at `omega` positive at `a*` and negative elsewhere, every state.
    pub cond_iii: bool,
    /// `omega[s,a*] - theta[s,a*] >= omega[s,a] - theta[s,a]`.
    pub cond_iv: bool,
}

impl ConditionFlags {
    pub fn all(&self) -> bool {
        self.cond_i && self.cond_ii && self.cond_iii && self.cond_iv
    }
}

/// Evaluates the four restart-absorption conditions at `state`. Values and
/// gradients are taken under the optimizer distribution `mu`.
pub fn concavity_conditions(state: &OptimizerState, mdp: &Mdp, opt: &OptimalSolution, m: f64) -> Result<ConditionFlags> {
    let v_theta = values_at(mdp, state.theta.matrix())?;
    let grad_omega = gradient_at(mdp, state.omega.matrix(), mdp.mu())?.grad;
    Ok(conditions_from(state.theta.matrix(), state.omega.matrix(), &v_theta, &grad_omega, opt, m))
}

pub(crate) fn conditions_from(
    theta: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    v_theta: &DVector<f64>,
    grad_omega: &DMatrix<f64>,
    opt: &OptimalSolution,
    m: f64,
) -> ConditionFlags {
    let a_star = &opt.a_star;
    let others = |s: usize| (0..theta.ncols()).filter(move |&a| a != a_star[s]);
    let states = 0..theta.nrows();
    ConditionFlags {
        cond_i: min_action_gap(theta, a_star) > m,
        cond_ii: states.clone().all(|s| v_theta[s] > opt.a2_q[s]),
        cond_iii: states
            .clone()
            .all(|s| grad_omega[(s, a_star[s])] > 0.0 && others(s).all(|a| grad_omega[(s, a)] < 0.0)),
        cond_iv: states.clone().all(|s| {
            let lead = omega[(s, a_star[s])] - theta[(s, a_star[s])];
            others(s).all(|a| lead >= omega[(s, a)] - theta[(s, a)])
        }),
    }
}

/// First logged iteration from which all four conditions hold at every later
/// logged iteration.
pub fn condition_onset(records: &[TraceRecord]) -> Option<u64> {
    let tail = records.iter().rev().take_while(|r| r.all_conditions()).count();
    (tail > 0).then(|| records[records.len() - tail].t)
}

/// Logged iterations where all four conditions held and a later record reverted.
pub fn condition_reversions(records: &[TraceRecord]) -> Vec<u64> {
    let first = records.iter().position(|r| r.all_conditions());
    match first {
        Some(i) => records[i..].iter().filter(|r| !r.all_conditions()).map(|r| r.t).collect(),
        None => Vec::new(),
    }
}

/// Summary of a trace file, computed from its columns alone.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceDiagnosis {
    pub records: usize,
    pub final_t: u64,
    pub final_gap_rho: f64,
    pub condition_onset: Option<u64>,
    pub condition_reversions: Vec<u64>,
    /// All four conditions hold at the onset and at every later record.
    pub conditions_persist: bool,
    /// Share of records with `t >= 1` whose last update lies in the feasible domain.
    pub feasible_domain_fraction: f64,
    pub restart_count: u64,
    /// Logged iterations with an active restart.
    pub restart_iters_logged: Vec<u64>,
    /// `mom_improve` is zero in every record, as for methods without a lookahead.
    pub momentum_identically_zero: bool,
    /// Logged `t` with `V^{theta(t+1)}(rho) < V^{theta(t)}(rho)`.
    pub negative_one_step: Vec<u64>,
}

pub fn diagnose_records(records: &[TraceRecord]) -> Result<TraceDiagnosis> {
    let last = records.last().ok_or_else(|| Error::Config("trace has no records".into()))?;
    let stepped: Vec<&TraceRecord> = records.iter().filter(|r| r.t >= 1).collect();
    let feasible = stepped.iter().filter(|r| r.feasible_domain == 1).count();
    let onset = condition_onset(records);
    let reversions = condition_reversions(records);
    Ok(TraceDiagnosis {
        records: records.len(),
        final_t: last.t,
        final_gap_rho: last.gap_rho,
        condition_onset: onset,
        conditions_persist: onset.is_some() && reversions.is_empty(),
        condition_reversions: reversions,
        feasible_domain_fraction: if stepped.is_empty() { 0.0 } else { feasible as f64 / stepped.len() as f64 },
        restart_count: last.restart_count,
        restart_iters_logged: records.iter().filter(|r| r.restart_active == 1).map(|r| r.t).collect(),
        momentum_identically_zero: records.iter().all(|r| r.mom_improve == 0.0),
        negative_one_step: one_step_decomposition(records)
            .into_iter()
            .filter(|o| o.total.is_some_and(|x| x < 0.0))
            .map(|o| o.t)
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OneStep {
    pub t: u64,
    /// `V^{omega(t)}(rho) - V^{theta(t)}(rho)`.
    pub mom: f64,
    /// `V^{theta(t+1)}(rho) - V^{omega(t)}(rho)`, when `t + 1` was computed.
    pub grad: Option<f64>,
    /// `V^{theta(t+1)}(rho) - V^{theta(t)}(rho)`.
    pub total: Option<f64>,
}

/// Splits each logged one-step improvement into its momentum and gradient parts.
pub fn one_step_decomposition(records: &[TraceRecord]) -> Vec<OneStep> {
    records
        .iter()
        .map(|r| OneStep {
            t: r.t,
            mom: r.v_omega_rho - r.v_rho,
            grad: r.v_next_rho.map(|next| next - r.v_omega_rho),
            total: r.v_next_rho.map(|next| next - r.v_rho),
        })
        .collect()
}

/// Eigenvalues of the Hessian of `pi_theta(a*)` in a two-armed bandit where
/// `pi_theta(a*) = p`: `2p(1-p)(1-2p)` and `0`.
pub fn bandit_hessian_eigs(p: f64) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("probability must lie in (0, 1), got {p}")));
    }
    Ok((2.0 * p * (1.0 - p) * (1.0 - 2.0 * p), 0.0))
}

fn window(points: &[(f64, f64)], t_min: f64, t_max: f64) -> Result<Vec<(f64, f64)>> {
    let w: Vec<_> = points.iter().copied().filter(|(t, _)| *t >= t_min && *t <= t_max).collect();
    if w.len() < MIN_WINDOW_POINTS {
        return Err(Error::Window(format!(
            "[{t_min}, {t_max}] holds {} points, need at least {MIN_WINDOW_POINTS}",
            w.len()
        )));
    }
    if let Some((t, g)) = w.iter().find(|(_, g)| !(*g > 0.0)) {
        return Err(Error::Window(format!("gap {g} at t={t} is not positive; shrink the window")));
    }
    Ok(w)
}

/// Least-squares slope and Pearson correlation of `y` on `x`. A constant `y`
/// has correlation zero.
fn fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    let r = if syy > 0.0 { sxy / (sxx * syy).sqrt() } else { 0.0 };
    (slope, r)
}

/// Slope of `-ln(gap)` against `ln(t)` over `t_min <= t <= t_max`; a gap
/// decaying like `1/t^k` gives `k`.
pub fn loglog_slope(points: &[(f64, f64)], t_min: f64, t_max: f64) -> Result<f64> {
    if !(t_min > 0.0) {
        return Err(Error::Window(format!("log-log window must start after t=0, got {t_min}")));
    }
    let w = window(points, t_min, t_max)?;
    let xs: Vec<f64> = w.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = w.iter().map(|(_, g)| -g.ln()).collect();
    Ok(fit(&xs, &ys).0)
}

/// Fit of `ln(gap)` against `t`: returns `(rate, pearson_r)`; linear convergence
/// shows as a negative rate with `|r|` near one.
pub fn linear_rate_fit(points: &[(f64, f64)], t_min: f64, t_max: f64) -> Result<(f64, f64)> {
    let w = window(points, t_min, t_max)?;
    let xs: Vec<f64> = w.iter().map(|(t, _)| *t).collect();
    let ys: Vec<f64> = w.iter().map(|(_, g)| g.ln()).collect();
    Ok(fit(&xs, &ys))
}

/// The last decade `[t_end / 10, t_end]` of a trace.
pub fn last_decade(records: &[TraceRecord]) -> (f64, f64) {
    let end = records.last().map_or(0, |r| r.t) as f64;
    (end / 10.0, end)
}

/// Window over the records whose gap is still above `floor`, trimmed to its
/// last `fraction` of iterations. Used for linear fits, where the gap reaches
/// machine precision long before the run ends.
pub fn resolved_tail(records: &[TraceRecord], floor: f64, fraction: f64) -> Option<(f64, f64)> {
    let end = records.iter().take_while(|r| r.gap_rho > floor).last()?.t as f64;
    Some((end * (1.0 - fraction), end))
}

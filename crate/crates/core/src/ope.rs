//! Backward Q-iteration with matrix estimation, in the infinite-sample
//! setting (true kernel on the behavior support) and the finite-sample
//! setting (empirical kernel from an offline dataset), plus evaluators for the
//! matching error bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{empirical_model, OfflineDataset};
use crate::discrepancy::{empirical_operator_discrepancy, operator_discrepancy, DiscrepancyConfig};
use crate::error::{invalid, Error, Result};
use crate::matrix_estimation::{operator_norm, solve_me, ConstraintMode, MEProblem, SolverConfig};
use crate::mdp::{
    bellman_apply, initial_value, occupancy_measures, DenseKernel, LowRankMDP, Mat, PartialMatrix, Policy,
    SUPPORT_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    InfiniteSample,
    FiniteSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub support_size: usize,
    pub entry_bound: f64,
    pub constraint_residual: f64,
    pub max_norm_value: f64,
    pub solver_iterations: usize,
    pub converged: bool,
    /// Inner-product slack used at this step (finite mode only).
    pub slack: Option<f64>,
    /// `‖ρ_t − d_t^θ‖_op`, when the target occupancy is available.
    pub emp_dis: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OPERun {
    pub mode: EvaluationMode,
    pub q_estimates: Vec<Mat>,
    pub per_step_z: Vec<PartialMatrix>,
    pub estimate: f64,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// How the inner-product slack of the finite-sample program is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlackRule {
    /// `|⟨ρ_t, Z_t − Y_t⟩|` computed with the true MDP.
    Oracle,
    /// `c·H·√(S·log(HS/δ)/K)`.
    PlugIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlackConfig {
    pub rule: SlackRule,
    pub c: f64,
    pub delta: f64,
}

impl Default for SlackConfig {
    fn default() -> Self {
        Self {
            rule: SlackRule::PlugIn,
            c: 1.0,
            delta: 0.05,
        }
    }
}

/// `c·H·√(S·log(HS/δ)/K)`.
pub fn plugin_slack(horizon: usize, num_states: usize, k: usize, delta: f64, c: f64) -> f64 {
    let (h, s) = (horizon as f64, num_states as f64);
    c * h * (s * (h * s / delta).ln() / k as f64).sqrt()
}

/// Entry bound `L_t = H − t` for the 0-indexed step `t`.
fn entry_bound(horizon: usize, t: usize) -> f64 {
    (horizon - t) as f64
}

fn with_step(err: Error, t: usize) -> Error {
    match err {
        Error::SolverFailure { reason, best_residual, .. } => Error::SolverFailure {
            step: Some(t),
            reason,
            best_residual,
        },
        other => other,
    }
}

fn support_of(rho: &Mat) -> DMatrix<bool> {
    rho.map(|x| x > SUPPORT_TOL)
}

/// Backward Q-iteration with `ρ_t = d_t^β` and exact backups on `supp(ρ_t)`.
pub fn evaluate_policy_infinite(
    mdp: &LowRankMDP,
    behavior: &Policy,
    target: &Policy,
    me_config: &SolverConfig,
) -> Result<OPERun> {
    let rho = occupancy_measures(mdp, behavior)?.state_action;
    let d_theta = occupancy_measures(mdp, target)?.state_action;
    let (s, a, h) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut q_hat = vec![Mat::zeros(s, a); h];
    let mut z = Vec::with_capacity(h);
    let mut diagnostics = Vec::with_capacity(h);
    for t in (0..h).rev() {
        let support = support_of(&rho[t]);
        if !support.iter().any(|&b| b) {
            return Err(invalid(format!("behavior occupancy at step {t} is empty")));
        }
        let (next_pi, f) = continuation(target, &q_hat, t);
        let y = bellman_apply(&DenseKernel::of(mdp, t), mdp.reward(t), next_pi, &f, Some(&support))?;
        let l = entry_bound(h, t);
        let problem = MEProblem::new(rho[t].clone(), y.clone(), l, mdp.rank_param(), ConstraintMode::Equality)
            .map_err(|e| with_step(e, t))?;
        let sol = solve_me(&problem, me_config).map_err(|e| with_step(e, t))?;
        diagnostics.push(StepDiagnostics {
            step: t,
            support_size: support.iter().filter(|&&b| b).count(),
            entry_bound: l,
            constraint_residual: sol.constraint_residual,
            max_norm_value: sol.max_norm_value,
            solver_iterations: sol.iterations,
            converged: sol.converged,
            slack: None,
            emp_dis: Some(operator_norm(&(&rho[t] - &d_theta[t]))),
        });
        q_hat[t] = sol.estimate;
        z.push(y);
    }
    z.reverse();
    diagnostics.reverse();
    let estimate = initial_value(mdp.initial_dist(), target.step(0), &q_hat[0]);
    Ok(OPERun {
        mode: EvaluationMode::InfiniteSample,
        q_estimates: q_hat,
        per_step_z: z,
        estimate,
        diagnostics,
    })
}

/// `(π_{t+1}, Q̂_{t+1})`, or no continuation at the last step.
fn continuation<'a>(target: &'a Policy, q_hat: &[Mat], t: usize) -> (Option<&'a Mat>, Mat) {
    if t + 1 < q_hat.len() {
        (Some(target.step(t + 1)), q_hat[t + 1].clone())
    } else {
        (None, Mat::zeros(q_hat[t].nrows(), q_hat[t].ncols()))
    }
}

/// Backward Q-iteration with `ρ_t = d̂_t^β`, empirical backups and the
/// inner-product-constrained program.
///
/// `oracle` is required by [`SlackRule::Oracle`]; when present it also fills
/// the per-step `emp_dis` diagnostics.
pub fn evaluate_policy_finite(
    dataset: &OfflineDataset,
    target: &Policy,
    mu1: &DVector<f64>,
    rank_param: usize,
    me_config: &SolverConfig,
    slack: &SlackConfig,
    oracle: Option<&LowRankMDP>,
) -> Result<OPERun> {
    let (s, a, h) = (dataset.num_states, dataset.num_actions, dataset.horizon);
    if target.num_states() != s || target.num_actions() != a || target.horizon() != h {
        return Err(Error::DimensionMismatch("target policy vs dataset".into()));
    }
    if mu1.len() != s {
        return Err(Error::DimensionMismatch("initial distribution vs dataset".into()));
    }
    if let Some(mdp) = oracle {
        if (mdp.num_states(), mdp.num_actions(), mdp.horizon()) != (s, a, h) {
            return Err(Error::DimensionMismatch("oracle MDP vs dataset".into()));
        }
    }
    if slack.rule == SlackRule::Oracle && oracle.is_none() {
        return Err(invalid("oracle slack requires the MDP"));
    }
    if slack.rule == SlackRule::PlugIn && !(slack.delta > 0.0 && slack.delta < 1.0) {
        return Err(invalid("delta must lie in (0, 1)"));
    }
    let model = empirical_model(dataset)?;
    let d_theta = match oracle {
        Some(mdp) => Some(occupancy_measures(mdp, target)?.state_action),
        None => None,
    };
    let mut q_hat = vec![Mat::zeros(s, a); h];
    let mut z_all = Vec::with_capacity(h);
    let mut diagnostics = Vec::with_capacity(h);
    for t in (0..h).rev() {
        let rho = &model.empirical_occupancy[t];
        let support = support_of(rho);
        let (next_pi, f) = continuation(target, &q_hat, t);
        let z = bellman_apply(
            &model.empirical_kernel[t],
            &model.observed_reward[t].values,
            next_pi,
            &f,
            Some(&support),
        )?;
        let eps = match slack.rule {
            SlackRule::PlugIn => plugin_slack(h, s, model.num_trajectories, slack.delta, slack.c),
            SlackRule::Oracle => {
                let mdp = oracle.expect("checked above");
                let y = bellman_apply(&DenseKernel::of(mdp, t), mdp.reward(t), next_pi, &f, Some(&support))?;
                weighted_gap(rho, &z, &y).abs()
            }
        };
        let l = entry_bound(h, t);
        let problem = MEProblem::new(
            rho.clone(),
            z.clone(),
            l,
            rank_param,
            ConstraintMode::InnerProduct { slack: eps },
        )
        .map_err(|e| with_step(e, t))?;
        let sol = solve_me(&problem, me_config).map_err(|e| with_step(e, t))?;
        diagnostics.push(StepDiagnostics {
            step: t,
            support_size: support.iter().filter(|&&b| b).count(),
            entry_bound: l,
            constraint_residual: sol.constraint_residual,
            max_norm_value: sol.max_norm_value,
            solver_iterations: sol.iterations,
            converged: sol.converged,
            slack: Some(eps),
            emp_dis: d_theta.as_ref().map(|d| operator_norm(&(rho - &d[t]))),
        });
        q_hat[t] = sol.estimate;
        z_all.push(z);
    }
    z_all.reverse();
    diagnostics.reverse();
    let estimate = initial_value(mu1, target.step(0), &q_hat[0]);
    Ok(OPERun {
        mode: EvaluationMode::FiniteSample,
        q_estimates: q_hat,
        per_step_z: z_all,
        estimate,
        diagnostics,
    })
}

/// `Σ_{supp ρ} ρ (Z − Y)`.
fn weighted_gap(rho: &Mat, z: &PartialMatrix, y: &PartialMatrix) -> f64 {
    let mut total = 0.0;
    for i in 0..rho.nrows() {
        for j in 0..rho.ncols() {
            if rho[(i, j)] > SUPPORT_TOL {
                total += rho[(i, j)] * (z.values[(i, j)] - y.values[(i, j)]);
            }
        }
    }
    total
}

/// Both sides of the telescoping error identity for a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    /// `⟨d_t^θ, Q̂_t − Y_t⟩` with `Y_t = B_t^θ Q̂_{t+1}` on all of `S×A`.
    pub per_step: Vec<f64>,
    pub telescoped: f64,
    /// `⟨d_1^θ, Q̂_1 − Q_1^θ⟩`.
    pub direct: f64,
}

pub fn error_decomposition(mdp: &LowRankMDP, target: &Policy, run: &OPERun) -> Result<ErrorDecomposition> {
    let h = mdp.horizon();
    if run.q_estimates.len() != h {
        return Err(Error::DimensionMismatch("run horizon vs MDP".into()));
    }
    let d_theta = occupancy_measures(mdp, target)?.state_action;
    let q_true = crate::mdp::exact_q_values(mdp, target)?;
    let mut per_step = Vec::with_capacity(h);
    for t in 0..h {
        let (next_pi, f) = continuation(target, &run.q_estimates, t);
        let y = bellman_apply(&DenseKernel::of(mdp, t), mdp.reward(t), next_pi, &f, None)?;
        per_step.push(d_theta[t].dot(&(&run.q_estimates[t] - &y.values)));
    }
    let telescoped = per_step.iter().sum();
    let direct = d_theta[0].dot(&(&run.q_estimates[0] - &q_true[0]));
    Ok(ErrorDecomposition {
        per_step,
        telescoped,
        direct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfiniteBound {
    pub total: f64,
    /// `2H√(dSA)`.
    pub factor: f64,
    pub per_step_dis: Vec<f64>,
    pub per_step_certificate_gap: Vec<f64>,
}

/// `2H√(dSA)·Σ_t Dis(d_t^β, d_t^θ)`.
pub fn bound_infinite(
    mdp: &LowRankMDP,
    behavior: &Policy,
    target: &Policy,
    config: &DiscrepancyConfig,
) -> Result<InfiniteBound> {
    let rho = occupancy_measures(mdp, behavior)?.state_action;
    let d_theta = occupancy_measures(mdp, target)?.state_action;
    let mut per_step_dis = Vec::with_capacity(rho.len());
    let mut gaps = Vec::with_capacity(rho.len());
    for (p, q) in rho.iter().zip(&d_theta) {
        let r = operator_discrepancy(p, q, config)?;
        per_step_dis.push(r.value);
        gaps.push(r.certificate_gap);
    }
    let factor = discrepancy_factor(mdp);
    Ok(InfiniteBound {
        total: factor * per_step_dis.iter().sum::<f64>(),
        factor,
        per_step_dis,
        per_step_certificate_gap: gaps,
    })
}

fn discrepancy_factor(mdp: &LowRankMDP) -> f64 {
    let (s, a, h, d) = (
        mdp.num_states() as f64,
        mdp.num_actions() as f64,
        mdp.horizon() as f64,
        mdp.rank_param() as f64,
    );
    2.0 * h * (d * s * a).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteBound {
    pub total: f64,
    pub discrepancy_term: f64,
    pub statistical_term: f64,
    pub per_step_emp_dis: Vec<f64>,
    /// The stated regime of the finite-sample guarantee is `2 < K < SA`.
    pub outside_stated_regime: bool,
}

/// `C·H²·√(d(S+A)·log(HS/δ)/K)`.
pub fn statistical_term(s: usize, a: usize, h: usize, d: usize, k: usize, delta: f64, c: f64) -> f64 {
    let (sf, af, hf, df) = (s as f64, a as f64, h as f64, d as f64);
    c * hf * hf * (df * (sf + af) * (hf * sf / delta).ln() / k as f64).sqrt()
}

/// `2H√(dSA)·Σ_t ‖d_t^β − d_t^θ‖_op + C·H²·√(d(S+A)·log(HS/δ)/K)`.
pub fn bound_finite(
    mdp: &LowRankMDP,
    behavior: &Policy,
    target: &Policy,
    k: usize,
    delta: f64,
    c: f64,
) -> Result<FiniteBound> {
    if k == 0 {
        return Err(invalid("K must be positive"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("delta must lie in (0, 1)"));
    }
    let rho = occupancy_measures(mdp, behavior)?.state_action;
    let d_theta = occupancy_measures(mdp, target)?.state_action;
    let per_step_emp_dis = rho
        .iter()
        .zip(&d_theta)
        .map(|(p, q)| empirical_operator_discrepancy(p, q))
        .collect::<Result<Vec<_>>>()?;
    let discrepancy_term = discrepancy_factor(mdp) * per_step_emp_dis.iter().sum::<f64>();
    let (s, a) = (mdp.num_states(), mdp.num_actions());
    let statistical = statistical_term(s, a, mdp.horizon(), mdp.rank_param(), k, delta, c);
    Ok(FiniteBound {
        total: discrepancy_term + statistical,
        discrepancy_term,
        statistical_term: statistical,
        per_step_emp_dis,
        outside_stated_regime: k <= 2 || k >= s * a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_trajectories;
    use crate::mdp::{exact_return, random_low_rank_mdp, random_policy, random_subset_policy, FactorizationForm};

    fn instance(seed: u64) -> LowRankMDP {
        random_low_rank_mdp(4, 3, 3, 2, seed, FactorizationForm::ActionSeparable).unwrap()
    }

    #[test]
    fn full_support_is_exact() {
        let mdp = instance(1);
        let beta = random_policy(4, 3, 3, 2);
        let theta = random_subset_policy(4, 3, 3, 1, 3).unwrap();
        let run = evaluate_policy_infinite(&mdp, &beta, &theta, &SolverConfig::default()).unwrap();
        let truth = exact_return(&mdp, &theta).unwrap();
        assert!((run.estimate - truth).abs() < 1e-6);
        let bound = bound_infinite(&mdp, &beta, &theta, &DiscrepancyConfig::default()).unwrap();
        assert_eq!(bound.total, 0.0);
    }

    #[test]
    fn run_invariants() {
        let mdp = instance(4);
        let beta = random_subset_policy(4, 3, 3, 1, 5).unwrap();
        let theta = random_subset_policy(4, 3, 3, 2, 6).unwrap();
        let run = evaluate_policy_infinite(&mdp, &beta, &theta, &SolverConfig::default()).unwrap();
        let j = initial_value(mdp.initial_dist(), theta.step(0), &run.q_estimates[0]);
        assert!((run.estimate - j).abs() <= 1e-12);
        for (t, q) in run.q_estimates.iter().enumerate() {
            assert!(q.amax() <= (3 - t) as f64 + 1e-9);
        }
        assert!(run.estimate.abs() <= 3.0);
        let dec = error_decomposition(&mdp, &theta, &run).unwrap();
        assert!((dec.telescoped - dec.direct).abs() < 1e-8);
        let truth = exact_return(&mdp, &theta).unwrap();
        assert!((dec.direct - (run.estimate - truth)).abs() < 1e-9);
    }

    #[test]
    fn finite_mode_single_trajectory() {
        let mdp = instance(7);
        let beta = random_policy(4, 3, 3, 8);
        let data = sample_trajectories(&mdp, &beta, 1, 9).unwrap();
        let run = evaluate_policy_finite(
            &data,
            &beta,
            mdp.initial_dist(),
            2,
            &SolverConfig::default(),
            &SlackConfig::default(),
            None,
        )
        .unwrap();
        assert!(run.estimate.is_finite() && run.estimate.abs() <= 3.0);
        assert_eq!(run.mode, EvaluationMode::FiniteSample);
    }

    #[test]
    fn oracle_slack_requires_mdp() {
        let mdp = instance(2);
        let beta = random_policy(4, 3, 3, 1);
        let data = sample_trajectories(&mdp, &beta, 10, 1).unwrap();
        let cfg = SlackConfig {
            rule: SlackRule::Oracle,
            ..SlackConfig::default()
        };
        let err = evaluate_policy_finite(&data, &beta, mdp.initial_dist(), 2, &SolverConfig::default(), &cfg, None);
        assert!(err.is_err());
        let ok = evaluate_policy_finite(
            &data,
            &beta,
            mdp.initial_dist(),
            2,
            &SolverConfig::default(),
            &cfg,
            Some(&mdp),
        )
        .unwrap();
        assert!(ok.diagnostics.iter().all(|d| d.slack.unwrap() >= 0.0 && d.emp_dis.is_some()));
    }

    #[test]
    fn finite_bound_arithmetic() {
        let mdp = instance(3);
        let beta = random_policy(4, 3, 3, 1);
        let b1 = bound_finite(&mdp, &beta, &beta, 1000, 0.05, 1.0).unwrap();
        let b2 = bound_finite(&mdp, &beta, &beta, 2000, 0.05, 1.0).unwrap();
        assert_eq!(b1.discrepancy_term, 0.0);
        assert!((b2.statistical_term / b1.statistical_term - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(b1.outside_stated_regime);
        let small = bound_finite(&mdp, &beta, &beta, 5, 0.05, 1.0).unwrap();
        assert!(!small.outside_stated_regime);
    }

    #[test]
    fn plugin_slack_formula() {
        let v = plugin_slack(2, 3, 100, 0.05, 1.0);
        assert!((v - 2.0 * (3.0 * (6.0f64 / 0.05).ln() / 100.0).sqrt()).abs() < 1e-15);
    }
}

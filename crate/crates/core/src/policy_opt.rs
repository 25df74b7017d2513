//! Policy improvement over a finite set of candidates that stay within
//! per-step operator-norm budgets of the behavior policy.

use log::warn;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::data::OfflineDataset;
use crate::error::{invalid, Error, Result};
use crate::matrix_estimation::{operator_norm, SolverConfig};
use crate::mdp::{LowRankMDP, Mat, Policy};
use crate::ope::{evaluate_policy_finite, SlackConfig};

/// Budgets below this are treated as zero: the step is copied from behavior.
const SNAP_BUDGET: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    /// Index 0 is the behavior policy.
    pub policies: Vec<Policy>,
    pub bounds: Vec<f64>,
    pub rank_param: usize,
    pub behavior_included: bool,
    /// `budget_t − ‖π_t − π_t^β‖_op` per policy and step.
    pub per_policy_constraint_slack: Vec<Vec<f64>>,
    /// Per-step operator-norm budgets `B_t·(√(dS²A))^{t−H}`.
    pub step_budgets: Vec<f64>,
    /// No candidate beyond behavior was accepted.
    pub budget_too_tight: bool,
}

impl CandidateSet {
    pub fn behavior(&self) -> &Policy {
        &self.policies[0]
    }
    pub fn len(&self) -> usize {
        self.policies.len()
    }
    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }
}

/// `B_t·(√(dS²A))^{t−H}` for 1-indexed `t`, evaluated in log space.
pub fn step_budgets(bounds: &[f64], d: usize, s: usize, a: usize) -> Vec<f64> {
    let h = bounds.len() as f64;
    let log_growth = 0.5 * ((d * s * s * a) as f64).ln();
    bounds
        .iter()
        .enumerate()
        .map(|(t, &b)| {
            if b <= 0.0 {
                0.0
            } else {
                (b.ln() + ((t + 1) as f64 - h) * log_growth).exp()
            }
        })
        .collect()
}

/// Per-step upper bound `Σ_{i≤t} (√(dS²A))^{t−i}·‖π_i − π_i^β‖_op` on
/// `‖d_t^π − d_t^β‖_op`.
pub fn occupancy_shift_bound(policy: &Policy, behavior: &Policy, d: usize) -> Vec<f64> {
    let (s, a) = (behavior.num_states(), behavior.num_actions());
    let growth = ((d * s * s * a) as f64).sqrt();
    let mut acc = 0.0;
    policy
        .steps()
        .iter()
        .zip(behavior.steps())
        .map(|(p, b)| {
            acc = acc * growth + operator_norm(&(p - b));
            acc
        })
        .collect()
}

fn gamma_row(rng: &mut ChaCha8Rng, a: usize) -> Vec<f64> {
    // Dirichlet draw biased toward a random vertex
    let vertex = rng.random_range(0..a);
    let mut w: Vec<f64> = (0..a)
        .map(|j| {
            let shape = if j == vertex { 4.0 } else { 0.5 };
            Gamma::new(shape, 1.0).expect("positive shape").sample(rng)
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        w = vec![0.0; a];
        w[vertex] = 1.0;
    }
    w
}

fn propose(behavior: &Policy, budgets: &[f64], rng: &mut ChaCha8Rng) -> Option<Vec<Mat>> {
    let (s, a) = (behavior.num_states(), behavior.num_actions());
    let mut any_moved = false;
    let steps = behavior
        .steps()
        .iter()
        .zip(budgets)
        .map(|(beta, &budget)| {
            if budget < SNAP_BUDGET {
                return beta.clone();
            }
            let mut w = Mat::zeros(s, a);
            for i in 0..s {
                let row = gamma_row(rng, a);
                for j in 0..a {
                    w[(i, j)] = row[j];
                }
            }
            let gap = operator_norm(&(&w - beta));
            if gap == 0.0 {
                return beta.clone();
            }
            // aim at U(0,1)·budget so the median distance is half the budget
            let lambda = (rng.random::<f64>() * budget / gap).min(1.0);
            any_moved = true;
            beta * (1.0 - lambda) + w * lambda
        })
        .collect();
    any_moved.then_some(steps)
}

/// Behavior plus up to `n_candidates − 1` accepted random perturbations.
pub fn build_candidate_set(
    behavior: &Policy,
    bounds: &[f64],
    d: usize,
    n_candidates: usize,
    seed: u64,
) -> Result<CandidateSet> {
    let (s, a, h) = (behavior.num_states(), behavior.num_actions(), behavior.horizon());
    if bounds.len() != h {
        return Err(Error::DimensionMismatch(format!("expected {h} budgets, got {}", bounds.len())));
    }
    if bounds.iter().any(|&b| !(b >= 0.0) || !b.is_finite()) {
        return Err(invalid("budgets must be finite and nonnegative"));
    }
    if n_candidates == 0 {
        return Err(invalid("n_candidates must be at least 1"));
    }
    let budgets = step_budgets(bounds, d, s, a);
    let slack_of = |p: &Policy| -> Vec<f64> {
        p.steps()
            .iter()
            .zip(behavior.steps())
            .zip(&budgets)
            .map(|((x, y), b)| b - operator_norm(&(x - y)))
            .collect()
    };
    let mut policies = vec![behavior.clone()];
    let mut slack = vec![slack_of(behavior)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_proposals = 100 * n_candidates;
    let mut proposals = 0;
    while policies.len() < n_candidates && proposals < max_proposals {
        proposals += 1;
        let Some(steps) = propose(behavior, &budgets, &mut rng) else {
            break;
        };
        let candidate = Policy::new(steps)?;
        let sl = slack_of(&candidate);
        if sl.iter().all(|&x| x >= -1e-12) {
            policies.push(candidate);
            slack.push(sl);
        }
    }
    let too_tight = policies.len() == 1 && n_candidates > 1;
    if too_tight {
        warn!("no candidate accepted beyond behavior after {proposals} proposals; budget too tight");
    }
    Ok(CandidateSet {
        policies,
        bounds: bounds.to_vec(),
        rank_param: d,
        behavior_included: true,
        per_policy_constraint_slack: slack,
        step_budgets: budgets,
        budget_too_tight: too_tight,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub best_index: usize,
    pub best: Policy,
    /// `None` for candidates whose evaluation failed.
    pub estimates: Vec<Option<f64>>,
}

/// Evaluates every candidate on the dataset and returns the argmax; ties go
/// to the lowest index.
pub fn optimize_policy(
    dataset: &OfflineDataset,
    candidates: &CandidateSet,
    mu1: &DVector<f64>,
    me_config: &SolverConfig,
    slack: &SlackConfig,
    oracle: Option<&LowRankMDP>,
) -> Result<OptimizationResult> {
    if candidates.is_empty() {
        return Err(invalid("empty candidate set"));
    }
    let estimates: Vec<Option<f64>> = candidates
        .policies
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            match evaluate_policy_finite(dataset, p, mu1, candidates.rank_param, me_config, slack, oracle) {
                Ok(run) => Some(run.estimate),
                Err(e) => {
                    warn!("candidate {i} excluded: {e}");
                    None
                }
            }
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in estimates.iter().enumerate() {
        if let Some(v) = *e {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    let (best_index, _) = best.ok_or(Error::AllCandidatesFailed(candidates.len()))?;
    Ok(OptimizationResult {
        best_index,
        best: candidates.policies[best_index].clone(),
        estimates,
    })
}

/// `4H√(dSA)·Σ_t B_t + C·H²·√(d(S+A)·log(|Π|·H·S/δ)/K)`.
pub fn suboptimality_bound(candidates: &CandidateSet, k: usize, delta: f64, c: f64) -> f64 {
    let p = candidates.behavior();
    let (s, a, h) = (p.num_states() as f64, p.num_actions() as f64, p.horizon() as f64);
    let d = candidates.rank_param as f64;
    let n = candidates.len() as f64;
    let shift = 4.0 * h * (d * s * a).sqrt() * candidates.bounds.iter().sum::<f64>();
    let stat = c * h * h * (d * (s + a) * (n * h * s / delta).ln() / k as f64).sqrt();
    shift + stat
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::random_policy;

    #[test]
    fn zero_budget_gives_behavior_only() {
        let beta = random_policy(3, 3, 2, 1);
        let set = build_candidate_set(&beta, &[0.0, 0.0], 2, 5, 0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.behavior(), &beta);
    }

    #[test]
    fn members_respect_budgets() {
        let beta = random_policy(3, 4, 3, 2);
        let set = build_candidate_set(&beta, &[0.5, 0.5, 0.5], 2, 10, 7).unwrap();
        assert_eq!(set.len(), 10);
        assert!(!set.budget_too_tight);
        for (p, sl) in set.policies.iter().zip(&set.per_policy_constraint_slack) {
            for (t, step) in p.steps().iter().enumerate() {
                let dist = operator_norm(&(step - beta.step(t)));
                assert!(dist <= set.step_budgets[t] + 1e-9);
                assert!(sl[t] >= -1e-12);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let beta = random_policy(3, 3, 2, 4);
        let a = build_candidate_set(&beta, &[1.0, 1.0], 2, 6, 3).unwrap();
        let b = build_candidate_set(&beta, &[1.0, 1.0], 2, 6, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_space_budget_does_not_underflow_to_nan() {
        let b = step_budgets(&[1.0; 400], 4, 10, 10);
        assert!(b.iter().all(|x| x.is_finite() && *x >= 0.0));
        assert!((b[399] - 1.0).abs() < 1e-12);
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn bound_depends_on_set_size_only_through_log() {
        let beta = random_policy(2, 2, 1, 0);
        let mut set = build_candidate_set(&beta, &[0.0], 2, 1, 0).unwrap();
        let one = suboptimality_bound(&set, 100, 0.05, 1.0);
        let expected = 1.0 * (2.0 * 4.0 * (2.0f64 / 0.05).ln() / 100.0).sqrt();
        assert!((one - expected).abs() < 1e-12);
        set.policies.push(beta.clone());
        let two = suboptimality_bound(&set, 100, 0.05, 1.0);
        let expected2 = (2.0 * 4.0 * (4.0f64 / 0.05).ln() / 100.0).sqrt();
        assert!((two - expected2).abs() < 1e-12);
    }
}

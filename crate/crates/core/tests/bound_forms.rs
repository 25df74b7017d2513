use lowrank_ope::discrepancy::{operator_discrepancy, DiscrepancyConfig};
use lowrank_ope::mdp::{occupancy_measures, random_low_rank_mdp, random_policy, random_subset_policy, FactorizationForm};
use lowrank_ope::ope::{bound_finite, bound_infinite, statistical_term};

#[test]
fn one_step_bound_is_scaled_discrepancy() {
    let mdp = random_low_rank_mdp(4, 5, 1, 4, 3, FactorizationForm::StateSeparable).unwrap();
    let beta = random_subset_policy(4, 5, 1, 2, 4).unwrap();
    let theta = random_subset_policy(4, 5, 1, 3, 5).unwrap();
    let cfg = DiscrepancyConfig::default();
    let b = bound_infinite(&mdp, &beta, &theta, &cfg).unwrap();
    let db = &occupancy_measures(&mdp, &beta).unwrap().state_action[0];
    let dt = &occupancy_measures(&mdp, &theta).unwrap().state_action[0];
    let dis = operator_discrepancy(db, dt, &cfg).unwrap().value;
    let expected = 2.0 * (4.0f64 * 4.0 * 5.0).sqrt() * dis;
    assert!((b.total - expected).abs() < 1e-12);
    assert!(b.total > 0.0);
}

#[test]
fn full_support_behavior_has_zero_bound() {
    let mdp = random_low_rank_mdp(3, 4, 3, 2, 8, FactorizationForm::FullyFactorized).unwrap();
    let beta = random_policy(3, 4, 3, 1);
    let theta = random_subset_policy(3, 4, 3, 1, 2).unwrap();
    let b = bound_infinite(&mdp, &beta, &theta, &DiscrepancyConfig::default()).unwrap();
    assert_eq!(b.total, 0.0);
    assert!(b.per_step_dis.iter().all(|&x| x == 0.0));
}

#[test]
fn self_evaluation_leaves_only_the_statistical_term() {
    let mdp = random_low_rank_mdp(5, 3, 2, 2, 6, FactorizationForm::ActionSeparable).unwrap();
    let beta = random_policy(5, 3, 2, 7);
    let k = 10;
    let b = bound_finite(&mdp, &beta, &beta, k, 0.05, 2.0).unwrap();
    assert_eq!(b.discrepancy_term, 0.0);
    // C·H²·√(d(S+A)·ln(HS/δ)/K) by hand
    let by_hand = 2.0 * 4.0 * (2.0 * 8.0 * (10.0f64 / 0.05).ln() / 10.0).sqrt();
    assert!((b.total - by_hand).abs() < 1e-12);
    assert_eq!(b.statistical_term, statistical_term(5, 3, 2, 2, k, 0.05, 2.0));
    assert!(!b.outside_stated_regime);
    assert!(bound_finite(&mdp, &beta, &beta, 15, 0.05, 2.0).unwrap().outside_stated_regime);
}

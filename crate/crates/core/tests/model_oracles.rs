use lowrank_ope::data::{empirical_model, sample_trajectories, OfflineDataset};
use lowrank_ope::matrix_estimation::norms::numerical_rank;
use lowrank_ope::mdp::{
    exact_q_values, exact_return, occupancy_measures, random_low_rank_mdp, random_policy, random_subset_policy,
    FactorizationForm, TransitionKernel,
};

const FORMS: [FactorizationForm; 4] = [
    FactorizationForm::ActionSeparable,
    FactorizationForm::StateSeparable,
    FactorizationForm::FullyFactorized,
    FactorizationForm::Uniform,
];

#[test]
fn monte_carlo_return_matches_exact() {
    for (i, form) in FORMS.into_iter().enumerate() {
        let mdp = random_low_rank_mdp(5, 4, 3, 4, 30 + i as u64, form).unwrap();
        let pi = random_policy(5, 4, 3, 40 + i as u64);
        let k = 40_000;
        let data = sample_trajectories(&mdp, &pi, k, 50 + i as u64).unwrap();
        let returns: Vec<f64> = data
            .trajectories
            .iter()
            .map(|tr| tr.iter().map(|x| x.reward).sum())
            .collect();
        let mean = returns.iter().sum::<f64>() / k as f64;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        let truth = exact_return(&mdp, &pi).unwrap();
        let se = (var / k as f64).sqrt();
        assert!((mean - truth).abs() < 5.0 * se, "{form:?}: {mean} vs {truth} (se {se})");
    }
}

#[test]
fn q_values_have_rank_at_most_d() {
    for (i, form) in FORMS.into_iter().enumerate() {
        for d in [2, 4, 6] {
            let mdp = random_low_rank_mdp(6, 5, 3, d, 7 * i as u64 + d as u64, form).unwrap();
            let pi = random_policy(6, 5, 3, 99);
            for q in exact_q_values(&mdp, &pi).unwrap() {
                assert!(numerical_rank(&q) <= d, "{form:?} d={d}: rank {}", numerical_rank(&q));
            }
        }
    }
}

#[test]
fn observed_rewards_are_exact() {
    let mdp = random_low_rank_mdp(4, 3, 2, 2, 1, FactorizationForm::ActionSeparable).unwrap();
    let pi = random_policy(4, 3, 2, 2);
    let data = sample_trajectories(&mdp, &pi, 200, 3).unwrap();
    for tr in &data.trajectories {
        for (t, x) in tr.iter().enumerate() {
            assert_eq!(x.reward, mdp.reward(t)[(x.state, x.action)]);
        }
    }
}

#[test]
fn empirical_model_concentrates() {
    let mdp = random_low_rank_mdp(4, 3, 3, 2, 8, FactorizationForm::StateSeparable).unwrap();
    let pi = random_policy(4, 3, 3, 9);
    let occ = occupancy_measures(&mdp, &pi).unwrap().state_action;
    let k = 50_000;
    let model = empirical_model(&sample_trajectories(&mdp, &pi, k, 10).unwrap()).unwrap();
    // Hoeffding per entry at confidence 1e-6, union over all entries
    let entries = (3 * 4 * 3) as f64;
    let eps = ((2.0 * entries / 1e-6f64).ln() / (2.0 * k as f64)).sqrt();
    for t in 0..3 {
        assert_eq!(model.counts[t].iter().sum::<u64>(), k as u64);
        let gap = (&model.empirical_occupancy[t] - &occ[t]).abs().max();
        assert!(gap < eps, "step {t}: {gap} ≥ {eps}");
    }
    for t in 0..2 {
        let kernel = &model.empirical_kernel[t];
        for s in 0..4 {
            for a in 0..3 {
                let n = model.counts[t][(s, a)];
                match kernel.next_state_dist(s, a) {
                    None => assert_eq!(n, 0),
                    Some(p) => {
                        assert!((p.sum() - 1.0).abs() < 1e-12);
                        let tol = ((2.0 * 4.0 * entries / 1e-6f64).ln() / (2.0 * n as f64)).sqrt();
                        let truth = mdp.kernel(t).column(s * 3 + a);
                        assert!((p - truth).abs().max() < tol);
                    }
                }
            }
        }
    }
}

#[test]
fn dataset_csv_round_trip_and_determinism() {
    let mdp = random_low_rank_mdp(3, 3, 2, 2, 4, FactorizationForm::FullyFactorized).unwrap();
    let pi = random_subset_policy(3, 3, 2, 2, 5).unwrap();
    let a = sample_trajectories(&mdp, &pi, 300, 6).unwrap();
    assert_eq!(a, sample_trajectories(&mdp, &pi, 300, 6).unwrap());
    assert_ne!(a, sample_trajectories(&mdp, &pi, 300, 7).unwrap());
    let mut buf = Vec::new();
    a.write_csv(&mut buf).unwrap();
    let back = OfflineDataset::read_csv(buf.as_slice()).unwrap();
    assert_eq!(a, back);
    // the behavior never leaves its support
    for tr in &a.trajectories {
        for (t, x) in tr.iter().enumerate() {
            assert!(pi.step(t)[(x.state, x.action)] > 0.0);
        }
    }
}

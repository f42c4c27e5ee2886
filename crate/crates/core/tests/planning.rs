use ndarray::Array3;
use optimist_core::divergence::DivergenceKind;
use optimist_core::mdp::{
    evaluate_policy, occupancy_of_policy, policy_from_occupancy, sample_episode, solve_bellman_optimality, PolicyTable,
    TabularMdp,
};
use optimist_core::oracles::{dual_table_exact, enumerate_policies, primal_value_bruteforce, sample_feasible_model};
use optimist_core::tabular::{
    optimistic_backup, reference_model, width_table, BonusRoute, ReferenceModel, VisitCounts, WidthSchedule,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn explored(mdp: &TabularMdp, episodes: usize, seed: u64) -> VisitCounts {
    let mut counts = VisitCounts::new(mdp.horizon(), mdp.states(), mdp.actions());
    let policy = PolicyTable::uniform(mdp.horizon(), mdp.states(), mdp.actions());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..episodes {
        counts.update(&sample_episode(mdp, &policy, &mut rng).unwrap()).unwrap();
    }
    counts
}

/// Widths that keep every confidence set nonempty: the schedule for visited
/// pairs, a vacuous width for unvisited ones.
fn widths(kind: DivergenceKind, counts: &VisitCounts, reference: &ReferenceModel, scale: f64) -> Array3<f64> {
    let schedule = WidthSchedule { scale, ..WidthSchedule::new(0.1, 1000) };
    let mut w = width_table(kind, reference, &schedule).unwrap();
    for ((h, x, a), v) in w.indexed_iter_mut() {
        if counts.visits(h, x, a) == 0 {
            *v = v.max(2.0);
        }
    }
    w
}

#[test]
fn primal_dual_and_backup_are_ordered() {
    let mut compared = 0;
    for seed in 0..3 {
        let mdp = TabularMdp::random(3, 2, 3, seed).unwrap();
        let counts = explored(&mdp, 40, seed);
        let reference = reference_model(&counts);
        for kind in [DivergenceKind::Tv, DivergenceKind::ForwardKl, DivergenceKind::Chi2, DivergenceKind::VarWeightedLinf] {
            for scale in [0.01, 0.1] {
                let w = widths(kind, &counts, &reference, scale);
                let x1 = mdp.initial_state();
                let dual = dual_table_exact(mdp.reward(), &reference, kind, &w).unwrap();
                let backup = optimistic_backup(mdp.reward(), &reference, kind, &w, BonusRoute::Inflated).unwrap();
                // a set narrower than the lattice spacing may contain no lattice row
                if let Ok(primal) = primal_value_bruteforce(mdp.reward(), &reference, kind, &w, x1, 0.02) {
                    compared += 1;
                    assert!(primal <= dual.v[[0, x1]] + 1e-7, "{kind} seed {seed}: primal {primal} > dual {}", dual.v[[0, x1]]);
                }
                assert!(
                    dual.v[[0, x1]].min(3.0) <= backup.v[[0, x1]] + 1e-7,
                    "{kind} seed {seed}: dual {} > backup {}",
                    dual.v[[0, x1]],
                    backup.v[[0, x1]]
                );
            }
        }
    }
    assert!(compared >= 12, "only {compared} lattice comparisons ran");
}

#[test]
fn backup_dominates_every_sampled_model_in_the_set() {
    let mdp = TabularMdp::random(4, 2, 3, 11).unwrap();
    let counts = explored(&mdp, 60, 3);
    let reference = reference_model(&counts);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in [DivergenceKind::Tv, DivergenceKind::ForwardKl, DivergenceKind::ReverseKl, DivergenceKind::Chi2] {
        let w = widths(kind, &counts, &reference, 0.05);
        let backup = optimistic_backup(mdp.reward(), &reference, kind, &w, BonusRoute::Inflated).unwrap();
        let mut accepted = 0;
        for _ in 0..50 {
            let Some(model) =
                sample_feasible_model(mdp.reward(), &reference, kind, &w, mdp.initial_state(), &mut rng).unwrap()
            else {
                continue;
            };
            accepted += 1;
            let (v, _) = solve_bellman_optimality(&model);
            for h in 0..3 {
                for x in 0..4 {
                    assert!(v[[h, x]] <= backup.v[[h, x]] + 1e-9, "{kind}: h={h} x={x}");
                }
            }
        }
        assert!(accepted > 0, "{kind}: no feasible model sampled");
    }
}

#[test]
fn backup_values_stay_in_range() {
    let mdp = TabularMdp::chain(5, 6).unwrap();
    let counts = explored(&mdp, 25, 0);
    let reference = reference_model(&counts);
    for kind in [DivergenceKind::Tv, DivergenceKind::VarWeightedLinf, DivergenceKind::ForwardKl, DivergenceKind::ReverseKl, DivergenceKind::Chi2] {
        let schedule = WidthSchedule::new(0.1, 150);
        let w = width_table(kind, &reference, &schedule).unwrap();
        let table = optimistic_backup(mdp.reward(), &reference, kind, &w, BonusRoute::Inflated).unwrap();
        for h in 0..=6 {
            for x in 0..5 {
                let v = table.v[[h, x]];
                assert!((0.0..=(6 - h) as f64).contains(&v), "{kind}: V[{h},{x}] = {v}");
            }
        }
        assert!(table.cb.iter().all(|b| *b >= 0.0));
    }
}

#[test]
fn enumeration_and_backward_induction_agree() {
    for seed in 0..20 {
        let mdp = TabularMdp::random(2, 2, 3, seed).unwrap();
        let (v_enum, pi_enum) = enumerate_policies(&mdp).unwrap();
        let (v_star, pi_star) = solve_bellman_optimality(&mdp);
        let x1 = mdp.initial_state();
        assert!((v_enum[[0, x1]] - v_star[[0, x1]]).abs() < 1e-12);
        let v_pi = evaluate_policy(&mdp, &pi_star).unwrap();
        assert!((v_pi[[0, x1]] - v_star[[0, x1]]).abs() < 1e-12);
        let v_pi = evaluate_policy(&mdp, &pi_enum).unwrap();
        assert!((v_pi[[0, x1]] - v_enum[[0, x1]]).abs() < 1e-12);
    }
}

fn random_policy(h: usize, s: usize, a: usize, seed: u64) -> PolicyTable {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array3::from_shape_fn((h, s, a), |_| rng.random::<f64>() + 1e-3);
    for hh in 0..h {
        for x in 0..s {
            let total: f64 = (0..a).map(|k| w[[hh, x, k]]).sum();
            for k in 0..a {
                w[[hh, x, k]] /= total;
            }
        }
    }
    PolicyTable::stochastic(w).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn occupancy_measures_are_consistent(seed in 0u64..10_000, s in 2usize..5, a in 1usize..4, h in 1usize..5) {
        let mdp = TabularMdp::random(s, a, h, seed).unwrap();
        let policy = random_policy(h, s, a, seed ^ 7);
        let q = occupancy_of_policy(&mdp, &policy).unwrap();
        prop_assert!(q.normalization_error() < 1e-12);
        prop_assert!(q.flow_error(&mdp) < 1e-12);
        prop_assert!(q.table().iter().all(|v| *v >= 0.0));
        let v = evaluate_policy(&mdp, &policy).unwrap();
        prop_assert!((q.expected_reward(mdp.reward()) - v[[0, mdp.initial_state()]]).abs() < 1e-10);

        let recovered = policy_from_occupancy(&q);
        let q2 = occupancy_of_policy(&mdp, &recovered).unwrap();
        let gap = q.table().iter().zip(q2.table()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(gap < 1e-10);
    }

    #[test]
    fn optimal_values_dominate_every_policy(seed in 0u64..10_000) {
        let mdp = TabularMdp::random(3, 2, 3, seed).unwrap();
        let (v_star, _) = solve_bellman_optimality(&mdp);
        let v = evaluate_policy(&mdp, &random_policy(3, 3, 2, seed)).unwrap();
        for (a, b) in v.iter().zip(v_star.iter()) {
            prop_assert!(*a <= b + 1e-12);
        }
    }
}

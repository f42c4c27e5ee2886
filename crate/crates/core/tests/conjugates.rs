use optimist_core::divergence::{
    conjugate_bruteforce, conjugate_kl_linesearch, conjugate_upper, conjugate_upper_directed, divergence,
    ConjugateInput, DivergenceKind,
};
use optimist_core::oracles::exact_conjugate;
use proptest::prelude::*;

const KINDS: [DivergenceKind; 5] = [
    DivergenceKind::Tv,
    DivergenceKind::VarWeightedLinf,
    DivergenceKind::ForwardKl,
    DivergenceKind::ReverseKl,
    DivergenceKind::Chi2,
];

/// Empirical and plus-reference rows from integer next-state counts.
fn references(counts: &[u32]) -> (Vec<f64>, Vec<f64>, f64) {
    let n = counts.iter().sum::<u32>().max(1) as f64;
    let p_hat = counts.iter().map(|&c| c as f64 / n).collect();
    let plus = counts.iter().map(|&c| c.max(1) as f64 / n).collect();
    (p_hat, plus, n)
}

fn scenario() -> impl Strategy<Value = (Vec<u32>, Vec<f64>, f64, f64)> {
    (
        prop::collection::vec(0u32..12, 3),
        prop::collection::vec(0.0f64..1.0, 3),
        0.0f64..1.5,
        1.0f64..4.0,
    )
        .prop_filter("at least one sample", |(c, ..)| c.iter().sum::<u32>() > 0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn upper_bounds_dominate_the_grid((counts, unit, eps, horizon) in scenario()) {
        let (p_hat, plus, n) = references(&counts);
        let z: Vec<f64> = unit.iter().map(|u| u * horizon).collect();
        for kind in KINDS {
            let centre = if kind.uses_plus_reference() { &plus } else { &p_hat };
            let input = ConjugateInput::new(&z, eps, centre).with_extras(horizon, n, 3);
            let grid = conjugate_bruteforce(kind, &input, 0.02).unwrap();
            let directed = conjugate_upper_directed(kind, &input).unwrap();
            let symmetric = conjugate_upper(kind, &input).unwrap();
            prop_assert!(directed <= symmetric + 1e-9, "{kind}: directed {directed} > symmetric {symmetric}");
            if grid.feasible {
                prop_assert!(grid.value <= directed + 1e-9, "{kind}: grid {} > directed {directed}", grid.value);
            }
        }
    }

    #[test]
    fn exact_conjugates_sit_between_grid_and_bound((counts, unit, eps, horizon) in scenario()) {
        let (p_hat, plus, n) = references(&counts);
        let z: Vec<f64> = unit.iter().map(|u| u * horizon).collect();
        for kind in [DivergenceKind::Tv, DivergenceKind::VarWeightedLinf, DivergenceKind::ForwardKl, DivergenceKind::Chi2] {
            let centre = if kind.uses_plus_reference() { &plus } else { &p_hat };
            let input = ConjugateInput::new(&z, eps, centre).with_extras(horizon, n, 3);
            let grid = conjugate_bruteforce(kind, &input, 0.02).unwrap();
            let Ok(exact) = exact_conjugate(kind, &input) else {
                prop_assert!(!grid.feasible || kind == DivergenceKind::Tv);
                continue;
            };
            if grid.feasible {
                prop_assert!(exact >= grid.value - 1e-7, "{kind}: exact {exact} < grid {}", grid.value);
            }
            let directed = conjugate_upper_directed(kind, &input).unwrap();
            prop_assert!(exact <= directed + 1e-7, "{kind}: exact {exact} > directed {directed}");
        }
    }

    #[test]
    fn kl_linesearch_is_positively_homogeneous((counts, unit, eps, _h) in scenario(), c in 0.1f64..5.0) {
        let (_, plus, _) = references(&counts);
        let scaled: Vec<f64> = unit.iter().map(|u| u * c).collect();
        let Ok(base) = conjugate_kl_linesearch(&ConjugateInput::new(&unit, eps, &plus)) else { return Ok(()) };
        let lifted = conjugate_kl_linesearch(&ConjugateInput::new(&scaled, eps, &plus)).unwrap();
        prop_assert!((lifted - c * base).abs() <= 1e-6 * (1.0 + c * base.abs()));
    }

    #[test]
    fn divergences_vanish_only_on_the_reference(p in prop::collection::vec(0.01f64..1.0, 4)) {
        let total: f64 = p.iter().sum();
        let p: Vec<f64> = p.iter().map(|v| v / total).collect();
        let q = [0.25; 4];
        for kind in KINDS {
            prop_assert!(divergence(kind, &p, &p).unwrap().abs() < 1e-12);
            prop_assert!(divergence(kind, &p, &q).unwrap() >= -1e-12);
        }
    }
}

//! The oracle suite: randomized checks of the planners against the
//! brute-force and exact oracles, each reported as a pass/fail line.

use std::fmt;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::divergence::{
    conjugate_bruteforce, conjugate_kl_linesearch, conjugate_upper, ConjugateInput, DivergenceKind,
};
use crate::error::{Error, Result};
use crate::linear::alpha_schedule;
use crate::mdp::{sample_episode, solve_bellman_optimality, PolicyTable, TabularMdp};
use crate::oracles::{
    conjugate_grid_refined, dual_table_exact, enumerate_policies, primal_value_bruteforce, sample_feasible_model,
};
use crate::tabular::{
    confidence_width, optimistic_backup, reference_model, width_table, BonusRoute, ReferenceModel, VisitCounts,
    WidthSchedule,
};

pub const SANDWICH_KINDS: [DivergenceKind; 3] = [DivergenceKind::Tv, DivergenceKind::ForwardKl, DivergenceKind::Chi2];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:<28} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// A tiny random instance: the MDP and the reference model after a few
/// uniformly random episodes.
struct Instance {
    mdp: TabularMdp,
    counts: VisitCounts,
    reference: ReferenceModel,
}

fn tiny_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (s, n_a, big_h) = (rng.random_range(2..=3), rng.random_range(1..=2), rng.random_range(1..=3));
    let mdp = TabularMdp::random(s, n_a, big_h, rng.random())?;
    let mut counts = VisitCounts::new(big_h, s, n_a);
    let policy = PolicyTable::uniform(big_h, s, n_a);
    for _ in 0..rng.random_range(1..=30) {
        counts.update(&sample_episode(&mdp, &policy, rng)?)?;
    }
    let reference = reference_model(&counts);
    Ok(Instance { mdp, counts, reference })
}

/// Smallest divergence from the reference attainable on the simplex.
fn divergence_floor(kind: DivergenceKind, mass: f64) -> f64 {
    match kind {
        DivergenceKind::Tv => (1.0 - mass).abs(),
        DivergenceKind::ForwardKl => mass - 1.0 - mass.ln(),
        DivergenceKind::Chi2 => (mass - 1.0).powi(2) / mass,
        DivergenceKind::VarWeightedLinf | DivergenceKind::ReverseKl => 0.0,
    }
}

/// Theoretical widths times a log-uniform scale in `[1e-3, 1]` on visited
/// pairs and unscaled on unvisited ones, raised where needed so that every
/// set keeps some interior.
fn instance_widths(kind: DivergenceKind, inst: &Instance, rng: &mut ChaCha8Rng) -> Result<Array3<f64>> {
    let (big_h, _, _) = inst.reference.dims();
    let schedule = WidthSchedule::new(0.1, 1000 * big_h as u64);
    let theory = width_table(kind, &inst.reference, &schedule)?;
    let scale = 10f64.powf(rng.random_range(-3.0..=0.0));
    Ok(Array3::from_shape_fn(theory.dim(), |(h, x, a)| {
        let w = if inst.counts.visits(h, x, a) == 0 { theory[[h, x, a]] } else { scale * theory[[h, x, a]] };
        let mass = inst.reference.centre(kind, h, x, a).sum();
        w.max(2.0 * divergence_floor(kind, mass) + 1e-4)
    }))
}

/// Grid primal `<=` exact dual `<=` inflated optimistic value, with the grid
/// gap at most 0.02, on random tiny instances for TV, forward KL and chi2.
pub fn check_duality_sandwich(instances: usize, grid_step: f64, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut primal_excess, mut dual_excess, mut gap) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0_f64);
    for _ in 0..instances {
        let inst = tiny_instance(&mut rng)?;
        let x1 = inst.mdp.initial_state();
        for kind in SANDWICH_KINDS {
            let widths = instance_widths(kind, &inst, &mut rng)?;
            let r = inst.mdp.reward();
            let primal = primal_value_bruteforce(r, &inst.reference, kind, &widths, x1, grid_step)?;
            let dual = dual_table_exact(r, &inst.reference, kind, &widths)?.v[[0, x1]];
            let inflated = optimistic_backup(r, &inst.reference, kind, &widths, BonusRoute::Inflated)?.v[[0, x1]];
            primal_excess = primal_excess.max(primal - dual);
            dual_excess = dual_excess.max(dual - inflated);
            gap = gap.max(dual - primal);
        }
    }
    Ok(CheckOutcome {
        name: "duality sandwich",
        passed: primal_excess <= 1e-9 && dual_excess <= 1e-6 && gap <= 0.02,
        detail: format!(
            "{instances} instances x {{tv, kl, chi2}}: max(primal-dual) = {primal_excess:.3e}, \
             max(dual-inflated) = {dual_excess:.3e}, max(dual-primal) = {gap:.3e}"
        ),
    })
}

/// The exact dual value dominates the optimal value of every sampled model
/// in the confidence set.
pub fn check_optimism_certificate(instances: usize, samples: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut accepted = 0usize;
    for _ in 0..instances {
        let inst = tiny_instance(&mut rng)?;
        let x1 = inst.mdp.initial_state();
        for kind in SANDWICH_KINDS {
            let widths = instance_widths(kind, &inst, &mut rng)?;
            let r = inst.mdp.reward();
            let dual = dual_table_exact(r, &inst.reference, kind, &widths)?.v[[0, x1]];
            for _ in 0..samples {
                if let Some(model) = sample_feasible_model(r, &inst.reference, kind, &widths, x1, &mut rng)? {
                    accepted += 1;
                    worst = worst.max(solve_bellman_optimality(&model).0[[0, x1]] - dual);
                }
            }
        }
    }
    Ok(CheckOutcome {
        name: "optimism certificate",
        passed: accepted > 0 && worst <= 1e-9,
        detail: format!("{accepted} sampled models: max(V*(sample) - dual) = {worst:.3e}"),
    })
}

fn random_reference(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let counts: Vec<u32> = loop {
        let c: Vec<u32> = (0..dim).map(|_| rng.random_range(0..12)).collect();
        if c.iter().sum::<u32>() > 0 {
            break c;
        }
    };
    let n = counts.iter().sum::<u32>() as f64;
    let p_hat = counts.iter().map(|&c| c as f64 / n).collect();
    let plus = counts.iter().map(|&c| c.max(1) as f64 / n).collect();
    (p_hat, plus, n)
}

/// `conjugate_upper >= conjugate_bruteforce - 1e-6` for every kind on random
/// `(z, p_hat, eps)` with at most three next states.
pub fn check_conjugate_dominance(samples_per_kind: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut feasible = 0usize;
    for kind in DivergenceKind::ALL {
        for _ in 0..samples_per_kind {
            let dim = rng.random_range(1..=3);
            let (p_hat, plus, n) = random_reference(&mut rng, dim);
            let horizon = rng.random_range(1.0..5.0);
            let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-horizon..horizon)).collect();
            let eps = 10f64.powf(rng.random_range(-3.0..0.5));
            let centre = if kind.uses_plus_reference() { &plus } else { &p_hat };
            let input = ConjugateInput::new(&z, eps, centre).with_extras(horizon, n, dim);
            let grid = conjugate_bruteforce(kind, &input, 5e-3)?;
            if grid.feasible {
                feasible += 1;
                worst = worst.max(grid.value - conjugate_upper(kind, &input)?);
            }
        }
    }
    Ok(CheckOutcome {
        name: "conjugate dominance",
        passed: feasible > 0 && worst <= 1e-6,
        detail: format!(
            "{} samples ({feasible} with a feasible lattice point): max(grid - upper) = {worst:.3e}",
            samples_per_kind * DivergenceKind::ALL.len()
        ),
    })
}

/// The forward-KL line search agrees with the refined lattice to 1e-4, and
/// both agree on which sets are empty.
pub fn check_kl_linesearch(samples: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut disagreements = 0usize;
    for _ in 0..samples {
        let dim = rng.random_range(1..=3);
        let (_, plus, n) = random_reference(&mut rng, dim);
        let horizon = rng.random_range(1.0..5.0);
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..horizon)).collect();
        let eps = 10f64.powf(rng.random_range(-3.0..0.5));
        let input = ConjugateInput::new(&z, eps, &plus).with_extras(horizon, n, dim);
        let grid = conjugate_grid_refined(DivergenceKind::ForwardKl, &input, 1e-2, 1e-6)?;
        match (conjugate_kl_linesearch(&input), grid.feasible) {
            (Ok(v), true) => worst = worst.max((v - grid.value).abs()),
            (Err(Error::Domain(_)), false) => {}
            (Err(Error::Domain(_)), true) | (Ok(_), false) => disagreements += 1,
            (Err(e), _) => return Err(e),
        }
    }
    Ok(CheckOutcome {
        name: "kl line search",
        passed: disagreements == 0 && worst <= 1e-4,
        detail: format!("{samples} samples: max |line search - grid| = {worst:.3e}, {disagreements} feasibility disagreements"),
    })
}

/// Exhaustive policy search matches backward induction to 1e-12.
pub fn check_policy_enumeration(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let (s, n_a, big_h) = (rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(1..=3));
        let mdp = TabularMdp::random(s, n_a, big_h, rng.random())?;
        let x1 = mdp.initial_state();
        let (v_enum, _) = enumerate_policies(&mdp)?;
        let (v_star, _) = solve_bellman_optimality(&mdp);
        worst = worst.max((v_enum[[0, x1]] - v_star[[0, x1]]).abs());
    }
    Ok(CheckOutcome {
        name: "policy enumeration",
        passed: worst <= 1e-12,
        detail: format!("{instances} instances: max |V_enum - V*| = {worst:.3e}"),
    })
}

/// Hand-computed values of the LSVI bonus scale and the TV width.
pub fn check_formula_spot_values() -> Result<CheckOutcome> {
    let alpha = alpha_schedule(1, 1, 1, 1, 1.0, 1.0, 0.5, 1.0)?;
    let width = confidence_width(DivergenceKind::Tv, 8.0, 2, 2, 1, 1000, 0.1)?;
    let alpha_ok = (alpha - 7.2921).abs() <= 1e-3;
    let width_ok = (width - 2.3759).abs() <= 1e-3;
    Ok(CheckOutcome {
        name: "formula spot values",
        passed: alpha_ok && width_ok,
        detail: format!("alpha(1,1,1,1,1,1,0.5,1) = {alpha:.5} (7.2921), tv width(S=2,A=2,T=1000,delta=0.1,N=8) = {width:.5} (2.3759)"),
    })
}

/// Every check at its full size.
pub fn run_oracle_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_duality_sandwich(50, 1e-3, seed)?,
        check_optimism_certificate(20, 50, seed)?,
        check_conjugate_dominance(200, seed)?,
        check_kl_linesearch(200, seed)?,
        check_policy_enumeration(100, seed)?,
        check_formula_spot_values()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_suite_passes() {
        for outcome in [
            check_duality_sandwich(3, 1e-2, 1).unwrap(),
            check_optimism_certificate(3, 10, 1).unwrap(),
            check_conjugate_dominance(10, 1).unwrap(),
            check_kl_linesearch(10, 1).unwrap(),
            check_policy_enumeration(10, 1).unwrap(),
            check_formula_spot_values().unwrap(),
        ] {
            assert!(outcome.passed, "{outcome}");
        }
    }

    #[test]
    fn floors_match_the_uniform_point() {
        assert_eq!(divergence_floor(DivergenceKind::ForwardKl, 1.0), 0.0);
        assert!((divergence_floor(DivergenceKind::Chi2, 2.0) - 0.5).abs() < 1e-15);
    }
}

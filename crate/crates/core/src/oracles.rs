//! Brute-force and exact oracles for small instances.
//!
//! The primal oracle maximises the optimal value over transition models in
//! the confidence set by enumerating lattice rows. Because occupancies are
//! nonnegative, the inner maximisation separates over `(h, x, a)`, so
//! backward induction choosing the best feasible row per pair is exact on
//! the lattice. The dual oracle runs the same recursion with exact
//! conjugates computed without the lattice wherever a direct method exists.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;

use crate::divergence::{
    conjugate_bruteforce, conjugate_kl_linesearch, divergence_unchecked, dot, for_each_lattice_point,
    lattice_divisions, ConjugateInput, DivergenceKind, GridMax, FEASIBILITY_SLACK,
};
use crate::error::{Error, Result};
use crate::mdp::{argmax, dirichlet_ones, evaluate_policy, PolicyTable, TabularMdp, ValueTable};
use crate::tabular::{ReferenceModel, ValuePolicyTable};

pub const MAX_ORACLE_STATES: usize = 4;
pub const MAX_ORACLE_ACTIONS: usize = 3;
pub const MAX_ORACLE_HORIZON: usize = 4;
pub const MAX_ENUMERATED_POLICIES: u64 = 4096;

/// Lattice step used by [`exact_conjugate`] for kinds without a direct method.
pub const FALLBACK_GRID_STEP: f64 = 1e-3;

fn check_oracle_size(big_h: usize, s: usize, n_a: usize) -> Result<()> {
    if s > MAX_ORACLE_STATES || n_a > MAX_ORACLE_ACTIONS || big_h > MAX_ORACLE_HORIZON {
        return Err(Error::Budget(format!(
            "oracle limited to S <= {MAX_ORACLE_STATES}, A <= {MAX_ORACLE_ACTIONS}, H <= {MAX_ORACLE_HORIZON}; got ({s}, {n_a}, {big_h})"
        )));
    }
    Ok(())
}

fn check_inputs(reward: &Array2<f64>, reference: &ReferenceModel, widths: &Array3<f64>, x1: usize) -> Result<()> {
    let (big_h, s, n_a) = reference.dims();
    if reward.dim() != (s, n_a) || widths.dim() != (big_h, s, n_a) {
        return Err(Error::Shape("reward, widths and reference model disagree on (H, S, A)".into()));
    }
    if x1 >= s {
        return Err(Error::OutOfRange(format!("initial state {x1} >= S = {s}")));
    }
    check_oracle_size(big_h, s, n_a)
}

/// Lattice lower bound on `max_{P in set} V*_1(x_1; P)`, with the full value
/// table of the maximising lattice model.
pub fn primal_table_bruteforce(
    reward: &Array2<f64>,
    reference: &ReferenceModel,
    kind: DivergenceKind,
    widths: &Array3<f64>,
    grid_step: f64,
) -> Result<ValueTable> {
    let (big_h, s, n_a) = reference.dims();
    check_inputs(reward, reference, widths, 0)?;
    let n = lattice_divisions(s, grid_step)?;
    let mut v = Array2::zeros((big_h + 1, s));
    for h in (0..big_h).rev() {
        let next = v.row(h + 1).to_vec();
        for x in 0..s {
            let mut q = Vec::with_capacity(n_a);
            for a in 0..n_a {
                let centre = reference.centre(kind, h, x, a);
                let centre = centre.as_slice().expect("contiguous reference row");
                let bound = widths[[h, x, a]] + FEASIBILITY_SLACK;
                let mut best = f64::NEG_INFINITY;
                for_each_lattice_point(s, n, |p| {
                    let gain = dot(&next, p);
                    if gain > best && divergence_unchecked(kind, p, centre) <= bound {
                        best = gain;
                    }
                });
                if best == f64::NEG_INFINITY {
                    return Err(Error::Domain(format!("no lattice row is feasible at (h={h}, x={x}, a={a})")));
                }
                q.push(reward[[x, a]] + best);
            }
            v[[h, x]] = argmax(q.into_iter()).1;
        }
    }
    Ok(v)
}

/// Lattice lower bound on the optimistic (primal) value at `x1`.
pub fn primal_value_bruteforce(
    reward: &Array2<f64>,
    reference: &ReferenceModel,
    kind: DivergenceKind,
    widths: &Array3<f64>,
    x1: usize,
    grid_step: f64,
) -> Result<f64> {
    check_inputs(reward, reference, widths, x1)?;
    Ok(primal_table_bruteforce(reward, reference, kind, widths, grid_step)?[[0, x1]])
}

/// Half-width, in grid steps, of the boxes searched by [`conjugate_grid_refined`].
pub const REFINE_RADIUS: i64 = 100;

/// Lattice conjugate refined around its incumbent: a full simplex lattice at
/// `coarse_step`, then boxes of `REFINE_RADIUS` steps around the incumbent
/// in the first `S-1` coordinates, at tenfold finer steps down to
/// `fine_step`. A level is repeated while the incumbent keeps drifting toward
/// the box edge. Only feasible points are scored, so the value stays a lower
/// bound on `D*`. Limited to `S <= 3`.
pub fn conjugate_grid_refined(
    kind: DivergenceKind,
    input: &ConjugateInput<'_>,
    coarse_step: f64,
    fine_step: f64,
) -> Result<GridMax> {
    let s = input.z.len();
    if s > 3 {
        return Err(Error::Budget(format!("refined grid supports at most 3 next states, got {s}")));
    }
    if !(fine_step > 0.0 && fine_step <= coarse_step) {
        return Err(Error::Domain(format!("fine step {fine_step} must lie in (0, {coarse_step}]")));
    }
    let mut best = conjugate_bruteforce(kind, input, coarse_step)?;
    if !best.feasible || s == 1 {
        return Ok(best);
    }
    let (z, q) = (input.z, input.p_hat);
    let base = dot(z, q);
    let bound = input.eps + FEASIBILITY_SLACK;
    let mut p = vec![0.0; s];
    let mut step = coarse_step / 10.0;
    while step >= fine_step * (1.0 - 1e-9) {
        for _ in 0..20 {
            let centre = best.argmax.clone();
            let mut offsets = vec![-REFINE_RADIUS; s - 1];
            'scan: loop {
                let mut rest = 1.0;
                let mut inside = true;
                for i in 0..s - 1 {
                    p[i] = centre[i] + offsets[i] as f64 * step;
                    inside &= p[i] >= 0.0;
                    rest -= p[i];
                }
                p[s - 1] = rest;
                if inside && rest >= 0.0 {
                    let gain = dot(z, &p) - base;
                    if gain > best.value && divergence_unchecked(kind, &p, q) <= bound {
                        best.value = gain;
                        best.argmax.copy_from_slice(&p);
                    }
                }
                let mut i = 0;
                loop {
                    if i == s - 1 {
                        break 'scan;
                    }
                    offsets[i] += 1;
                    if offsets[i] <= REFINE_RADIUS {
                        break;
                    }
                    offsets[i] = -REFINE_RADIUS;
                    i += 1;
                }
            }
            let drift = best.argmax.iter().zip(&centre).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if drift < 0.5 * REFINE_RADIUS as f64 * step {
                break;
            }
        }
        step /= 10.0;
    }
    Ok(best)
}

/// Exact TV conjugate for a normalized or empty reference: move up to
/// `eps/2` of mass from the lowest values to the highest one.
fn tv_exact(z: &[f64], q: &[f64], eps: f64) -> Option<Result<f64>> {
    let s: f64 = q.iter().sum();
    let (top, zmax) = argmax(z.iter().copied());
    if s == 0.0 {
        // `||p||_1 = 1`: either every distribution is feasible or none is.
        return Some(if eps + FEASIBILITY_SLACK >= 1.0 {
            Ok(zmax)
        } else {
            Err(Error::Domain("empty TV ball around a zero reference".into()))
        });
    }
    if (s - 1.0).abs() > 1e-12 {
        return None;
    }
    let mut budget = (eps / 2.0).min(1.0 - q[top]);
    let mut order: Vec<usize> = (0..z.len()).filter(|&i| i != top).collect();
    order.sort_by(|&i, &j| z[i].total_cmp(&z[j]));
    let mut gain = 0.0;
    for i in order {
        if budget <= 0.0 {
            break;
        }
        let moved = q[i].min(budget);
        gain += moved * (zmax - z[i]);
        budget -= moved;
    }
    Some(Ok(gain))
}

/// Exact conjugate of `max_i (p_i - q_i)^2 / q_i <= eps`: a box constraint
/// `|p_i - q_i| <= sqrt(eps q_i)`, solved as a fractional knapsack.
fn box_exact(z: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    let radius: Vec<f64> = q.iter().map(|&qi| (eps * qi).sqrt()).collect();
    let lower: Vec<f64> = q.iter().zip(&radius).map(|(qi, r)| (qi - r).max(0.0)).collect();
    let upper: Vec<f64> = q.iter().zip(&radius).map(|(qi, r)| qi + r).collect();
    let (lo_sum, hi_sum): (f64, f64) = (lower.iter().sum(), upper.iter().sum());
    if lo_sum > 1.0 + 1e-12 || hi_sum < 1.0 - 1e-12 {
        return Err(Error::Domain("box constraint misses the simplex".into()));
    }
    let mut p = lower.clone();
    let mut remaining = 1.0 - lo_sum;
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&i, &j| z[j].total_cmp(&z[i]));
    for i in order {
        let add = (upper[i] - lower[i]).min(remaining.max(0.0));
        p[i] += add;
        remaining -= add;
    }
    Ok(dot(z, &p) - dot(z, q))
}

/// `p(tau)_i = q_i max(0, 1 + (z_i - mu)/tau)` with `mu` chosen so that `p` sums to one.
fn chi2_candidate(z: &[f64], q: &[f64], tau: f64) -> Vec<f64> {
    let s: f64 = q.iter().sum();
    let zmin = z.iter().copied().fold(f64::INFINITY, f64::min);
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mass = |mu: f64| -> f64 { q.iter().zip(z).map(|(qi, zi)| qi * (1.0 + (zi - mu) / tau).max(0.0)).sum() };
    let mut lo = zmin.min((dot(q, z) + tau * (s - 1.0)) / s) - tau;
    let mut hi = zmax + tau;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    let mut p: Vec<f64> = q.iter().zip(z).map(|(qi, zi)| qi * (1.0 + (zi - mu) / tau).max(0.0)).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

fn chi2_value(p: &[f64], q: &[f64]) -> f64 {
    divergence_unchecked(DivergenceKind::Chi2, p, q)
}

/// Exact chi-square conjugate from the KKT conditions: either the vertex at
/// `argmax z` is feasible, or the constraint is active and the optimum is
/// `p(tau)` for the `tau` with `chi2(p(tau), q) = eps`.
fn chi2_exact(z: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    let s: f64 = q.iter().sum();
    let base = dot(z, q);
    let (top, zmax) = argmax(z.iter().copied());
    let mut vertex = vec![0.0; z.len()];
    vertex[top] = 1.0;
    if chi2_value(&vertex, q) <= eps {
        return Ok(zmax - base);
    }
    let floor = (s - 1.0) * (s - 1.0) / s;
    if eps < floor - 1e-15 {
        return Err(Error::Domain("chi-square ball misses the simplex".into()));
    }
    let zmin = z.iter().copied().fold(f64::INFINITY, f64::min);
    if zmax - zmin == 0.0 || eps <= floor + 1e-15 {
        return Ok(base / s - base);
    }
    let (mut lo, mut hi) = (1e-12 * (zmax - zmin), zmax - zmin);
    while chi2_value(&chi2_candidate(z, q, hi), q) > eps {
        hi *= 2.0;
        if hi > 1e15 {
            return Err(Error::Numerical("chi-square multiplier search diverged".into()));
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if chi2_value(&chi2_candidate(z, q, mid), q) > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(dot(z, &chi2_candidate(z, q, hi)) - base)
}

/// `D*(z | eps, p_hat)` by a direct method: greedy transfer (TV, normalized
/// or zero reference), fractional knapsack (variance-weighted), Donsker-Varadhan
/// line search (forward KL) and the KKT multiplier search (chi-square).
/// Remaining cases use the lattice at [`FALLBACK_GRID_STEP`]. An empty
/// confidence set is a domain error.
pub fn exact_conjugate(kind: DivergenceKind, input: &ConjugateInput<'_>) -> Result<f64> {
    let (z, q, eps) = (input.z, input.p_hat, input.eps);
    let direct = match kind {
        DivergenceKind::Tv => tv_exact(z, q, eps),
        DivergenceKind::VarWeightedLinf => Some(box_exact(z, q, eps)),
        DivergenceKind::ForwardKl => Some(conjugate_kl_linesearch(input)),
        DivergenceKind::Chi2 => Some(chi2_exact(z, q, eps)),
        DivergenceKind::ReverseKl => None,
    };
    match direct {
        Some(r) => r,
        None => {
            let grid = conjugate_bruteforce(kind, input, FALLBACK_GRID_STEP)?;
            if grid.feasible {
                Ok(grid.value)
            } else {
                Err(Error::Domain(format!("no lattice point of the {kind} set is feasible")))
            }
        }
    }
}

/// Dual recursion `V_h(x) = max_a r(x,a) + <p_ref, V_{h+1}> + D*(V_{h+1} | eps, p_ref)`
/// with exact conjugates. No clipping is applied; when the sets are
/// nonempty the values stay within `[0, H-h+1]` on their own.
pub fn dual_table_exact(
    reward: &Array2<f64>,
    reference: &ReferenceModel,
    kind: DivergenceKind,
    widths: &Array3<f64>,
) -> Result<ValuePolicyTable> {
    let (big_h, s, n_a) = reference.dims();
    check_inputs(reward, reference, widths, 0)?;
    let mut v = Array2::zeros((big_h + 1, s));
    let mut pi = Array2::zeros((big_h, s));
    let mut cb = Array3::zeros((big_h, s, n_a));
    for h in (0..big_h).rev() {
        let next = v.row(h + 1).to_vec();
        for x in 0..s {
            let mut q = Vec::with_capacity(n_a);
            for a in 0..n_a {
                let centre = reference.centre(kind, h, x, a);
                let centre = centre.as_slice().expect("contiguous reference row");
                let input = ConjugateInput::new(&next, widths[[h, x, a]], centre).with_extras(
                    (big_h - h - 1) as f64,
                    reference.count(h, x, a),
                    s,
                );
                let bonus = exact_conjugate(kind, &input)?;
                cb[[h, x, a]] = bonus;
                q.push(reward[[x, a]] + dot(centre, &next) + bonus);
            }
            let (best_a, best) = argmax(q.into_iter());
            v[[h, x]] = best;
            pi[[h, x]] = best_a;
        }
    }
    Ok(ValuePolicyTable { v, pi, cb })
}

pub fn dual_value_exact(
    reward: &Array2<f64>,
    reference: &ReferenceModel,
    kind: DivergenceKind,
    widths: &Array3<f64>,
    x1: usize,
) -> Result<f64> {
    check_inputs(reward, reference, widths, x1)?;
    Ok(dual_table_exact(reward, reference, kind, widths)?.v[[0, x1]])
}

/// Best deterministic policy by exhaustive search; ties keep the policy
/// enumerated first (lowest actions at the earliest stage-state pairs).
pub fn enumerate_policies(mdp: &TabularMdp) -> Result<(ValueTable, PolicyTable)> {
    let (big_h, s, n_a) = (mdp.horizon(), mdp.states(), mdp.actions());
    let cells = (big_h * s) as u32;
    let count = (n_a as u64).checked_pow(cells).filter(|&c| c <= MAX_ENUMERATED_POLICIES).ok_or_else(|| {
        Error::Budget(format!("A^(S H) = {n_a}^{cells} exceeds {MAX_ENUMERATED_POLICIES} policies"))
    })?;
    let x1 = mdp.initial_state();
    let mut best: Option<(ValueTable, Array2<usize>)> = None;
    let mut actions = Array2::<usize>::zeros((big_h, s));
    for index in 0..count {
        let mut rest = index;
        for cell in actions.iter_mut() {
            *cell = (rest % n_a as u64) as usize;
            rest /= n_a as u64;
        }
        let v = evaluate_policy(mdp, &PolicyTable::Deterministic(actions.clone()))?;
        if best.as_ref().is_none_or(|(bv, _)| v[[0, x1]] > bv[[0, x1]]) {
            best = Some((v, actions.clone()));
        }
    }
    let (v, pi) = best.expect("at least one policy");
    Ok((v, PolicyTable::Deterministic(pi)))
}

/// A random transition model inside the confidence set: each row is a
/// mixture of the normalized reference and a Dirichlet(1) draw, shrunk toward
/// the reference until feasible. `None` if the normalized reference itself
/// is infeasible for some row.
pub fn sample_feasible_model<R: Rng + ?Sized>(
    reward: &Array2<f64>,
    reference: &ReferenceModel,
    kind: DivergenceKind,
    widths: &Array3<f64>,
    x1: usize,
    rng: &mut R,
) -> Result<Option<TabularMdp>> {
    let (big_h, s, n_a) = reference.dims();
    let mut p = Array4::zeros((big_h, s, n_a, s));
    for h in 0..big_h {
        for x in 0..s {
            for a in 0..n_a {
                let centre = reference.centre(kind, h, x, a);
                let mass = centre.sum();
                let base: Vec<f64> = if mass > 0.0 {
                    centre.iter().map(|v| v / mass).collect()
                } else {
                    vec![1.0 / s as f64; s]
                };
                let noise = dirichlet_ones(s, rng);
                let mut w: f64 = rng.random();
                let centre = centre.as_slice().expect("contiguous reference row");
                let eps = widths[[h, x, a]];
                let row = loop {
                    let row: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| (1.0 - w) * b + w * n).collect();
                    let total: f64 = row.iter().sum();
                    let row: Vec<f64> = row.iter().map(|v| v / total).collect();
                    if divergence_unchecked(kind, &row, centre) <= eps {
                        break Some(row);
                    }
                    if w == 0.0 {
                        break None;
                    }
                    w = if w < 1e-9 { 0.0 } else { w / 2.0 };
                };
                let Some(row) = row else { return Ok(None) };
                for (y, v) in row.into_iter().enumerate() {
                    p[[h, x, a, y]] = v;
                }
            }
        }
    }
    TabularMdp::new(x1, reward.clone(), p).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::solve_bellman_optimality;
    use crate::tabular::{optimistic_backup, BonusRoute};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_widths_at_the_truth_give_the_optimum() {
        let mdp = TabularMdp::random(3, 2, 2, 1).unwrap();
        let (v_star, _) = solve_bellman_optimality(&mdp);
        let reference = ReferenceModel::exact(&mdp, 10.0);
        let widths = Array3::zeros((2, 3, 2));
        for kind in [DivergenceKind::Tv, DivergenceKind::ForwardKl, DivergenceKind::Chi2, DivergenceKind::VarWeightedLinf] {
            let dual = dual_value_exact(mdp.reward(), &reference, kind, &widths, 0).unwrap();
            assert_abs_diff_eq!(dual, v_star[[0, 0]], epsilon = 1e-6);
        }
    }

    #[test]
    fn vacuous_tv_sets_free_every_row() {
        let mdp = TabularMdp::random(2, 2, 3, 2).unwrap();
        let reference = ReferenceModel::exact(&mdp, 1.0);
        let widths = Array3::from_elem((3, 2, 2), 2.0);
        let primal = primal_value_bruteforce(mdp.reward(), &reference, DivergenceKind::Tv, &widths, 0, 1e-2).unwrap();
        let mut free = 0.0;
        for _ in 0..3 {
            let best_r = mdp.reward().iter().copied().fold(0.0, f64::max);
            free += best_r;
        }
        assert_abs_diff_eq!(primal, free, epsilon = 1e-12);
        let dual = dual_value_exact(mdp.reward(), &reference, DivergenceKind::Tv, &widths, 0).unwrap();
        assert_abs_diff_eq!(dual, free, epsilon = 1e-12);
    }

    #[test]
    fn exact_conjugates_agree_with_the_lattice() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [DivergenceKind::Tv, DivergenceKind::VarWeightedLinf, DivergenceKind::Chi2] {
            for _ in 0..20 {
                let z: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0).collect();
                let q = dirichlet_ones(3, &mut rng);
                let eps = rng.random::<f64>() * 0.5;
                let input = ConjugateInput::new(&z, eps, &q);
                let exact = exact_conjugate(kind, &input).unwrap();
                let grid = conjugate_bruteforce(kind, &input, 2e-3).unwrap();
                assert!(grid.feasible);
                assert!(exact >= grid.value - 1e-9, "{kind}: exact {exact} < grid {}", grid.value);
                assert!(exact - grid.value < 2e-2, "{kind}: exact {exact} vs grid {}", grid.value);
            }
        }
    }

    #[test]
    fn chi2_exact_on_unnormalized_reference() {
        let z = [1.0, 0.0, 0.5];
        let q = [0.5, 0.3, 0.4];
        let input = ConjugateInput::new(&z, 0.3, &q);
        let exact = exact_conjugate(DivergenceKind::Chi2, &input).unwrap();
        let grid = conjugate_bruteforce(DivergenceKind::Chi2, &input, 1e-3).unwrap();
        assert!(exact >= grid.value - 1e-9);
        assert!(exact - grid.value < 5e-3);
        let tight = ConjugateInput::new(&z, 0.001, &q);
        assert!(matches!(exact_conjugate(DivergenceKind::Chi2, &tight), Err(Error::Domain(_))));
    }

    #[test]
    fn exact_dual_is_below_the_inflated_backup() {
        let mdp = TabularMdp::random(3, 2, 3, 7).unwrap();
        let mut counts = crate::tabular::VisitCounts::new(3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = PolicyTable::uniform(3, 3, 2);
        for _ in 0..30 {
            counts.update(&crate::mdp::sample_episode(&mdp, &policy, &mut rng).unwrap()).unwrap();
        }
        let reference = crate::tabular::reference_model(&counts);
        for kind in [DivergenceKind::Tv, DivergenceKind::ForwardKl, DivergenceKind::Chi2] {
            let widths = Array3::from_shape_fn((3, 3, 2), |(h, x, a)| {
                if counts.visits(h, x, a) == 0 {
                    2.0
                } else {
                    3.0 / reference.count(h, x, a).sqrt()
                }
            });
            let exact = dual_table_exact(mdp.reward(), &reference, kind, &widths).unwrap();
            let inflated = optimistic_backup(mdp.reward(), &reference, kind, &widths, BonusRoute::Inflated).unwrap();
            for h in 0..3 {
                for x in 0..3 {
                    assert!(exact.v[[h, x]] <= inflated.v[[h, x]] + 1e-6, "{kind} h={h} x={x}");
                    assert!(exact.v[[h, x]] <= (3 - h) as f64 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn enumeration_matches_backward_induction() {
        for seed in 0..10 {
            let mdp = TabularMdp::random(2, 2, 3, seed).unwrap();
            let (v, _) = enumerate_policies(&mdp).unwrap();
            let (v_star, _) = solve_bellman_optimality(&mdp);
            assert_abs_diff_eq!(v[[0, 0]], v_star[[0, 0]], epsilon = 1e-12);
        }
        let big = TabularMdp::random(4, 3, 4, 0).unwrap();
        assert!(matches!(enumerate_policies(&big), Err(Error::Budget(_))));
    }

    #[test]
    fn single_stage_enumeration_picks_the_best_reward() {
        let mdp = TabularMdp::random(3, 3, 1, 4).unwrap();
        let (_, pi) = enumerate_policies(&mdp).unwrap();
        let PolicyTable::Deterministic(pi) = pi else { panic!("deterministic policy expected") };
        let x1 = mdp.initial_state();
        let (best, _) = argmax(mdp.reward().row(x1).iter().copied());
        assert_eq!(pi[[0, x1]], best);
    }

    #[test]
    fn refined_grid_tracks_the_kl_line_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst: f64 = 0.0;
        for _ in 0..30 {
            let z: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let q = dirichlet_ones(3, &mut rng);
            let eps = rng.random::<f64>() * 0.3;
            let input = ConjugateInput::new(&z, eps, &q);
            let refined = conjugate_grid_refined(DivergenceKind::ForwardKl, &input, 1e-2, 1e-6).unwrap();
            let exact = conjugate_kl_linesearch(&input).unwrap();
            assert!(refined.value <= exact + 1e-7);
            worst = worst.max(exact - refined.value);
        }
        assert!(worst < 1e-4, "worst gap {worst}");
    }

    #[test]
    fn oracle_size_limits() {
        let mdp = TabularMdp::random(5, 2, 2, 0).unwrap();
        let reference = ReferenceModel::exact(&mdp, 1.0);
        let widths = Array3::zeros((2, 5, 2));
        assert!(matches!(
            primal_value_bruteforce(mdp.reward(), &reference, DivergenceKind::Tv, &widths, 0, 1e-2),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn sampled_feasible_models_are_dominated() {
        let mdp = TabularMdp::random(3, 2, 2, 3).unwrap();
        let reference = ReferenceModel::exact(&mdp, 1.0);
        let widths = Array3::from_elem((2, 3, 2), 0.2);
        let dual = dual_value_exact(mdp.reward(), &reference, DivergenceKind::Tv, &widths, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let model = sample_feasible_model(mdp.reward(), &reference, DivergenceKind::Tv, &widths, 0, &mut rng)
                .unwrap()
                .unwrap();
            let (v, _) = solve_bellman_optimality(&model);
            assert!(v[[0, 0]] <= dual + 1e-9);
        }
    }
}

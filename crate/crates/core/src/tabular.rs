//! Tabular optimism: visit counts, the empirical reference models, confidence
//! widths and the clipped optimistic Bellman recursion
//!
//! `V_h(x) = max_a min{H-h+1, r(x,a) + <p_ref, V_{h+1}> + CB(x,a)}`
//!
//! where `CB` is the inflated conjugate of the chosen divergence evaluated at
//! `V_{h+1}`.

use ndarray::{s, Array2, Array3, Array4, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::divergence::{conjugate_kl_linesearch, conjugate_upper_directed, ConjugateInput, DivergenceKind};
use crate::error::{Error, Result};
use crate::mdp::{argmax, PolicyTable, TabularMdp, Transition};

/// Transition counts `N_h(x, a, x')` gathered so far.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitCounts {
    n3: Array4<u64>,
    visits: Array3<u64>,
}

impl VisitCounts {
    pub fn new(horizon: usize, states: usize, actions: usize) -> Self {
        Self { n3: Array4::zeros((horizon, states, actions, states)), visits: Array3::zeros((horizon, states, actions)) }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.visits.dim()
    }

    /// `N_h(x, a) = max(sum_x' N_h(x, a, x'), 1)`.
    pub fn n(&self, h: usize, x: usize, a: usize) -> u64 {
        self.visits[[h, x, a]].max(1)
    }

    /// Number of real visits, without the floor at one.
    pub fn visits(&self, h: usize, x: usize, a: usize) -> u64 {
        self.visits[[h, x, a]]
    }

    pub fn n3(&self, h: usize, x: usize, a: usize, y: usize) -> u64 {
        self.n3[[h, x, a, y]]
    }

    /// Records every transition of `trajectory`. Nothing is recorded if any
    /// index is out of range.
    pub fn update(&mut self, trajectory: &[Transition]) -> Result<()> {
        let (big_h, s, n_a) = self.dims();
        if let Some(t) = trajectory
            .iter()
            .find(|t| t.stage >= big_h || t.state >= s || t.action >= n_a || t.next_state >= s)
        {
            return Err(Error::OutOfRange(format!("transition {t:?} outside (H={big_h}, S={s}, A={n_a})")));
        }
        for t in trajectory {
            self.n3[[t.stage, t.state, t.action, t.next_state]] += 1;
            self.visits[[t.stage, t.state, t.action]] += 1;
        }
        Ok(())
    }
}

/// Functional form of [`VisitCounts::update`].
pub fn update_counts(mut counts: VisitCounts, trajectory: &[Transition]) -> Result<VisitCounts> {
    counts.update(trajectory)?;
    Ok(counts)
}

/// Empirical model `P_hat = N3 / N` and the modified model
/// `P_hat_plus = max(1, N3) / N`, whose rows may sum to more than one.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    p_hat: Array4<f64>,
    p_hat_plus: Array4<f64>,
    n: Array3<f64>,
}

pub fn reference_model(counts: &VisitCounts) -> ReferenceModel {
    let (big_h, s, n_a) = counts.dims();
    let n = Array3::from_shape_fn((big_h, s, n_a), |(h, x, a)| counts.n(h, x, a) as f64);
    let p_hat = Array4::from_shape_fn((big_h, s, n_a, s), |(h, x, a, y)| counts.n3(h, x, a, y) as f64 / n[[h, x, a]]);
    let p_hat_plus = Array4::from_shape_fn((big_h, s, n_a, s), |(h, x, a, y)| {
        counts.n3(h, x, a, y).max(1) as f64 / n[[h, x, a]]
    });
    ReferenceModel { p_hat, p_hat_plus, n }
}

impl ReferenceModel {
    /// Reference built from explicit tables; `n` holds the visit counts used
    /// by the lower-order bonus terms.
    pub fn from_parts(p_hat: Array4<f64>, p_hat_plus: Array4<f64>, n: Array3<f64>) -> Result<Self> {
        let (big_h, s, n_a, s2) = p_hat.dim();
        if s2 != s || p_hat_plus.dim() != p_hat.dim() || n.dim() != (big_h, s, n_a) {
            return Err(Error::Shape(format!(
                "p_hat {:?}, p_hat_plus {:?} and counts {:?} disagree",
                p_hat.dim(),
                p_hat_plus.dim(),
                n.dim()
            )));
        }
        if p_hat.iter().chain(p_hat_plus.iter()).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain("reference entries must be finite and nonnegative".into()));
        }
        if n.iter().any(|v| !(*v >= 1.0 && v.is_finite())) {
            return Err(Error::Domain("visit counts must be >= 1".into()));
        }
        Ok(Self { p_hat, p_hat_plus, n })
    }

    /// Both references equal to the true transitions, with count `n` everywhere.
    pub fn exact(mdp: &TabularMdp, n: f64) -> Self {
        let (big_h, s, n_a) = (mdp.horizon(), mdp.states(), mdp.actions());
        let p = mdp.transitions().clone();
        Self { p_hat: p.clone(), p_hat_plus: p, n: Array3::from_elem((big_h, s, n_a), n.max(1.0)) }
    }

    pub fn p_hat(&self, h: usize, x: usize, a: usize) -> ArrayView1<'_, f64> {
        self.p_hat.slice(s![h, x, a, ..])
    }

    pub fn p_hat_plus(&self, h: usize, x: usize, a: usize) -> ArrayView1<'_, f64> {
        self.p_hat_plus.slice(s![h, x, a, ..])
    }

    /// The vector the confidence set of `kind` is centred on.
    pub fn centre(&self, kind: DivergenceKind, h: usize, x: usize, a: usize) -> ArrayView1<'_, f64> {
        if kind.uses_plus_reference() {
            self.p_hat_plus(h, x, a)
        } else {
            self.p_hat(h, x, a)
        }
    }

    pub fn count(&self, h: usize, x: usize, a: usize) -> f64 {
        self.n[[h, x, a]]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.n.dim()
    }
}

/// Constants entering the confidence widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthSchedule {
    pub delta: f64,
    /// Total number of rounds `T = K H`.
    pub total_rounds: u64,
    /// Multiplier applied to every width and to the `2SH/N` bonus terms
    /// (1.0 reproduces the theory).
    pub scale: f64,
    /// Constant `C` of the reverse-KL width.
    pub reverse_kl_constant: f64,
}

impl WidthSchedule {
    pub fn new(delta: f64, total_rounds: u64) -> Self {
        Self { delta, total_rounds, scale: 1.0, reverse_kl_constant: 18.0 }
    }
}

/// Confidence width `eps` for `N` samples of one state-action pair:
///
/// | kind | width |
/// |------|-------|
/// | TV | `sqrt(2 S ln(2SAT/delta) / N)` |
/// | variance-weighted | `36 ln^2(H S^2 A T/delta) / N` |
/// | forward KL | `18 S ln(HSAT/delta) / N` |
/// | reverse KL | `C S ln(HSAT/delta) / N`, `C = 18` |
/// | chi2 | `11 S ln^2(H S^2 A T/delta) / N` |
pub fn confidence_width(
    kind: DivergenceKind,
    n: f64,
    states: usize,
    actions: usize,
    horizon: usize,
    total_rounds: u64,
    delta: f64,
) -> Result<f64> {
    confidence_width_with(kind, n, states, actions, horizon, total_rounds, delta, 18.0)
}

#[allow(clippy::too_many_arguments)]
pub fn confidence_width_with(
    kind: DivergenceKind,
    n: f64,
    states: usize,
    actions: usize,
    horizon: usize,
    total_rounds: u64,
    delta: f64,
    reverse_kl_constant: f64,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta = {delta} must lie in (0, 1)")));
    }
    if !(n >= 1.0) {
        return Err(Error::Domain(format!("visit count {n} must be >= 1")));
    }
    let (s, a, h, t) = (states as f64, actions as f64, horizon as f64, total_rounds as f64);
    let width = match kind {
        DivergenceKind::Tv => (2.0 * s * (2.0 * s * a * t / delta).ln() / n).sqrt(),
        DivergenceKind::VarWeightedLinf => 36.0 * (h * s * s * a * t / delta).ln().powi(2) / n,
        DivergenceKind::ForwardKl => 18.0 * s * (h * s * a * t / delta).ln() / n,
        DivergenceKind::ReverseKl => reverse_kl_constant * s * (h * s * a * t / delta).ln() / n,
        DivergenceKind::Chi2 => 11.0 * s * (h * s * s * a * t / delta).ln().powi(2) / n,
    };
    Ok(width)
}

/// Widths for every `(h, x, a)` of the current counts.
pub fn width_table(kind: DivergenceKind, reference: &ReferenceModel, schedule: &WidthSchedule) -> Result<Array3<f64>> {
    let (big_h, s, n_a) = reference.dims();
    let mut widths = Array3::zeros((big_h, s, n_a));
    for ((h, x, a), w) in widths.indexed_iter_mut() {
        *w = schedule.scale
            * confidence_width_with(
                kind,
                reference.count(h, x, a),
                s,
                n_a,
                big_h,
                schedule.total_rounds,
                schedule.delta,
                schedule.reverse_kl_constant,
            )?;
    }
    Ok(widths)
}

/// How the exploration bonus is computed inside the backup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BonusRoute {
    /// Closed-form inflated conjugate.
    #[default]
    Inflated,
    /// Exact forward-KL conjugate by line search; other kinds fall back to
    /// the inflated bound.
    ExactKl,
}

/// Optimistic values `V_h(x)` (with a zero terminal row), the greedy policy
/// and the bonuses `CB_h(x, a)` that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ValuePolicyTable {
    pub v: Array2<f64>,
    pub pi: Array2<usize>,
    pub cb: Array3<f64>,
}

impl ValuePolicyTable {
    pub fn policy(&self) -> PolicyTable {
        PolicyTable::Deterministic(self.pi.clone())
    }
}

/// Clipped optimistic dynamic programming over the reference model.
pub fn optimistic_backup(
    reward: &Array2<f64>,
    reference: &ReferenceModel,
    kind: DivergenceKind,
    widths: &Array3<f64>,
    route: BonusRoute,
) -> Result<ValuePolicyTable> {
    optimistic_backup_scaled(reward, reference, kind, widths, route, 1.0)
}

/// [`optimistic_backup`] with the `2SH/N` terms of the bonuses multiplied by
/// `lower_order_scale`. The bonuses still dominate the exact conjugates at
/// the given widths, so optimism on the feasible event is preserved.
pub fn optimistic_backup_scaled(
    reward: &Array2<f64>,
    reference: &ReferenceModel,
    kind: DivergenceKind,
    widths: &Array3<f64>,
    route: BonusRoute,
    lower_order_scale: f64,
) -> Result<ValuePolicyTable> {
    let (big_h, s, n_a) = reference.dims();
    if reward.dim() != (s, n_a) || widths.dim() != (big_h, s, n_a) {
        return Err(Error::Shape("reward, widths and reference model disagree on (H, S, A)".into()));
    }
    let mut v = Array2::zeros((big_h + 1, s));
    let mut pi = Array2::zeros((big_h, s));
    let mut cb = Array3::zeros((big_h, s, n_a));
    for h in (0..big_h).rev() {
        let next = v.row(h + 1).to_vec();
        let cap = (big_h - h) as f64;
        let remaining = (big_h - h - 1) as f64;
        for x in 0..s {
            let mut q = Vec::with_capacity(n_a);
            for a in 0..n_a {
                let centre = reference.centre(kind, h, x, a);
                let centre = centre.as_slice().expect("reference rows are contiguous");
                let input = ConjugateInput {
                    z: &next,
                    eps: widths[[h, x, a]],
                    p_hat: centre,
                    horizon_remaining: remaining,
                    count: reference.count(h, x, a),
                    states: s,
                    lower_order_scale,
                };
                let bonus = match (route, kind) {
                    (BonusRoute::ExactKl, DivergenceKind::ForwardKl) => conjugate_kl_linesearch(&input)?,
                    _ => conjugate_upper_directed(kind, &input)?,
                };
                cb[[h, x, a]] = bonus;
                let mean = crate::divergence::dot(centre, &next);
                q.push(cap.min(reward[[x, a]] + mean + bonus));
            }
            let (best_a, best) = argmax(q.into_iter());
            v[[h, x]] = best;
            pi[[h, x]] = best_a;
        }
    }
    Ok(ValuePolicyTable { v, pi, cb })
}

/// Everything an optimistic tabular agent computed for one episode.
#[derive(Debug, Clone)]
pub struct TabularPlan {
    pub table: ValuePolicyTable,
    pub reference: ReferenceModel,
    pub widths: Array3<f64>,
}

/// Optimistic agent for one divergence. Its policy is a pure function of the
/// accumulated counts and the configuration.
#[derive(Debug, Clone)]
pub struct TabularAgent {
    kind: DivergenceKind,
    reward: Array2<f64>,
    counts: VisitCounts,
    schedule: WidthSchedule,
    route: BonusRoute,
}

pub fn make_tabular_agent(
    kind: DivergenceKind,
    reward: Array2<f64>,
    horizon: usize,
    schedule: WidthSchedule,
    route: BonusRoute,
) -> TabularAgent {
    let (s, n_a) = reward.dim();
    TabularAgent { kind, reward, counts: VisitCounts::new(horizon, s, n_a), schedule, route }
}

impl TabularAgent {
    pub fn kind(&self) -> DivergenceKind {
        self.kind
    }

    pub fn counts(&self) -> &VisitCounts {
        &self.counts
    }

    pub fn plan(&self) -> Result<TabularPlan> {
        let reference = reference_model(&self.counts);
        let widths = width_table(self.kind, &reference, &self.schedule)?;
        let table =
            optimistic_backup_scaled(&self.reward, &reference, self.kind, &widths, self.route, self.schedule.scale)?;
        Ok(TabularPlan { table, reference, widths })
    }

    pub fn observe(&mut self, trajectory: &[Transition]) -> Result<()> {
        self.counts.update(trajectory)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::solve_bellman_optimality;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn step(stage: usize, state: usize, action: usize, next_state: usize) -> Transition {
        Transition { stage, state, action, reward: 0.0, next_state }
    }

    #[test]
    fn empty_trajectory_leaves_counts() {
        let counts = VisitCounts::new(2, 3, 2);
        assert_eq!(update_counts(counts.clone(), &[]).unwrap(), counts);
    }

    #[test]
    fn single_transition() {
        let counts = update_counts(VisitCounts::new(2, 3, 2), &[step(1, 2, 0, 1)]).unwrap();
        assert_eq!(counts.n3(1, 2, 0, 1), 1);
        assert_eq!(counts.n(1, 2, 0), 1);
        assert_eq!(counts.n(0, 0, 0), 1);
        assert_eq!(counts.visits(0, 0, 0), 0);
    }

    #[test]
    fn replay_doubles_counts() {
        let traj = vec![step(0, 0, 1, 2), step(1, 2, 0, 2), step(0, 0, 1, 1)];
        let once = update_counts(VisitCounts::new(2, 3, 2), &traj).unwrap();
        let twice = update_counts(once.clone(), &traj).unwrap();
        for h in 0..2 {
            for x in 0..3 {
                for a in 0..2 {
                    for y in 0..3 {
                        assert_eq!(twice.n3(h, x, a, y), 2 * once.n3(h, x, a, y));
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_range_transition_is_rejected_atomically() {
        let mut counts = VisitCounts::new(1, 2, 2);
        let err = counts.update(&[step(0, 0, 0, 1), step(0, 0, 5, 1)]);
        assert!(matches!(err, Err(Error::OutOfRange(_))));
        assert_eq!(counts, VisitCounts::new(1, 2, 2));
    }

    #[test]
    fn zero_counts_reference() {
        let model = reference_model(&VisitCounts::new(1, 3, 1));
        assert_eq!(model.p_hat(0, 0, 0).to_vec(), vec![0.0; 3]);
        assert_eq!(model.p_hat_plus(0, 0, 0).to_vec(), vec![1.0; 3]);
    }

    #[test]
    fn modified_model_example() {
        let traj = vec![step(0, 0, 0, 0), step(0, 0, 0, 0), step(0, 0, 0, 2), step(0, 0, 0, 2)];
        let model = reference_model(&update_counts(VisitCounts::new(1, 3, 1), &traj).unwrap());
        assert_eq!(model.p_hat(0, 0, 0).to_vec(), vec![0.5, 0.0, 0.5]);
        assert_eq!(model.p_hat_plus(0, 0, 0).to_vec(), vec![0.5, 0.25, 0.5]);
    }

    #[test]
    fn tv_width_example() {
        let eps = confidence_width(DivergenceKind::Tv, 8.0, 2, 2, 1, 1000, 0.1).unwrap();
        assert_abs_diff_eq!(eps, (4.0 * 80000f64.ln() / 8.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(eps, 2.3759, epsilon = 1e-3);
        let doubled = confidence_width(DivergenceKind::Tv, 16.0, 2, 2, 1, 1000, 0.1).unwrap();
        assert_abs_diff_eq!(doubled, eps / 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn chi2_width_scales_inversely() {
        let a = confidence_width(DivergenceKind::Chi2, 3.0, 4, 2, 5, 500, 0.05).unwrap();
        let b = confidence_width(DivergenceKind::Chi2, 33.0, 4, 2, 5, 500, 0.05).unwrap();
        assert_abs_diff_eq!(a / b, 11.0, epsilon = 1e-12);
    }

    #[test]
    fn width_rejects_bad_delta() {
        for delta in [0.0, 1.0, -0.5, 2.0] {
            assert!(confidence_width(DivergenceKind::Tv, 1.0, 2, 2, 2, 10, delta).is_err());
        }
    }

    #[test]
    fn widths_strictly_decrease_in_n() {
        for kind in DivergenceKind::ALL {
            let mut prev = f64::INFINITY;
            for n in 1..50 {
                let eps = confidence_width(kind, n as f64, 3, 2, 4, 1000, 0.05).unwrap();
                assert!(eps > 0.0 && eps < prev);
                prev = eps;
            }
        }
    }

    #[test]
    fn zero_widths_on_exact_model_recover_optimum() {
        // every row deterministic so that P_hat = P after one visit of each cell
        let mut p = Array4::zeros((2, 2, 2, 2));
        p[[0, 0, 0, 0]] = 1.0;
        p[[0, 0, 1, 1]] = 1.0;
        p[[0, 1, 0, 0]] = 1.0;
        p[[0, 1, 1, 1]] = 1.0;
        p[[1, 0, 0, 1]] = 1.0;
        p[[1, 0, 1, 0]] = 1.0;
        p[[1, 1, 0, 1]] = 1.0;
        p[[1, 1, 1, 0]] = 1.0;
        let mdp = TabularMdp::new(0, array![[0.1, 0.3], [0.9, 0.2]], p.clone()).unwrap();
        let mut counts = VisitCounts::new(2, 2, 2);
        for h in 0..2 {
            for x in 0..2 {
                for a in 0..2 {
                    let y = (0..2).find(|&y| p[[h, x, a, y]] == 1.0).unwrap();
                    counts.update(&[step(h, x, a, y)]).unwrap();
                }
            }
        }
        let reference = reference_model(&counts);
        let (v_star, _) = solve_bellman_optimality(&mdp);
        for kind in [DivergenceKind::Tv, DivergenceKind::ReverseKl] {
            let table =
                optimistic_backup(mdp.reward(), &reference, kind, &Array3::zeros((2, 2, 2)), BonusRoute::Inflated)
                    .unwrap();
            assert_eq!(table.v, v_star);
        }
    }

    #[test]
    fn huge_widths_reach_the_unconstrained_optimum() {
        // With vacuous widths every distribution is feasible, so the optimistic
        // value is at least that of an MDP whose transitions can be chosen
        // freely; the bonus vanishes at the last stage because V_{H+1} = 0.
        let counts = VisitCounts::new(4, 3, 2);
        let reference = reference_model(&counts);
        let reward = array![[0.3, 0.1], [0.0, 0.8], [0.5, 0.45]];
        let mut free = Array2::<f64>::zeros((5, 3));
        for h in (0..4).rev() {
            let best_next = free.row(h + 1).fold(0.0_f64, |m, v| m.max(*v));
            for x in 0..3 {
                let best_r = reward.row(x).fold(0.0_f64, |m, v| m.max(*v));
                free[[h, x]] = ((4 - h) as f64).min(best_r + best_next);
            }
        }
        for kind in DivergenceKind::ALL {
            let table =
                optimistic_backup(&reward, &reference, kind, &Array3::from_elem((4, 3, 2), 1e6), BonusRoute::Inflated)
                    .unwrap();
            for x in 0..3 {
                assert_eq!(table.v[[3, x]], free[[3, x]]);
            }
            for h in 0..4 {
                for x in 0..3 {
                    assert!(table.v[[h, x]] >= free[[h, x]] - 1e-12, "{kind} h={h}");
                    assert!(table.v[[h, x]] <= (4 - h) as f64);
                    if matches!(kind, DivergenceKind::VarWeightedLinf | DivergenceKind::Chi2) && h < 3 {
                        assert_eq!(table.v[[h, x]], (4 - h) as f64, "{kind} h={h}");
                    }
                }
            }
        }
    }

    #[test]
    fn agent_is_deterministic_in_its_history() {
        let mdp = TabularMdp::random(3, 2, 3, 4).unwrap();
        let schedule = WidthSchedule::new(0.1, 300);
        let mut a = make_tabular_agent(DivergenceKind::Chi2, mdp.reward().clone(), 3, schedule, BonusRoute::Inflated);
        let mut b = a.clone();
        let traj = vec![step(0, 0, 1, 2), step(1, 2, 0, 1), step(2, 1, 1, 1)];
        a.observe(&traj).unwrap();
        b.observe(&traj).unwrap();
        assert_eq!(a.plan().unwrap().table, b.plan().unwrap().table);
    }
}

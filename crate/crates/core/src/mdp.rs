//! Finite episodic MDPs: representation, exact evaluation, optimal control,
//! occupancy measures and trajectory simulation.
//!
//! Stages are 0-based internally (`h = 0..H`); value tables carry an extra
//! terminal row `h = H` that is identically zero.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for simplex membership of probability rows.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// A finite-horizon MDP with known deterministic rewards and stage-dependent
/// transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    initial_state: usize,
    reward: Array2<f64>,
    transitions: Array4<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MdpDocument {
    #[serde(rename = "S")]
    states: usize,
    #[serde(rename = "A")]
    actions: usize,
    #[serde(rename = "H")]
    horizon: usize,
    x1: usize,
    r: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    p: Vec<Vec<Vec<Vec<f64>>>>,
}

impl TabularMdp {
    /// Builds and validates an MDP. `reward` is `(S, A)`, `transitions` is
    /// `(H, S, A, S)`.
    pub fn new(initial_state: usize, reward: Array2<f64>, transitions: Array4<f64>) -> Result<Self> {
        let (h, s, a, s2) = transitions.dim();
        if h == 0 || s == 0 || a == 0 {
            return Err(Error::Shape("S, A and H must all be positive".into()));
        }
        if s2 != s {
            return Err(Error::Shape(format!("transition tensor has {s} source and {s2} target states")));
        }
        if reward.dim() != (s, a) {
            return Err(Error::Shape(format!("reward table is {:?}, expected ({s}, {a})", reward.dim())));
        }
        if initial_state >= s {
            return Err(Error::OutOfRange(format!("initial state {initial_state} with S = {s}")));
        }
        for ((x, u), &r) in reward.indexed_iter() {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidModel(format!("reward r({x},{u}) = {r} outside [0,1]")));
            }
        }
        for stage in 0..h {
            for x in 0..s {
                for u in 0..a {
                    let row = transitions.slice(ndarray::s![stage, x, u, ..]);
                    check_simplex(row).map_err(|msg| {
                        Error::InvalidModel(format!("P(h={stage}, x={x}, a={u}, .): {msg}"))
                    })?;
                }
            }
        }
        Ok(Self { initial_state, reward, transitions })
    }

    pub fn states(&self) -> usize {
        self.reward.nrows()
    }

    pub fn actions(&self) -> usize {
        self.reward.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.transitions.dim().0
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    pub fn transitions(&self) -> &Array4<f64> {
        &self.transitions
    }

    pub fn row(&self, h: usize, x: usize, a: usize) -> ArrayView1<'_, f64> {
        self.transitions.slice(ndarray::s![h, x, a, ..])
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        if doc.r.len() != doc.states || doc.r.iter().any(|row| row.len() != doc.actions) {
            return Err(Error::Shape("`r` must be S rows of A entries".into()));
        }
        if doc.p.len() != doc.horizon {
            return Err(Error::Shape("`P` must have H stages".into()));
        }
        let mut p = Array4::zeros((doc.horizon, doc.states, doc.actions, doc.states));
        for (h, stage) in doc.p.iter().enumerate() {
            if stage.len() != doc.states {
                return Err(Error::Shape(format!("P[{h}] must have S rows")));
            }
            for (x, per_action) in stage.iter().enumerate() {
                if per_action.len() != doc.actions {
                    return Err(Error::Shape(format!("P[{h}][{x}] must have A rows")));
                }
                for (a, row) in per_action.iter().enumerate() {
                    if row.len() != doc.states {
                        return Err(Error::Shape(format!("P[{h}][{x}][{a}] must have S entries")));
                    }
                    for (y, &v) in row.iter().enumerate() {
                        p[[h, x, a, y]] = v;
                    }
                }
            }
        }
        let reward = Array2::from_shape_fn((doc.states, doc.actions), |(x, a)| doc.r[x][a]);
        Self::new(doc.x1, reward, p)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let (h, s, a) = (self.horizon(), self.states(), self.actions());
        let doc = MdpDocument {
            states: s,
            actions: a,
            horizon: h,
            x1: self.initial_state,
            r: self.reward.outer_iter().map(|row| row.to_vec()).collect(),
            p: (0..h)
                .map(|stage| (0..s).map(|x| (0..a).map(|u| self.row(stage, x, u).to_vec()).collect()).collect())
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    /// RiverSwim-style chain. Action 0 swims left deterministically, action 1
    /// swims right and succeeds with probability 0.6 (0.3 stay, 0.1 drift
    /// back). Small reward for resting at the left bank, full reward for
    /// pushing right at the right end.
    pub fn chain(states: usize, horizon: usize) -> Result<Self> {
        if states < 2 {
            return Err(Error::Config("chain needs at least 2 states".into()));
        }
        let last = states - 1;
        let mut p = Array4::zeros((horizon, states, 2, states));
        let mut reward = Array2::zeros((states, 2));
        reward[[0, 0]] = 0.05;
        reward[[last, 1]] = 1.0;
        for h in 0..horizon {
            for x in 0..states {
                p[[h, x, 0, x.saturating_sub(1)]] += 1.0;
                p[[h, x, 1, (x + 1).min(last)]] += 0.6;
                p[[h, x, 1, x]] += 0.3;
                p[[h, x, 1, x.saturating_sub(1)]] += 0.1;
            }
        }
        Self::new(0, reward, p)
    }

    /// Random instance with Dirichlet(1) transition rows and U[0,1] rewards.
    pub fn random(states: usize, actions: usize, horizon: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reward = Array2::from_shape_fn((states, actions), |_| rng.random::<f64>());
        let mut p = Array4::zeros((horizon, states, actions, states));
        for h in 0..horizon {
            for x in 0..states {
                for a in 0..actions {
                    let row = dirichlet_ones(states, &mut rng);
                    for (y, v) in row.into_iter().enumerate() {
                        p[[h, x, a, y]] = v;
                    }
                }
            }
        }
        Self::new(0, reward, p)
    }
}

/// Uniform draw from the probability simplex of dimension `n`.
pub(crate) fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter_mut().for_each(|v| *v /= total);
    draws
}

fn check_simplex(row: ArrayView1<'_, f64>) -> std::result::Result<(), String> {
    if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(format!("entry {v} is negative or not finite"));
    }
    let total: f64 = row.sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("sums to {total}"));
    }
    Ok(())
}

/// Deterministic or stochastic Markov policy.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyTable {
    /// Action index per `(h, x)`.
    Deterministic(Array2<usize>),
    /// Weights per `(h, x, a)`.
    Stochastic(Array3<f64>),
}

impl PolicyTable {
    pub fn deterministic(actions: Array2<usize>) -> Self {
        Self::Deterministic(actions)
    }

    pub fn stochastic(weights: Array3<f64>) -> Result<Self> {
        for ((h, x), _) in weights.slice(ndarray::s![.., .., 0]).indexed_iter() {
            check_simplex(weights.slice(ndarray::s![h, x, ..]))
                .map_err(|msg| Error::InvalidModel(format!("policy weights at (h={h}, x={x}): {msg}")))?;
        }
        Ok(Self::Stochastic(weights))
    }

    pub fn uniform(horizon: usize, states: usize, actions: usize) -> Self {
        Self::Stochastic(Array3::from_elem((horizon, states, actions), 1.0 / actions as f64))
    }

    pub fn horizon(&self) -> usize {
        match self {
            Self::Deterministic(t) => t.nrows(),
            Self::Stochastic(w) => w.dim().0,
        }
    }

    pub fn states(&self) -> usize {
        match self {
            Self::Deterministic(t) => t.ncols(),
            Self::Stochastic(w) => w.dim().1,
        }
    }

    /// Probability of `a` in state `x` at stage `h`.
    pub fn weight(&self, h: usize, x: usize, a: usize) -> f64 {
        match self {
            Self::Deterministic(t) => f64::from(u8::from(t[[h, x]] == a)),
            Self::Stochastic(w) => w[[h, x, a]],
        }
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, h: usize, x: usize, rng: &mut R) -> usize {
        match self {
            Self::Deterministic(t) => t[[h, x]],
            Self::Stochastic(w) => sample_index(w.slice(ndarray::s![h, x, ..]), rng),
        }
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        let ok = match self {
            Self::Deterministic(t) => {
                t.dim() == (mdp.horizon(), mdp.states()) && t.iter().all(|&a| a < mdp.actions())
            }
            Self::Stochastic(w) => w.dim() == (mdp.horizon(), mdp.states(), mdp.actions()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("policy does not match the MDP's (H, S, A)".into()))
        }
    }
}

/// Value table indexed `(h, x)` with `H + 1` rows; the last row is zero.
pub type ValueTable = Array2<f64>;

fn expected_next(mdp: &TabularMdp, h: usize, x: usize, a: usize, next: ArrayView1<'_, f64>) -> f64 {
    mdp.row(h, x, a).dot(&next)
}

pub fn evaluate_policy(mdp: &TabularMdp, policy: &PolicyTable) -> Result<ValueTable> {
    policy.check_shape(mdp)?;
    let (big_h, s, n_a) = (mdp.horizon(), mdp.states(), mdp.actions());
    let mut v = Array2::zeros((big_h + 1, s));
    for h in (0..big_h).rev() {
        let next = v.row(h + 1).to_owned();
        for x in 0..s {
            let mut total = 0.0;
            for a in 0..n_a {
                let w = policy.weight(h, x, a);
                if w > 0.0 {
                    total += w * (mdp.reward[[x, a]] + expected_next(mdp, h, x, a, next.view()));
                }
            }
            v[[h, x]] = total;
        }
    }
    Ok(v)
}

/// Backward induction. Ties go to the lowest action index.
pub fn solve_bellman_optimality(mdp: &TabularMdp) -> (ValueTable, PolicyTable) {
    let (big_h, s, n_a) = (mdp.horizon(), mdp.states(), mdp.actions());
    let mut v = Array2::zeros((big_h + 1, s));
    let mut pi = Array2::zeros((big_h, s));
    for h in (0..big_h).rev() {
        let next = v.row(h + 1).to_owned();
        for x in 0..s {
            let (best_a, best) = argmax((0..n_a).map(|a| mdp.reward[[x, a]] + expected_next(mdp, h, x, a, next.view())));
            v[[h, x]] = best;
            pi[[h, x]] = best_a;
        }
    }
    (v, PolicyTable::Deterministic(pi))
}

/// First index attaining the maximum.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// State-action occupancy `q_h(x, a)` of a policy started from `x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    q: Array3<f64>,
}

impl OccupancyMeasure {
    pub fn new(q: Array3<f64>) -> Result<Self> {
        if q.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidModel("occupancy entries must be finite and nonnegative".into()));
        }
        Ok(Self { q })
    }

    pub fn table(&self) -> &Array3<f64> {
        &self.q
    }

    pub fn get(&self, h: usize, x: usize, a: usize) -> f64 {
        self.q[[h, x, a]]
    }

    /// Largest deviation of `sum_{x,a} q_h(x,a)` from one over all stages.
    pub fn normalization_error(&self) -> f64 {
        self.q
            .outer_iter()
            .map(|stage| (stage.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest violation of the flow constraints under `mdp`, including the
    /// initial-state constraint.
    pub fn flow_error(&self, mdp: &TabularMdp) -> f64 {
        let (big_h, s, n_a) = self.q.dim();
        let mut worst: f64 = 0.0;
        for x in 0..s {
            let mass: f64 = (0..n_a).map(|a| self.q[[0, x, a]]).sum();
            let target = f64::from(u8::from(x == mdp.initial_state()));
            worst = worst.max((mass - target).abs());
        }
        for h in 0..big_h.saturating_sub(1) {
            for y in 0..s {
                let inflow: f64 = (0..s)
                    .flat_map(|x| (0..n_a).map(move |a| (x, a)))
                    .map(|(x, a)| mdp.transitions[[h, x, a, y]] * self.q[[h, x, a]])
                    .sum();
                let mass: f64 = (0..n_a).map(|a| self.q[[h + 1, y, a]]).sum();
                worst = worst.max((mass - inflow).abs());
            }
        }
        worst
    }

    /// `sum_h sum_{x,a} q_h(x,a) r(x,a)`.
    pub fn expected_reward(&self, reward: &Array2<f64>) -> f64 {
        self.q.outer_iter().map(|stage| (&stage * reward).sum()).sum()
    }
}

pub fn occupancy_of_policy(mdp: &TabularMdp, policy: &PolicyTable) -> Result<OccupancyMeasure> {
    policy.check_shape(mdp)?;
    let (big_h, s, n_a) = (mdp.horizon(), mdp.states(), mdp.actions());
    let mut q = Array3::zeros((big_h, s, n_a));
    let mut state_dist = Array1::zeros(s);
    state_dist[mdp.initial_state()] = 1.0;
    for h in 0..big_h {
        let mut next = Array1::zeros(s);
        for x in 0..s {
            if state_dist[x] == 0.0 {
                continue;
            }
            for a in 0..n_a {
                let mass = state_dist[x] * policy.weight(h, x, a);
                if mass > 0.0 {
                    q[[h, x, a]] = mass;
                    next.scaled_add(mass, &mdp.row(h, x, a));
                }
            }
        }
        state_dist = next;
    }
    OccupancyMeasure::new(q)
}

/// Policy induced by an occupancy measure; states without mass get uniform
/// weights.
pub fn policy_from_occupancy(q: &OccupancyMeasure) -> PolicyTable {
    let (big_h, s, n_a) = q.q.dim();
    let mut w = Array3::zeros((big_h, s, n_a));
    for h in 0..big_h {
        for x in 0..s {
            let row = q.q.slice(ndarray::s![h, x, ..]);
            let total: f64 = row.sum();
            for a in 0..n_a {
                w[[h, x, a]] = if total > 0.0 { row[a] / total } else { 1.0 / n_a as f64 };
            }
        }
    }
    PolicyTable::Stochastic(w)
}

/// One step of an episode (stage `h` is 0-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub stage: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

pub type Trajectory = Vec<Transition>;

pub fn sample_episode<R: Rng + ?Sized>(mdp: &TabularMdp, policy: &PolicyTable, rng: &mut R) -> Result<Trajectory> {
    policy.check_shape(mdp)?;
    let mut x = mdp.initial_state();
    let mut traj = Vec::with_capacity(mdp.horizon());
    for h in 0..mdp.horizon() {
        let a = policy.sample_action(h, x, rng);
        let y = sample_index(mdp.row(h, x, a), rng);
        traj.push(Transition { stage: h, state: x, action: a, reward: mdp.reward[[x, a]], next_state: y });
        x = y;
    }
    Ok(traj)
}

/// Inverse-CDF draw. Rows with a single unit entry consume no randomness.
fn sample_index<R: Rng + ?Sized>(row: ArrayView1<'_, f64>, rng: &mut R) -> usize {
    if let Some(i) = row.iter().position(|&p| p == 1.0) {
        return i;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cycle_mdp() -> TabularMdp {
        // 0 -> 1 -> 0, reward only in state 0
        let mut p = Array4::zeros((3, 2, 1, 2));
        for h in 0..3 {
            p[[h, 0, 0, 1]] = 1.0;
            p[[h, 1, 0, 0]] = 1.0;
        }
        TabularMdp::new(0, array![[1.0], [0.0]], p).unwrap()
    }

    #[test]
    fn one_step_reward() {
        let mdp = TabularMdp::new(0, array![[1.0]], Array4::ones((1, 1, 1, 1))).unwrap();
        let v = evaluate_policy(&mdp, &PolicyTable::Deterministic(Array2::zeros((1, 1)))).unwrap();
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[1, 0]], 0.0);
    }

    #[test]
    fn zero_reward_gives_zero_values() {
        let mut mdp = TabularMdp::random(3, 2, 4, 7).unwrap();
        mdp.reward.fill(0.0);
        let v = evaluate_policy(&mdp, &PolicyTable::uniform(4, 3, 2)).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cycle_value() {
        let v = evaluate_policy(&cycle_mdp(), &PolicyTable::Deterministic(Array2::zeros((3, 2)))).unwrap();
        assert_eq!(v[[0, 0]], 2.0);
    }

    #[test]
    fn bandit_optimum() {
        let mdp = TabularMdp::new(0, array![[0.2, 0.8]], Array4::ones((1, 1, 2, 1))).unwrap();
        let (v, pi) = solve_bellman_optimality(&mdp);
        assert_eq!(v[[0, 0]], 0.8);
        assert_eq!(pi, PolicyTable::Deterministic(array![[1]]));
    }

    #[test]
    fn ties_pick_lowest_action() {
        let mdp = TabularMdp::new(0, array![[0.5, 0.5, 0.5]], Array4::ones((1, 1, 3, 1))).unwrap();
        let (_, pi) = solve_bellman_optimality(&mdp);
        assert_eq!(pi, PolicyTable::Deterministic(array![[0]]));
    }

    #[test]
    fn single_action_optimum_is_the_only_policy() {
        let base = TabularMdp::random(3, 1, 3, 11).unwrap();
        let (v, _) = solve_bellman_optimality(&base);
        let only = evaluate_policy(&base, &PolicyTable::Deterministic(Array2::zeros((3, 3)))).unwrap();
        assert_eq!(v, only);
    }

    #[test]
    fn single_stage_occupancy() {
        let mdp = TabularMdp::random(3, 2, 1, 5).unwrap();
        let pi = PolicyTable::Deterministic(array![[1, 0, 0]]);
        let q = occupancy_of_policy(&mdp, &pi).unwrap();
        for x in 0..3 {
            for a in 0..2 {
                let expected = if x == 0 && a == 1 { 1.0 } else { 0.0 };
                assert_eq!(q.get(0, x, a), expected);
            }
        }
    }

    #[test]
    fn zero_mass_states_get_uniform_weights() {
        let mut q = Array3::zeros((1, 2, 3));
        q[[0, 0, 2]] = 1.0;
        let pi = policy_from_occupancy(&OccupancyMeasure::new(q).unwrap());
        assert_eq!(pi.weight(0, 0, 2), 1.0);
        for a in 0..3 {
            assert!((pi.weight(0, 1, a) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_occupancy_round_trips_on_support() {
        let mdp = TabularMdp::random(3, 2, 3, 2).unwrap();
        let pi = PolicyTable::Deterministic(array![[1, 0, 1], [0, 0, 1], [1, 1, 0]]);
        let q = occupancy_of_policy(&mdp, &pi).unwrap();
        let back = policy_from_occupancy(&q);
        for h in 0..3 {
            for x in 0..3 {
                let visited: f64 = (0..2).map(|a| q.get(h, x, a)).sum();
                if visited > 0.0 {
                    for a in 0..2 {
                        assert_eq!(back.weight(h, x, a), pi.weight(h, x, a));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_rows_and_rewards() {
        let bad = Array4::from_elem((1, 2, 1, 2), 0.4);
        assert!(matches!(TabularMdp::new(0, array![[0.0], [0.0]], bad), Err(Error::InvalidModel(_))));
        assert!(matches!(
            TabularMdp::new(0, array![[1.5]], Array4::ones((1, 1, 1, 1))),
            Err(Error::InvalidModel(_))
        ));
        assert!(matches!(
            TabularMdp::new(0, array![[0.5, 0.5]], Array4::ones((1, 1, 1, 1))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn policy_shape_mismatch() {
        let mdp = TabularMdp::random(2, 2, 2, 0).unwrap();
        let pi = PolicyTable::Deterministic(Array2::zeros((3, 2)));
        assert!(matches!(evaluate_policy(&mdp, &pi), Err(Error::Shape(_))));
    }

    #[test]
    fn json_round_trip() {
        let mdp = TabularMdp::random(3, 2, 2, 9).unwrap();
        let text = mdp.to_json_string().unwrap();
        assert_eq!(TabularMdp::from_json_str(&text).unwrap(), mdp);
    }

    #[test]
    fn deterministic_episode_ignores_seed() {
        let mdp = cycle_mdp();
        let pi = PolicyTable::Deterministic(Array2::zeros((3, 2)));
        let a = sample_episode(&mdp, &pi, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_episode(&mdp, &pi, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|t| t.state).collect::<Vec<_>>(), vec![0, 1, 0]);
    }
}

//! Factored linear MDPs and optimistic least-squares value iteration.
//!
//! Transitions factor as `P_{h,a} = Phi M_{h,a}` and rewards as `r_a = Phi rho_a`.
//! The learner knows `Phi` and `rho` and estimates the core matrices by LSTD,
//! `M_hat_{h,a} = Sigma_{h,a}^{-1} Psi_{h,a}` with
//! `Psi_{h,a} = sum_k phi(x_k) e_{x'_k}^T`, so a value function is regressed
//! onto features as `M_hat V = Sigma^{-1} sum_k phi(x_k) V(x'_k)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{argmax, dirichlet_ones, TabularMdp, Transition};

pub const REALIZABILITY_TOL: f64 = 1e-10;

/// Cholesky factors are recomputed from the Gram matrices this often.
pub const DEFAULT_REFRESH_EVERY: u64 = 256;

/// `P_{h,a} = Phi M_{h,a}`, `r_a = Phi rho_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredLinearMdp {
    initial_state: usize,
    /// (S, d)
    phi: Array2<f64>,
    /// (H, A, d, S)
    core: Array4<f64>,
    /// (A, d)
    rho: Array2<f64>,
}

impl FactoredLinearMdp {
    pub fn new(initial_state: usize, phi: Array2<f64>, core: Array4<f64>, rho: Array2<f64>) -> Result<Self> {
        let (s, d) = phi.dim();
        let (big_h, n_a, d2, s2) = core.dim();
        if s == 0 || d == 0 || n_a == 0 || big_h == 0 {
            return Err(Error::Shape("features, core and rewards must be non-empty".into()));
        }
        if d2 != d || s2 != s || rho.dim() != (n_a, d) {
            return Err(Error::Shape(format!(
                "phi {:?}, core {:?} and rho {:?} are inconsistent",
                phi.dim(),
                core.dim(),
                rho.dim()
            )));
        }
        if initial_state >= s {
            return Err(Error::OutOfRange(format!("initial state {initial_state} >= S = {s}")));
        }
        if phi.iter().chain(core.iter()).chain(rho.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite entry".into()));
        }
        let model = Self { initial_state, phi, core, rho };
        for h in 0..big_h {
            for a in 0..n_a {
                let p = model.phi.dot(&model.core(h, a));
                for (x, row) in p.outer_iter().enumerate() {
                    let sum: f64 = row.sum();
                    if row.iter().any(|&v| v < -REALIZABILITY_TOL) || (sum - 1.0).abs() > REALIZABILITY_TOL {
                        return Err(Error::InvalidModel(format!(
                            "row (h={h}, x={x}, a={a}) of Phi M is not a distribution (sum {sum})"
                        )));
                    }
                }
            }
        }
        for ((x, a), &r) in model.phi.dot(&model.rho.t()).indexed_iter() {
            if !(-REALIZABILITY_TOL..=1.0 + REALIZABILITY_TOL).contains(&r) {
                return Err(Error::InvalidModel(format!("reward r({x}, {a}) = {r} outside [0, 1]")));
            }
        }
        Ok(model)
    }

    pub fn states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn actions(&self) -> usize {
        self.rho.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.core.dim().0
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.phi
    }

    pub fn feature(&self, x: usize) -> ArrayView1<'_, f64> {
        self.phi.row(x)
    }

    pub fn core(&self, h: usize, a: usize) -> ArrayView2<'_, f64> {
        self.core.slice(ndarray::s![h, a, .., ..])
    }

    pub fn rho(&self) -> &Array2<f64> {
        &self.rho
    }

    /// `R = max_x ||phi(x)||_2`.
    pub fn feature_radius(&self) -> f64 {
        self.phi.outer_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max)
    }

    /// `C_P`, the largest l1 norm of a row of any `M_{h,a}`.
    pub fn core_radius(&self) -> f64 {
        let d = self.dim();
        let mut best = 0.0_f64;
        for h in 0..self.horizon() {
            for a in 0..self.actions() {
                let m = self.core(h, a);
                for i in 0..d {
                    best = best.max(m.row(i).iter().map(|v| v.abs()).sum());
                }
            }
        }
        best
    }

    /// `C_r = max_a ||rho_a||_2`.
    pub fn reward_radius(&self) -> f64 {
        self.rho.outer_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max)
    }

    /// `r(x, a) = <phi(x), rho_a>`, shape (S, A).
    pub fn reward(&self) -> Array2<f64> {
        self.phi.dot(&self.rho.t())
    }

    pub fn transition_row(&self, h: usize, x: usize, a: usize) -> Array1<f64> {
        self.phi.row(x).dot(&self.core(h, a))
    }

    /// The tabular MDP with the same dynamics. Rounding noise is removed by
    /// clamping and, where needed, renormalising.
    pub fn to_tabular(&self) -> Result<TabularMdp> {
        let (big_h, s, n_a) = (self.horizon(), self.states(), self.actions());
        let mut p = Array4::zeros((big_h, s, n_a, s));
        for h in 0..big_h {
            for a in 0..n_a {
                let rows = self.phi.dot(&self.core(h, a));
                for x in 0..s {
                    let mut row = rows.row(x).mapv(|v| v.max(0.0));
                    let sum = row.sum();
                    if (sum - 1.0).abs() > 1e-14 {
                        row /= sum;
                    }
                    p.slice_mut(ndarray::s![h, x, a, ..]).assign(&row);
                }
            }
        }
        let reward = self.reward().mapv(|v| v.clamp(0.0, 1.0));
        TabularMdp::new(self.initial_state, reward, p)
    }
}

/// Identity features: `d = S`, `M_{h,a} = P_{h,.,a,.}`, `rho_a = r(., a)`.
pub fn generate_onehot_factored(mdp: &TabularMdp) -> FactoredLinearMdp {
    let (big_h, s, n_a) = (mdp.horizon(), mdp.states(), mdp.actions());
    let phi = Array2::eye(s);
    let core = Array4::from_shape_fn((big_h, n_a, s, s), |(h, a, x, y)| mdp.transitions()[[h, x, a, y]]);
    let rho = mdp.reward().t().to_owned();
    FactoredLinearMdp { initial_state: mdp.initial_state(), phi, core, rho }
}

/// Random factored MDP: feature rows and core rows are Dirichlet(1) draws, so
/// every row of `Phi M` is a mixture of distributions; reward parameters are
/// uniform on `[0, 1]^d`, so `Phi rho` lies in `[0, 1]`.
pub fn generate_random_factored(
    states: usize,
    actions: usize,
    horizon: usize,
    dim: usize,
    seed: u64,
) -> Result<FactoredLinearMdp> {
    if states == 0 || actions == 0 || horizon == 0 || dim == 0 {
        return Err(Error::Shape("S, A, H and d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = Array2::zeros((states, dim));
    for mut row in phi.outer_iter_mut() {
        row.assign(&Array1::from(dirichlet_ones(dim, &mut rng)));
    }
    let mut core = Array4::zeros((horizon, actions, dim, states));
    for h in 0..horizon {
        for a in 0..actions {
            for i in 0..dim {
                let row = dirichlet_ones(states, &mut rng);
                core.slice_mut(ndarray::s![h, a, i, ..]).assign(&Array1::from(row));
            }
        }
    }
    let rho = Array2::from_shape_fn((actions, dim), |_| rng.random::<f64>());
    FactoredLinearMdp::new(0, phi, core, rho)
}

/// Gram matrices `Sigma_{h,a} = lambda I + sum phi phi^T` with cached Cholesky
/// factors, and the LSTD statistics `Psi_{h,a}` (d x S).
#[derive(Debug, Clone)]
pub struct LinearModelState {
    lambda: f64,
    horizon: usize,
    actions: usize,
    dim: usize,
    states: usize,
    gram: Vec<DMatrix<f64>>,
    factor: Vec<Cholesky<f64, Dyn>>,
    psi: Vec<DMatrix<f64>>,
    visits: Vec<u64>,
    episodes: u64,
    refresh_every: u64,
}

impl LinearModelState {
    pub fn new(horizon: usize, actions: usize, dim: usize, states: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!("ridge lambda = {lambda} must be positive")));
        }
        let blocks = horizon * actions;
        let gram = DMatrix::identity(dim, dim) * lambda;
        let factor = Cholesky::new(gram.clone()).ok_or_else(|| Error::Numerical("lambda I is not positive".into()))?;
        Ok(Self {
            lambda,
            horizon,
            actions,
            dim,
            states,
            gram: vec![gram; blocks],
            factor: vec![factor; blocks],
            psi: vec![DMatrix::zeros(dim, states); blocks],
            visits: vec![0; blocks],
            episodes: 0,
            refresh_every: DEFAULT_REFRESH_EVERY,
        })
    }

    pub fn with_refresh_every(mut self, episodes: u64) -> Self {
        self.refresh_every = episodes.max(1);
        self
    }

    fn idx(&self, h: usize, a: usize) -> usize {
        h * self.actions + a
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.horizon, self.actions, self.dim, self.states)
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn visits(&self, h: usize, a: usize) -> u64 {
        self.visits[self.idx(h, a)]
    }

    pub fn gram(&self, h: usize, a: usize) -> &DMatrix<f64> {
        &self.gram[self.idx(h, a)]
    }

    pub fn psi(&self, h: usize, a: usize) -> &DMatrix<f64> {
        &self.psi[self.idx(h, a)]
    }

    pub fn factor(&self, h: usize, a: usize) -> &Cholesky<f64, Dyn> {
        &self.factor[self.idx(h, a)]
    }

    fn check_block(&self, h: usize, a: usize, phi: &[f64]) -> Result<()> {
        if h >= self.horizon || a >= self.actions {
            return Err(Error::OutOfRange(format!("block (h={h}, a={a}) outside (H={}, A={})", self.horizon, self.actions)));
        }
        if phi.len() != self.dim {
            return Err(Error::Shape(format!("feature of length {} but d = {}", phi.len(), self.dim)));
        }
        Ok(())
    }

    /// `Sigma_{h,a} += phi phi^T`, with a rank-one update of its factor.
    pub fn gram_update(&mut self, h: usize, a: usize, phi: &[f64]) -> Result<()> {
        self.check_block(h, a, phi)?;
        let i = self.idx(h, a);
        let v = DVector::from_column_slice(phi);
        self.gram[i].ger(1.0, &v, &v, 1.0);
        self.factor[i].rank_one_update(&v, 1.0);
        self.visits[i] += 1;
        Ok(())
    }

    /// Gram update plus the LSTD statistic for the observed next state.
    pub fn record(&mut self, h: usize, a: usize, phi: &[f64], next_state: usize) -> Result<()> {
        if next_state >= self.states {
            return Err(Error::OutOfRange(format!("next state {next_state} >= S = {}", self.states)));
        }
        self.gram_update(h, a, phi)?;
        let i = self.idx(h, a);
        for (k, &f) in phi.iter().enumerate() {
            self.psi[i][(k, next_state)] += f;
        }
        Ok(())
    }

    /// Closes an episode; factors are rebuilt from the Gram matrices on the
    /// refresh schedule.
    pub fn end_episode(&mut self) -> Result<()> {
        self.episodes += 1;
        if self.episodes % self.refresh_every == 0 {
            self.refresh_factors()?;
        }
        Ok(())
    }

    pub fn refresh_factors(&mut self) -> Result<()> {
        for (f, g) in self.factor.iter_mut().zip(&self.gram) {
            *f = Cholesky::new(g.clone()).ok_or_else(|| Error::Numerical("Gram matrix lost positive definiteness".into()))?;
        }
        Ok(())
    }

    /// Smallest eigenvalue over all Gram matrices.
    pub fn min_gram_eigenvalue(&self) -> f64 {
        self.gram.iter().map(|g| g.clone().symmetric_eigenvalues().min()).fold(f64::INFINITY, f64::min)
    }

    pub fn max_gram_asymmetry(&self) -> f64 {
        self.gram.iter().map(|g| (g - g.transpose()).abs().max()).fold(0.0, f64::max)
    }

    /// `||phi||_{Sigma_{h,a}^{-1}}`.
    pub fn inverse_norm(&self, h: usize, a: usize, phi: &[f64]) -> Result<f64> {
        self.check_block(h, a, phi)?;
        let v = DVector::from_column_slice(phi);
        let w = self.factor(h, a).solve(&v);
        Ok(v.dot(&w).max(0.0).sqrt())
    }
}

/// Functional form of [`LinearModelState::gram_update`].
pub fn gram_update(mut state: LinearModelState, h: usize, a: usize, phi: &[f64]) -> Result<LinearModelState> {
    state.gram_update(h, a, phi)?;
    Ok(state)
}

/// Quantities shared by every parametric backup on the current data: the
/// LSTD core estimates `Sigma^{-1} Psi` and the feature norms `||phi(x)||_{Sigma^{-1}}`.
#[derive(Debug, Clone)]
pub struct OpbCache {
    horizon: usize,
    actions: usize,
    x1: usize,
    phi: DMatrix<f64>,
    rho: Vec<DVector<f64>>,
    m_hat: Vec<DMatrix<f64>>,
    norms: Array3<f64>,
}

impl OpbCache {
    pub fn new(state: &LinearModelState, phi: &Array2<f64>, rho: &Array2<f64>, x1: usize) -> Result<Self> {
        let (big_h, n_a, d, s) = state.dims();
        if phi.dim() != (s, d) || rho.dim() != (n_a, d) {
            return Err(Error::Shape(format!("phi {:?} / rho {:?} do not match (S={s}, A={n_a}, d={d})", phi.dim(), rho.dim())));
        }
        if x1 >= s {
            return Err(Error::OutOfRange(format!("initial state {x1} >= S = {s}")));
        }
        let phi_m = DMatrix::from_fn(s, d, |x, k| phi[[x, k]]);
        let phi_t = phi_m.transpose();
        let mut m_hat = Vec::with_capacity(big_h * n_a);
        let mut norms = Array3::zeros((big_h, s, n_a));
        for h in 0..big_h {
            for a in 0..n_a {
                let f = state.factor(h, a);
                m_hat.push(f.solve(state.psi(h, a)));
                let w = f.solve(&phi_t);
                for x in 0..s {
                    let q = phi_t.column(x).dot(&w.column(x));
                    if !q.is_finite() {
                        return Err(Error::Numerical("non-finite feature norm".into()));
                    }
                    norms[[h, x, a]] = q.max(0.0).sqrt();
                }
            }
        }
        let rho = rho.outer_iter().map(|r| DVector::from_iterator(d, r.iter().copied())).collect();
        Ok(Self { horizon: big_h, actions: n_a, x1, phi: phi_m, rho, m_hat, norms })
    }

    pub fn norm(&self, h: usize, x: usize, a: usize) -> f64 {
        self.norms[[h, x, a]]
    }

    pub fn norms(&self) -> &Array3<f64> {
        &self.norms
    }

    pub fn m_hat(&self, h: usize, a: usize) -> &DMatrix<f64> {
        &self.m_hat[h * self.actions + a]
    }

    fn states(&self) -> usize {
        self.phi.nrows()
    }

    fn dim(&self) -> usize {
        self.phi.ncols()
    }
}

/// Solution of the parametric Bellman equations for one bonus.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlan {
    /// `theta_{h,a} = rho_a + M_hat_{h,a} V_{h+1}`, shape (H, A, d).
    pub theta: Array3<f64>,
    /// Values with a zero terminal row, shape (H+1, S).
    pub v: Array2<f64>,
    pub pi: Array2<usize>,
    /// Bonus `CB_h(x, a)`, shape (H, S, A).
    pub cb: Array3<f64>,
}

impl LinearPlan {
    pub fn policy(&self) -> crate::mdp::PolicyTable {
        crate::mdp::PolicyTable::Deterministic(self.pi.clone())
    }
}

fn opb_backup(cache: &OpbCache, bonus: impl Fn(usize, usize, usize) -> f64, clip: bool) -> LinearPlan {
    let (big_h, n_a, s, d) = (cache.horizon, cache.actions, cache.states(), cache.dim());
    let mut theta = Array3::zeros((big_h, n_a, d));
    let mut v = Array2::zeros((big_h + 1, s));
    let mut pi = Array2::zeros((big_h, s));
    let mut cb = Array3::zeros((big_h, s, n_a));
    let mut q = DMatrix::zeros(s, n_a);
    for h in (0..big_h).rev() {
        let next = DVector::from_iterator(s, v.row(h + 1).iter().copied());
        for a in 0..n_a {
            let th = &cache.rho[a] + cache.m_hat(h, a) * &next;
            let fitted = &cache.phi * &th;
            for x in 0..s {
                let b = bonus(h, x, a);
                cb[[h, x, a]] = b;
                q[(x, a)] = fitted[x] + b;
            }
            for k in 0..d {
                theta[[h, a, k]] = th[k];
            }
        }
        let cap = (big_h - h) as f64;
        for x in 0..s {
            let (best_a, best) = argmax((0..n_a).map(|a| q[(x, a)]));
            v[[h, x]] = if clip { best.clamp(0.0, cap) } else { best };
            pi[[h, x]] = best_a;
        }
    }
    LinearPlan { theta, v, pi, cb }
}

/// LSVI-UCB backup: `V_h(x) = min{H-h+1, max_a <phi(x), theta_{h,a}> + alpha ||phi(x)||_{Sigma^{-1}}}`,
/// floored at zero. Ties go to the lowest action.
pub fn lsvi_backup(cache: &OpbCache, alpha: f64) -> LinearPlan {
    opb_backup(cache, |h, x, a| alpha * cache.norm(h, x, a), true)
}

/// Parametric backup with bonus `<phi(x), B_{h,a}>`; `b` has shape (H, A, d).
pub fn feature_bonus_backup(cache: &OpbCache, b: &Array3<f64>, clip: bool) -> LinearPlan {
    opb_backup(
        cache,
        |h, x, a| (0..cache.dim()).map(|k| cache.phi[(x, k)] * b[[h, a, k]]).sum(),
        clip,
    )
}

/// `G'(B)`: the unclipped optimistic value at the initial state.
pub fn g_prime(cache: &OpbCache, b: &Array3<f64>) -> f64 {
    feature_bonus_backup(cache, b, false).v[[0, cache.x1]]
}

fn check_schedule_args(values: &[(&str, f64)], delta: f64) -> Result<()> {
    for (name, v) in values {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} = {v} must be positive")));
        }
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta = {delta} must lie in (0, 1)")));
    }
    Ok(())
}

/// Local bonus scale
/// `2H sqrt(d ln(1 + K R^2/lambda) + ln(HA/delta) + dA (ln(1 + 4 H K^2 R^2) + d ln(1 + 4 R^3 K^3))) + C_P (H sqrt(d) + 1) + 1`.
#[allow(clippy::too_many_arguments)]
pub fn alpha_schedule(
    d: usize,
    actions: usize,
    horizon: usize,
    episodes: u64,
    radius: f64,
    c_p: f64,
    delta: f64,
    lambda: f64,
) -> Result<f64> {
    let (d, a, h, k) = (d as f64, actions as f64, horizon as f64, episodes as f64);
    check_schedule_args(&[("d", d), ("A", a), ("H", h), ("K", k), ("R", radius), ("C_P", c_p), ("lambda", lambda)], delta)?;
    let r2 = radius * radius;
    let inner = d * (1.0 + k * r2 / lambda).ln()
        + (h * a / delta).ln()
        + d * a * ((1.0 + 4.0 * h * k * k * r2).ln() + d * (1.0 + 4.0 * radius.powi(3) * k.powi(3)).ln());
    Ok(2.0 * h * inner.sqrt() + c_p * (h * d.sqrt() + 1.0) + 1.0)
}

/// Radius of the global confidence ellipsoids
/// `2H sqrt(d ln(1 + K R^2) + dA ln(1 + 4 K^2 H R^3) + ln(HA/delta)) + sqrt(lambda) (C_P sqrt(d) + 1 + C_P)`.
#[allow(clippy::too_many_arguments)]
pub fn global_epsilon(
    d: usize,
    actions: usize,
    horizon: usize,
    episodes: u64,
    radius: f64,
    c_p: f64,
    delta: f64,
    lambda: f64,
) -> Result<f64> {
    let (d, a, h, k) = (d as f64, actions as f64, horizon as f64, episodes as f64);
    check_schedule_args(&[("d", d), ("A", a), ("H", h), ("K", k), ("R", radius), ("C_P", c_p), ("lambda", lambda)], delta)?;
    let inner = d * (1.0 + k * radius * radius).ln()
        + d * a * (1.0 + 4.0 * k * k * h * radius.powi(3)).ln()
        + (h * a / delta).ln();
    Ok(2.0 * h * inner.sqrt() + lambda.sqrt() * (c_p * d.sqrt() + 1.0 + c_p))
}

/// Ceiling on the per-stage sum of feature norms over `t` episodes:
/// `2 sqrt(d A t ln(1 + t R^2 / lambda))`.
pub fn bonus_sum_ceiling(d: usize, actions: usize, episodes: u64, radius: f64, lambda: f64) -> f64 {
    let t = episodes as f64;
    2.0 * (d as f64 * actions as f64 * t * (1.0 + t * radius * radius / lambda).ln()).sqrt()
}

/// Best bonus found by random search over `{B : ||B_{h,a}||_{Sigma_{h,a}} <= eps}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSearch {
    /// Shape (H, A, d).
    pub b: Array3<f64>,
    pub value: f64,
    /// Index of the winning sample, `None` when `B = 0` was never beaten.
    pub best_sample: Option<usize>,
}

/// Approximate maximiser of the convex function `G'` over the ellipsoid
/// product. Candidates are `B = 0` and `n_samples` random points: each block is
/// `eps * r * L^{-T} w` with `w` uniform on the sphere and `Sigma = L L^T`.
/// Even-indexed samples lie on the boundary (`r = 1`), odd-indexed ones use
/// `r = u^{1/(dAH)}`. The result is feasible, so it never exceeds the true
/// maximum, and never falls below `G'(0)`.
pub fn global_bonus_search<R: Rng + ?Sized>(
    state: &LinearModelState,
    cache: &OpbCache,
    eps: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<GlobalSearch> {
    if n_samples == 0 {
        return Err(Error::Domain("global bonus search needs at least one sample".into()));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("ellipsoid radius {eps} must be finite and nonnegative")));
    }
    let (big_h, n_a, d, _) = state.dims();
    let mut best = GlobalSearch { b: Array3::zeros((big_h, n_a, d)), value: 0.0, best_sample: None };
    best.value = g_prime(cache, &best.b);
    let lt: Vec<DMatrix<f64>> =
        (0..big_h * n_a).map(|i| state.factor[i].l().transpose()).collect();
    let joint_dim = (d * n_a * big_h) as f64;
    let mut candidate = Array3::zeros((big_h, n_a, d));
    for i in 0..n_samples {
        let radius = if i % 2 == 0 { 1.0 } else { rng.random::<f64>().powf(1.0 / joint_dim) };
        for h in 0..big_h {
            for a in 0..n_a {
                let mut w = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let norm = w.norm();
                if norm > 0.0 {
                    w /= norm;
                }
                let blk = lt[h * n_a + a]
                    .solve_upper_triangular(&w)
                    .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
                for k in 0..d {
                    candidate[[h, a, k]] = eps * radius * blk[k];
                }
            }
        }
        let value = g_prime(cache, &candidate);
        if value > best.value {
            best.value = value;
            best.b.assign(&candidate);
            best.best_sample = Some(i);
        }
    }
    Ok(best)
}

/// Which bonus a linear agent uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinearBonus {
    /// `alpha ||phi(x)||_{Sigma^{-1}}`.
    Local,
    /// `<phi(x), B>` with `B` from [`global_bonus_search`].
    Global { n_samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearAgentConfig {
    pub bonus: LinearBonus,
    pub lambda: f64,
    pub delta: f64,
    /// Number of episodes `K` the bonus schedule is tuned for.
    pub episodes: u64,
    /// Multiplier on the theoretical bonus scale.
    pub alpha_scale: f64,
    pub seed: u64,
}

impl LinearAgentConfig {
    pub fn local(delta: f64, episodes: u64) -> Self {
        Self { bonus: LinearBonus::Local, lambda: 1.0, delta, episodes, alpha_scale: 1.0, seed: 0 }
    }
}

/// LSVI-UCB (local bonus) or its global-bonus variant, acting on known
/// features and rewards.
#[derive(Debug, Clone)]
pub struct LinearAgent {
    model: FactoredLinearMdp,
    state: LinearModelState,
    config: LinearAgentConfig,
    /// Theoretical scale (`alpha`, or `eps` for the global bonus) before scaling.
    theory_scale: f64,
    rng: ChaCha8Rng,
    bonus_sums: Vec<f64>,
}

/// One episode's plan together with the data needed to audit it.
#[derive(Debug, Clone)]
pub struct LinearEpisodePlan {
    pub plan: LinearPlan,
    /// Global bonus parameters, if any.
    pub global: Option<GlobalSearch>,
}

impl LinearAgent {
    pub fn new(model: FactoredLinearMdp, config: LinearAgentConfig) -> Result<Self> {
        if !(config.alpha_scale >= 0.0 && config.alpha_scale.is_finite()) {
            return Err(Error::Config(format!("alpha scale {} must be finite and nonnegative", config.alpha_scale)));
        }
        let (d, n_a, big_h) = (model.dim(), model.actions(), model.horizon());
        let radius = model.feature_radius().max(f64::MIN_POSITIVE);
        let c_p = model.core_radius().max(f64::MIN_POSITIVE);
        let schedule = match config.bonus {
            LinearBonus::Local => alpha_schedule,
            LinearBonus::Global { .. } => global_epsilon,
        };
        let theory_scale = schedule(d, n_a, big_h, config.episodes, radius, c_p, config.delta, config.lambda)?;
        let state = LinearModelState::new(big_h, n_a, d, model.states(), config.lambda)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            bonus_sums: vec![0.0; big_h],
            model,
            state,
            config,
            theory_scale,
        })
    }

    pub fn model(&self) -> &FactoredLinearMdp {
        &self.model
    }

    pub fn state(&self) -> &LinearModelState {
        &self.state
    }

    pub fn config(&self) -> &LinearAgentConfig {
        &self.config
    }

    pub fn theoretical_scale(&self) -> f64 {
        self.theory_scale
    }

    /// Bonus scale in force: `alpha_scale` times the theoretical value.
    pub fn scale(&self) -> f64 {
        self.config.alpha_scale * self.theory_scale
    }

    pub fn bonus_sums(&self) -> &[f64] {
        &self.bonus_sums
    }

    pub fn cache(&self) -> Result<OpbCache> {
        OpbCache::new(&self.state, self.model.features(), self.model.rho(), self.model.initial_state())
    }

    /// Solves the optimistic parametric Bellman equations and checks the Gram,
    /// parameter and clipping invariants.
    pub fn plan(&mut self) -> Result<LinearEpisodePlan> {
        let cache = self.cache()?;
        let (plan, global) = match self.config.bonus {
            LinearBonus::Local => (lsvi_backup(&cache, self.scale()), None),
            LinearBonus::Global { n_samples } => {
                let found = global_bonus_search(&self.state, &cache, self.scale(), n_samples, &mut self.rng)?;
                (feature_bonus_backup(&cache, &found.b, true), Some(found))
            }
        };
        self.check_plan(&plan)?;
        Ok(LinearEpisodePlan { plan, global })
    }

    fn check_plan(&self, plan: &LinearPlan) -> Result<()> {
        let lambda = self.state.lambda();
        let min_eig = self.state.min_gram_eigenvalue();
        if min_eig < lambda * (1.0 - 1e-9) {
            return Err(Error::Invariant(format!("Gram minimum eigenvalue {min_eig} < lambda = {lambda}")));
        }
        let big_h = self.model.horizon();
        let t = self.state.episodes() as f64;
        let ceiling =
            self.model.reward_radius() + t * big_h as f64 * self.model.feature_radius() / lambda;
        for h in 0..big_h {
            for a in 0..self.model.actions() {
                let th = plan.theta.slice(ndarray::s![h, a, ..]);
                let norm = th.dot(&th).sqrt();
                if norm > ceiling * (1.0 + 1e-9) + 1e-12 {
                    return Err(Error::Invariant(format!("||theta_(h={h}, a={a})|| = {norm} > {ceiling}")));
                }
            }
            let cap = (big_h - h) as f64;
            if let Some(v) = plan.v.row(h).iter().find(|v| !(0.0..=cap).contains(*v)) {
                return Err(Error::Invariant(format!("V_(h={h}) = {v} outside [0, {cap}]")));
            }
        }
        Ok(())
    }

    /// Whether the true model satisfies the confidence condition behind the
    /// plan's optimism. For the local bonus:
    /// `<P_h(x,a), V_{h+1}> - <phi(x), M_hat V_{h+1}> <= CB_h(x,a)` for all `(h, x, a)`;
    /// for the global bonus: `||(M - M_hat) V_{h+1}||_{Sigma_{h,a}} <= eps` for all `(h, a)`.
    pub fn feasible(&self, plan: &LinearPlan) -> bool {
        let (big_h, s, n_a, d) = (self.model.horizon(), self.model.states(), self.model.actions(), self.model.dim());
        let rho = self.model.rho();
        for h in 0..big_h {
            let next = plan.v.row(h + 1);
            for a in 0..n_a {
                let true_mv = self.model.core(h, a).dot(&next);
                let diff = DVector::from_fn(d, |k, _| true_mv[k] - (plan.theta[[h, a, k]] - rho[[a, k]]));
                match self.config.bonus {
                    LinearBonus::Local => {
                        for x in 0..s {
                            let gap: f64 = self.model.feature(x).iter().zip(diff.iter()).map(|(p, q)| p * q).sum();
                            if gap > plan.cb[[h, x, a]] + 1e-9 {
                                return false;
                            }
                        }
                    }
                    LinearBonus::Global { .. } => {
                        let norm = diff.dot(&(self.state.gram(h, a) * &diff)).max(0.0).sqrt();
                        if norm > self.scale() + 1e-9 {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    /// Records a trajectory. The feature norms of the visited pairs are
    /// accumulated before the update and checked against their ceiling.
    pub fn observe(&mut self, trajectory: &[Transition]) -> Result<()> {
        let big_h = self.model.horizon();
        if let Some(t) = trajectory.iter().find(|t| {
            t.stage >= big_h || t.state >= self.model.states() || t.action >= self.model.actions()
        }) {
            return Err(Error::OutOfRange(format!("transition {t:?} outside the model")));
        }
        for t in trajectory {
            let phi = self.model.feature(t.state).to_vec();
            self.bonus_sums[t.stage] += self.state.inverse_norm(t.stage, t.action, &phi)?;
            self.state.record(t.stage, t.action, &phi, t.next_state)?;
        }
        self.state.end_episode()?;
        let ceiling = bonus_sum_ceiling(
            self.model.dim(),
            self.model.actions(),
            self.state.episodes(),
            self.model.feature_radius(),
            self.state.lambda(),
        );
        if let Some((h, s)) = self.bonus_sums.iter().enumerate().find(|(_, s)| **s > ceiling * (1.0 + 1e-9)) {
            return Err(Error::Invariant(format!("stage {h} feature-norm sum {s} exceeds {ceiling}")));
        }
        Ok(())
    }
}

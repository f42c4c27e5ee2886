//! Divergences between next-state distributions, their conjugates
//! `D*(z | eps, p_hat) = max { <z, p - p_hat> : p in simplex, D(p, p_hat) <= eps }`
//! and closed-form upper bounds on those conjugates (the inflated conjugates
//! used as exploration bonuses).
//!
//! Reference vectors need not sum to one: the `+`-kinds are fed the modified
//! empirical model whose zero counts are lifted to `1/N`, and the unvisited
//! rows of the plain empirical model are all zeros. Every upper bound below
//! stays valid in both situations; when the reference is a distribution they
//! reduce to the familiar closed forms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack applied to the feasibility test `D(p, p_hat) <= eps` on lattice points.
pub(crate) const FEASIBILITY_SLACK: f64 = 1e-12;

/// Largest lattice the brute-force conjugate is allowed to enumerate.
pub const LATTICE_BUDGET: u64 = 200_000_000;

/// Tolerance used to decide whether a reference vector is normalized.
const NORMALIZED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DivergenceKind {
    /// `||p - p_hat||_1`, the UCRL2 confidence set.
    Tv,
    /// `max_x (p(x) - p_hat(x))^2 / p_hat(x)`, an empirical-Bernstein set.
    VarWeightedLinf,
    /// Unnormalized relative entropy `sum p log(p/p_hat) + sum (p_hat - p)`.
    ForwardKl,
    /// `sum p_hat log(p_hat / p)`, the KL-UCRL set.
    ReverseKl,
    /// Pearson `sum (p - p_hat)^2 / p_hat`.
    Chi2,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 5] =
        [Self::Tv, Self::VarWeightedLinf, Self::ForwardKl, Self::ReverseKl, Self::Chi2];

    /// Whether the kind is centred on the modified model `P_hat_plus`
    /// rather than on the plain empirical model.
    pub fn uses_plus_reference(self) -> bool {
        matches!(self, Self::VarWeightedLinf | Self::ForwardKl | Self::Chi2)
    }

    /// Short algorithm id used on the command line.
    pub fn alg_id(self) -> &'static str {
        match self {
            Self::Tv => "tv",
            Self::VarWeightedLinf => "bernstein",
            Self::ForwardKl => "kl",
            Self::ReverseKl => "rkl",
            Self::Chi2 => "chi2",
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.alg_id())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tv" | "l1" => Ok(Self::Tv),
            "bernstein" | "varlinf" => Ok(Self::VarWeightedLinf),
            "kl" | "forward-kl" => Ok(Self::ForwardKl),
            "rkl" | "reverse-kl" => Ok(Self::ReverseKl),
            "chi2" => Ok(Self::Chi2),
            _ => Err(Error::UnknownId { kind: "divergence", id: s.to_string() }),
        }
    }
}

/// Arguments of a conjugate evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ConjugateInput<'a> {
    /// The function being integrated, typically `V_{h+1}`.
    pub z: &'a [f64],
    pub eps: f64,
    pub p_hat: &'a [f64],
    /// Upper end of the value range still to be collected (`H - h`).
    pub horizon_remaining: f64,
    /// Visit count `N` behind the reference vector.
    pub count: f64,
    /// Number of states `S` entering the lower-order terms.
    pub states: usize,
    /// Multiplier on the `2SH/N` term (1.0 reproduces the published bonus).
    pub lower_order_scale: f64,
}

impl<'a> ConjugateInput<'a> {
    pub fn new(z: &'a [f64], eps: f64, p_hat: &'a [f64]) -> Self {
        let horizon_remaining = z.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        Self { z, eps, p_hat, horizon_remaining, count: 1.0, states: z.len(), lower_order_scale: 1.0 }
    }

    pub fn with_extras(mut self, horizon_remaining: f64, count: f64, states: usize) -> Self {
        self.horizon_remaining = horizon_remaining;
        self.count = count;
        self.states = states;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.z.len() != self.p_hat.len() || self.z.is_empty() {
            return Err(Error::Shape(format!(
                "z has {} entries, p_hat has {}",
                self.z.len(),
                self.p_hat.len()
            )));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Domain(format!("confidence width {} must be finite and >= 0", self.eps)));
        }
        if !(self.lower_order_scale >= 0.0 && self.lower_order_scale.is_finite()) {
            return Err(Error::Domain(format!("lower-order scale {} must be finite and >= 0", self.lower_order_scale)));
        }
        if self.p_hat.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain("reference vector must be finite and nonnegative".into()));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("z must be finite".into()));
        }
        Ok(())
    }
}

pub fn span(z: &[f64]) -> f64 {
    let (lo, hi) = min_max(z);
    hi - lo
}

/// `sum_x p_hat(x) (z(x) - <p_hat, z>)^2`; `p_hat` need not be normalized.
pub fn empirical_variance(z: &[f64], p_hat: &[f64]) -> f64 {
    let mean = dot(p_hat, z);
    p_hat.iter().zip(z).map(|(p, v)| p * (v - mean) * (v - mean)).sum::<f64>().max(0.0)
}

fn min_max(z: &[f64]) -> (f64, f64) {
    z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn require_positive_reference(kind: DivergenceKind, p_hat: &[f64]) -> Result<()> {
    if kind.uses_plus_reference() && p_hat.iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain(format!(
            "{kind} needs a strictly positive reference vector (use the modified empirical model)"
        )));
    }
    Ok(())
}

/// `D(p, p_hat)` for a distribution `p`.
///
/// Reverse KL returns `+inf` when `p` misses part of `p_hat`'s support.
pub fn divergence(kind: DivergenceKind, p: &[f64], p_hat: &[f64]) -> Result<f64> {
    if p.len() != p_hat.len() {
        return Err(Error::Shape(format!("p has {} entries, p_hat has {}", p.len(), p_hat.len())));
    }
    if p.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || (p.iter().sum::<f64>() - 1.0).abs() > NORMALIZED_TOL {
        return Err(Error::Domain("p must lie on the probability simplex".into()));
    }
    if p_hat.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Domain("reference vector must be finite and nonnegative".into()));
    }
    require_positive_reference(kind, p_hat)?;
    Ok(divergence_unchecked(kind, p, p_hat))
}

pub(crate) fn divergence_unchecked(kind: DivergenceKind, p: &[f64], q: &[f64]) -> f64 {
    match kind {
        DivergenceKind::Tv => p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum(),
        DivergenceKind::VarWeightedLinf => {
            p.iter().zip(q).map(|(a, b)| (a - b) * (a - b) / b).fold(0.0, f64::max)
        }
        DivergenceKind::Chi2 => p.iter().zip(q).map(|(a, b)| (a - b) * (a - b) / b).sum(),
        DivergenceKind::ForwardKl => p
            .iter()
            .zip(q)
            .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 } + (b - a))
            .sum::<f64>()
            .max(0.0),
        DivergenceKind::ReverseKl => {
            let mut total = 0.0;
            for (&a, &b) in p.iter().zip(q) {
                if b > 0.0 {
                    if a <= 0.0 {
                        return f64::INFINITY;
                    }
                    total += b * (b / a).ln();
                }
            }
            total
        }
    }
}

/// Number of points `C(n + dim - 1, dim - 1)` of the simplex lattice with
/// spacing `1/n`.
pub fn lattice_size(dim: usize, divisions: usize) -> u64 {
    let k = dim.saturating_sub(1) as u64;
    let n = divisions as u64;
    let mut acc: u64 = 1;
    for i in 1..=k {
        acc = acc.saturating_mul(n + i) / i;
    }
    acc
}

/// Visits every point of the simplex lattice `{c / n : c in N^dim, |c| = n}`
/// in lexicographic order of `c`.
pub fn for_each_lattice_point(dim: usize, divisions: usize, mut visit: impl FnMut(&[f64])) {
    if dim == 0 {
        return;
    }
    let step = 1.0 / divisions as f64;
    let mut counts = vec![0usize; dim];
    let mut point = vec![0.0; dim];
    fn recurse(
        i: usize,
        left: usize,
        step: f64,
        counts: &mut [usize],
        point: &mut [f64],
        visit: &mut dyn FnMut(&[f64]),
    ) {
        let dim = counts.len();
        if i == dim - 1 {
            counts[i] = left;
            point[i] = left as f64 * step;
            visit(point);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            point[i] = c as f64 * step;
            recurse(i + 1, left - c, step, counts, point, visit);
        }
    }
    recurse(0, divisions, step, &mut counts, &mut point, &mut visit);
}

/// Divisions `n` of the lattice with spacing `grid_step`, checked against the
/// enumeration budget.
pub fn lattice_divisions(dim: usize, grid_step: f64) -> Result<usize> {
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::Domain(format!("grid step {grid_step} must lie in (0, 1]")));
    }
    if dim > 4 {
        return Err(Error::Budget(format!("lattice oracles support at most 4 next states, got {dim}")));
    }
    let n = (1.0 / grid_step).round() as usize;
    let size = lattice_size(dim, n);
    if size > LATTICE_BUDGET {
        return Err(Error::Budget(format!("{size} lattice points exceed the budget of {LATTICE_BUDGET}")));
    }
    Ok(n)
}

/// Result of a lattice maximization.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMax {
    pub value: f64,
    /// False when no lattice point satisfied the constraint; `value` is then 0.
    pub feasible: bool,
    pub argmax: Vec<f64>,
}

/// Brute-force conjugate: the best lattice point of the confidence set.
pub fn conjugate_bruteforce(kind: DivergenceKind, input: &ConjugateInput<'_>, grid_step: f64) -> Result<GridMax> {
    input.validate()?;
    require_positive_reference(kind, input.p_hat)?;
    let n = lattice_divisions(input.z.len(), grid_step)?;
    let base = dot(input.z, input.p_hat);
    let bound = input.eps + FEASIBILITY_SLACK;
    let mut best = f64::NEG_INFINITY;
    let mut argmax = Vec::new();
    for_each_lattice_point(input.z.len(), n, |p| {
        let gain = dot(input.z, p);
        if gain > best && divergence_unchecked(kind, p, input.p_hat) <= bound {
            best = gain;
            argmax.clear();
            argmax.extend_from_slice(p);
        }
    });
    if best == f64::NEG_INFINITY {
        return Ok(GridMax { value: 0.0, feasible: false, argmax });
    }
    Ok(GridMax { value: best - base, feasible: true, argmax })
}

/// Inflated conjugate `D*_dag(z | eps, p_hat)`, an upper bound on both
/// `D*(z)` and `D*(-z)`.
///
/// With `s = sum p_hat`, `c` the midrange of `z` and `m = <p_hat, z>`:
///
/// * TV: `eps sp(z)/2 + |1-s| |c|`
/// * variance-weighted l-inf: `sqrt(eps) sum sqrt(p_hat) |z - m| + max(2SH/N, |1-s| |m|)`
/// * forward KL: `min_{lambda >= dev} (kappa lambda + Vbar/lambda)` capped by
///   `sp(z)`, plus `|1-s| |mean|`; here `kappa = eps + 1 - s + ln s` and
///   `Vbar`, `dev`, `mean` are taken under `p_hat / s`. For a normalized
///   reference whose optimal `lambda = sqrt(Vbar/eps)` clears `dev` this is
///   exactly `2 sqrt(eps' V_hat_plus(z))`.
/// * reverse KL: `sp(z) sqrt(2 eps)` (Pinsker); for an unnormalized reference
///   `(1+s) sp(z)/2 + |1-s| |c|`.
/// * chi2: `sqrt(eps V_hat(z)) + max(2SH/N, |1-s| |m|)`
pub fn conjugate_upper(kind: DivergenceKind, input: &ConjugateInput<'_>) -> Result<f64> {
    upper_bound(kind, input, true)
}

/// One-sided variant of [`conjugate_upper`]: the mass corrections
/// `|1-s| |c|` are replaced by the signed `(1-s) c`, which follows from
/// `<z, p - p_hat> = <z - c, p - p_hat> + c (1 - s)`. It bounds `D*(z)` but
/// not `D*(-z)`, and is never larger than the symmetric bound. For values
/// `z >= 0` and a reference with mass `s >= 1` (such as `P_hat_plus`) the
/// correction is nonpositive.
pub fn conjugate_upper_directed(kind: DivergenceKind, input: &ConjugateInput<'_>) -> Result<f64> {
    upper_bound(kind, input, false)
}

fn upper_bound(kind: DivergenceKind, input: &ConjugateInput<'_>, symmetric: bool) -> Result<f64> {
    input.validate()?;
    require_positive_reference(kind, input.p_hat)?;
    let z = input.z;
    let q = input.p_hat;
    let eps = input.eps;
    let s: f64 = q.iter().sum();
    let (lo, hi) = min_max(z);
    let sp = hi - lo;
    let mid = 0.5 * (hi + lo);
    let mass_gap = (1.0 - s).abs();
    let correction = |c: f64| if symmetric { mass_gap * c.abs() } else { (1.0 - s) * c };
    let lower_order = || -> Result<f64> {
        if input.count < 1.0 {
            return Err(Error::Domain("visit count N must be >= 1 for this bonus".into()));
        }
        let m = dot(q, z);
        let term = input.lower_order_scale * 2.0 * input.states as f64 * input.horizon_remaining / input.count;
        Ok(if symmetric { term.max(mass_gap * m.abs()) } else { term + correction(m) })
    };
    let value = match kind {
        DivergenceKind::Tv => eps * sp / 2.0 + correction(mid),
        DivergenceKind::ReverseKl => {
            if mass_gap <= NORMALIZED_TOL {
                sp * (2.0 * eps).sqrt()
            } else {
                (1.0 + s) * sp / 2.0 + correction(mid)
            }
        }
        DivergenceKind::VarWeightedLinf => {
            let m = dot(q, z);
            eps.sqrt() * q.iter().zip(z).map(|(p, v)| p.sqrt() * (v - m).abs()).sum::<f64>() + lower_order()?
        }
        DivergenceKind::Chi2 => (eps * empirical_variance(z, q)).sqrt() + lower_order()?,
        DivergenceKind::ForwardKl => {
            let mean = dot(q, z) / s;
            let var: f64 = q.iter().zip(z).map(|(p, v)| p / s * (v - mean) * (v - mean)).sum::<f64>().max(0.0);
            let dev = z.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
            let kappa = eps + 1.0 - s + s.ln();
            let main = if var == 0.0 || kappa <= 0.0 {
                0.0
            } else {
                let lambda = (var / kappa).sqrt().max(dev);
                kappa * lambda + var / lambda
            };
            main.min(sp) + correction(mean)
        }
    };
    Ok(value.max(0.0))
}

/// Exact forward-KL conjugate through the Donsker-Varadhan dual
/// `min_{lambda >= 0} lambda log sum p_hat e^{z/lambda} - <p_hat, z> + lambda eps'`
/// with `eps' = eps + 1 - sum p_hat`.
///
/// The objective is convex in `lambda`. The bracket starts at
/// `[1e-6, max(H_remaining, sp(z))]` and is doubled while the objective still
/// decreases at the right end, then golden-section search runs to an absolute
/// tolerance of 1e-8; the result is compared against the boundary values and
/// the `lambda -> 0` limit.
pub fn conjugate_kl_linesearch(input: &ConjugateInput<'_>) -> Result<f64> {
    input.validate()?;
    require_positive_reference(DivergenceKind::ForwardKl, input.p_hat)?;
    let dual = KlDual::new(input);
    if dual.kappa < -FEASIBILITY_SLACK {
        return Err(Error::Domain(format!(
            "empty confidence set: eps = {} is below the smallest attainable divergence",
            input.eps
        )));
    }
    let kappa = dual.kappa.max(0.0);
    if dual.dev == 0.0 {
        // constant z: only the mass mismatch contributes
        return Ok(dual.shift);
    }

    const LAMBDA_MIN: f64 = 1e-6;
    const LAMBDA_CAP: f64 = 1e12;
    const MAX_ITERS: usize = 400;
    const TOL: f64 = 1e-8;

    let f = |lambda: f64| dual.objective(lambda, kappa);
    let mut hi = input.horizon_remaining.max(span(input.z)).max(LAMBDA_MIN * 2.0);
    while hi < LAMBDA_CAP && f(2.0 * hi) < f(hi) {
        hi *= 2.0;
    }
    let hi = (2.0 * hi).min(LAMBDA_CAP);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LAMBDA_MIN, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut iters = 0;
    while (b - a) > TOL * (1.0 + a) {
        iters += 1;
        if iters > MAX_ITERS {
            return Err(Error::Numerical(format!("golden-section search did not converge on [{a}, {b}]")));
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let interior = f(0.5 * (a + b));
    let limit_at_zero = dual.max_dev + dual.shift;
    let best = [interior, fc, fd, f(LAMBDA_MIN), f(hi), limit_at_zero]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Numerical("line-search objective is not finite".into()));
    }
    Ok(best)
}

/// Pieces of the Donsker-Varadhan objective in centred form:
/// `f(lambda) = kappa lambda + lambda log E_bar exp(X/lambda) + shift`
/// with `X = z - E_bar z`, `E_bar` the expectation under `p_hat / s`,
/// `kappa = eps' + ln s` and `shift = (1 - s) E_bar z`.
struct KlDual {
    weights: Vec<f64>,
    centred: Vec<f64>,
    kappa: f64,
    shift: f64,
    dev: f64,
    max_dev: f64,
}

impl KlDual {
    fn new(input: &ConjugateInput<'_>) -> Self {
        let s: f64 = input.p_hat.iter().sum();
        let weights: Vec<f64> = input.p_hat.iter().map(|p| p / s).collect();
        let mean = dot(&weights, input.z);
        let centred: Vec<f64> = input.z.iter().map(|v| v - mean).collect();
        let dev = centred.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let max_dev = centred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let eps_prime = input.eps + 1.0 - s;
        Self { weights, centred, kappa: eps_prime + s.ln(), shift: (1.0 - s) * mean, dev, max_dev }
    }

    fn objective(&self, lambda: f64, kappa: f64) -> f64 {
        // lambda * log E exp(X / lambda), stable for small and large lambda
        let cumulant = if self.max_dev / lambda > 1.0 {
            let scaled: f64 = self
                .weights
                .iter()
                .zip(&self.centred)
                .map(|(w, x)| w * ((x - self.max_dev) / lambda).exp())
                .sum();
            self.max_dev + lambda * scaled.ln()
        } else {
            let excess: f64 = self.weights.iter().zip(&self.centred).map(|(w, x)| w * (x / lambda).exp_m1()).sum();
            lambda * excess.ln_1p()
        };
        kappa * lambda + cumulant + self.shift
    }
}

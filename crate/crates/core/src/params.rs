//! Coefficient recovery once the dependency graph is known.
//!
//! For each node `i`, samples are taken at spaced discrete-time updates of `i`:
//! the neighbourhood configuration just before the resample and the resampled
//! value. Since `P(X_i = y | x) = sigma(2 y d_i psi(x))`, the polynomial
//! `d_i psi` minimises the logistic loss `ln(1 + exp(-2 y p(x)))` over
//! polynomials on `N(i)`. The fitted coefficients are assembled into `psi` by
//! taking each monomial from the regression of its smallest site.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Mode, Trajectory};
use crate::poly::{MultilinearPolynomial, Spin};
use crate::sigmoid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("expected a discrete-time trajectory")]
    NotDiscrete,
    #[error("site {0} out of range")]
    SiteOutOfRange(usize),
    #[error("node {node}: found {found} samples, need at least {needed}")]
    TooFewSamples { node: usize, found: usize, needed: usize },
    #[error("too few samples at nodes (node, found, needed): {0:?}")]
    Aggregated(Vec<(usize, usize, usize)>),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// Monomials of `d_i psi`: subsets of `N(i)` of bounded size, ordered by size
/// then lexicographically. The empty set (constant term) comes first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeBasis {
    pub node: usize,
    pub neighborhood: Vec<usize>,
    pub monomials: Vec<Vec<usize>>,
}

impl NodeBasis {
    /// Subsets of size at most `k - 1`, or at most `k` with `include_degree_k`.
    pub fn new(node: usize, neighborhood: &[usize], k: usize, include_degree_k: bool) -> Self {
        let mut nb = neighborhood.to_vec();
        nb.sort_unstable();
        nb.dedup();
        nb.retain(|&v| v != node);
        let max = if include_degree_k { k } else { k.saturating_sub(1) };
        let mut monomials = vec![Vec::new()];
        for size in 1..=max.min(nb.len()) {
            let mut idx: Vec<usize> = (0..size).collect();
            loop {
                monomials.push(idx.iter().map(|&p| nb[p]).collect());
                // Next combination in lexicographic order.
                let mut p = size;
                while p > 0 && idx[p - 1] == nb.len() - size + p - 1 {
                    p -= 1;
                }
                if p == 0 {
                    break;
                }
                idx[p - 1] += 1;
                for q in p..size {
                    idx[q] = idx[q - 1] + 1;
                }
            }
        }
        Self { node, neighborhood: nb, monomials }
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    /// Feature vector for a neighbourhood configuration ordered like `neighborhood`.
    pub fn features(&self, x_neigh: &[Spin]) -> Vec<f64> {
        self.monomials
            .iter()
            .map(|m| {
                m.iter()
                    .map(|v| x_neigh[self.neighborhood.binary_search(v).expect("monomial inside neighbourhood")])
                    .product::<Spin>() as f64
            })
            .collect()
    }
}

/// One regression observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSample {
    /// Spins on the neighbourhood just before the resample, in neighbourhood order.
    pub x_neigh: Vec<Spin>,
    /// Resampled value of the node.
    pub y: Spin,
    /// Step of the resample.
    pub stop_time: u64,
}

/// Gap between stopping times: `ceil(4 ln(d) n)`, or `ceil(4 n)` when `d < 2`.
pub fn default_spacing(n: usize, d: usize) -> u64 {
    let n = n as f64;
    if d < 2 {
        (4.0 * n).ceil() as u64
    } else {
        (4.0 * (d as f64).ln() * n).ceil() as u64
    }
}

/// Stopping times: starting from `tau_0 = start`, each is the first update of
/// `i` at least `spacing` steps after the previous one.
pub fn stopping_times(traj: &Trajectory, i: usize, spacing: u64) -> Result<Vec<usize>, ParamsError> {
    if traj.mode() != Mode::Discrete {
        return Err(ParamsError::NotDiscrete);
    }
    if i >= traj.n() {
        return Err(ParamsError::SiteOutOfRange(i));
    }
    let times = traj.site_times(i);
    let positions = traj.site_index(i);
    let mut out = Vec::new();
    let mut prev = traj.start();
    let mut k = 0;
    loop {
        let earliest = prev + spacing as f64;
        k += times[k..].partition_point(|&t| t < earliest);
        if k >= times.len() {
            break;
        }
        out.push(positions[k] as usize);
        prev = times[k];
        k += 1;
    }
    Ok(out)
}

/// Regression samples for node `i` at spaced stopping times. `spacing` defaults
/// to [`default_spacing`] with the given `d`.
pub fn collect_samples(
    traj: &Trajectory,
    i: usize,
    neighborhood: &[usize],
    d: usize,
    spacing: Option<u64>,
) -> Result<Vec<RegressionSample>, ParamsError> {
    if let Some(&v) = neighborhood.iter().find(|&&v| v >= traj.n()) {
        return Err(ParamsError::SiteOutOfRange(v));
    }
    let mut nb = neighborhood.to_vec();
    nb.sort_unstable();
    nb.dedup();
    let spacing = spacing.unwrap_or_else(|| default_spacing(traj.n(), d));
    let stops = stopping_times(traj, i, spacing)?;
    if stops.is_empty() {
        return Err(ParamsError::TooFewSamples { node: i, found: 0, needed: 1 });
    }
    Ok(stops
        .into_iter()
        .map(|pos| {
            let before = traj.configuration_after(pos);
            let event = traj.events()[pos];
            RegressionSample {
                x_neigh: nb.iter().map(|&v| before[v]).collect(),
                y: event.value,
                stop_time: event.time as u64,
            }
        })
        .collect())
}

/// `ln(1 + exp(-z))`, stable for all `z`.
#[inline]
pub fn logistic_loss(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Empirical logistic objective over a fixed design.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl LogisticProblem {
    pub fn new(basis: &NodeBasis, samples: &[RegressionSample]) -> Self {
        let dim = basis.len();
        let mut features = Vec::with_capacity(dim * samples.len());
        for s in samples {
            features.extend(basis.features(&s.x_neigh));
        }
        let labels = samples.iter().map(|s| s.y as f64).collect();
        Self { dim, features, labels }
    }

    /// Raw design: `features` is row-major with `dim` columns.
    pub fn from_design(dim: usize, features: Vec<f64>, labels: Vec<f64>) -> Self {
        assert_eq!(features.len(), dim * labels.len());
        Self { dim, features, labels }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row(&self, s: usize) -> &[f64] {
        &self.features[s * self.dim..(s + 1) * self.dim]
    }

    fn margin(&self, s: usize, p: &[f64]) -> f64 {
        2.0 * self.labels[s] * self.row(s).iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `(1/M) sum ln(1 + exp(-2 y p(x)))`.
    pub fn objective(&self, p: &[f64]) -> f64 {
        (0..self.len()).map(|s| logistic_loss(self.margin(s, p))).sum::<f64>() / self.len() as f64
    }

    pub fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for s in 0..self.len() {
            let coef = -2.0 * self.labels[s] * sigmoid(-self.margin(s, p));
            for (gk, xk) in g.iter_mut().zip(self.row(s)) {
                *gk += coef * xk;
            }
        }
        let m = self.len() as f64;
        g.iter_mut().for_each(|v| *v /= m);
        g
    }

    /// Upper bound on the gradient's Lipschitz constant: features are `±1`,
    /// so the Hessian is dominated by the average of `x x^T`, whose norm is at most `dim`.
    pub fn smoothness(&self) -> f64 {
        self.dim.max(1) as f64
    }
}

/// Euclidean projection onto `{p : ||p||_1 <= radius}` (sort-based).
pub fn project_l1_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return v.to_vec();
    }
    if radius <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cumsum += uk;
        let t = (cumsum - radius) / (k + 1) as f64;
        if uk > t {
            theta = t;
        } else {
            break;
        }
    }
    v.iter().map(|&x| x.signum() * (x.abs() - theta).max(0.0)).collect()
}

/// Result of an `l1`-constrained logistic fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Coefficients in basis order.
    pub coeffs: Vec<f64>,
    pub objective: f64,
    /// Frank–Wolfe duality gap at `coeffs`, an upper bound on suboptimality.
    pub gap: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Duality gap `max_{||q||_1 <= radius} <grad, p - q> = <grad, p> + radius ||grad||_inf`.
pub fn duality_gap(grad: &[f64], p: &[f64], radius: f64) -> f64 {
    let inner: f64 = grad.iter().zip(p).map(|(g, x)| g * x).sum();
    let inf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    inner + radius * inf
}

/// A solver for the `l1`-constrained logistic problem.
pub trait L1LogisticSolver {
    fn solve(&self, problem: &LogisticProblem, radius: f64, eps_opt: f64, max_iters: usize) -> LogisticFit;
}

/// Accelerated projected gradient with function-value restarts; stops once the
/// duality gap certifies `eps_opt` suboptimality.
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceleratedProjectedGradient;

impl L1LogisticSolver for AcceleratedProjectedGradient {
    fn solve(&self, problem: &LogisticProblem, radius: f64, eps_opt: f64, max_iters: usize) -> LogisticFit {
        let dim = problem.dim();
        let step = 1.0 / problem.smoothness();
        let mut x = vec![0.0; dim];
        let mut fx = problem.objective(&x);
        let mut y = x.clone();
        let mut momentum = 1.0f64;
        let mut best = (x.clone(), fx, f64::INFINITY);
        let mut iterations = 0;
        while iterations < max_iters {
            let gx = problem.gradient(&x);
            let gap = duality_gap(&gx, &x, radius);
            if fx < best.1 || (fx == best.1 && gap < best.2) {
                best = (x.clone(), fx, gap);
            }
            if gap <= eps_opt {
                return LogisticFit { coeffs: x, objective: fx, gap, converged: true, iterations };
            }
            iterations += 1;
            let gy = problem.gradient(&y);
            let candidate: Vec<f64> = y.iter().zip(&gy).map(|(a, g)| a - step * g).collect();
            let x_next = project_l1_ball(&candidate, radius);
            let f_next = problem.objective(&x_next);
            if f_next > fx {
                // Restart momentum from the current point.
                momentum = 1.0;
                y = x.clone();
                continue;
            }
            let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            let beta = (momentum - 1.0) / next_momentum;
            y = x_next.iter().zip(&x).map(|(a, b)| a + beta * (a - b)).collect();
            x = x_next;
            fx = f_next;
            momentum = next_momentum;
        }
        let gx = problem.gradient(&x);
        let gap = duality_gap(&gx, &x, radius);
        if fx < best.1 || (fx == best.1 && gap < best.2) {
            best = (x, fx, gap);
        }
        LogisticFit { coeffs: best.0, objective: best.1, converged: best.2 <= eps_opt, gap: best.2, iterations }
    }
}

/// Fit the node regression with the default solver.
pub fn solve_logistic(
    samples: &[RegressionSample],
    basis: &NodeBasis,
    radius: f64,
    eps_opt: f64,
    max_iters: usize,
) -> Result<LogisticFit, ParamsError> {
    if samples.is_empty() {
        return Err(ParamsError::TooFewSamples { node: basis.node, found: 0, needed: 1 });
    }
    if !(radius > 0.0) {
        return Err(ParamsError::InvalidParams(format!("lambda must be positive, got {radius}")));
    }
    let problem = LogisticProblem::new(basis, samples);
    Ok(AcceleratedProjectedGradient.solve(&problem, radius, eps_opt, max_iters))
}

/// Settings for [`recover_parameters`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOptions {
    pub eps_opt: f64,
    pub max_iters: usize,
    /// Use at most this many samples per node.
    pub samples_per_node: Option<usize>,
    /// Fail nodes with fewer samples than this.
    pub min_samples: usize,
    /// Overrides [`default_spacing`].
    pub spacing: Option<u64>,
    pub include_degree_k: bool,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self { eps_opt: 1e-6, max_iters: 20_000, samples_per_node: None, min_samples: 1, spacing: None, include_degree_k: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDiagnostics {
    pub node: usize,
    pub samples: usize,
    pub basis_size: usize,
    pub objective: f64,
    pub gap: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct RecoveredModel {
    pub psi: MultilinearPolynomial,
    pub nodes: Vec<NodeDiagnostics>,
    /// Per-node coefficient estimates, keyed by full monomial (including the node).
    pub node_estimates: Vec<Vec<(Vec<usize>, f64)>>,
}

impl RecoveredModel {
    /// Largest disagreement between two nodes estimating the same monomial.
    pub fn max_assembly_discrepancy(&self) -> f64 {
        let mut seen: std::collections::BTreeMap<&[usize], (f64, f64)> = Default::default();
        for est in &self.node_estimates {
            for (m, c) in est {
                let e = seen.entry(m.as_slice()).or_insert((*c, *c));
                e.0 = e.0.min(*c);
                e.1 = e.1.max(*c);
            }
        }
        seen.values().map(|(lo, hi)| hi - lo).fold(0.0, f64::max)
    }
}

/// Per node: collect samples, solve the regression within the `l1` ball of
/// radius `lambda`, and assemble `psi` taking monomial `I` from node `min I`.
pub fn recover_parameters(
    traj: &Trajectory,
    graph: &[Vec<usize>],
    k: usize,
    lambda: f64,
    options: &RecoveryOptions,
) -> Result<RecoveredModel, ParamsError> {
    if traj.mode() != Mode::Discrete {
        return Err(ParamsError::NotDiscrete);
    }
    let n = traj.n();
    if graph.len() != n {
        return Err(ParamsError::InvalidParams(format!("graph has {} nodes, trajectory {}", graph.len(), n)));
    }
    let d = graph.iter().map(Vec::len).max().unwrap_or(0);
    let results: Vec<Result<(NodeDiagnostics, Vec<(Vec<usize>, f64)>), (usize, usize, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let basis = NodeBasis::new(i, &graph[i], k, options.include_degree_k);
            let mut samples = collect_samples(traj, i, &basis.neighborhood, d, options.spacing).unwrap_or_default();
            if let Some(cap) = options.samples_per_node {
                samples.truncate(cap);
            }
            let needed = options.min_samples.max(1);
            if samples.len() < needed {
                return Err((i, samples.len(), needed));
            }
            let problem = LogisticProblem::new(&basis, &samples);
            let fit = AcceleratedProjectedGradient.solve(&problem, lambda, options.eps_opt, options.max_iters);
            let estimates = basis
                .monomials
                .iter()
                .zip(&fit.coeffs)
                .map(|(m, &c)| {
                    let mut full = m.clone();
                    full.push(i);
                    full.sort_unstable();
                    (full, c)
                })
                .collect();
            let diag = NodeDiagnostics {
                node: i,
                samples: samples.len(),
                basis_size: basis.len(),
                objective: fit.objective,
                gap: fit.gap,
                converged: fit.converged,
                iterations: fit.iterations,
            };
            Ok((diag, estimates))
        })
        .collect();
    let failures: Vec<(usize, usize, usize)> = results.iter().filter_map(|r| r.as_ref().err().copied()).collect();
    if !failures.is_empty() {
        return Err(ParamsError::Aggregated(failures));
    }
    let mut psi = MultilinearPolynomial::zero(n);
    let mut nodes = Vec::with_capacity(n);
    let mut node_estimates = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        let (diag, estimates) = r.expect("failures handled above");
        for (m, c) in &estimates {
            if m[0] == i {
                psi.set_term(m.clone(), *c).expect("indices from graph");
            }
        }
        nodes.push(diag);
        node_estimates.push(estimates);
    }
    Ok(RecoveredModel { psi, nodes, node_estimates })
}

/// Fraction of stopping-time intervals `[tau_{k-1} + 1, tau_k]` on which every
/// site of `N(i)` updates at least once and every site of `N(N(i))` at most
/// `ell` times.
pub fn unbiasedness_window_check(
    traj: &Trajectory,
    i: usize,
    graph: &[Vec<usize>],
    ell: f64,
    spacing: Option<u64>,
) -> Result<f64, ParamsError> {
    if i >= graph.len() {
        return Err(ParamsError::SiteOutOfRange(i));
    }
    let d = graph.iter().map(Vec::len).max().unwrap_or(0);
    let spacing = spacing.unwrap_or_else(|| default_spacing(traj.n(), d));
    let stops = stopping_times(traj, i, spacing)?;
    if stops.is_empty() {
        return Err(ParamsError::TooFewSamples { node: i, found: 0, needed: 1 });
    }
    let neighbors = &graph[i];
    let second: BTreeSet<usize> = neighbors.iter().flat_map(|&j| graph[j].iter().copied()).collect();
    let events = traj.events();
    let mut prev_time = traj.start();
    let mut good = 0usize;
    for &pos in &stops {
        let t = events[pos].time;
        let lo = prev_time + 1.0;
        let updated_all = neighbors.iter().all(|&j| traj.count_in(j, lo, t + 1.0) >= 1);
        let bounded = second.iter().all(|&v| traj.count_in(v, lo, t + 1.0) as f64 <= ell);
        if updated_all && bounded {
            good += 1;
        }
        prev_time = t;
    }
    Ok(good as f64 / stops.len() as f64)
}

//! Exact Gibbs oracle for small `n` and the numerical checks built on it.
//!
//! Configurations are indexed by bitmask: bit `b` set means `x_b = +1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, GlauberChain, Mode};
use crate::poly::{check_configuration, MrfModel, MultilinearPolynomial, PolyError, SiteFields, Spin};
use crate::rng::derive_seed;
use crate::sigmoid;
use crate::stats::{wilson_interval, Z95};

/// Largest `n` handled by exact enumeration.
pub const MAX_EXACT_SITES: usize = 20;

/// Longest update sequence accepted by [`posterior_odds_check`].
pub const MAX_ODDS_SEQUENCE: usize = 20;

#[derive(Debug, Error)]
pub enum GibbsError {
    #[error("exact enumeration limited to n <= {max}, got {n}")]
    TooManySites { n: usize, max: usize },
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("sites must be distinct, got i = j = {0}")]
    SameSite(usize),
    #[error("site {0} out of range")]
    SiteOutOfRange(usize),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("no bracket for beta found in [0, {max_beta}] at alpha = {alpha}")]
    NoBracket { alpha: f64, max_beta: f64 },
    #[error("laws differ by {discrepancy} at beta = {beta}, above the allowed {allowed}")]
    LawMismatch { beta: f64, discrepancy: f64, allowed: f64 },
    #[error("{0:?} is not a maximal monomial of f")]
    NotMaximal(Vec<usize>),
    #[error("no trial updated every site of the monomial ({trials} trials)")]
    NoConditioningEvents { trials: u64 },
    #[error("update sequence of length {len} exceeds {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("update sequence violates the conditioning event: {0}")]
    EventViolated(String),
}

fn check_size(n: usize) -> Result<(), GibbsError> {
    if n > MAX_EXACT_SITES {
        Err(GibbsError::TooManySites { n, max: MAX_EXACT_SITES })
    } else {
        Ok(())
    }
}

/// Configuration with index `mask`.
pub fn configuration(mask: usize, n: usize) -> Vec<Spin> {
    (0..n).map(|b| if mask >> b & 1 == 1 { 1 } else { -1 }).collect()
}

/// Index of configuration `x`.
pub fn config_index(x: &[Spin]) -> usize {
    x.iter().enumerate().fold(0, |acc, (b, &v)| if v == 1 { acc | 1 << b } else { acc })
}

/// The full Gibbs table `mu(x) = exp(psi(x)) / Z`.
#[derive(Debug, Clone)]
pub struct ExactDistribution {
    n: usize,
    probs: Vec<f64>,
    log_partition: f64,
}

impl ExactDistribution {
    pub fn new(psi: &MultilinearPolynomial) -> Result<Self, GibbsError> {
        let n = psi.n();
        check_size(n)?;
        let energies: Vec<f64> = (0..1usize << n)
            .into_par_iter()
            .map(|mask| {
                psi.terms()
                    .map(|(vars, c)| {
                        let odd = vars.iter().filter(|&&v| mask >> v & 1 == 0).count() % 2 == 1;
                        if odd {
                            -c
                        } else {
                            c
                        }
                    })
                    .sum()
            })
            .collect();
        let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = energies.iter().map(|e| (e - max).exp()).sum();
        let log_partition = max + sum.ln();
        let probs = energies.iter().map(|e| (e - log_partition).exp()).collect();
        Ok(Self { n, probs, log_partition })
    }

    /// Build directly from a table of probabilities (used for certificate tests).
    pub fn from_probs(n: usize, probs: Vec<f64>) -> Result<Self, GibbsError> {
        check_size(n)?;
        assert_eq!(probs.len(), 1 << n, "table must have 2^n entries");
        Ok(Self { n, probs, log_partition: f64::NAN })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `ln Z`; NaN for tables built with [`from_probs`](Self::from_probs).
    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn prob(&self, x: &[Spin]) -> f64 {
        self.probs[config_index(x)]
    }

    /// `P(X_i = +1 | X_{-i} = x_{-i})`; `x[i]` is ignored. `None` when the
    /// conditioning event has probability zero.
    pub fn conditional(&self, i: usize, x: &[Spin]) -> Option<f64> {
        let base = config_index(x) & !(1 << i);
        let plus = self.probs[base | 1 << i];
        let minus = self.probs[base];
        let total = plus + minus;
        (total > 0.0).then(|| plus / total)
    }

    /// Marginal law of `sites`, indexed by bitmask over positions in `sites`.
    pub fn marginal(&self, sites: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; 1 << sites.len()];
        for (mask, &p) in self.probs.iter().enumerate() {
            let idx = sites
                .iter()
                .enumerate()
                .fold(0, |acc, (b, &s)| if mask >> s & 1 == 1 { acc | 1 << b } else { acc });
            out[idx] += p;
        }
        out
    }
}

/// Glauber resampling probability `sigma(2 d_i psi(x_{-i}))`; `x[i]` is ignored.
pub fn conditional_prob(model: &MrfModel, i: usize, x: &[Spin]) -> Result<f64, GibbsError> {
    check_configuration(x, model.n())?;
    if i >= model.n() {
        return Err(GibbsError::SiteOutOfRange(i));
    }
    Ok(model.fields().prob_plus(i, x))
}

/// Outcome of a delta-unbiasedness check, with the least balanced conditional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub pass: bool,
    pub delta: f64,
    /// `min(p, 1 - p)` at the witness.
    pub min_balance: f64,
    pub site: usize,
    pub config: Vec<Spin>,
}

/// Check `delta <= P(X_i = 1 | X_{-i} = x) <= 1 - delta` wherever the
/// conditioning has positive probability.
pub fn unbiasedness_certificate(dist: &ExactDistribution, delta: f64) -> UnbiasednessReport {
    let n = dist.n();
    let mut worst = (f64::INFINITY, 0usize, 0usize);
    for i in 0..n {
        for mask in 0..1usize << n {
            if mask >> i & 1 == 1 {
                continue;
            }
            let (plus, minus) = (dist.probs[mask | 1 << i], dist.probs[mask]);
            if plus + minus <= 0.0 {
                continue;
            }
            let p = plus / (plus + minus);
            let balance = p.min(1.0 - p);
            if balance < worst.0 {
                worst = (balance, i, mask);
            }
        }
    }
    UnbiasednessReport {
        pass: worst.0 >= delta,
        delta,
        min_balance: worst.0,
        site: worst.1,
        config: configuration(worst.2, n),
    }
}

/// Joint law of `(Y+, Y-)` for a single-sample local test on the pair `(i, j)`.
/// `joint[a][b]` with index 0 for `+1` and 1 for `-1`; `a` is `Y+`, `b` is `Y-`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTestLaw {
    pub i: usize,
    pub j: usize,
    pub joint: [[f64; 2]; 2],
}

impl LocalTestLaw {
    /// `P(Y+ = y_plus, Y- = y_minus)`.
    pub fn p(&self, y_plus: Spin, y_minus: Spin) -> f64 {
        let idx = |y: Spin| if y == 1 { 0 } else { 1 };
        self.joint[idx(y_plus)][idx(y_minus)]
    }

    pub fn max_discrepancy(&self, other: &LocalTestLaw) -> f64 {
        let mut d = 0.0f64;
        for a in 0..2 {
            for b in 0..2 {
                d = d.max((self.joint[a][b] - other.joint[a][b]).abs());
            }
        }
        d
    }
}

/// Draw `x_{-{i,j}}` from the marginal of `mu`, then `Y+` and `Y-` independently
/// from the Glauber conditionals of site `i` with `x_j` forced to `+1` and `-1`.
pub fn local_test_law(psi: &MultilinearPolynomial, i: usize, j: usize) -> Result<LocalTestLaw, GibbsError> {
    let n = psi.n();
    if i == j {
        return Err(GibbsError::SameSite(i));
    }
    if i >= n || j >= n {
        return Err(GibbsError::SiteOutOfRange(i.max(j)));
    }
    let dist = ExactDistribution::new(psi)?;
    let fields = SiteFields::new(psi);
    let mut joint = [[0.0; 2]; 2];
    let pair = (1 << i) | (1 << j);
    for mask in 0..1usize << n {
        if mask & pair != 0 {
            continue;
        }
        let weight: f64 = [0, 1 << i, 1 << j, pair].iter().map(|&b| dist.probs[mask | b]).sum();
        let mut x = configuration(mask, n);
        x[j] = 1;
        let q_plus = fields.prob_plus(i, &x);
        x[j] = -1;
        let q_minus = fields.prob_plus(i, &x);
        let py = [[q_plus, 1.0 - q_plus], [q_minus, 1.0 - q_minus]];
        for a in 0..2 {
            for b in 0..2 {
                joint[a][b] += weight * py[0][a] * py[1][b];
            }
        }
    }
    Ok(LocalTestLaw { i, j, joint })
}

/// The two five-site Hamiltonians of the single-sample lower bound:
/// `psi_1 = beta x0 x2 + alpha x0 x1 x3 + beta x1 x4` (sites 0 and 1 adjacent) and
/// `psi_2 = alpha x0 x2 + alpha x1 x2 + alpha x3 x4` (sites 0 and 1 not adjacent).
pub fn lower_bound_pair(alpha: f64, beta: f64) -> (MultilinearPolynomial, MultilinearPolynomial) {
    let with_edge = MultilinearPolynomial::from_terms(
        5,
        [(vec![0, 2], beta), (vec![0, 1, 3], alpha), (vec![1, 4], beta)],
    )
    .expect("static sites");
    let without_edge = MultilinearPolynomial::from_terms(
        5,
        [(vec![0, 2], alpha), (vec![1, 2], alpha), (vec![3, 4], alpha)],
    )
    .expect("static sites");
    (with_edge, without_edge)
}

/// A `beta` making the single-sample tests on `(0, 1)` agree for both Hamiltonians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndistinguishabilityWitness {
    pub alpha: f64,
    pub beta: f64,
    pub law_with_edge: LocalTestLaw,
    pub law_without_edge: LocalTestLaw,
    pub max_discrepancy: f64,
    /// `d_0 d_1 psi_1` is not identically zero.
    pub edge_in_first: bool,
    /// `d_0 d_1 psi_2` is not identically zero.
    pub edge_in_second: bool,
}

const MAX_BETA: f64 = 64.0;

/// Bracket by doubling from 1 up to 64, then bisect on `P(Y+ = Y- = +1)` until it
/// matches within `tol`; finally require every joint entry to match within `10 tol`.
pub fn find_indistinguishable_beta(alpha: f64, tol: f64) -> Result<IndistinguishabilityWitness, GibbsError> {
    if !(tol > 0.0) {
        return Err(GibbsError::InvalidTolerance(tol));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(GibbsError::InvalidAlpha(alpha));
    }
    let law_at = |beta: f64| -> Result<LocalTestLaw, GibbsError> { local_test_law(&lower_bound_pair(alpha, beta).0, 0, 1) };
    let law_without_edge = local_test_law(&lower_bound_pair(alpha, 0.0).1, 0, 1)?;
    let target = law_without_edge.joint[0][0];
    let g = |beta: f64| -> Result<f64, GibbsError> { Ok(law_at(beta)?.joint[0][0] - target) };

    let no_bracket = GibbsError::NoBracket { alpha, max_beta: MAX_BETA };
    let mut lo = 0.0;
    let g_lo = g(lo)?;
    if g_lo > 0.0 {
        return Err(no_bracket);
    }
    let mut hi = 1.0;
    while g(hi)? < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > MAX_BETA {
            return Err(no_bracket);
        }
    }
    let mut beta = if g_lo.abs() <= tol { 0.0 } else { 0.5 * (lo + hi) };
    for _ in 0..200 {
        let v = g(beta)?;
        if v.abs() <= tol {
            break;
        }
        if v < 0.0 {
            lo = beta;
        } else {
            hi = beta;
        }
        beta = 0.5 * (lo + hi);
    }
    let law_with_edge = law_at(beta)?;
    let max_discrepancy = law_with_edge.max_discrepancy(&law_without_edge);
    let allowed = 10.0 * tol;
    if max_discrepancy > allowed {
        return Err(GibbsError::LawMismatch { beta, discrepancy: max_discrepancy, allowed });
    }
    let (with_edge, without_edge) = lower_bound_pair(alpha, beta);
    Ok(IndistinguishabilityWitness {
        alpha,
        beta,
        law_with_edge,
        law_without_edge,
        max_discrepancy,
        edge_in_first: !with_edge.mixed_partial(0, 1)?.is_zero(),
        edge_in_second: !without_edge.mixed_partial(0, 1)?.is_zero(),
    })
}

/// Monte-Carlo estimate of `P(|f(X^T)| >= |f(S)| | every site of S updated in [0, T])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnticoncentrationReport {
    pub trials: u64,
    /// Trials on which every site of `S` was updated.
    pub conditioned: u64,
    pub hits: u64,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `(delta / d)^deg(f)` with `delta = exp(-2 lambda) / 2` and `supp f ⊆ [0, d)`.
    pub bound: f64,
}

impl AnticoncentrationReport {
    pub fn passes(&self) -> bool {
        self.ci_low >= self.bound
    }
}

/// Runs `trials` independent continuous-time trajectories on `[0, horizon]` from
/// `x0`. Trial `t` uses seed `derive_seed(seed, t)`, so results do not depend on
/// the thread count.
pub fn anticoncentration_check(
    model: &MrfModel,
    f: &MultilinearPolynomial,
    s: &[usize],
    horizon: f64,
    trials: u64,
    seed: u64,
    x0: &[Spin],
) -> Result<AnticoncentrationReport, GibbsError> {
    let mut key = s.to_vec();
    key.sort_unstable();
    if !f.maximal_monomials().contains(&key) {
        return Err(GibbsError::NotMaximal(key));
    }
    if f.n() != model.n() {
        return Err(PolyError::DimensionMismatch { expected: model.n(), got: f.n() }.into());
    }
    let threshold = f.coefficient(&key).abs();
    let (conditioned, hits) = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<(u64, u64), GibbsError> {
            let mut chain = GlauberChain::new(model, Mode::Continuous, x0, derive_seed(seed, t))?;
            let mut pending = key.clone();
            chain.advance_with(horizon, |e, _| {
                if let Ok(pos) = pending.binary_search(&(e.site as usize)) {
                    pending.remove(pos);
                }
            });
            if !pending.is_empty() {
                return Ok((0, 0));
            }
            let hit = f.evaluate_unchecked(chain.state()).abs() >= threshold * (1.0 - 1e-12);
            Ok((1, hit as u64))
        })
        .try_reduce(|| (0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))?;
    if conditioned == 0 {
        return Err(GibbsError::NoConditioningEvents { trials });
    }
    let (ci_low, ci_high) = wilson_interval(hits, conditioned, Z95);
    let lambda = model.derived_bounds().lambda;
    let delta = (-2.0 * lambda).exp() / 2.0;
    let degree = f.degree();
    let bound = if degree == 0 {
        1.0
    } else {
        let d = f.support().last().map_or(1, |&m| m + 1) as f64;
        (delta / d).powi(degree as i32)
    };
    Ok(AnticoncentrationReport {
        trials,
        conditioned,
        hits,
        estimate: hits as f64 / conditioned as f64,
        ci_low,
        ci_high,
        bound,
    })
}

/// Exact odds of the final spins along a fixed update sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorOddsReport {
    /// Largest `P(X_i = +1, X_{S-i} = x) / P(X_i = -1, X_{S-i} = x)` (or its reciprocal).
    pub max_posterior_odds: f64,
    /// The same ratio with the site's own last resample replaced by a fair coin:
    /// the likelihood contribution of the later updates alone.
    pub max_likelihood_ratio: f64,
    /// `exp(2 lambda + 4 ell k lambda)`.
    pub posterior_bound: f64,
    /// `exp(4 ell k lambda)`.
    pub likelihood_bound: f64,
    /// Site attaining `max_posterior_odds`.
    pub site: usize,
}

impl PosteriorOddsReport {
    pub fn within_bounds(&self) -> bool {
        self.max_posterior_odds <= self.posterior_bound * (1.0 + 1e-12)
            && self.max_likelihood_ratio <= self.likelihood_bound * (1.0 + 1e-12)
    }
}

/// Enumerate every value assignment along `sequence` (site resampled at each
/// step, starting from `x0`) and compute the odds of each `X_i`, `i` in `s`,
/// given the other final spins of `s`. The sequence must update every site of
/// `s` and update each neighbour of each site of `s` at most `ell` times.
pub fn posterior_odds_check(
    model: &MrfModel,
    x0: &[Spin],
    s: &[usize],
    ell: usize,
    sequence: &[usize],
) -> Result<PosteriorOddsReport, GibbsError> {
    let n = model.n();
    check_configuration(x0, n)?;
    if sequence.len() > MAX_ODDS_SEQUENCE {
        return Err(GibbsError::SequenceTooLong { len: sequence.len(), max: MAX_ODDS_SEQUENCE });
    }
    if let Some(&bad) = sequence.iter().chain(s).find(|&&v| v >= n) {
        return Err(GibbsError::SiteOutOfRange(bad));
    }
    let mut counts = vec![0usize; n];
    sequence.iter().for_each(|&v| counts[v] += 1);
    for &i in s {
        if counts[i] == 0 {
            return Err(GibbsError::EventViolated(format!("site {i} of S is never updated")));
        }
        if let Some(&j) = model.neighbors(i).iter().find(|&&j| counts[j] > ell) {
            return Err(GibbsError::EventViolated(format!(
                "neighbour {j} of {i} updated {} > {ell} times",
                counts[j]
            )));
        }
    }

    let ratio_max = |table: &[f64], pos: usize| -> f64 {
        let mut worst = 1.0f64;
        for mask in 0..table.len() {
            if mask >> pos & 1 == 0 {
                let (plus, minus) = (table[mask | 1 << pos], table[mask]);
                worst = worst.max(plus / minus).max(minus / plus);
            }
        }
        worst
    };

    let fields = model.fields();
    let full = final_law(fields, x0, s, sequence, None);
    let mut max_posterior_odds = 1.0f64;
    let mut max_likelihood_ratio = 1.0f64;
    let mut site = s.first().copied().unwrap_or(0);
    for (pos, &i) in s.iter().enumerate() {
        let odds = ratio_max(&full, pos);
        if odds > max_posterior_odds {
            max_posterior_odds = odds;
            site = i;
        }
        let last = sequence.iter().rposition(|&v| v == i).expect("checked above");
        let flat = final_law(fields, x0, s, sequence, Some(last));
        max_likelihood_ratio = max_likelihood_ratio.max(ratio_max(&flat, pos));
    }
    let bounds = model.bounds();
    let growth = 4.0 * ell as f64 * bounds.k as f64 * bounds.lambda;
    Ok(PosteriorOddsReport {
        max_posterior_odds,
        max_likelihood_ratio,
        posterior_bound: (2.0 * bounds.lambda + growth).exp(),
        likelihood_bound: growth.exp(),
        site,
    })
}

/// Law of the final spins on `s` (bitmask over positions in `s`). When
/// `fair_step` is set, that step's resample is a fair coin.
fn final_law(fields: &SiteFields, x0: &[Spin], s: &[usize], sequence: &[usize], fair_step: Option<usize>) -> Vec<f64> {
    fn walk(
        fields: &SiteFields,
        x: &mut Vec<Spin>,
        s: &[usize],
        sequence: &[usize],
        fair_step: Option<usize>,
        step: usize,
        weight: f64,
        out: &mut [f64],
    ) {
        if step == sequence.len() {
            let idx = s.iter().enumerate().fold(0, |acc, (b, &v)| if x[v] == 1 { acc | 1 << b } else { acc });
            out[idx] += weight;
            return;
        }
        let site = sequence[step];
        let p = if fair_step == Some(step) { 0.5 } else { fields.prob_plus(site, x) };
        let old = x[site];
        for (value, pv) in [(1, p), (-1, 1.0 - p)] {
            x[site] = value;
            walk(fields, x, s, sequence, fair_step, step + 1, weight * pv, out);
        }
        x[site] = old;
    }
    let mut out = vec![0.0; 1 << s.len()];
    let mut x = x0.to_vec();
    walk(fields, &mut x, s, sequence, fair_step, 0, 1.0, &mut out);
    out
}

/// `sigma(2 alpha)^2 + sigma(-2 alpha)^2) / 2`: the `(+1, +1)` entry of the law
/// without the edge, in closed form.
pub fn closed_form_without_edge(alpha: f64) -> f64 {
    (sigmoid(2.0 * alpha).powi(2) + sigmoid(-2.0 * alpha).powi(2)) / 2.0
}

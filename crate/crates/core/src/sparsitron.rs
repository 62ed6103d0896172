//! The i.i.d. baseline: exact samplers for planted parities and a Hedge
//! (multiplicative weights) learner over signed monomial features.
//!
//! The learner regresses the target spin on every monomial of size at most `k`
//! over the remaining sites. Each monomial appears twice, once per sign, and
//! the prediction is `q = sigmoid(lambda <v, phi(x)>)` with `v` the normalised
//! weights.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{MultilinearPolynomial, Spin};
use crate::rng::{stream, Purpose};
use crate::sigmoid;
use crate::structure::required_overlap;

/// Default cap on the number of signed features.
pub const DEFAULT_MAX_FEATURES: u64 = 1 << 31;
/// Default memory cap, matching the 60 GB machine of the reference experiments.
pub const DEFAULT_MEM_CAP_BYTES: u64 = 60_000_000_000;
/// Features per parallel chunk; fixes the summation order.
const CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparsitronError {
    #[error("parity contains the target site {0}")]
    TargetInParity(usize),
    #[error("site {0} out of range")]
    SiteOutOfRange(usize),
    #[error("monomial {0:?} does not contain the target site")]
    NotStar(Vec<usize>),
    #[error("{features} features exceed the cap of {cap}")]
    TooManyFeatures { features: u64, cap: u64 },
    #[error("estimated memory {bytes} bytes exceeds the cap of {cap}")]
    MemoryCap { bytes: u64, cap: u64 },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// Exact sample from `psi = x_0 prod_{i in parity} x_i`. The other sites are
/// uniform under this law, so draw them first and then the target from its
/// conditional.
pub fn spn_sample<R: Rng + ?Sized>(n: usize, parity: &[usize], rng: &mut R) -> Result<Vec<Spin>, SparsitronError> {
    if let Some(&v) = parity.iter().find(|&&v| v >= n) {
        return Err(SparsitronError::SiteOutOfRange(v));
    }
    if parity.contains(&0) {
        return Err(SparsitronError::TargetInParity(0));
    }
    let mut x: Vec<Spin> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
    let field: f64 = parity.iter().map(|&i| x[i] as f64).product();
    x[0] = if rng.random::<f64>() < sigmoid(2.0 * field) { 1 } else { -1 };
    Ok(x)
}

/// Exact sampler for `psi = x_t g(x_{-t})`, where every monomial contains the
/// target `t`. The other sites have marginal proportional to `cosh(g)`, drawn
/// by rejection from the uniform law; the target then follows its conditional.
#[derive(Debug, Clone)]
pub struct StarSampler {
    n: usize,
    target: usize,
    field: Vec<(Vec<usize>, f64)>,
    envelope: f64,
}

impl StarSampler {
    pub fn new(psi: &MultilinearPolynomial, target: usize) -> Result<Self, SparsitronError> {
        if target >= psi.n() {
            return Err(SparsitronError::SiteOutOfRange(target));
        }
        let mut field = Vec::new();
        let mut envelope = 0.0;
        for (m, c) in psi.terms() {
            if !m.contains(&target) {
                return Err(SparsitronError::NotStar(m.to_vec()));
            }
            field.push((m.iter().copied().filter(|&v| v != target).collect(), c));
            envelope += c.abs();
        }
        Ok(Self { n: psi.n(), target, field, envelope })
    }

    fn field_at(&self, x: &[Spin]) -> f64 {
        self.field.iter().map(|(m, c)| c * m.iter().map(|&v| x[v] as f64).product::<f64>()).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Spin> {
        let log_envelope = log_cosh(self.envelope);
        loop {
            let mut x: Vec<Spin> = (0..self.n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
            let g = self.field_at(&x);
            if rng.random::<f64>().ln() <= log_cosh(g) - log_envelope {
                x[self.target] = if rng.random::<f64>() < sigmoid(2.0 * g) { 1 } else { -1 };
                return x;
            }
        }
    }
}

fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc.min(u64::MAX as u128) as u64
}

/// Signed features over `num_vars` variables: `2 sum_{s <= k} C(num_vars, s)`.
pub fn feature_count(num_vars: usize, k: usize) -> u64 {
    2 * (0..=k as u64).map(|s| binomial(num_vars as u64, s)).sum::<u64>()
}

/// Footprint of the dense-design layout used by the reference implementation:
/// one `f64` per feature for the weights and for every row of a training block
/// and of the held-out set.
pub fn estimated_memory_bytes(features: u64, block_size: usize, test_size: usize) -> u64 {
    features.saturating_mul(8).saturating_mul(1 + block_size as u64 + test_size as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsitronConfig {
    pub n: usize,
    pub k: usize,
    pub target: usize,
    /// Scale inside the link: `q = sigmoid(lambda <v, phi>)`.
    pub lambda: f64,
    pub block_size: usize,
    pub test_size: usize,
    /// Planned number of training samples, which sets the learning rate.
    pub planned_samples: u64,
    pub max_features: u64,
    pub mem_cap_bytes: u64,
}

impl SparsitronConfig {
    /// Defaults for a planted parity: `lambda = 2`, blocks of 1000, 1000 held out.
    pub fn new(n: usize, k: usize, planned_blocks: u64) -> Self {
        Self {
            n,
            k,
            target: 0,
            lambda: 2.0,
            block_size: 1000,
            test_size: 1000,
            planned_samples: planned_blocks.max(1) * 1000,
            max_features: DEFAULT_MAX_FEATURES,
            mem_cap_bytes: DEFAULT_MEM_CAP_BYTES,
        }
    }

    pub fn features(&self) -> u64 {
        feature_count(self.n.saturating_sub(1), self.k)
    }

    /// `1 / (1 + sqrt(ln(features) / planned_samples))`.
    pub fn beta(&self) -> f64 {
        1.0 / (1.0 + ((self.features() as f64).ln() / self.planned_samples.max(1) as f64).sqrt())
    }

    /// Refuses configurations above the feature or memory cap.
    pub fn check(&self) -> Result<(), SparsitronError> {
        if self.n == 0 || self.n > 64 || self.target >= self.n {
            return Err(SparsitronError::InvalidParams(format!("need target < n <= 64, got n = {}", self.n)));
        }
        if self.block_size == 0 || self.test_size == 0 || !(self.lambda > 0.0) {
            return Err(SparsitronError::InvalidParams("block size, test size and lambda must be positive".into()));
        }
        let features = self.features();
        if features > self.max_features {
            return Err(SparsitronError::TooManyFeatures { features, cap: self.max_features });
        }
        let bytes = estimated_memory_bytes(features, self.block_size, self.test_size);
        if bytes > self.mem_cap_bytes {
            return Err(SparsitronError::MemoryCap { bytes, cap: self.mem_cap_bytes });
        }
        Ok(())
    }
}

/// Bitmasks of all subsets of `sites` with at most `k` elements, in
/// colexicographic order (increasing as binary numbers).
fn colex_masks(sites: &[usize], k: usize) -> Vec<u64> {
    let m = sites.len();
    let mut local = vec![0u64];
    for size in 1..=k.min(m) {
        let mut comb: u64 = (1u64 << size) - 1;
        let limit = if m == 64 { u64::MAX } else { (1u64 << m) - 1 };
        loop {
            local.push(comb);
            // Gosper's hack: next integer with the same popcount.
            let c = comb & comb.wrapping_neg();
            let r = comb + c;
            if r == 0 || r > limit {
                break;
            }
            comb = (((r ^ comb) >> 2) / c) | r;
            if comb > limit {
                break;
            }
        }
    }
    local.sort_unstable();
    local
        .into_iter()
        .map(|lm| (0..m).filter(|b| lm >> b & 1 == 1).fold(0u64, |acc, b| acc | 1 << sites[b]))
        .collect()
}

fn negative_mask(x: &[Spin]) -> u64 {
    x.iter().enumerate().filter(|(_, &s)| s < 0).fold(0u64, |acc, (i, _)| acc | 1 << i)
}

#[inline]
fn feature_sign(mask: u64, neg: u64) -> f64 {
    if (mask & neg).count_ones() & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Hedge weights over signed monomials.
#[derive(Debug, Clone)]
pub struct MonomialWeightState {
    config: SparsitronConfig,
    masks: Vec<u64>,
    plus: Vec<f64>,
    minus: Vec<f64>,
    beta: f64,
    iterations: u64,
}

impl MonomialWeightState {
    pub fn new(config: SparsitronConfig) -> Result<Self, SparsitronError> {
        config.check()?;
        let covariates: Vec<usize> = (0..config.n).filter(|&v| v != config.target).collect();
        let masks = colex_masks(&covariates, config.k);
        let share = 1.0 / (2 * masks.len()) as f64;
        Ok(Self {
            beta: config.beta(),
            plus: vec![share; masks.len()],
            minus: vec![share; masks.len()],
            masks,
            config,
            iterations: 0,
        })
    }

    pub fn config(&self) -> &SparsitronConfig {
        &self.config
    }

    pub fn monomial_count(&self) -> usize {
        self.masks.len()
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Bytes held by masks and weights.
    pub fn resident_bytes(&self) -> usize {
        self.masks.len() * (8 + 8 + 8)
    }

    pub fn total_weight(&self) -> f64 {
        self.plus.iter().chain(&self.minus).sum()
    }

    pub fn min_weight(&self) -> f64 {
        self.plus.iter().chain(&self.minus).fold(f64::INFINITY, |m, &w| m.min(w))
    }

    /// `<v, phi(x)>` with chunked deterministic summation.
    fn margin(&self, neg: u64) -> f64 {
        let partials: Vec<f64> = self
            .masks
            .par_chunks(CHUNK)
            .zip(self.plus.par_chunks(CHUNK).zip(self.minus.par_chunks(CHUNK)))
            .map(|(m, (p, q))| m.iter().zip(p.iter().zip(q)).map(|(&mk, (a, b))| (a - b) * feature_sign(mk, neg)).sum())
            .collect();
        partials.iter().sum()
    }

    /// Predicted `P(target = +1 | x)`.
    pub fn predict(&self, x: &[Spin]) -> f64 {
        sigmoid(self.config.lambda * self.margin(negative_mask(x)))
    }

    /// One Hedge step on `(x, y)` with `y = x[target]`. Feature losses are
    /// `(1 + phi (q - (1 + y) / 2)) / 2`, in `[0, 1]`.
    pub fn update(&mut self, x: &[Spin]) {
        let neg = negative_mask(x);
        let y = x[self.config.target] as f64;
        let q = sigmoid(self.config.lambda * self.margin(neg));
        let residual = q - (1.0 + y) / 2.0;
        let up = self.beta.powf(0.5 * (1.0 + residual));
        let down = self.beta.powf(0.5 * (1.0 - residual));
        let total: f64 = self
            .masks
            .par_chunks(CHUNK)
            .zip(self.plus.par_chunks_mut(CHUNK).zip(self.minus.par_chunks_mut(CHUNK)))
            .map(|(m, (p, q))| {
                let mut s = 0.0;
                for (&mk, (a, b)) in m.iter().zip(p.iter_mut().zip(q.iter_mut())) {
                    if feature_sign(mk, neg) > 0.0 {
                        *a *= up;
                        *b *= down;
                    } else {
                        *a *= down;
                        *b *= up;
                    }
                    s += *a + *b;
                }
                s
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        // Renormalise; the floor keeps hopeless features strictly positive.
        let floor = f64::MIN_POSITIVE * 1e10;
        let scale = 1.0 / total;
        self.plus.par_iter_mut().chain(self.minus.par_iter_mut()).for_each(|w| *w = (*w * scale).max(floor));
        self.iterations += 1;
    }

    /// Mean squared error of `q` against `(1 + y) / 2` on held-out samples.
    pub fn risk(&self, samples: &[Vec<Spin>]) -> f64 {
        let t = self.config.target;
        let errs: Vec<f64> = samples
            .par_chunks(64)
            .map(|c| {
                c.iter()
                    .map(|x| {
                        let q = self.predict(x);
                        (q - (1.0 + x[t] as f64) / 2.0).powi(2)
                    })
                    .sum()
            })
            .collect();
        errs.iter().sum::<f64>() / samples.len().max(1) as f64
    }

    /// Monomials with the largest net weight `|w+ - w-|`, as sorted site lists
    /// without the target. Ties go to the earlier monomial in colex order.
    pub fn top_monomials(&self, count: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.masks.len()).collect();
        let net = |i: usize| (self.plus[i] - self.minus[i]).abs();
        order.sort_by(|&a, &b| net(b).total_cmp(&net(a)).then(a.cmp(&b)));
        order
            .into_iter()
            .take(count)
            .map(|i| (0..64).filter(|b| self.masks[i] >> b & 1 == 1).collect())
            .collect()
    }
}

/// Per-block outcome of a learning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsitronBlock {
    pub block: usize,
    /// Algorithm time for this block, excluding sample generation.
    pub elapsed_s: f64,
    pub current_risk: f64,
    pub best_risk: f64,
    /// Top three monomials of the retained candidate.
    pub top3: Vec<Vec<usize>>,
}

/// A learner that keeps the best candidate seen on a fixed held-out set.
#[derive(Debug, Clone)]
pub struct SparsitronRun {
    current: MonomialWeightState,
    best: Option<(f64, MonomialWeightState)>,
    heldout: Vec<Vec<Spin>>,
    blocks: usize,
}

impl SparsitronRun {
    pub fn new(config: SparsitronConfig, heldout: Vec<Vec<Spin>>) -> Result<Self, SparsitronError> {
        if heldout.is_empty() {
            return Err(SparsitronError::InvalidParams("empty held-out set".into()));
        }
        Ok(Self { current: MonomialWeightState::new(config)?, best: None, heldout, blocks: 0 })
    }

    pub fn current(&self) -> &MonomialWeightState {
        &self.current
    }

    pub fn best(&self) -> Option<&MonomialWeightState> {
        self.best.as_ref().map(|(_, s)| s)
    }

    /// Train on one block, then score and possibly retain the candidate.
    pub fn process_block(&mut self, samples: &[Vec<Spin>]) -> SparsitronBlock {
        let clock = Instant::now();
        for x in samples {
            self.current.update(x);
        }
        let current_risk = self.current.risk(&self.heldout);
        if self.best.as_ref().is_none_or(|(r, _)| current_risk < *r) {
            self.best = Some((current_risk, self.current.clone()));
        }
        let (best_risk, best) = self.best.as_ref().expect("set above");
        let top3 = best.top_monomials(3);
        let elapsed_s = clock.elapsed().as_secs_f64();
        self.blocks += 1;
        SparsitronBlock { block: self.blocks, elapsed_s, current_risk, best_risk: *best_risk, top3 }
    }
}

/// Whether a reported monomial, joined with the target, overlaps the true
/// parity (which includes the target) in at least `ceil(3 |parity| / 4)` sites.
pub fn monomial_matches(monomial: &[usize], target: usize, parity: &[usize]) -> bool {
    let mut predicted = monomial.to_vec();
    if !predicted.contains(&target) {
        predicted.push(target);
    }
    predicted.iter().filter(|v| parity.contains(v)).count() >= required_overlap(parity.len())
}

/// Index (1-based) of the block completing the first run of `window`
/// consecutive blocks in which some top monomial matches.
pub fn sparsitron_success_block(top_per_block: &[Vec<Vec<usize>>], target: usize, parity: &[usize], window: usize) -> Option<usize> {
    let mut streak = 0;
    for (b, tops) in top_per_block.iter().enumerate() {
        if tops.iter().any(|m| monomial_matches(m, target, parity)) {
            streak += 1;
            if streak >= window.max(1) {
                return Some(b + 1);
            }
        } else {
            streak = 0;
        }
    }
    None
}

pub fn sparsitron_success(top_per_block: &[Vec<Vec<usize>>], target: usize, parity: &[usize], window: usize) -> bool {
    sparsitron_success_block(top_per_block, target, parity, window).is_some()
}

/// Held-out samples from the planted parity on a dedicated stream.
pub fn spn_heldout(n: usize, parity: &[usize], size: usize, seed: u64) -> Result<Vec<Vec<Spin>>, SparsitronError> {
    let mut rng = stream(seed, Purpose::HeldOut);
    (0..size).map(|_| spn_sample(n, parity, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::MeanAccumulator;

    #[test]
    fn spn_sampler_matches_closed_form() {
        let mut rng = stream(7, Purpose::Samples);
        let parity = [2, 4];
        let mut corr = MeanAccumulator::default();
        let mut ones = [0u64; 5];
        for _ in 0..100_000 {
            let x = spn_sample(5, &parity, &mut rng).unwrap();
            corr.push((x[0] * x[2] * x[4]) as f64);
            for (c, &s) in ones.iter_mut().zip(&x) {
                *c += (s > 0) as u64;
            }
        }
        assert!((corr.mean() - 1f64.tanh()).abs() < 3.0 * corr.std_err());
        for &c in &ones[1..] {
            assert!((c as f64 / 1e5 - 0.5).abs() < 0.01);
        }
        assert_eq!(spn_sample(5, &[0, 2], &mut rng), Err(SparsitronError::TargetInParity(0)));
    }

    #[test]
    fn empty_parity_biases_target() {
        let mut rng = stream(3, Purpose::Samples);
        let plus = (0..50_000).filter(|_| spn_sample(3, &[], &mut rng).unwrap()[0] > 0).count();
        assert!((plus as f64 / 5e4 - sigmoid(2.0)).abs() < 0.01);
    }

    #[test]
    fn star_sampler_matches_exact_law() {
        use crate::gibbs::{config_index, ExactDistribution};
        let psi = MultilinearPolynomial::from_terms(4, [(vec![0, 1, 2], 1.0), (vec![0, 3], -0.7)]).unwrap();
        let exact = ExactDistribution::new(&psi).unwrap();
        let sampler = StarSampler::new(&psi, 0).unwrap();
        let mut rng = stream(11, Purpose::Samples);
        let mut counts = vec![0u64; 16];
        let trials = 200_000;
        for _ in 0..trials {
            counts[config_index(&sampler.sample(&mut rng))] += 1;
        }
        let expected: Vec<f64> = exact.probs().iter().map(|p| p * trials as f64).collect();
        let (_, p) = crate::stats::chi_square_test(&counts, &expected);
        assert!(p > 1e-4, "p = {p}");
        let bad = MultilinearPolynomial::from_terms(4, [(vec![1, 2], 1.0)]).unwrap();
        assert!(matches!(StarSampler::new(&bad, 0), Err(SparsitronError::NotStar(_))));
    }

    #[test]
    fn feature_counts() {
        let c = |n: u64, k: u64| binomial(n, k);
        assert_eq!(feature_count(20, 5), 2 * (1 + 20 + c(20, 2) + c(20, 3) + c(20, 4) + c(20, 5)));
        assert_eq!(feature_count(20, 5), 2 * 21_700);
        let mut cfg = SparsitronConfig::new(40, 7, 10);
        assert!(matches!(cfg.check(), Err(SparsitronError::MemoryCap { .. })));
        cfg.max_features = 1000;
        assert!(matches!(cfg.check(), Err(SparsitronError::TooManyFeatures { .. })));
        assert!(SparsitronConfig::new(20, 5, 10).check().is_ok());
        assert!(SparsitronConfig::new(25, 7, 10).check().is_ok());
    }

    #[test]
    fn colex_order() {
        let masks = colex_masks(&[1, 2, 3], 2);
        assert_eq!(masks, vec![0, 0b10, 0b100, 0b110, 0b1000, 0b1010, 0b1100]);
        assert_eq!(colex_masks(&(1..20).collect::<Vec<_>>(), 4).len() as u64 * 2, feature_count(19, 4));
    }

    #[test]
    fn weights_stay_normalised_and_positive() {
        let mut state = MonomialWeightState::new(SparsitronConfig::new(8, 3, 1)).unwrap();
        let mut rng = stream(5, Purpose::Samples);
        for _ in 0..500 {
            let x = spn_sample(8, &[3, 6], &mut rng).unwrap();
            state.update(&x);
            assert!((state.total_weight() - 1.0).abs() < 1e-9);
            assert!(state.min_weight() > 0.0);
        }
    }

    #[test]
    fn learns_planted_parity() {
        let n = 10;
        let parity = [4, 7];
        let mut cfg = SparsitronConfig::new(n, 3, 20);
        cfg.test_size = 300;
        let heldout = spn_heldout(n, &parity, cfg.test_size, 1).unwrap();
        let mut run = SparsitronRun::new(cfg, heldout).unwrap();
        let mut rng = stream(2, Purpose::Samples);
        let mut tops = Vec::new();
        let mut last_best = f64::INFINITY;
        for _ in 0..8 {
            let block: Vec<_> = (0..1000).map(|_| spn_sample(n, &parity, &mut rng).unwrap()).collect();
            let rep = run.process_block(&block);
            assert!(rep.best_risk <= last_best);
            last_best = rep.best_risk;
            tops.push(rep.top3);
        }
        assert_eq!(tops.last().unwrap()[0], vec![4, 7]);
        assert!(sparsitron_success(&tops, 0, &[0, 4, 7], 5));
    }

    #[test]
    fn null_stream_spreads_weight() {
        for seed in 0..3 {
            let cfg = SparsitronConfig::new(10, 2, 10);
            let mut state = MonomialWeightState::new(cfg).unwrap();
            let mut rng = stream(seed, Purpose::Samples);
            for _ in 0..10_000 {
                let x: Vec<Spin> = (0..10).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
                state.update(&x);
            }
            let uniform = 1.0 / (2 * state.monomial_count()) as f64;
            let max = state.plus.iter().chain(&state.minus).fold(0.0f64, |m, &w| m.max(w));
            assert!(max < 3.0 * uniform, "seed {seed}: {max} vs {uniform}");
        }
    }

    #[test]
    fn success_rule() {
        let hit = vec![vec![1, 2]];
        let miss = vec![vec![5, 6]];
        assert!(sparsitron_success(&vec![hit.clone(); 5], 0, &[0, 1, 2], 5));
        let mut four = vec![hit.clone(); 4];
        four.push(miss);
        assert!(!sparsitron_success(&four, 0, &[0, 1, 2], 5));
        assert!(!sparsitron_success(&[], 0, &[0, 1, 2], 5));
        // k = 5 needs 4 of 5 sites.
        assert!(monomial_matches(&[1, 2, 3], 0, &[0, 1, 2, 3, 4]));
        assert!(!monomial_matches(&[1, 2], 0, &[0, 1, 2, 3, 4]));
    }
}

//! Sparse multilinear polynomials over `{-1, 1}^n` and MRF model validation.
//!
//! A polynomial is stored as a map from sorted variable-index sets to nonzero
//! coefficients. Variables are 0-based.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A spin value, always `-1` or `+1`.
pub type Spin = i8;

/// Largest support handled by [`MultilinearPolynomial::witness_large_value`].
pub const MAX_WITNESS_SUPPORT: usize = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("configuration has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("variable index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("variable {0} repeated in a monomial")]
    DuplicateIndex(usize),
    #[error("mixed partial requires distinct sites, got i = j = {0}")]
    SameIndex(usize),
    #[error("spin at position {position} is {value}, expected -1 or +1")]
    InvalidSpin { position: usize, value: Spin },
    #[error("coefficient {0} is not finite")]
    NonFinite(f64),
    #[error("monomial {0:?} is not stored in the polynomial")]
    MissingMonomial(Vec<usize>),
    #[error("support of size {size} exceeds the brute-force limit {max}")]
    SupportTooLarge { size: usize, max: usize },
}

/// Check that `x` is a length-`n` spin configuration.
pub fn check_configuration(x: &[Spin], n: usize) -> Result<(), PolyError> {
    if x.len() != n {
        return Err(PolyError::DimensionMismatch { expected: n, got: x.len() });
    }
    if let Some((position, &value)) = x.iter().enumerate().find(|(_, &v)| v != 1 && v != -1) {
        return Err(PolyError::InvalidSpin { position, value });
    }
    Ok(())
}

/// `x^S = prod_{i in S} x_i`.
#[inline]
pub fn monomial_value(vars: &[usize], x: &[Spin]) -> f64 {
    let mut sign = 1i8;
    for &v in vars {
        sign *= x[v];
    }
    sign as f64
}

/// Fourier `l1` and `l-infinity` norms of the coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l1: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultilinearPolynomial {
    n: usize,
    terms: BTreeMap<Vec<usize>, f64>,
}

impl MultilinearPolynomial {
    pub fn zero(n: usize) -> Self {
        Self { n, terms: BTreeMap::new() }
    }

    /// Build a polynomial from `(variables, coefficient)` pairs. Repeated
    /// monomials are summed; terms that sum to exactly zero are dropped.
    pub fn from_terms<I, V>(n: usize, terms: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = (V, f64)>,
        V: Into<Vec<usize>>,
    {
        let mut p = Self::zero(n);
        for (vars, coeff) in terms {
            p.add_term(vars, coeff)?;
        }
        Ok(p)
    }

    fn canonical(&self, vars: Vec<usize>) -> Result<Vec<usize>, PolyError> {
        let mut vars = vars;
        vars.sort_unstable();
        for w in vars.windows(2) {
            if w[0] == w[1] {
                return Err(PolyError::DuplicateIndex(w[0]));
            }
        }
        if let Some(&last) = vars.last() {
            if last >= self.n {
                return Err(PolyError::IndexOutOfRange { index: last, n: self.n });
            }
        }
        Ok(vars)
    }

    /// Overwrite the coefficient of a monomial. A coefficient of exactly `0.0`
    /// removes the term.
    pub fn set_term(&mut self, vars: impl Into<Vec<usize>>, coeff: f64) -> Result<(), PolyError> {
        if !coeff.is_finite() {
            return Err(PolyError::NonFinite(coeff));
        }
        let vars = self.canonical(vars.into())?;
        if coeff == 0.0 {
            self.terms.remove(&vars);
        } else {
            self.terms.insert(vars, coeff);
        }
        Ok(())
    }

    /// Add `coeff` to the coefficient of a monomial.
    pub fn add_term(&mut self, vars: impl Into<Vec<usize>>, coeff: f64) -> Result<(), PolyError> {
        if !coeff.is_finite() {
            return Err(PolyError::NonFinite(coeff));
        }
        let vars = self.canonical(vars.into())?;
        let updated = self.terms.get(&vars).copied().unwrap_or(0.0) + coeff;
        if updated == 0.0 {
            self.terms.remove(&vars);
        } else {
            self.terms.insert(vars, updated);
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored (nonzero) terms.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Terms in canonical order.
    pub fn terms(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        self.terms.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    /// Coefficient of `vars` (order-insensitive); zero when absent.
    pub fn coefficient(&self, vars: &[usize]) -> f64 {
        let mut key = vars.to_vec();
        key.sort_unstable();
        self.terms.get(&key).copied().unwrap_or(0.0)
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(Vec::len).max().unwrap_or(0)
    }

    /// Sorted list of variables appearing in some term.
    pub fn support(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.terms.keys().flatten().copied().collect();
        set.into_iter().collect()
    }

    /// Evaluate at a spin configuration.
    pub fn evaluate(&self, x: &[Spin]) -> Result<f64, PolyError> {
        check_configuration(x, self.n)?;
        Ok(self.evaluate_unchecked(x))
    }

    /// Evaluate without validating `x`. Panics if an index is out of range.
    pub fn evaluate_unchecked(&self, x: &[Spin]) -> f64 {
        self.terms.iter().map(|(vars, &c)| c * monomial_value(vars, x)).sum()
    }

    /// `d_i p = sum_{S ∋ i} p(S) x^{S \ i}`.
    pub fn partial_derivative(&self, i: usize) -> Result<Self, PolyError> {
        if i >= self.n {
            return Err(PolyError::IndexOutOfRange { index: i, n: self.n });
        }
        let terms = self
            .terms
            .iter()
            .filter(|(vars, _)| vars.binary_search(&i).is_ok())
            .map(|(vars, &c)| {
                let rest: Vec<usize> = vars.iter().copied().filter(|&v| v != i).collect();
                (rest, c)
            })
            .collect();
        Ok(Self { n: self.n, terms })
    }

    /// `d_i d_j p`, symmetric in `(i, j)`.
    pub fn mixed_partial(&self, i: usize, j: usize) -> Result<Self, PolyError> {
        if i == j {
            if i >= self.n {
                return Err(PolyError::IndexOutOfRange { index: i, n: self.n });
            }
            return Err(PolyError::SameIndex(i));
        }
        self.partial_derivative(i)?.partial_derivative(j)
    }

    pub fn norms(&self) -> Norms {
        let mut l1 = 0.0;
        let mut linf = 0.0f64;
        for &c in self.terms.values() {
            l1 += c.abs();
            linf = linf.max(c.abs());
        }
        Norms { l1, linf }
    }

    /// Monomials with no stored strict superset, in canonical order.
    pub fn maximal_monomials(&self) -> Vec<Vec<usize>> {
        let keys: Vec<&Vec<usize>> = self.terms.keys().collect();
        keys.iter()
            .filter(|s| {
                !keys
                    .iter()
                    .any(|t| t.len() > s.len() && is_subset(s, t))
            })
            .map(|s| (*s).clone())
            .collect()
    }

    /// Brute-force a configuration with `|p(x)| >= |coeff(S)|` over the support
    /// of `p`. Variables outside the support are set to `+1`. Among all
    /// assignments the first maximiser of `|p(x)|` is returned.
    pub fn witness_large_value(&self, s: &[usize]) -> Result<Vec<Spin>, PolyError> {
        let target = self.coefficient(s);
        if target == 0.0 {
            let mut key = s.to_vec();
            key.sort_unstable();
            return Err(PolyError::MissingMonomial(key));
        }
        let support = self.support();
        if support.len() > MAX_WITNESS_SUPPORT {
            return Err(PolyError::SupportTooLarge { size: support.len(), max: MAX_WITNESS_SUPPORT });
        }
        let mut x = vec![1 as Spin; self.n];
        let mut best = (f64::NEG_INFINITY, 0u64);
        for mask in 0u64..(1u64 << support.len()) {
            for (b, &v) in support.iter().enumerate() {
                x[v] = if mask >> b & 1 == 1 { -1 } else { 1 };
            }
            let value = self.evaluate_unchecked(&x).abs();
            if value > best.0 {
                best = (value, mask);
            }
        }
        for (b, &v) in support.iter().enumerate() {
            x[v] = if best.1 >> b & 1 == 1 { -1 } else { 1 };
        }
        debug_assert!(best.0 >= target.abs() * (1.0 - 1e-12));
        Ok(x)
    }
}

/// Both slices sorted.
pub(crate) fn is_subset(small: &[usize], big: &[usize]) -> bool {
    let mut it = big.iter();
    small.iter().all(|s| it.any(|b| b == s))
}

/// Per-site local fields `d_i psi`, laid out for fast repeated evaluation.
#[derive(Debug, Clone, Default)]
pub struct SiteFields {
    offsets: Vec<usize>,
    coeffs: Vec<f64>,
    var_offsets: Vec<usize>,
    vars: Vec<u32>,
    /// Sites whose field reads few enough spins get `P(+1)` tabulated by
    /// neighbour configuration; `tables[i]` is `None` otherwise.
    tables: Vec<Option<ProbTable>>,
}

#[derive(Debug, Clone)]
struct ProbTable {
    neighbors: Vec<u32>,
    probs: Vec<f64>,
}

/// Largest neighbourhood tabulated by [`SiteFields`] (`2^12` entries per site).
const MAX_TABULATED_NEIGHBORS: usize = 12;

impl SiteFields {
    pub fn new(psi: &MultilinearPolynomial) -> Self {
        let n = psi.n();
        let mut per_site: Vec<Vec<(Vec<u32>, f64)>> = vec![Vec::new(); n];
        for (vars, c) in psi.terms() {
            for &i in vars {
                let rest = vars.iter().filter(|&&v| v != i).map(|&v| v as u32).collect();
                per_site[i].push((rest, c));
            }
        }
        let mut fields = SiteFields { offsets: vec![0], var_offsets: vec![0], ..Default::default() };
        for terms in per_site {
            for (rest, c) in terms {
                fields.coeffs.push(c);
                fields.vars.extend_from_slice(&rest);
                fields.var_offsets.push(fields.vars.len());
            }
            fields.offsets.push(fields.coeffs.len());
        }
        fields.tables = (0..n).map(|i| fields.tabulate(i, n)).collect();
        fields
    }

    fn tabulate(&self, i: usize, n: usize) -> Option<ProbTable> {
        let mut neighbors: Vec<u32> = self.vars[self.var_offsets[self.offsets[i]]..self.var_offsets[self.offsets[i + 1]]].to_vec();
        neighbors.sort_unstable();
        neighbors.dedup();
        if neighbors.len() > MAX_TABULATED_NEIGHBORS {
            return None;
        }
        let mut x: Vec<Spin> = vec![1; n];
        let probs = (0..1usize << neighbors.len())
            .map(|bits| {
                for (b, &v) in neighbors.iter().enumerate() {
                    x[v as usize] = if bits >> b & 1 == 1 { 1 } else { -1 };
                }
                crate::sigmoid(2.0 * self.field(i, &x))
            })
            .collect();
        Some(ProbTable { neighbors, probs })
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `d_i psi(x)`; the value of `x[i]` is ignored.
    #[inline]
    pub fn field(&self, i: usize, x: &[Spin]) -> f64 {
        let mut total = 0.0;
        for t in self.offsets[i]..self.offsets[i + 1] {
            let mut sign = 1i8;
            for &v in &self.vars[self.var_offsets[t]..self.var_offsets[t + 1]] {
                sign *= x[v as usize];
            }
            total += if sign > 0 { self.coeffs[t] } else { -self.coeffs[t] };
        }
        total
    }

    /// Glauber probability that site `i` resamples to `+1`: `sigma(2 d_i psi(x))`.
    #[inline]
    pub fn prob_plus(&self, i: usize, x: &[Spin]) -> f64 {
        match &self.tables[i] {
            Some(table) => {
                let bits = table.neighbors.iter().enumerate().fold(0usize, |acc, (b, &v)| acc | (usize::from(x[v as usize] > 0) << b));
                table.probs[bits]
            }
            None => crate::sigmoid(2.0 * self.field(i, x)),
        }
    }
}

/// Declared or derived `(k, d, alpha, lambda)` bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelBounds {
    /// Polynomial degree bound.
    pub k: usize,
    /// Vertex-degree bound.
    pub d: usize,
    /// Lower bound on the largest maximal-monomial coefficient covering each edge.
    pub alpha: f64,
    /// Width bound on `||d_i psi||_1`.
    pub lambda: f64,
}

/// A clause of the model assumption that failed, with a witness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("low degree: monomial {monomial:?} has degree {degree} > k = {bound}")]
    Degree { monomial: Vec<usize>, degree: usize, bound: usize },
    #[error("bounded vertex degree: site {site} has {degree} neighbours > d = {bound}")]
    VertexDegree { site: usize, degree: usize, bound: usize },
    #[error("nontrivial edge coefficients: edge {edge:?} best maximal coefficient {best} < alpha = {bound}")]
    EdgeCoefficient { edge: (usize, usize), best: f64, bound: f64 },
    #[error("bounded width: site {site} has width {width} > lambda = {bound}")]
    Width { site: usize, width: f64, bound: f64 },
}

/// Validation failure together with the bounds the polynomial actually satisfies.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{violation} (derived bounds: {derived:?})")]
pub struct ModelViolation {
    pub violation: Violation,
    pub derived: ModelBounds,
}

/// A validated MRF: Hamiltonian, declared bounds, and dependency graph.
#[derive(Debug, Clone)]
pub struct MrfModel {
    psi: MultilinearPolynomial,
    bounds: ModelBounds,
    derived: ModelBounds,
    graph: Vec<Vec<usize>>,
    fields: SiteFields,
}

/// Dependency graph `{(i, j) : d_i d_j psi != 0}` as sorted adjacency lists.
pub fn dependency_graph(psi: &MultilinearPolynomial) -> Vec<Vec<usize>> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); psi.n()];
    for (vars, _) in psi.terms() {
        for &a in vars {
            for &b in vars {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
    }
    adj.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Best `|psi(S)|` over maximal monomials `S ⊇ {i, j}` for every edge `i < j`.
fn edge_strengths(psi: &MultilinearPolynomial) -> BTreeMap<(usize, usize), f64> {
    let mut best: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (vars, _) in psi.terms() {
        for (a, &i) in vars.iter().enumerate() {
            for &j in &vars[a + 1..] {
                best.entry((i, j)).or_insert(0.0);
            }
        }
    }
    for s in psi.maximal_monomials() {
        let c = psi.coefficient(&s).abs();
        for (a, &i) in s.iter().enumerate() {
            for &j in &s[a + 1..] {
                let e = best.entry((i, j)).or_insert(0.0);
                *e = e.max(c);
            }
        }
    }
    best
}

/// Tightest bounds the polynomial satisfies: minimal `k`, `d`, `lambda` and the
/// maximal admissible `alpha` (`+inf` when there are no edges).
pub fn derive_bounds(psi: &MultilinearPolynomial) -> ModelBounds {
    let graph = dependency_graph(psi);
    let d = graph.iter().map(Vec::len).max().unwrap_or(0);
    let alpha = edge_strengths(psi).values().copied().fold(f64::INFINITY, f64::min);
    let lambda = (0..psi.n())
        .map(|i| site_width(psi, i))
        .fold(0.0, f64::max);
    ModelBounds { k: psi.degree(), d, alpha, lambda }
}

fn site_width(psi: &MultilinearPolynomial, i: usize) -> f64 {
    psi.terms()
        .filter(|(vars, _)| vars.binary_search(&i).is_ok())
        .map(|(_, c)| c.abs())
        .sum()
}

/// Check the four model clauses in order (degree, vertex degree, edge
/// coefficients, width) and build the model, or report the first violation.
pub fn validate_model(psi: MultilinearPolynomial, bounds: ModelBounds) -> Result<MrfModel, ModelViolation> {
    let derived = derive_bounds(&psi);
    let fail = |violation| Err(ModelViolation { violation, derived });

    if let Some((vars, _)) = psi.terms().find(|(v, _)| v.len() > bounds.k) {
        return fail(Violation::Degree { monomial: vars.to_vec(), degree: vars.len(), bound: bounds.k });
    }
    let graph = dependency_graph(&psi);
    if let Some((site, nbrs)) = graph.iter().enumerate().find(|(_, nb)| nb.len() > bounds.d) {
        return fail(Violation::VertexDegree { site, degree: nbrs.len(), bound: bounds.d });
    }
    if let Some((&edge, &best)) = edge_strengths(&psi).iter().find(|(_, &b)| b < bounds.alpha) {
        return fail(Violation::EdgeCoefficient { edge, best, bound: bounds.alpha });
    }
    for site in 0..psi.n() {
        let width = site_width(&psi, site);
        if width > bounds.lambda {
            return fail(Violation::Width { site, width, bound: bounds.lambda });
        }
    }
    let fields = SiteFields::new(&psi);
    Ok(MrfModel { psi, bounds, derived, graph, fields })
}

impl MrfModel {
    /// Validate against the polynomial's own derived bounds. Never fails.
    pub fn with_derived_bounds(psi: MultilinearPolynomial) -> Self {
        let mut bounds = derive_bounds(&psi);
        if !bounds.alpha.is_finite() {
            bounds.alpha = 0.0;
        }
        validate_model(psi, bounds).expect("derived bounds always validate")
    }

    pub fn n(&self) -> usize {
        self.psi.n()
    }

    pub fn psi(&self) -> &MultilinearPolynomial {
        &self.psi
    }

    pub fn bounds(&self) -> ModelBounds {
        self.bounds
    }

    pub fn derived_bounds(&self) -> ModelBounds {
        self.derived
    }

    /// Sorted neighbour lists.
    pub fn graph(&self) -> &[Vec<usize>] {
        &self.graph
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.graph[i]
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.graph[i].binary_search(&j).is_ok()
    }

    /// Edges `(i, j)` with `i < j` in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.graph
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn fields(&self) -> &SiteFields {
        &self.fields
    }

    /// Union of the neighbourhoods of `sites`, excluding the sites themselves.
    pub fn outer_neighbors(&self, sites: &[usize]) -> Vec<usize> {
        let set: BTreeSet<usize> = sites
            .iter()
            .flat_map(|&s| self.graph[s].iter().copied())
            .filter(|v| !sites.contains(v))
            .collect();
        set.into_iter().collect()
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            n: self.n(),
            terms: self
                .psi
                .terms()
                .map(|(vars, coeff)| TermRecord { vars: vars.to_vec(), coeff })
                .collect(),
            k: self.bounds.k,
            d: self.bounds.d,
            alpha: self.bounds.alpha,
            lambda: self.bounds.lambda,
        }
    }
}

/// One term in the JSON model format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub vars: Vec<usize>,
    pub coeff: f64,
}

/// JSON model file: `{"n", "terms": [{"vars", "coeff"}], "k", "d", "alpha", "lambda"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub n: usize,
    pub terms: Vec<TermRecord>,
    pub k: usize,
    pub d: usize,
    pub alpha: f64,
    pub lambda: f64,
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("malformed model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Invalid(#[from] ModelViolation),
}

impl ModelFile {
    pub fn polynomial(&self) -> Result<MultilinearPolynomial, PolyError> {
        MultilinearPolynomial::from_terms(self.n, self.terms.iter().map(|t| (t.vars.clone(), t.coeff)))
    }

    pub fn bounds(&self) -> ModelBounds {
        ModelBounds { k: self.k, d: self.d, alpha: self.alpha, lambda: self.lambda }
    }

    pub fn into_model(self) -> Result<MrfModel, ModelFileError> {
        let psi = self.polynomial()?;
        Ok(validate_model(psi, self.bounds())?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelFileError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model file serialises")
    }
}

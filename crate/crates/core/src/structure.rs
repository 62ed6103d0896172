//! Dependency-graph recovery from the stopping-time statistic.
//!
//! Time is cut into windows of length `L`; window `w` covers `[wL, (w+1)L)` and
//! is split into thirds. For an ordered pair `(i, j)` a window matches when the
//! first third has at least two updates of `i` and none of `j`, the middle
//! third has no update of `i` and at least one of `j`, and the last third
//! repeats the first. From a match the statistic
//! `Z = Y1 Y2 - 2 Y1 Y1' + Y1' Y2'` is formed, where `Y1, Y2` (resp. `Y1', Y2'`)
//! indicate `X_i = +1` at the first two `i`-updates of the first (resp. last)
//! third. Its mean is positive when `j` influences `i` and zero otherwise.
//!
//! Theory mode indexes stopping times by block `l`, whose test window is
//! `w = l + r - 1`; consecutive stopping times are at least `r` blocks apart.
//! Heuristic mode drops the grid: on discrete-time blocks it looks for the
//! update run `i i j.. i i` spanning fewer than `W` steps and ranks candidates
//! by their cumulative mean statistic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Mode, Trajectory, UpdateEvent};
use crate::poly::{MrfModel, Spin};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("window length {0} must lie in (0, 1/3]")]
    WindowTooLong(f64),
    #[error("expected a {expected} trajectory")]
    WrongMode { expected: &'static str },
    #[error("pair needs distinct sites, got {0} twice")]
    SameSite(usize),
    #[error("site {0} out of range")]
    SiteOutOfRange(usize),
    #[error("pair ({i}, {j}): found {found} stopping times, needed {needed}")]
    Insufficient { i: usize, j: usize, found: u64, needed: u64 },
    #[error("trajectory horizon {horizon} is shorter than the required {needed}")]
    HorizonTooShort { horizon: f64, needed: f64 },
    #[error("update pattern absent in block {0}")]
    PatternAbsent(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureMode {
    Theory,
    Heuristic,
}

/// Constants of the stopping-time algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureParams {
    /// Lower bound on the probability that the burn-in leaves a large mixed partial.
    pub q_burn: f64,
    /// Window length `L`.
    pub window: f64,
    /// Blocks `r` between consecutive stopping times.
    pub burn_in_blocks: u64,
    /// Decision threshold on the mean statistic.
    pub kappa: f64,
    /// `L^5 / 6^5`.
    pub q_good: f64,
    /// Required stopping times per pair, as a real.
    pub required: f64,
    /// Required horizon `L (M r + 2 M / q_good)`.
    pub horizon: f64,
    pub delta_fail: f64,
    pub mode: StructureMode,
}

impl StructureParams {
    /// `ceil(M)`, saturating.
    pub fn required_count(&self) -> u64 {
        if self.required >= u64::MAX as f64 {
            u64::MAX
        } else {
            self.required.ceil().max(1.0) as u64
        }
    }

    /// Replace any of `L`, `r`, `kappa`, `M` and recompute `q_good` and the horizon.
    pub fn with_overrides(
        mut self,
        window: Option<f64>,
        burn_in_blocks: Option<u64>,
        kappa: Option<f64>,
        required: Option<f64>,
    ) -> Result<Self, StructureError> {
        if let Some(l) = window {
            self.window = l;
        }
        if let Some(r) = burn_in_blocks {
            self.burn_in_blocks = r;
        }
        if let Some(k) = kappa {
            self.kappa = k;
        }
        if let Some(m) = required {
            self.required = m;
        }
        self.q_good = self.window.powi(5) / 6f64.powi(5);
        self.horizon = self.window * (self.required * self.burn_in_blocks as f64 + 2.0 * self.required / self.q_good);
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<(), StructureError> {
        if !(self.window > 0.0) || (self.mode == StructureMode::Theory && self.window > 1.0 / 3.0) {
            return Err(StructureError::WindowTooLong(self.window));
        }
        if self.burn_in_blocks < 1 {
            return Err(StructureError::InvalidParams("r must be at least 1".into()));
        }
        if !(self.required >= 1.0) {
            return Err(StructureError::InvalidParams("M must be at least 1".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(StructureError::InvalidParams("kappa must be positive".into()));
        }
        Ok(())
    }
}

/// Constants for a `(k, d, alpha, lambda)` model on `n` sites with failure
/// probability `delta_fail`. Logarithms are natural.
pub fn derive_params(
    k: usize,
    d: usize,
    alpha: f64,
    lambda: f64,
    delta_fail: f64,
    n: usize,
) -> Result<StructureParams, StructureError> {
    let bad = |what: &str| Err(StructureError::InvalidParams(what.into()));
    if k < 2 {
        return bad("k must be at least 2");
    }
    if d < 1 || n < 2 {
        return bad("d must be at least 1 and n at least 2");
    }
    if !(alpha > 0.0 && alpha.is_finite() && lambda > 0.0 && lambda.is_finite()) {
        return bad("alpha and lambda must be positive and finite");
    }
    if !(delta_fail > 0.0 && delta_fail < 1.0) {
        return bad("delta must lie in (0, 1)");
    }
    let d_f = d as f64;
    let q_burn = 0.5 * ((-2.0 * lambda).exp() / (2.0 * d_f)).powi(k as i32 - 2);
    let window = alpha * alpha * q_burn * (-6.0 * lambda).exp() / (64.0 * d_f);
    if window >= 1.0 / 3.0 {
        return Err(StructureError::WindowTooLong(window));
    }
    let kappa = 5.0 * alpha * alpha * q_burn / 64.0 * (-6.0 * lambda).exp();
    let q_good = window.powi(5) / 6f64.powi(5);
    let required = 2000.0 * (2.0 * (n * n) as f64 / delta_fail).ln() / (kappa * kappa);
    let burn_in_blocks = ((2.0 * f64::max(1.0, 2.0 * (k as f64 - 2.0))).ln() / window).ceil().max(1.0) as u64;
    let horizon = window * (required * burn_in_blocks as f64 + 2.0 * required / q_good);
    let params = StructureParams {
        q_burn,
        window,
        burn_in_blocks,
        kappa,
        q_good,
        required,
        horizon,
        delta_fail,
        mode: StructureMode::Theory,
    };
    params.check()?;
    Ok(params)
}

/// Boundaries `[a, b, c, e]` of window `w`: thirds are `[a,b)`, `[b,c)`, `[c,e)`.
#[inline]
pub fn window_edges(w: u64, length: f64) -> [f64; 4] {
    let a = w as f64 * length;
    [a, a + length / 3.0, a + 2.0 * length / 3.0, (w + 1) as f64 * length]
}

/// Window containing `t` and the third (0, 1, 2) it falls in, consistent with
/// [`window_edges`].
#[inline]
pub fn locate(t: f64, length: f64) -> (u64, usize) {
    let mut w = (t / length).floor().max(0.0) as u64;
    let mut edges = window_edges(w, length);
    if t < edges[0] && w > 0 {
        w -= 1;
        edges = window_edges(w, length);
    } else if t >= edges[3] {
        w += 1;
        edges = window_edges(w, length);
    }
    let third = if t < edges[1] {
        0
    } else if t < edges[2] {
        1
    } else {
        2
    };
    (w, third)
}

/// Whether the update pattern holds for `(i, j)` on the interval with the given
/// third boundaries.
#[inline]
fn pattern_holds(traj: &Trajectory, i: usize, j: usize, edges: [f64; 4]) -> bool {
    traj.count_in(i, edges[1], edges[2]) == 0
        && traj.count_in(j, edges[1], edges[2]) >= 1
        && traj.count_in(j, edges[0], edges[1]) == 0
        && traj.count_in(j, edges[2], edges[3]) == 0
        && traj.count_in(i, edges[0], edges[1]) >= 2
        && traj.count_in(i, edges[2], edges[3]) >= 2
}

/// The statistic from the values of the first two updates in each outer third.
#[inline]
pub fn z_from_values(first: [Spin; 2], last: [Spin; 2]) -> f64 {
    let y = |v: Spin| if v == 1 { 1.0 } else { 0.0 };
    let (y1, y2, y1p, y2p) = (y(first[0]), y(first[1]), y(last[0]), y(last[1]));
    y1 * y2 - 2.0 * y1 * y1p + y1p * y2p
}

fn z_on_edges(traj: &Trajectory, i: usize, edges: [f64; 4]) -> Option<f64> {
    let values = |t1: f64, t2: f64| -> Option<[Spin; 2]> {
        let times = traj.site_times(i);
        let lo = times.partition_point(|&t| t < t1);
        if lo + 1 < times.len() && times[lo + 1] < t2 {
            let idx = traj.site_index(i);
            let ev = traj.events();
            Some([ev[idx[lo] as usize].value, ev[idx[lo + 1] as usize].value])
        } else {
            None
        }
    };
    Some(z_from_values(values(edges[0], edges[1])?, values(edges[2], edges[3])?))
}

fn check_pair(traj: &Trajectory, i: usize, j: usize) -> Result<(), StructureError> {
    if i == j {
        return Err(StructureError::SameSite(i));
    }
    if i >= traj.n() || j >= traj.n() {
        return Err(StructureError::SiteOutOfRange(i.max(j)));
    }
    Ok(())
}

fn require_mode(traj: &Trajectory, mode: Mode) -> Result<(), StructureError> {
    if traj.mode() != mode {
        return Err(StructureError::WrongMode { expected: mode.as_str() });
    }
    Ok(())
}

/// Stopping times `l >= first_block` for `(i, j)`, each at least `r` blocks
/// after the previous one, restricted to windows inside the trajectory range.
pub fn find_stopping_times_from(
    traj: &Trajectory,
    i: usize,
    j: usize,
    window: f64,
    burn_in_blocks: u64,
    first_block: u64,
    max_count: u64,
) -> Result<Vec<u64>, StructureError> {
    require_mode(traj, Mode::Continuous)?;
    check_pair(traj, i, j)?;
    if !(window > 0.0) {
        return Err(StructureError::WindowTooLong(window));
    }
    let r = burn_in_blocks.max(1);
    let mut next_min = first_block;
    let mut last_checked = None;
    let mut out = Vec::new();
    for &t in traj.site_times(j) {
        if out.len() as u64 >= max_count {
            break;
        }
        let (w, third) = locate(t, window);
        if third != 1 || w + 1 < r {
            continue;
        }
        let block = w + 1 - r;
        if block < next_min || last_checked == Some(block) {
            continue;
        }
        last_checked = Some(block);
        let edges = window_edges(w, window);
        if edges[0] < traj.start() {
            continue;
        }
        if edges[3] > traj.horizon() {
            break;
        }
        if pattern_holds(traj, i, j, edges) {
            out.push(block);
            next_min = block + r;
        }
    }
    Ok(out)
}

/// Stopping times starting from block `r`.
pub fn find_stopping_times(
    traj: &Trajectory,
    i: usize,
    j: usize,
    window: f64,
    burn_in_blocks: u64,
    max_count: u64,
) -> Result<Vec<u64>, StructureError> {
    find_stopping_times_from(traj, i, j, window, burn_in_blocks, burn_in_blocks, max_count)
}

/// The statistic at stopping time `block`.
pub fn z_statistic(traj: &Trajectory, i: usize, block: u64, window: f64, burn_in_blocks: u64) -> Result<f64, StructureError> {
    let edges = window_edges(block + burn_in_blocks - 1, window);
    z_on_edges(traj, i, edges).ok_or(StructureError::PatternAbsent(block))
}

/// Per-pair accumulated statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStatistic {
    pub i: usize,
    pub j: usize,
    pub stop_count: u64,
    pub z_sum: f64,
    pub z_mean: f64,
}

/// Output of graph recovery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedGraph {
    pub n: usize,
    /// Edges `(i, j)` with `i < j`, in local site indices.
    pub edges: Vec<(usize, usize)>,
    pub stats: Vec<PairStatistic>,
    /// Original labels of the local sites when the trajectory was masked.
    pub labels: Option<Vec<usize>>,
}

impl LearnedGraph {
    pub fn label(&self, i: usize) -> usize {
        self.labels.as_ref().map_or(i, |l| l[i])
    }

    /// Edges translated to original labels.
    pub fn labeled_edges(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|&(i, j)| (self.label(i), self.label(j))).collect()
    }
}

/// Theory-mode recovery: every pair `i < j` needs `M` stopping times; the edge
/// is kept when the mean statistic reaches `kappa`. Pairs are processed in
/// parallel and collected in lexicographic order, so the output does not depend
/// on scheduling. The first pair (in that order) lacking stopping times is
/// reported as [`StructureError::Insufficient`].
pub fn find_markov_blanket(traj: &Trajectory, params: &StructureParams) -> Result<LearnedGraph, StructureError> {
    find_markov_blanket_with(traj, params, true)
}

/// As [`find_markov_blanket`]; `check_horizon = false` skips the horizon test
/// (used when `M` and `L` are overridden to tractable values).
pub fn find_markov_blanket_with(
    traj: &Trajectory,
    params: &StructureParams,
    check_horizon: bool,
) -> Result<LearnedGraph, StructureError> {
    require_mode(traj, Mode::Continuous)?;
    params.check()?;
    if check_horizon && traj.horizon() - traj.start() < params.horizon {
        return Err(StructureError::HorizonTooShort { horizon: traj.horizon() - traj.start(), needed: params.horizon });
    }
    let n = traj.n();
    let needed = params.required_count();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let results: Vec<Result<PairStatistic, StructureError>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let stops = find_stopping_times(traj, i, j, params.window, params.burn_in_blocks, needed)?;
            if (stops.len() as u64) < needed {
                return Err(StructureError::Insufficient { i, j, found: stops.len() as u64, needed });
            }
            let z_sum = stops
                .iter()
                .map(|&b| z_statistic(traj, i, b, params.window, params.burn_in_blocks))
                .sum::<Result<f64, _>>()?;
            Ok(PairStatistic { i, j, stop_count: stops.len() as u64, z_sum, z_mean: z_sum / needed as f64 })
        })
        .collect();
    let stats = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let edges = stats.iter().filter(|s| s.z_mean >= params.kappa).map(|s| (s.i, s.j)).collect();
    Ok(LearnedGraph { n, edges, stats, labels: traj.labels().map(<[usize]>::to_vec) })
}

/// Ground-truth event flags at a stopping time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFlags {
    /// `|d_i d_j psi|` at the window start is at least `alpha`.
    pub a: bool,
    /// No site of `N({i, j}) \ {i, j}` updates inside the window.
    pub b: bool,
    /// The update pattern holds.
    pub c: bool,
}

/// Evaluate the three events for block `block` of an unmasked trajectory of `model`.
#[allow(clippy::too_many_arguments)]
pub fn event_diagnostics(
    model: &MrfModel,
    traj: &Trajectory,
    i: usize,
    j: usize,
    block: u64,
    window: f64,
    burn_in_blocks: u64,
    alpha: f64,
) -> Result<EventFlags, StructureError> {
    check_pair(traj, i, j)?;
    let edges = window_edges(block + burn_in_blocks - 1, window);
    if edges[0] < traj.start() || edges[3] > traj.horizon() {
        return Err(StructureError::InvalidParams("window outside trajectory".into()));
    }
    let x = traj.configuration_at(edges[0]).expect("window start inside range");
    let mixed = model.psi().mixed_partial(i, j).expect("distinct sites");
    let a = mixed.evaluate_unchecked(&x).abs() >= alpha;
    let b = model
        .outer_neighbors(&[i, j])
        .iter()
        .all(|&v| traj.count_in(v, edges[0], edges[3]) == 0);
    let c = pattern_holds(traj, i, j, edges);
    Ok(EventFlags { a, b, c })
}

/// A stopping time reported by [`OnlinePatternScanner`].
#[derive(Debug, Clone, Copy)]
pub struct StopRecord<'a> {
    pub i: usize,
    pub j: usize,
    pub block: u64,
    pub z: f64,
    /// Configuration at the window start.
    pub window_start: &'a [Spin],
    /// Per-site update counts in the window's three thirds.
    pub counts: &'a [[u32; 3]],
}

/// Streaming version of the theory-mode scan over every ordered pair at once,
/// fed events in time order. Suited to trajectories too long to store.
pub struct OnlinePatternScanner {
    n: usize,
    window: f64,
    burn_in_blocks: u64,
    current: u64,
    counts: Vec<[u32; 3]>,
    first_values: Vec<[Spin; 2]>,
    last_values: Vec<[Spin; 2]>,
    state: Vec<Spin>,
    window_start: Vec<Spin>,
    next_min: Vec<u64>,
    /// Sites updated in the current window, in first-update order.
    touched: Vec<usize>,
    /// Some site in the current window already shows the `i` pattern.
    candidate: bool,
    /// `window_edges(current)`, cached.
    edges: [f64; 4],
}

impl OnlinePatternScanner {
    /// `x0` is the state at time `start`, which must be a window boundary or 0.
    pub fn new(x0: &[Spin], start: f64, window: f64, burn_in_blocks: u64) -> Self {
        let n = x0.len();
        let r = burn_in_blocks.max(1);
        let (mut current, _) = locate(start, window);
        if window_edges(current, window)[0] < start {
            current += 1;
        }
        Self {
            n,
            window,
            burn_in_blocks: r,
            current,
            counts: vec![[0; 3]; n],
            first_values: vec![[0; 2]; n],
            last_values: vec![[0; 2]; n],
            state: x0.to_vec(),
            window_start: x0.to_vec(),
            next_min: vec![r; n * n],
            touched: Vec::with_capacity(n),
            candidate: false,
            edges: window_edges(current, window),
        }
    }

    fn close_window(&mut self, on_stop: &mut impl FnMut(StopRecord<'_>)) {
        let w = self.current;
        if self.candidate && self.touched.len() >= 2 && w + 1 >= self.burn_in_blocks {
            let block = w + 1 - self.burn_in_blocks;
            for i in 0..self.n {
                let ci = self.counts[i];
                if ci[0] < 2 || ci[1] != 0 || ci[2] < 2 {
                    continue;
                }
                for j in 0..self.n {
                    let cj = self.counts[j];
                    if j == i || cj[0] != 0 || cj[1] == 0 || cj[2] != 0 || block < self.next_min[i * self.n + j] {
                        continue;
                    }
                    self.next_min[i * self.n + j] = block + self.burn_in_blocks;
                    on_stop(StopRecord {
                        i,
                        j,
                        block,
                        z: z_from_values(self.first_values[i], self.last_values[i]),
                        window_start: &self.window_start,
                        counts: &self.counts,
                    });
                }
            }
        }
        for &s in &self.touched {
            self.counts[s] = [0; 3];
            self.window_start[s] = self.state[s];
        }
        self.touched.clear();
        self.candidate = false;
        self.current += 1;
        self.edges = window_edges(self.current, self.window);
    }

    /// Close every window ending at or before `t`.
    pub fn advance_to(&mut self, t: f64, on_stop: &mut impl FnMut(StopRecord<'_>)) {
        while self.edges[3] <= t {
            if self.touched.is_empty() {
                // Empty windows cannot match; skip straight to the one holding t.
                let (w, _) = locate(t, self.window);
                if w > self.current {
                    self.current = w;
                    self.edges = window_edges(w, self.window);
                    continue;
                }
            }
            self.close_window(on_stop);
        }
    }

    pub fn push(&mut self, e: &UpdateEvent, on_stop: &mut impl FnMut(StopRecord<'_>)) {
        self.advance_to(e.time, on_stop);
        let third = if e.time < self.edges[1] {
            0
        } else if e.time < self.edges[2] {
            1
        } else {
            2
        };
        let site = e.site as usize;
        if self.counts[site] == [0; 3] {
            self.touched.push(site);
        }
        let c = &mut self.counts[site][third];
        if *c < 2 {
            match third {
                0 => self.first_values[site][*c as usize] = e.value,
                2 => self.last_values[site][*c as usize] = e.value,
                _ => {}
            }
        }
        *c += 1;
        if third == 2 && *c == 2 {
            let ci = self.counts[site];
            self.candidate |= ci[0] >= 2 && ci[1] == 0;
        }
        self.state[site] = e.value;
    }
}

/// Integer-step window for the heuristic: `3 max(2, ceil(n / k))`.
pub fn heuristic_window(n: usize, k: usize) -> u64 {
    3 * (n.div_ceil(k.max(1))).max(2) as u64
}

/// Heuristic scan of one discrete-time block for the ordered pair `(i, j)`.
/// In the merged stream of `i`- and `j`-updates, a match is two consecutive
/// `i`-updates, a run of `j`-updates, then two more `i`-updates, all within
/// fewer than `window` steps. `Y1, Y2` are the values at the first pair and
/// `Y1', Y2'` at the second. The scan resumes after each match. Returns the
/// sum of the statistic and the number of matches.
pub fn heuristic_scan(traj: &Trajectory, i: usize, j: usize, window: u64) -> (f64, u64) {
    let ti = traj.site_times(i);
    let tj = traj.site_times(j);
    let idx = traj.site_index(i);
    let events = traj.events();
    let value = |k: usize| events[idx[k] as usize].value;
    // Merged stream: (step, Some(k)) for the k-th i-update, (step, None) for j.
    let mut merged: Vec<(u64, Option<usize>)> = Vec::with_capacity(ti.len() + tj.len());
    let (mut a, mut b) = (0, 0);
    while a < ti.len() || b < tj.len() {
        if b >= tj.len() || (a < ti.len() && ti[a] < tj[b]) {
            merged.push((ti[a] as u64, Some(a)));
            a += 1;
        } else {
            merged.push((tj[b] as u64, None));
            b += 1;
        }
    }
    let (mut z, mut count) = (0.0, 0);
    let mut p = 0;
    while p + 4 < merged.len() {
        if let (Some(k1), Some(k2), None) = (merged[p].1, merged[p + 1].1, merged[p + 2].1) {
            let mut q = p + 3;
            while q < merged.len() && merged[q].1.is_none() {
                q += 1;
            }
            if q + 1 < merged.len() && merged[q + 1].1.is_some() && merged[q + 1].0 - merged[p].0 < window {
                let (k3, k4) = (merged[q].1.expect("i-update"), merged[q + 1].1.expect("i-update"));
                z += z_from_values([value(k1), value(k2)], [value(k3), value(k4)]);
                count += 1;
                p = q + 2;
                continue;
            }
        }
        p += 1;
    }
    (z, count)
}

/// Cumulative heuristic statistics over discrete-time blocks.
#[derive(Debug, Clone)]
pub struct HeuristicLearner {
    n: usize,
    k: usize,
    window: u64,
    z_sum: Vec<f64>,
    count: Vec<u64>,
    blocks: usize,
}

impl HeuristicLearner {
    /// `window` overrides the default `3 max(2, ceil(n / k))` and must be at least 5.
    pub fn new(n: usize, k: usize, window: Option<u64>) -> Result<Self, StructureError> {
        if n < 2 || k < 1 {
            return Err(StructureError::InvalidParams("need n >= 2 and k >= 1".into()));
        }
        let window = window.unwrap_or_else(|| heuristic_window(n, k));
        if window < 5 {
            return Err(StructureError::InvalidParams(format!("window {window} cannot hold five updates")));
        }
        Ok(Self { n, k, window, z_sum: vec![0.0; n * n], count: vec![0; n * n], blocks: 0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Accumulate [`heuristic_scan`] over every ordered pair of one block.
    pub fn process_block(&mut self, traj: &Trajectory) -> Result<(), StructureError> {
        require_mode(traj, Mode::Discrete)?;
        if traj.n() != self.n {
            return Err(StructureError::InvalidParams(format!("block has {} sites, expected {}", traj.n(), self.n)));
        }
        let n = self.n;
        let window = self.window;
        let rows: Vec<Vec<(f64, u64)>> = (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| if i == j { (0.0, 0) } else { heuristic_scan(traj, i, j, window) }).collect())
            .collect();
        for (i, row) in rows.into_iter().enumerate() {
            for (j, (z, c)) in row.into_iter().enumerate() {
                self.z_sum[i * n + j] += z;
                self.count[i * n + j] += c;
            }
        }
        self.blocks += 1;
        Ok(())
    }

    /// Mean statistic of candidate `j` for node `i`; zero with no stopping times.
    pub fn z_mean(&self, i: usize, j: usize) -> f64 {
        let c = self.count[i * self.n + j];
        if c == 0 {
            0.0
        } else {
            self.z_sum[i * self.n + j] / c as f64
        }
    }

    pub fn stop_count(&self, i: usize, j: usize) -> u64 {
        self.count[i * self.n + j]
    }

    /// All candidates for node `i`, best first; ties go to the lower index.
    pub fn ranking(&self, i: usize) -> Vec<usize> {
        let mut c: Vec<usize> = (0..self.n).filter(|&j| j != i).collect();
        c.sort_by(|&a, &b| self.z_mean(i, b).total_cmp(&self.z_mean(i, a)).then(a.cmp(&b)));
        c
    }

    pub fn top(&self, i: usize, count: usize) -> Vec<usize> {
        let mut r = self.ranking(i);
        r.truncate(count);
        r
    }

    /// Per-node top-`k` lists as pair statistics.
    pub fn top_pairs(&self) -> Vec<PairStatistic> {
        (0..self.n)
            .flat_map(|i| {
                self.top(i, self.k).into_iter().map(move |j| PairStatistic {
                    i,
                    j,
                    stop_count: self.stop_count(i, j),
                    z_sum: self.z_sum[i * self.n + j],
                    z_mean: self.z_mean(i, j),
                })
            })
            .collect()
    }
}

/// `ceil(3 s / 4)` for a support of size `s`.
pub fn required_overlap(support_size: usize) -> usize {
    (3 * support_size).div_ceil(4)
}

/// Whether `predicted` shares at least `ceil(3 |support| / 4)` sites with `support`.
pub fn overlap_ok(predicted: &[usize], support: &[usize]) -> bool {
    let hits = predicted.iter().filter(|v| support.contains(v)).count();
    hits >= required_overlap(support.len())
}

/// Tracks the consecutive-block success rule for one target node. The
/// prediction for a block is the target together with its top
/// `|support| - 1` candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuccessTracker {
    pub target: usize,
    pub support: Vec<usize>,
    pub stability: usize,
    pub streak: usize,
    pub blocks: usize,
    pub succeeded_at: Option<usize>,
}

impl SuccessTracker {
    /// `support` is the planted monomial's sites including `target`.
    pub fn new(target: usize, support: &[usize], stability: usize) -> Self {
        let mut support = support.to_vec();
        if !support.contains(&target) {
            support.push(target);
        }
        support.sort_unstable();
        Self { target, support, stability: stability.max(1), streak: 0, blocks: 0, succeeded_at: None }
    }

    pub fn prediction(&self, learner: &HeuristicLearner) -> Vec<usize> {
        let mut p = vec![self.target];
        p.extend(learner.top(self.target, self.support.len().saturating_sub(1)));
        p
    }

    /// Record the learner's state after a block; returns whether this block matched.
    pub fn observe(&mut self, learner: &HeuristicLearner) -> bool {
        let ok = overlap_ok(&self.prediction(learner), &self.support);
        self.blocks += 1;
        self.streak = if ok { self.streak + 1 } else { 0 };
        if self.streak >= self.stability && self.succeeded_at.is_none() {
            self.succeeded_at = Some(self.blocks);
        }
        ok
    }

    pub fn succeeded(&self) -> bool {
        self.succeeded_at.is_some()
    }
}

/// Per-block record of a heuristic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    /// Target's top-`k` candidates.
    pub top: Vec<usize>,
    pub matched: bool,
    pub streak: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicReport {
    pub blocks: Vec<BlockReport>,
    pub succeeded_at: Option<usize>,
}

/// Feed blocks until success or the source runs out.
pub fn heuristic_learn(
    blocks: impl IntoIterator<Item = Trajectory>,
    n: usize,
    k: usize,
    window: Option<u64>,
    stability: usize,
    target: usize,
    support: &[usize],
) -> Result<HeuristicReport, StructureError> {
    let mut learner = HeuristicLearner::new(n, k, window)?;
    let mut tracker = SuccessTracker::new(target, support, stability);
    let mut reports = Vec::new();
    for block in blocks {
        learner.process_block(&block)?;
        let matched = tracker.observe(&learner);
        reports.push(BlockReport { block: tracker.blocks, top: learner.top(target, k), matched, streak: tracker.streak });
        if tracker.succeeded() {
            break;
        }
    }
    Ok(HeuristicReport { blocks: reports, succeeded_at: tracker.succeeded_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate_ct, GlauberChain};
    use crate::poly::MultilinearPolynomial;

    fn ev(time: f64, site: u32, value: Spin) -> UpdateEvent {
        UpdateEvent { time, site, value }
    }

    #[test]
    fn derive_params_examples() {
        let p = derive_params(2, 2, 1.0, 1.0, 0.1, 10).unwrap();
        assert_eq!(p.q_burn, 0.5);
        let l = 0.5 * (-6f64).exp() / 128.0;
        assert!((p.window - l).abs() < 1e-18);
        assert!((p.window - 9.683e-6).abs() < 1e-9);
        let kappa = 2.5 * (-6f64).exp() / 64.0;
        assert!((p.kappa - kappa).abs() < 1e-18);
        assert!((p.kappa - 9.683e-5).abs() < 1e-8);
        assert!((p.required / (2000.0 * 2000f64.ln() / (kappa * kappa)) - 1.0).abs() < 1e-12);
        assert_eq!(p.burn_in_blocks, (2f64.ln() / l).ceil() as u64);
        assert!((p.q_good - l.powi(5) / 7776.0).abs() < 1e-40);
        assert!(derive_params(1, 2, 1.0, 1.0, 0.1, 10).is_err());
        assert!(derive_params(2, 2, 1.0, 1.0, 0.0, 10).is_err());
    }

    #[test]
    fn overrides_recompute_dependents() {
        let p = derive_params(3, 2, 1.0, 1.0, 0.1, 6)
            .unwrap()
            .with_overrides(Some(0.2), Some(5), Some(0.01), Some(100.0))
            .unwrap();
        assert_eq!(p.window, 0.2);
        assert!((p.q_good - 0.2f64.powi(5) / 7776.0).abs() < 1e-20);
        assert!((p.horizon - 0.2 * (500.0 + 200.0 / p.q_good)).abs() < 1e-3);
        assert!(p.with_overrides(Some(0.5), None, None, None).is_err());
    }

    fn fixture(events: Vec<UpdateEvent>, horizon: f64) -> Trajectory {
        Trajectory::new(Mode::Continuous, vec![1, 1, 1], events, horizon).unwrap()
    }

    #[test]
    fn no_j_updates_means_no_stops() {
        let traj = fixture(vec![ev(0.1, 0, 1), ev(0.2, 0, -1)], 10.0);
        assert!(find_stopping_times(&traj, 0, 1, 0.3, 1, 10).unwrap().is_empty());
    }

    #[test]
    fn hand_built_pattern_is_found() {
        // L = 0.3, r = 2: block 3 tests window 4 = [1.2, 1.5).
        let traj = fixture(
            vec![ev(1.21, 0, 1), ev(1.25, 0, 1), ev(1.35, 1, -1), ev(1.41, 0, -1), ev(1.45, 0, 1)],
            3.0,
        );
        let stops = find_stopping_times(&traj, 0, 1, 0.3, 2, 10).unwrap();
        assert_eq!(stops, vec![3]);
        let z = z_statistic(&traj, 0, 3, 0.3, 2).unwrap();
        assert_eq!(z, z_from_values([1, 1], [-1, 1]));
        assert_eq!(z, 1.0);
        // Stray i-update in the middle third kills the pattern.
        let broken = fixture(
            vec![ev(1.21, 0, 1), ev(1.25, 0, 1), ev(1.31, 0, 1), ev(1.35, 1, -1), ev(1.41, 0, -1), ev(1.45, 0, 1)],
            3.0,
        );
        assert!(find_stopping_times(&broken, 0, 1, 0.3, 2, 10).unwrap().is_empty());
    }

    #[test]
    fn stops_closer_than_r_keep_only_first() {
        // Windows 4 and 5 both match; with r = 2 only block 3 is taken, with r = 1 both.
        let mut events = Vec::new();
        for w in [4.0, 5.0] {
            let a = w * 0.3;
            events.extend([ev(a + 0.01, 0, 1), ev(a + 0.05, 0, 1), ev(a + 0.15, 1, 1), ev(a + 0.21, 0, 1), ev(a + 0.25, 0, 1)]);
        }
        let traj = fixture(events, 3.0);
        assert_eq!(find_stopping_times(&traj, 0, 1, 0.3, 2, 10).unwrap(), vec![3]);
        assert_eq!(find_stopping_times(&traj, 0, 1, 0.3, 1, 10).unwrap(), vec![4, 5]);
    }

    #[test]
    fn z_values_from_formula() {
        assert_eq!(z_from_values([1, 1], [1, 1]), 0.0);
        assert_eq!(z_from_values([1, 1], [-1, -1]), 1.0);
        assert_eq!(z_from_values([1, -1], [1, 1]), -1.0);
    }

    #[test]
    fn online_scanner_matches_offline_scan() {
        let psi = MultilinearPolynomial::from_terms(4, [(vec![0, 1], 0.5), (vec![2, 3], 0.5)]).unwrap();
        let model = MrfModel::with_derived_bounds(psi);
        let (window, r) = (1.5, 3);
        let traj = simulate_ct(&model, 20000.0, &[1, 1, 1, 1], 17).unwrap();
        let mut online: Vec<(usize, usize, u64, f64)> = Vec::new();
        let mut scanner = OnlinePatternScanner::new(traj.x0(), 0.0, window, r);
        let mut sink = |s: StopRecord<'_>| online.push((s.i, s.j, s.block, s.z));
        for e in traj.events() {
            scanner.push(e, &mut sink);
        }
        scanner.advance_to(traj.horizon(), &mut sink);
        let mut offline = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    for b in find_stopping_times(&traj, i, j, window, r, u64::MAX).unwrap() {
                        offline.push((i, j, b, z_statistic(&traj, i, b, window, r).unwrap()));
                    }
                }
            }
        }
        online.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        offline.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        assert!(offline.len() > 10, "fixture should produce stops, got {}", offline.len());
        assert_eq!(online, offline);
    }

    #[test]
    fn chunked_chain_matches_whole_scan() {
        let psi = MultilinearPolynomial::from_terms(3, [(vec![0, 1], 0.6)]).unwrap();
        let model = MrfModel::with_derived_bounds(psi);
        let whole = simulate_ct(&model, 60000.0, &[1, 1, 1], 5).unwrap();
        let full = find_stopping_times(&whole, 0, 1, 1.5, 2, u64::MAX).unwrap();
        assert!(full.len() > 20, "fixture should produce stops, got {}", full.len());
        let mut chain = GlauberChain::new(&model, Mode::Continuous, &[1, 1, 1], 5).unwrap();
        let mut chunked = Vec::new();
        let mut next = 2;
        for c in 1..=400u64 {
            let seg = chain.run(window_edges(c * 100 - 1, 1.5)[3]);
            let found = find_stopping_times_from(&seg, 0, 1, 1.5, 2, next, u64::MAX).unwrap();
            if let Some(&last) = found.last() {
                next = last + 2;
            }
            chunked.extend(found);
        }
        assert_eq!(full, chunked);
    }

    #[test]
    fn heuristic_window_floor() {
        assert_eq!(heuristic_window(10, 10), 6);
        assert_eq!(heuristic_window(20, 5), 12);
        assert_eq!(heuristic_window(10, 3), 12);
        assert!(HeuristicLearner::new(10, 3, Some(4)).is_err());
        assert!(HeuristicLearner::new(10, 3, Some(10)).is_ok());
    }

    fn dt_block(events: &[(u64, u32, Spin)], n: usize, horizon: f64) -> Trajectory {
        let ev = events.iter().map(|&(t, site, value)| ev(t as f64, site, value)).collect();
        Trajectory::new(Mode::Discrete, vec![1; n], ev, horizon).unwrap()
    }

    #[test]
    fn heuristic_scan_hand_built() {
        // i = 0, j = 1: i(+) i(+) j j i(-) i(+) then a stray run too wide for the window.
        let traj = dt_block(
            &[(1, 0, 1), (2, 0, 1), (3, 1, -1), (5, 1, 1), (6, 0, -1), (7, 0, 1), (20, 0, 1), (21, 0, 1), (22, 1, 1), (40, 0, 1), (41, 0, 1)],
            2,
            50.0,
        );
        let (z, c) = heuristic_scan(&traj, 0, 1, 10);
        assert_eq!(c, 1);
        // Y = (1, 1), Y' = (0, 1): 1 - 0 + 0.
        assert_eq!(z, 1.0);
        let (_, wide) = heuristic_scan(&traj, 0, 1, 100);
        assert_eq!(wide, 2);
        // Interleaved i between the j's breaks the run.
        let broken = dt_block(&[(1, 0, 1), (2, 0, 1), (3, 1, 1), (4, 0, 1), (5, 1, 1), (6, 0, 1), (7, 0, 1)], 2, 10.0);
        assert_eq!(heuristic_scan(&broken, 0, 1, 100).1, 0);
        assert_eq!(heuristic_scan(&broken, 0, 1, 5).1, 0);
    }

    #[test]
    fn success_tracker_requires_streak() {
        let mut learner = HeuristicLearner::new(4, 3, None).unwrap();
        learner.z_sum[1] = 1.0;
        learner.count[1] = 1;
        learner.z_sum[2] = 1.0;
        learner.count[2] = 1;
        let mut t = SuccessTracker::new(0, &[0, 1, 2], 3);
        assert_eq!(t.prediction(&learner), vec![0, 1, 2]);
        assert!(t.observe(&learner) && t.observe(&learner) && !t.succeeded());
        assert!(t.observe(&learner) && t.succeeded());
        assert_eq!(t.succeeded_at, Some(3));
    }

    #[test]
    fn overlap_rule() {
        assert_eq!(required_overlap(3), 3);
        assert_eq!(required_overlap(5), 4);
        assert_eq!(required_overlap(7), 6);
        assert!(overlap_ok(&[0, 1, 2, 3, 9], &[0, 1, 2, 3, 4]));
        assert!(!overlap_ok(&[0, 1, 2, 8, 9], &[0, 1, 2, 3, 4]));
    }
}

//! Glauber dynamics simulation and trajectories.
//!
//! Continuous time uses a single global clock: interarrival times are
//! exponential with rate `n` and each event picks a uniform site, which has the
//! same law as `n` independent rate-1 Poisson clocks. Discrete time picks one
//! uniform site per integer step. Every resample is recorded, including those
//! that leave the spin unchanged.

use std::io::{self, BufRead, Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{check_configuration, MrfModel, PolyError, SiteFields, Spin};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Continuous,
    Discrete,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Continuous => "continuous",
            Mode::Discrete => "discrete",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "continuous" => Ok(Mode::Continuous),
            "discrete" => Ok(Mode::Discrete),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

/// A single resample. In discrete mode `time` holds the integer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateEvent {
    pub time: f64,
    pub site: u32,
    pub value: Spin,
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Config(#[from] PolyError),
    #[error("model has {model} sites but configuration has {config}")]
    SiteCount { model: usize, config: usize },
    #[error("invalid horizon {0}")]
    InvalidHorizon(f64),
    #[error("time {t} outside trajectory range [{start}, {end}]")]
    TimeOutOfRange { t: f64, start: f64, end: f64 },
    #[error("event {index} is out of order or outside the trajectory range")]
    EventOrder { index: usize },
    #[error("event {index} has an invalid site or value")]
    EventContent { index: usize },
    #[error("discrete event {index} has non-integer time")]
    NonIntegerStep { index: usize },
    #[error("trajectory has more events than can be indexed")]
    TooManyEvents,
    #[error("observed site set is empty")]
    EmptyObserved,
    #[error("observed site {site} out of range for n = {n}")]
    ObservedOutOfRange { site: usize, n: usize },
    #[error("trajectory parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An initial configuration and the ordered resample events on `(start, end]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    mode: Mode,
    n: usize,
    x0: Vec<Spin>,
    events: Vec<UpdateEvent>,
    start: f64,
    end: f64,
    site_index: Vec<Vec<u32>>,
    site_times: Vec<Vec<f64>>,
    checkpoint_every: usize,
    checkpoints: Vec<Spin>,
    labels: Option<Vec<usize>>,
}

impl Trajectory {
    /// A trajectory starting at time 0.
    pub fn new(
        mode: Mode,
        x0: Vec<Spin>,
        events: Vec<UpdateEvent>,
        horizon: f64,
    ) -> Result<Self, DynamicsError> {
        Self::with_start(mode, x0, events, 0.0, horizon)
    }

    /// A trajectory whose events lie in `(start, end]`, with `x0` the state at `start`.
    pub fn with_start(
        mode: Mode,
        x0: Vec<Spin>,
        events: Vec<UpdateEvent>,
        start: f64,
        end: f64,
    ) -> Result<Self, DynamicsError> {
        let n = x0.len();
        check_configuration(&x0, n)?;
        if !start.is_finite() || !end.is_finite() || end < start {
            return Err(DynamicsError::InvalidHorizon(end));
        }
        if mode == Mode::Discrete && (start.fract() != 0.0 || end.fract() != 0.0) {
            return Err(DynamicsError::InvalidHorizon(end));
        }
        if events.len() >= u32::MAX as usize {
            return Err(DynamicsError::TooManyEvents);
        }
        let mut prev = start;
        for (index, e) in events.iter().enumerate() {
            if !(e.time > prev) || e.time > end {
                return Err(DynamicsError::EventOrder { index });
            }
            if mode == Mode::Discrete && e.time.fract() != 0.0 {
                return Err(DynamicsError::NonIntegerStep { index });
            }
            if e.site as usize >= n || (e.value != 1 && e.value != -1) {
                return Err(DynamicsError::EventContent { index });
            }
            prev = e.time;
        }
        Ok(Self::build(mode, x0, events, start, end, None))
    }

    fn build(
        mode: Mode,
        x0: Vec<Spin>,
        events: Vec<UpdateEvent>,
        start: f64,
        end: f64,
        labels: Option<Vec<usize>>,
    ) -> Self {
        let n = x0.len();
        let mut site_index = vec![Vec::new(); n];
        let mut site_times = vec![Vec::new(); n];
        for (pos, e) in events.iter().enumerate() {
            site_index[e.site as usize].push(pos as u32);
            site_times[e.site as usize].push(e.time);
        }
        let checkpoint_every = (n / 4).max(1);
        let mut checkpoints = Vec::with_capacity(n * (events.len() / checkpoint_every + 1));
        let mut state = x0.clone();
        checkpoints.extend_from_slice(&state);
        for (pos, e) in events.iter().enumerate() {
            state[e.site as usize] = e.value;
            if (pos + 1) % checkpoint_every == 0 {
                checkpoints.extend_from_slice(&state);
            }
        }
        Self { mode, n, x0, events, start, end, site_index, site_times, checkpoint_every, checkpoints, labels }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn x0(&self) -> &[Spin] {
        &self.x0
    }

    pub fn events(&self) -> &[UpdateEvent] {
        &self.events
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    /// End of the observed range (`T` in continuous mode, the last step in discrete mode).
    pub fn horizon(&self) -> f64 {
        self.end
    }

    /// Positions in [`events`](Self::events) of every update of site `i`.
    pub fn site_index(&self, i: usize) -> &[u32] {
        &self.site_index[i]
    }

    /// Times of every update of site `i`, aligned with [`site_index`](Self::site_index).
    pub fn site_times(&self, i: usize) -> &[f64] {
        &self.site_times[i]
    }

    /// Original site labels after [`mask`](Self::mask); `None` if never masked.
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Original label of local site `i`.
    pub fn label(&self, i: usize) -> usize {
        self.labels.as_ref().map_or(i, |l| l[i])
    }

    /// State at time `t`: `x0` with every event at time `<= t` applied.
    pub fn configuration_at(&self, t: f64) -> Result<Vec<Spin>, DynamicsError> {
        if !(t >= self.start && t <= self.end) {
            return Err(DynamicsError::TimeOutOfRange { t, start: self.start, end: self.end });
        }
        let applied = self.events.partition_point(|e| e.time <= t);
        Ok(self.configuration_after(applied))
    }

    /// State after the first `count` events.
    pub fn configuration_after(&self, count: usize) -> Vec<Spin> {
        let c = count / self.checkpoint_every;
        let mut state = self.checkpoints[c * self.n..(c + 1) * self.n].to_vec();
        for e in &self.events[c * self.checkpoint_every..count] {
            state[e.site as usize] = e.value;
        }
        state
    }

    /// Positions of site `i`'s events with time in the closed interval `[t1, t2]`.
    pub fn site_updates_in(&self, i: usize, t1: f64, t2: f64) -> &[u32] {
        let times = &self.site_times[i];
        let lo = times.partition_point(|&t| t < t1);
        let hi = times.partition_point(|&t| t <= t2);
        &self.site_index[i][lo..hi.max(lo)]
    }

    /// Number of updates of site `i` in the half-open interval `[t1, t2)`.
    #[inline]
    pub fn count_in(&self, i: usize, t1: f64, t2: f64) -> usize {
        let times = &self.site_times[i];
        let lo = times.partition_point(|&t| t < t1);
        let hi = times.partition_point(|&t| t < t2);
        hi.saturating_sub(lo)
    }

    /// Restrict to the updates of `observed` sites, re-indexed in increasing
    /// label order. The original labels are kept.
    pub fn mask(&self, observed: &[usize]) -> Result<Trajectory, DynamicsError> {
        let mut keep: Vec<usize> = observed.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if keep.is_empty() {
            return Err(DynamicsError::EmptyObserved);
        }
        if let Some(&site) = keep.iter().find(|&&s| s >= self.n) {
            return Err(DynamicsError::ObservedOutOfRange { site, n: self.n });
        }
        let mut local = vec![u32::MAX; self.n];
        for (new, &old) in keep.iter().enumerate() {
            local[old] = new as u32;
        }
        let x0 = keep.iter().map(|&s| self.x0[s]).collect();
        let events = self
            .events
            .iter()
            .filter(|e| local[e.site as usize] != u32::MAX)
            .map(|e| UpdateEvent { site: local[e.site as usize], ..*e })
            .collect();
        let labels = keep.iter().map(|&s| self.label(s)).collect();
        Ok(Self::build(self.mode, x0, events, self.start, self.end, Some(labels)))
    }

    /// Write the text format: header, `x0` row, then one event per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        let fmt_time = |t: f64| match self.mode {
            Mode::Continuous => format!("{t:.16e}"),
            Mode::Discrete => format!("{}", t as u64),
        };
        write!(w, "GLBR1 {} {} {}", self.mode.as_str(), self.n, fmt_time(self.end))?;
        if self.start != 0.0 {
            write!(w, " {}", fmt_time(self.start))?;
        }
        writeln!(w)?;
        let row: Vec<String> = self.x0.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(" "))?;
        for e in &self.events {
            writeln!(w, "{} {} {}", fmt_time(e.time), e.site, e.value)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Trajectory, DynamicsError> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, message: &str| DynamicsError::Parse { line: line + 1, message: message.into() };
        let (ln, header) = lines.next().ok_or_else(|| parse_err(0, "missing header"))?;
        let header = header?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() < 4 || fields.len() > 5 || fields[0] != "GLBR1" {
            return Err(parse_err(ln, "expected 'GLBR1 <mode> <n> <horizon> [start]'"));
        }
        let mode: Mode = fields[1].parse().map_err(|m: String| parse_err(ln, &m))?;
        let n: usize = fields[2].parse().map_err(|_| parse_err(ln, "bad site count"))?;
        let end: f64 = fields[3].parse().map_err(|_| parse_err(ln, "bad horizon"))?;
        let start: f64 = match fields.get(4) {
            Some(s) => s.parse().map_err(|_| parse_err(ln, "bad start time"))?,
            None => 0.0,
        };
        let (ln, row) = lines.next().ok_or_else(|| parse_err(1, "missing initial configuration"))?;
        let x0 = row?
            .split_whitespace()
            .map(|s| s.parse::<Spin>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| parse_err(ln, "bad spin"))?;
        if x0.len() != n {
            return Err(parse_err(ln, "initial configuration length differs from n"));
        }
        let mut events = Vec::new();
        for (ln, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let mut next = |what: &str| it.next().ok_or_else(|| parse_err(ln, what));
            let time: f64 = next("missing time")?.parse().map_err(|_| parse_err(ln, "bad time"))?;
            let site: u32 = next("missing site")?.parse().map_err(|_| parse_err(ln, "bad site"))?;
            let value: Spin = next("missing value")?.parse().map_err(|_| parse_err(ln, "bad value"))?;
            events.push(UpdateEvent { time, site, value });
        }
        Trajectory::with_start(mode, x0, events, start, end)
    }

    /// Little-endian binary variant carrying the same fields.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&[match self.mode {
            Mode::Continuous => 0,
            Mode::Discrete => 1,
        }])?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&self.start.to_le_bytes())?;
        w.write_all(&self.end.to_le_bytes())?;
        let x0: Vec<u8> = self.x0.iter().map(|&v| v as u8).collect();
        w.write_all(&x0)?;
        w.write_all(&(self.events.len() as u64).to_le_bytes())?;
        for e in &self.events {
            w.write_all(&e.time.to_le_bytes())?;
            w.write_all(&e.site.to_le_bytes())?;
            w.write_all(&[e.value as u8])?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Trajectory, DynamicsError> {
        let bad = |message: &str| DynamicsError::Parse { line: 0, message: message.into() };
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(bad("not a binary trajectory"));
        }
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let mode = match byte[0] {
            0 => Mode::Continuous,
            1 => Mode::Discrete,
            _ => return Err(bad("bad mode byte")),
        };
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let start = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let end = f64::from_le_bytes(b8);
        let mut x0 = vec![0u8; n];
        r.read_exact(&mut x0)?;
        let x0: Vec<Spin> = x0.into_iter().map(|b| b as Spin).collect();
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut events = Vec::with_capacity(count.min(1 << 24));
        let mut rec = [0u8; 13];
        for _ in 0..count {
            r.read_exact(&mut rec)?;
            events.push(UpdateEvent {
                time: f64::from_le_bytes(rec[0..8].try_into().unwrap()),
                site: u32::from_le_bytes(rec[8..12].try_into().unwrap()),
                value: rec[12] as Spin,
            });
        }
        Trajectory::with_start(mode, x0, events, start, end)
    }
}

const BINARY_MAGIC: &[u8; 6] = b"GLBR1B";

/// A running Glauber chain that can be advanced in pieces. Advancing to `t`
/// in several calls yields exactly the events of a single call.
pub struct GlauberChain<'a> {
    fields: &'a SiteFields,
    mode: Mode,
    n: usize,
    state: Vec<Spin>,
    time: f64,
    pending: Option<f64>,
    times: ChaCha8Rng,
    labels: ChaCha8Rng,
    coins: ChaCha8Rng,
    interarrival: Exp<f64>,
}

impl<'a> GlauberChain<'a> {
    pub fn new(model: &'a MrfModel, mode: Mode, x0: &[Spin], seed: u64) -> Result<Self, DynamicsError> {
        let n = model.n();
        if x0.len() != n {
            return Err(DynamicsError::SiteCount { model: n, config: x0.len() });
        }
        check_configuration(x0, n)?;
        Ok(Self {
            fields: model.fields(),
            mode,
            n,
            state: x0.to_vec(),
            time: 0.0,
            pending: None,
            times: stream(seed, Purpose::EventTimes),
            labels: stream(seed, Purpose::SiteLabels),
            coins: stream(seed, Purpose::UpdateCoins),
            interarrival: Exp::new(n.max(1) as f64).expect("positive rate"),
        })
    }

    pub fn state(&self) -> &[Spin] {
        &self.state
    }

    /// Current time: last advance target in continuous mode, steps taken in discrete mode.
    pub fn time(&self) -> f64 {
        self.time
    }

    fn next_time(&mut self) -> f64 {
        match self.mode {
            Mode::Continuous => *self
                .pending
                .get_or_insert_with(|| self.time + self.interarrival.sample(&mut self.times)),
            Mode::Discrete => self.time + 1.0,
        }
    }

    /// Apply the resample at time `t`, returning the event and `P(+1)`.
    #[inline]
    fn fire(&mut self, t: f64) -> (UpdateEvent, f64) {
        let site = self.labels.random_range(0..self.n);
        let p_plus = self.fields.prob_plus(site, &self.state);
        let value: Spin = if self.coins.random::<f64>() < p_plus { 1 } else { -1 };
        self.state[site] = value;
        self.time = t;
        self.pending = None;
        (UpdateEvent { time: t, site: site as u32, value }, p_plus)
    }

    /// Advance to absolute time `until`, reporting each event and its `P(+1)`.
    pub fn advance_with(&mut self, until: f64, mut observe: impl FnMut(&UpdateEvent, f64)) {
        if self.n == 0 {
            self.time = self.time.max(until);
            return;
        }
        loop {
            let t = self.next_time();
            if t > until {
                break;
            }
            let (event, p) = self.fire(t);
            observe(&event, p);
        }
        if self.mode == Mode::Continuous {
            self.time = self.time.max(until);
        }
    }

    /// Advance to `until` and return the segment as a trajectory.
    pub fn run(&mut self, until: f64) -> Trajectory {
        let start = self.time;
        let x0 = self.state.clone();
        let mut events = Vec::new();
        self.advance_with(until, |e, _| events.push(*e));
        let end = until.max(start);
        Trajectory::build(self.mode, x0, events, start, end, None)
    }

    /// Advance by `duration` (time units or steps) and return the segment.
    pub fn run_for(&mut self, duration: f64) -> Trajectory {
        let until = self.time + duration;
        self.run(until)
    }
}

/// Continuous-time trajectory on `[0, horizon]`.
pub fn simulate_ct(model: &MrfModel, horizon: f64, x0: &[Spin], seed: u64) -> Result<Trajectory, DynamicsError> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(DynamicsError::InvalidHorizon(horizon));
    }
    Ok(GlauberChain::new(model, Mode::Continuous, x0, seed)?.run(horizon))
}

/// Discrete-time trajectory of `steps` single-site updates.
pub fn simulate_dt(model: &MrfModel, steps: u64, x0: &[Spin], seed: u64) -> Result<Trajectory, DynamicsError> {
    Ok(GlauberChain::new(model, Mode::Discrete, x0, seed)?.run(steps as f64))
}

/// A uniformly random initial configuration.
pub fn random_configuration(n: usize, seed: u64) -> Vec<Spin> {
    let mut rng = stream(seed, Purpose::InitialState);
    (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()
}

//! Generalised backoff processes: births, Bernoulli sends, kind-specific
//! escape rules and end-of-step arrivals, in count or identity mode, plus
//! the synchronised-send couplings.

use crate::send_sequence::{SendSequence, SequenceError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use std::collections::HashSet;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid initial population: {0}")]
    InvalidInitialPopulation(String),
    #[error("mode unsupported: {0}")]
    ModeUnsupported(String),
    #[error("coupling precondition violated: {0}")]
    CouplingPreconditionViolated(String),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

/// Ball name: birth step, bin of entry, stream and ordinal within the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BallId {
    pub birth: u64,
    pub entry_bin: u32,
    pub cohort: u8,
    pub ordinal: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProcessKind {
    /// Escape iff exactly one ball sends; `cohorts` streams are pure labels.
    Backoff { cohorts: usize },
    /// No escapes below `j`; every send from `j` escapes.
    JJammed { j: usize },
    /// No escapes. With `track = Some(k)` balls leaving bin `k` are dropped,
    /// which leaves bins `1..=k` unaffected since balls only move up.
    ExternallyJammed { track: Option<usize> },
    /// Two streams; a stream escapes one sender when it sends and the
    /// other stream is silent.
    TwoStream,
    /// Streams A, B behave as a backoff process; C is blocked by all three.
    UnderBackoff,
    /// Bernoulli(`nu`) arrivals on `1..=j`, every send from `j` escapes.
    ConstantEscape { j: usize, nu: f64 },
    /// Arrival rate computed from the noise in `sets`.
    Escape {
        j: usize,
        sets: Vec<Vec<usize>>,
        lambda: f64,
        set_floor: f64,
    },
}

impl ProcessKind {
    pub fn streams(&self) -> usize {
        match self {
            ProcessKind::Backoff { cohorts } => (*cohorts).max(1),
            ProcessKind::TwoStream => 2,
            ProcessKind::UnderBackoff => 3,
            _ => 1,
        }
    }

    fn top_bin(&self) -> Option<usize> {
        match self {
            ProcessKind::JJammed { j } | ProcessKind::ConstantEscape { j, .. } | ProcessKind::Escape { j, .. } => Some(*j),
            ProcessKind::ExternallyJammed { track } => *track,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Birth {
    Poisson(f64),
    Zero,
    Fixed(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Per-bin counts; sends drawn as one binomial per bin.
    Count,
    /// Per-bin counts; sends drawn ball by ball in canonical order.
    CountPerBall,
    /// Named balls; sends drawn ball by ball in canonical order.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialPopulation {
    Empty,
    /// Counts for bins `1, 2, ...` of the first stream.
    Counts(Vec<u64>),
    /// Independent Poisson counts with these means for bins `1, 2, ...`.
    Poisson(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
enum Population {
    Counts(Vec<Vec<u64>>),
    Balls(Vec<Vec<Vec<BallId>>>),
}

/// Per-step counts, summed over streams; index is the bin.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub t: u64,
    pub births: u64,
    pub sends: Vec<u64>,
    pub escapes: Vec<u64>,
    pub arrivals: Vec<u64>,
    pub total_sends: u64,
    /// Arrival rate used at this step (escape kinds only).
    pub nu: Option<f64>,
}

impl StepReport {
    pub fn total_escapes(&self) -> u64 {
        self.escapes.iter().sum()
    }

    /// Sends by balls that were not newborn this step.
    pub fn non_newborn_sends(&self) -> u64 {
        self.total_sends - self.sends.first().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EscapeChoice {
    None,
    All,
    One(usize),
}

pub(crate) fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
    }
}

pub(crate) fn binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else {
        Binomial::new(n, p).expect("valid binomial").sample(rng)
    }
}

/// One generalised backoff process.
#[derive(Debug, Clone)]
pub struct Process {
    pub kind: ProcessKind,
    pub seq: Arc<SendSequence>,
    pub t: u64,
    pub births: Vec<Birth>,
    pub mode: Mode,
    pop: Population,
    rng: ChaCha8Rng,
    probs: Vec<f64>,
}

fn default_births(kind: &ProcessKind, lambda: f64) -> Vec<Birth> {
    match kind {
        ProcessKind::ConstantEscape { .. } | ProcessKind::Escape { .. } => vec![Birth::Zero],
        _ => {
            let m = kind.streams();
            vec![Birth::Poisson(lambda / m as f64); m]
        }
    }
}

impl Process {
    /// `lambda` is the total birth rate, split evenly across streams.
    pub fn new(
        kind: ProcessKind,
        seq: Arc<SendSequence>,
        lambda: f64,
        start: u64,
        initial: InitialPopulation,
        seed: u64,
        mode: Mode,
    ) -> Result<Self, EngineError> {
        let births = default_births(&kind, lambda);
        Self::with_births(kind, seq, births, start, initial, seed, mode)
    }

    pub fn with_births(
        kind: ProcessKind,
        seq: Arc<SendSequence>,
        births: Vec<Birth>,
        start: u64,
        initial: InitialPopulation,
        seed: u64,
        mode: Mode,
    ) -> Result<Self, EngineError> {
        let streams = kind.streams();
        if births.len() != streams {
            return Err(EngineError::InvalidInitialPopulation(format!(
                "{} birth laws for {} streams",
                births.len(),
                streams
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts: Vec<u64> = match initial {
            InitialPopulation::Empty => Vec::new(),
            InitialPopulation::Counts(c) => c,
            InitialPopulation::Poisson(m) => {
                if m.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(EngineError::InvalidInitialPopulation("negative or non-finite mean".into()));
                }
                m.iter().map(|v| poisson(&mut rng, *v)).collect()
            }
        };
        if let Some(top) = kind.top_bin() {
            if counts.iter().enumerate().any(|(i, c)| i + 1 > top && *c > 0) {
                return Err(EngineError::InvalidInitialPopulation(format!("mass above bin {top}")));
            }
        }
        let mut first = vec![0u64];
        first.extend(counts);
        let pop = match mode {
            Mode::Identity => {
                let mut s: Vec<Vec<Vec<BallId>>> = vec![Vec::new(); streams];
                s[0] = first
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        (0..*c)
                            .map(|o| BallId {
                                birth: start,
                                entry_bin: i as u32,
                                cohort: 0,
                                ordinal: o as u32,
                            })
                            .collect()
                    })
                    .collect();
                Population::Balls(s)
            }
            _ => {
                let mut s = vec![Vec::new(); streams];
                s[0] = first;
                Population::Counts(s)
            }
        };
        let mut p = Process {
            kind,
            seq,
            t: start,
            births,
            mode,
            pop,
            rng,
            probs: Vec::new(),
        };
        p.ensure_probs(p.max_bin() + 1)?;
        Ok(p)
    }

    fn ensure_probs(&mut self, len: usize) -> Result<(), SequenceError> {
        while self.probs.len() < len {
            let k = self.probs.len();
            self.probs.push(self.seq.prob(k)?);
        }
        Ok(())
    }

    pub fn streams(&self) -> usize {
        self.kind.streams()
    }

    /// Highest bin index that may be non-empty.
    pub fn max_bin(&self) -> usize {
        match &self.pop {
            Population::Counts(s) => s.iter().map(|b| b.len()).max().unwrap_or(1).saturating_sub(1),
            Population::Balls(s) => s.iter().map(|b| b.len()).max().unwrap_or(1).saturating_sub(1),
        }
    }

    /// Occupancy of `bin` in `stream`.
    pub fn count(&self, stream: usize, bin: usize) -> u64 {
        match &self.pop {
            Population::Counts(s) => s[stream].get(bin).copied().unwrap_or(0),
            Population::Balls(s) => s[stream].get(bin).map_or(0, |b| b.len() as u64),
        }
    }

    /// Occupancy per bin summed over streams, `0..=max_bin`.
    pub fn counts(&self) -> Vec<u64> {
        let n = self.max_bin() + 1;
        (0..n).map(|i| (0..self.streams()).map(|d| self.count(d, i)).sum()).collect()
    }

    pub fn backlog(&self) -> u64 {
        self.counts().iter().sum()
    }

    pub fn balls(&self, stream: usize, bin: usize) -> Option<&[BallId]> {
        match &self.pop {
            Population::Balls(s) => Some(s[stream].get(bin).map_or(&[][..], |b| &b[..])),
            Population::Counts(_) => None,
        }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Noise `sum_{i in S} p_i b_i` of the current occupancy.
    pub fn noise(&self, set: &[usize]) -> f64 {
        set.iter()
            .map(|&i| self.seq.prob(i).unwrap_or(0.0) * (0..self.streams()).map(|d| self.count(d, i)).sum::<u64>() as f64)
            .sum()
    }

    fn escape_nu(&self) -> Option<f64> {
        match &self.kind {
            ProcessKind::ConstantEscape { nu, .. } => Some(*nu),
            ProcessKind::Escape {
                sets,
                lambda,
                set_floor,
                ..
            } => Some(escape_rate(sets, *lambda, *set_floor, |s| self.noise(s))),
            _ => None,
        }
    }

    fn draw_births(&mut self) -> Vec<u64> {
        let births = self.births.clone();
        births
            .iter()
            .map(|b| match b {
                Birth::Poisson(m) => poisson(&mut self.rng, *m),
                Birth::Zero => 0,
                Birth::Fixed(n) => *n,
            })
            .collect()
    }

    /// Advances the clock by one step.
    pub fn step(&mut self) -> Result<StepReport, EngineError> {
        let births = self.draw_births();
        self.step_with(&births, None)
    }

    /// Step with given births per stream; `forced` fixes the send decision
    /// of particular balls (identity mode only).
    pub(crate) fn step_with(
        &mut self,
        births: &[u64],
        forced: Option<&dyn Fn(&BallId) -> Option<bool>>,
    ) -> Result<StepReport, EngineError> {
        let t = self.t + 1;
        let nu = self.escape_nu();
        let streams = self.streams();
        let top = self.max_bin() + 2;
        self.ensure_probs(top - 1)?;
        let probs = &self.probs;
        let rng = &mut self.rng;

        // Births into bin 0, then sends per stream and bin.
        let mut send_counts: Vec<Vec<u64>> = vec![vec![0; top]; streams];
        let mut senders: Vec<Vec<Vec<BallId>>> = Vec::new();
        match &mut self.pop {
            Population::Counts(s) => {
                for d in 0..streams {
                    if s[d].is_empty() {
                        s[d].push(0);
                    }
                    s[d][0] += births[d];
                    for i in 0..s[d].len() {
                        let n = s[d][i];
                        send_counts[d][i] = match self.mode {
                            Mode::Count => binomial(rng, n, probs[i]),
                            _ => (0..n).filter(|_| rng.random::<f64>() < probs[i]).count() as u64,
                        };
                    }
                }
            }
            Population::Balls(s) => {
                senders = vec![vec![Vec::new(); top]; streams];
                for d in 0..streams {
                    if s[d].is_empty() {
                        s[d].push(Vec::new());
                    }
                    for o in 0..births[d] {
                        s[d][0].push(BallId {
                            birth: t,
                            entry_bin: 0,
                            cohort: d as u8,
                            ordinal: o as u32,
                        });
                    }
                    for i in 0..s[d].len() {
                        let bin = std::mem::take(&mut s[d][i]);
                        let mut stay = Vec::with_capacity(bin.len());
                        for ball in bin {
                            let sends = match forced.and_then(|f| f(&ball)) {
                                Some(v) => v,
                                None => rng.random::<f64>() < probs[i],
                            };
                            if sends {
                                senders[d][i].push(ball);
                            } else {
                                stay.push(ball);
                            }
                        }
                        send_counts[d][i] = senders[d][i].len() as u64;
                        s[d][i] = stay;
                    }
                }
            }
        }

        let choices = escape_rule(&self.kind, &send_counts, rng);

        let arrivals: Vec<u64> = match (nu, self.kind.top_bin()) {
            (Some(nu), Some(j)) => (1..=j).map(|_| u64::from(rng.random::<f64>() < nu)).collect(),
            _ => Vec::new(),
        };

        let mut report = StepReport {
            t,
            births: births.iter().sum(),
            sends: vec![0; top],
            escapes: vec![0; top],
            arrivals: vec![0; top.max(arrivals.len() + 1)],
            total_sends: 0,
            nu,
        };
        for (i, a) in arrivals.iter().enumerate() {
            report.arrivals[i + 1] = *a;
        }
        let drop_from = match self.kind {
            ProcessKind::ExternallyJammed { track: Some(k) } => Some(k),
            _ => None,
        };

        match &mut self.pop {
            Population::Counts(s) => {
                for d in 0..streams {
                    s[d].resize(top.max(arrivals.len() + 1), 0);
                    let mut moving = 0u64;
                    for i in 0..s[d].len() {
                        let sent = send_counts[d].get(i).copied().unwrap_or(0);
                        let esc = match choices[d].get(i).copied().unwrap_or(EscapeChoice::None) {
                            EscapeChoice::None => 0,
                            EscapeChoice::All => sent,
                            EscapeChoice::One(_) => 1,
                        };
                        report.sends[i] += sent;
                        report.escapes[i] += esc;
                        let arr = if d == 0 { arrivals.get(i.wrapping_sub(1)).copied().unwrap_or(0) } else { 0 };
                        let stay = s[d][i] - sent;
                        s[d][i] = stay + moving + if i >= 1 { arr } else { 0 };
                        moving = if drop_from == Some(i) { 0 } else { sent - esc };
                    }
                    trim(&mut s[d]);
                }
            }
            Population::Balls(s) => {
                for d in 0..streams {
                    s[d].resize(top.max(arrivals.len() + 1), Vec::new());
                    let mut moving: Vec<BallId> = Vec::new();
                    for i in 0..s[d].len() {
                        let mut sent = std::mem::take(&mut senders[d][i]);
                        let n_sent = sent.len() as u64;
                        match choices[d].get(i).copied().unwrap_or(EscapeChoice::None) {
                            EscapeChoice::None => {}
                            EscapeChoice::All => {
                                report.escapes[i] += n_sent;
                                sent.clear();
                            }
                            EscapeChoice::One(k) => {
                                report.escapes[i] += 1;
                                sent.remove(k);
                            }
                        }
                        report.sends[i] += n_sent;
                        let mut bin = Vec::new();
                        if d == 0 && i >= 1 && arrivals.get(i - 1).copied().unwrap_or(0) > 0 {
                            bin.push(BallId {
                                birth: t,
                                entry_bin: i as u32,
                                cohort: 0,
                                ordinal: 0,
                            });
                        }
                        bin.append(&mut std::mem::take(&mut s[d][i]));
                        bin.append(&mut moving);
                        s[d][i] = bin;
                        moving = if drop_from == Some(i) { Vec::new() } else { sent };
                    }
                    while s[d].len() > 1 && s[d].last().is_some_and(|b| b.is_empty()) {
                        s[d].pop();
                    }
                }
            }
        }
        report.total_sends = report.sends.iter().sum();
        trim(&mut report.sends);
        trim(&mut report.escapes);
        trim(&mut report.arrivals);
        self.t = t;
        Ok(report)
    }

    /// Applies `step` `horizon` times, handing every report to `observer`.
    pub fn run<F: FnMut(&Process, &StepReport)>(&mut self, horizon: u64, mut observer: F) -> Result<(), EngineError> {
        for _ in 0..horizon {
            let r = self.step()?;
            observer(self, &r);
        }
        Ok(())
    }

    /// `run` that keeps every step report.
    pub fn run_collect(&mut self, horizon: u64) -> Result<Vec<StepReport>, EngineError> {
        let mut out = Vec::with_capacity(horizon as usize);
        self.run(horizon, |_, r| out.push(r.clone()))?;
        Ok(out)
    }
}

fn trim(v: &mut Vec<u64>) {
    while v.len() > 1 && v.last() == Some(&0) {
        v.pop();
    }
}

/// `nu = exp(-Xi/192)` where `Xi = lambda |S^| / 80` if the union `S^` of
/// quiet sets (noise `<= lambda |S| / 80`) has at least `set_floor` bins.
pub fn escape_rate<N: Fn(&[usize]) -> f64>(sets: &[Vec<usize>], lambda: f64, set_floor: f64, noise: N) -> f64 {
    let mut union: HashSet<usize> = HashSet::new();
    for s in sets {
        if noise(s) <= lambda * s.len() as f64 / 80.0 {
            union.extend(s.iter().copied());
        }
    }
    let size = union.len() as f64;
    let xi = if size >= set_floor { lambda * size / 80.0 } else { 0.0 };
    (-xi / 192.0).exp()
}

fn escape_rule<R: Rng>(kind: &ProcessKind, sends: &[Vec<u64>], rng: &mut R) -> Vec<Vec<EscapeChoice>> {
    let streams = sends.len();
    let width = sends.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut out = vec![vec![EscapeChoice::None; width]; streams];
    let stream_total = |d: usize| -> u64 { sends[d].iter().sum() };
    match kind {
        ProcessKind::Backoff { .. } => {
            let total: u64 = (0..streams).map(stream_total).sum();
            if total == 1 {
                for d in 0..streams {
                    for (i, s) in sends[d].iter().enumerate() {
                        if *s == 1 {
                            out[d][i] = EscapeChoice::All;
                        }
                    }
                }
            }
        }
        ProcessKind::JJammed { j } | ProcessKind::ConstantEscape { j, .. } | ProcessKind::Escape { j, .. } => {
            for i in *j..width {
                out[0][i] = EscapeChoice::All;
            }
        }
        ProcessKind::ExternallyJammed { .. } => {}
        ProcessKind::TwoStream => {
            let (a, b) = (stream_total(0), stream_total(1));
            let winner = match (a, b) {
                (0, b) if b > 0 => Some((1, b)),
                (a, 0) if a > 0 => Some((0, a)),
                _ => None,
            };
            if let Some((d, total)) = winner {
                let mut pick = rng.random_range(0..total);
                for (i, s) in sends[d].iter().enumerate() {
                    if pick < *s {
                        let k = rng.random_range(0..*s) as usize;
                        out[d][i] = EscapeChoice::One(k);
                        break;
                    }
                    pick -= s;
                }
            }
        }
        ProcessKind::UnderBackoff => {
            let ab = stream_total(0) + stream_total(1);
            let abc = ab + stream_total(2);
            for d in 0..2 {
                if ab == 1 {
                    for (i, s) in sends[d].iter().enumerate() {
                        if *s == 1 {
                            out[d][i] = EscapeChoice::All;
                        }
                    }
                }
            }
            if abc == 1 {
                for (i, s) in sends[2].iter().enumerate() {
                    if *s == 1 {
                        out[2][i] = EscapeChoice::All;
                    }
                }
            }
        }
    }
    out
}

/// Subset-invariant violations found after one coupled step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CouplingCheck {
    /// `(invariant, stream, bin)` for every violated inclusion.
    pub violations: Vec<(&'static str, usize, usize)>,
}

fn coupling_supported(lower: &ProcessKind, upper: &ProcessKind) -> bool {
    match (lower, upper) {
        (ProcessKind::Backoff { cohorts: a }, ProcessKind::Backoff { cohorts: b }) => a == b,
        (ProcessKind::TwoStream, ProcessKind::Backoff { cohorts }) => *cohorts == 2,
        (ProcessKind::UnderBackoff, ProcessKind::Backoff { cohorts }) => *cohorts == 3,
        _ => false,
    }
}

/// One step of the standard coupling of `lower` under `upper`: births
/// per stream are nested, balls present in both send together, escapes
/// follow each kind's own rule. Both processes must be in identity mode
/// with equal clocks.
pub fn coupled_step_standard(
    lower: &mut Process,
    upper: &mut Process,
) -> Result<(StepReport, StepReport, CouplingCheck), EngineError> {
    if lower.mode != Mode::Identity || upper.mode != Mode::Identity {
        return Err(EngineError::ModeUnsupported("couplings need identity mode".into()));
    }
    if !coupling_supported(&lower.kind, &upper.kind) || lower.t != upper.t {
        return Err(EngineError::CouplingPreconditionViolated(format!(
            "{:?} under {:?}",
            lower.kind, upper.kind
        )));
    }
    let streams = lower.streams();
    let mut lower_births = Vec::with_capacity(streams);
    let mut upper_births = Vec::with_capacity(streams);
    for d in 0..streams {
        let (l, u) = match (lower.births[d], upper.births[d]) {
            (Birth::Poisson(a), Birth::Poisson(b)) if a <= b => {
                let n = poisson(&mut lower.rng, a);
                (n, n + poisson(&mut lower.rng, b - a))
            }
            (Birth::Zero, Birth::Poisson(b)) => (0, poisson(&mut lower.rng, b)),
            (Birth::Zero, Birth::Zero) => (0, 0),
            (Birth::Fixed(a), Birth::Fixed(b)) if a <= b => (a, b),
            _ => {
                return Err(EngineError::CouplingPreconditionViolated(
                    "lower birth law does not sit under the upper one".into(),
                ))
            }
        };
        lower_births.push(l);
        upper_births.push(u);
    }

    // Members of lower before sends, to check Inv-B afterwards.
    let before: Vec<Vec<HashSet<BallId>>> = (0..streams)
        .map(|d| {
            (0..=lower.max_bin())
                .map(|i| lower.balls(d, i).unwrap().iter().copied().collect())
                .collect()
        })
        .collect();
    let lower_report = lower.step_with(&lower_births, None)?;

    // Recover the lower process's sends: balls of `before` bin i that are
    // now in bin i+1 or escaped.
    let mut lower_sent: HashSet<BallId> = HashSet::new();
    let mut lower_member: HashSet<BallId> = HashSet::new();
    for d in 0..streams {
        for (i, set) in before[d].iter().enumerate() {
            let still: HashSet<BallId> = lower.balls(d, i).unwrap().iter().copied().collect();
            for b in set {
                lower_member.insert(*b);
                if !still.contains(b) {
                    lower_sent.insert(*b);
                }
            }
        }
        // Newborns of this step (born into bin 0, all of which send).
        for o in 0..lower_births[d] {
            let id = BallId {
                birth: lower.t,
                entry_bin: 0,
                cohort: d as u8,
                ordinal: o as u32,
            };
            lower_member.insert(id);
            if lower.probs[0] >= 1.0 || !lower.balls(d, 0).unwrap().contains(&id) {
                lower_sent.insert(id);
            }
        }
    }

    let mut check = CouplingCheck::default();
    for d in 0..streams {
        for (i, set) in before[d].iter().enumerate() {
            let upper_bin: HashSet<BallId> = upper.balls(d, i).unwrap().iter().copied().collect();
            if !set.is_subset(&upper_bin) {
                check.violations.push(("B", d, i));
            }
        }
    }

    let upper_before: Vec<Vec<HashSet<BallId>>> = (0..streams)
        .map(|d| {
            (0..=upper.max_bin())
                .map(|i| upper.balls(d, i).unwrap().iter().copied().collect())
                .collect()
        })
        .collect();
    let forced = |b: &BallId| -> Option<bool> {
        if lower_member.contains(b) {
            Some(lower_sent.contains(b))
        } else {
            None
        }
    };
    let upper_report = upper.step_with(&upper_births, Some(&forced))?;

    // Inv-s: lower senders of bin i also sent in upper.
    for d in 0..streams {
        for (i, set) in before[d].iter().enumerate() {
            let upper_still: HashSet<BallId> = upper.balls(d, i).unwrap().iter().copied().collect();
            for b in set {
                if lower_sent.contains(b) && upper_still.contains(b) {
                    check.violations.push(("s", d, i));
                }
            }
            let _ = &upper_before;
        }
    }
    // Inv-b: after the step every lower bin sits inside the upper bin.
    for d in 0..streams {
        for i in 0..=lower.max_bin() {
            let upper_bin: HashSet<BallId> = upper.balls(d, i).unwrap().iter().copied().collect();
            if lower.balls(d, i).unwrap().iter().any(|b| !upper_bin.contains(b)) {
                check.violations.push(("b", d, i));
            }
        }
    }
    Ok((lower_report, upper_report, check))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::send_sequence::Family;

    fn seq(probs: Vec<f64>) -> Arc<SendSequence> {
        Arc::new(SendSequence::explicit(probs).unwrap())
    }

    #[test]
    fn empty_backoff_start() {
        let p = Process::new(
            ProcessKind::Backoff { cohorts: 1 },
            Arc::new(SendSequence::binary_exponential()),
            0.5,
            0,
            InitialPopulation::Empty,
            1,
            Mode::Count,
        )
        .unwrap();
        assert_eq!(p.backlog(), 0);
        assert_eq!(p.t, 0);
    }

    #[test]
    fn single_sender_escapes() {
        let s = Arc::new(SendSequence::new(Family::Constant { p: 1.0 }).unwrap());
        let mut p = Process::with_births(
            ProcessKind::Backoff { cohorts: 1 },
            s,
            vec![Birth::Zero],
            0,
            InitialPopulation::Counts(vec![1]),
            3,
            Mode::Identity,
        )
        .unwrap();
        let r = p.step().unwrap();
        assert_eq!(r.total_sends, 1);
        assert_eq!(r.total_escapes(), 1);
        assert_eq!(p.backlog(), 0);
    }

    #[test]
    fn jammed_rejects_mass_above_j() {
        let e = Process::new(
            ProcessKind::JJammed { j: 1 },
            seq(vec![1.0, 0.5, 0.5]),
            0.5,
            0,
            InitialPopulation::Counts(vec![0, 1]),
            0,
            Mode::Count,
        );
        assert!(matches!(e, Err(EngineError::InvalidInitialPopulation(_))));
    }

    #[test]
    fn poisson_start_is_reproducible() {
        let mk = || {
            Process::new(
                ProcessKind::JJammed { j: 2 },
                seq(vec![1.0, 0.5, 0.5]),
                0.5,
                0,
                InitialPopulation::Poisson(vec![10.0, 2.0]),
                99,
                Mode::Count,
            )
            .unwrap()
        };
        assert_eq!(mk().counts(), mk().counts());
    }

    #[test]
    fn escape_rate_examples() {
        assert_eq!(escape_rate(&[], 0.1, 1e4, |_| 0.0), 1.0);
        let big: Vec<usize> = (1..=10_000).collect();
        let nu = escape_rate(&[big], 0.1, 1e4, |_| 0.0);
        assert!((nu - (-12.5f64 / 192.0).exp()).abs() < 1e-15);
        assert!((nu - 0.93697).abs() < 1e-5);
    }

    #[test]
    fn count_and_identity_modes_agree() {
        let s = Arc::new(SendSequence::binary_exponential());
        for kind in [
            ProcessKind::Backoff { cohorts: 1 },
            ProcessKind::JJammed { j: 3 },
            ProcessKind::TwoStream,
            ProcessKind::UnderBackoff,
            ProcessKind::ConstantEscape { j: 3, nu: 0.3 },
        ] {
            let mk = |mode| {
                Process::new(kind.clone(), s.clone(), 0.9, 0, InitialPopulation::Counts(vec![2, 1]), 17, mode).unwrap()
            };
            let mut a = mk(Mode::CountPerBall);
            let mut b = mk(Mode::Identity);
            for _ in 0..200 {
                let ra = a.step().unwrap();
                let rb = b.step().unwrap();
                assert_eq!(ra, rb, "{kind:?}");
                assert_eq!(a.counts(), b.counts(), "{kind:?}");
            }
        }
    }

    #[test]
    fn conservation_per_step() {
        let s = Arc::new(SendSequence::new(Family::Polynomial { exponent: 1.0 }).unwrap());
        let mut p = Process::new(
            ProcessKind::Backoff { cohorts: 1 },
            s,
            0.9,
            0,
            InitialPopulation::Empty,
            5,
            Mode::Count,
        )
        .unwrap();
        for _ in 0..500 {
            let before = p.backlog();
            let r = p.step().unwrap();
            assert!(r.total_escapes() <= 1);
            if r.total_escapes() == 1 {
                assert_eq!(r.total_sends, 1);
            }
            assert_eq!(p.backlog(), before + r.births - r.total_escapes());
        }
    }

    #[test]
    fn standard_coupling_keeps_subsets() {
        let s = Arc::new(SendSequence::binary_exponential());
        let mut lo = Process::new(
            ProcessKind::Backoff { cohorts: 1 },
            s.clone(),
            0.2,
            0,
            InitialPopulation::Empty,
            7,
            Mode::Identity,
        )
        .unwrap();
        let mut hi = Process::new(
            ProcessKind::Backoff { cohorts: 1 },
            s,
            0.5,
            0,
            InitialPopulation::Empty,
            8,
            Mode::Identity,
        )
        .unwrap();
        for _ in 0..300 {
            let (_, _, c) = coupled_step_standard(&mut lo, &mut hi).unwrap();
            assert!(c.violations.is_empty(), "{:?}", c.violations);
        }
        assert!(hi.backlog() >= lo.backlog());
    }

    #[test]
    fn coupling_needs_identity_mode() {
        let s = Arc::new(SendSequence::binary_exponential());
        let mk = |m| {
            Process::new(ProcessKind::Backoff { cohorts: 1 }, s.clone(), 0.3, 0, InitialPopulation::Empty, 1, m).unwrap()
        };
        let (mut a, mut b) = (mk(Mode::Count), mk(Mode::Identity));
        assert!(matches!(coupled_step_standard(&mut a, &mut b), Err(EngineError::ModeUnsupported(_))));
    }
}

//! Observers and statistics over simulated runs.

use crate::engine::{Process, StepReport};
use crate::recurrence::{af_good, check_conditions, rs_good, ConditionParams, ConditionReport, EscapeConstants};
use crate::send_sequence::{SendSequence, SequenceError};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

/// `sum_{i in S} p_i b_i`; `occupancy[i]` is bin `i`.
pub fn noise(occupancy: &[u64], seq: &SendSequence, set: &[usize]) -> Result<f64, SequenceError> {
    let mut n = 0.0;
    for &i in set {
        let b = occupancy.get(i).copied().unwrap_or(0);
        if b > 0 {
            n += seq.prob(i)? * b as f64;
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleSendBound {
    pub bound: f64,
    /// Both hypotheses hold: `|S| >= set_floor` and noise `>= lambda |S| / 80`.
    pub applicable: bool,
}

/// `exp(-N_S / 16)`, the bound on the chance of at most one send.
pub fn single_send_bound(
    occupancy: &[u64],
    seq: &SendSequence,
    lambda: f64,
    set: &[usize],
    set_floor: f64,
) -> Result<SingleSendBound, SequenceError> {
    let n = noise(occupancy, seq, set)?;
    let size = set.len() as f64;
    Ok(SingleSendBound {
        bound: (-n / 16.0).exp(),
        applicable: size >= set_floor && n >= lambda * size / 80.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonFit {
    pub mean: f64,
    pub variance: f64,
    pub var_ratio: f64,
    pub chi2_p: f64,
    pub buckets: usize,
}

/// Compares samples against `Po(mean)`: dispersion ratio and a chi-square
/// test with buckets merged until every expected count is at least 5.
pub fn poisson_gof(samples: &[u64], mean: f64) -> Result<PoissonFit, MetricsError> {
    if samples.len() < 100 {
        return Err(MetricsError::InsufficientSamples {
            needed: 100,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let m = samples.iter().sum::<u64>() as f64 / n;
    let var = samples.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (n - 1.0);
    let var_ratio = if m == 0.0 && var == 0.0 { 1.0 } else { var / m };
    if mean <= 0.0 {
        let p = if samples.iter().all(|&x| x == 0) { 1.0 } else { 0.0 };
        return Ok(PoissonFit {
            mean: m,
            variance: var,
            var_ratio,
            chi2_p: p,
            buckets: 1,
        });
    }

    // Cells 0..top-1 exact and an open cell ">= top", merged left to right
    // until each expected count reaches 5.
    let top = *samples.iter().max().unwrap() as usize;
    let mut observed = vec![0u64; top + 1];
    for &x in samples {
        observed[x as usize] += 1;
    }
    let mut cells = Vec::with_capacity(top + 1);
    let (mut pk, mut cdf) = ((-mean).exp(), 0.0);
    for k in 0..top {
        cells.push(n * pk);
        cdf += pk;
        pk *= mean / (k + 1) as f64;
    }
    cells.push(n * (1.0 - cdf).max(0.0));
    let mut buckets: Vec<(f64, u64)> = Vec::new();
    let (mut e, mut o) = (0.0, 0u64);
    for (k, cell) in cells.iter().enumerate() {
        e += cell;
        o += observed[k];
        if e >= 5.0 {
            buckets.push((e, o));
            e = 0.0;
            o = 0;
        }
    }
    match buckets.last_mut() {
        Some(last) => {
            last.0 += e;
            last.1 += o;
        }
        None => buckets.push((e, o)),
    }
    let chi2: f64 = buckets.iter().map(|(e, o)| (*o as f64 - e).powi(2) / e).sum();
    let df = buckets.len().saturating_sub(1);
    let chi2_p = if df == 0 {
        1.0
    } else {
        ChiSquared::new(df as f64).expect("positive degrees of freedom").sf(chi2)
    };
    Ok(PoissonFit {
        mean: m,
        variance: var,
        var_ratio,
        chi2_p,
        buckets: buckets.len(),
    })
}

/// Mean and sample variance of each bin across replicas.
pub fn bin_moments(replicas: &[Vec<u64>]) -> Vec<(f64, f64)> {
    let width = replicas.iter().map(|r| r.len()).max().unwrap_or(0);
    let n = replicas.len() as f64;
    (0..width)
        .map(|i| {
            let xs = replicas.iter().map(|r| r.get(i).copied().unwrap_or(0) as f64);
            let m = xs.clone().sum::<f64>() / n;
            let v = if n > 1.0 { xs.map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            (m, v)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BottleConstants {
    pub c_b: f64,
    pub alpha_b: f64,
    /// `floor(c_b ln i)`.
    pub j: usize,
    pub threshold: f64,
}

impl BottleConstants {
    pub fn new(lambda: f64, i: u64) -> Self {
        let c_b = 1.0 / (8.0 * (7.0 / lambda).ln());
        let alpha_b = c_b * lambda / 640.0;
        let li = (i as f64).ln();
        BottleConstants {
            c_b,
            alpha_b,
            j: (c_b * li).floor() as usize,
            threshold: alpha_b * li,
        }
    }
}

/// `(E_N, E_s)` for one step: the noise of bins `[j]` before the step
/// reaches `alpha_b ln i`, and some non-newborn ball sent.
pub fn bottle_event(
    before: &[u64],
    report: &StepReport,
    seq: &SendSequence,
    consts: &BottleConstants,
) -> Result<(bool, bool), SequenceError> {
    let bins: Vec<usize> = (1..=consts.j).collect();
    let n = noise(before, seq, &bins)?;
    Ok((n >= consts.threshold, report.non_newborn_sends() > 0))
}

/// Runs `bottle_event` over `(occupancy before, report)` pairs.
pub fn bottle_events(
    steps: &[(Vec<u64>, StepReport)],
    seq: &SendSequence,
    lambda: f64,
    i: u64,
) -> Result<Vec<(bool, bool)>, SequenceError> {
    let c = BottleConstants::new(lambda, i);
    steps.iter().map(|(b, r)| bottle_event(b, r, seq, &c)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudorandomnessReport {
    pub conditions: ConditionReport,
    pub af_good: bool,
    pub rs_good: bool,
}

/// Con1-Con4 with slacks, plus the AF- and RS-good verdicts for `d`.
pub fn pseudorandomness_report(
    m: &[f64],
    params: &ConditionParams,
    consts: &EscapeConstants,
    seq: &SendSequence,
) -> Result<PseudorandomnessReport, SequenceError> {
    Ok(PseudorandomnessReport {
        conditions: check_conditions(m, params, consts, seq)?,
        af_good: af_good(m, params.lambda, params.d, consts, seq)?,
        rs_good: rs_good(m, params.lambda, params.d, params.varpi, params.theta, params.g, consts, seq)?,
    })
}

/// One observed step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: u64,
    pub backlog: u64,
    pub escapes: u64,
    pub noise: Vec<f64>,
    pub max_bin: usize,
}

impl Observation {
    pub fn of(p: &Process, r: &StepReport, sets: &[Vec<usize>]) -> Self {
        let counts = p.counts();
        Observation {
            t: r.t,
            backlog: counts.iter().sum(),
            escapes: r.total_escapes(),
            noise: sets.iter().map(|s| p.noise(s)).collect(),
            max_bin: counts.iter().rposition(|c| *c > 0).unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub start: u64,
    pub steps: u64,
    pub backlog_mean: f64,
    pub noise_mean: Vec<f64>,
    pub escapes: u64,
    pub escapes_cum: u64,
    pub empty_visits: u64,
    pub max_bin: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sojourn {
    /// First step at which the system was empty again after leaving it.
    Returned(u64),
    /// No return up to this step.
    Censored(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub windows: Vec<WindowRecord>,
    pub sojourn: Option<Sojourn>,
}

/// Aggregates consecutive windows of `window` observations.
pub fn summarize(trace: &[Observation], window: usize) -> RunSummary {
    assert!(window >= 1, "window must be positive");
    let mut windows = Vec::new();
    let mut cum = 0;
    for chunk in trace.chunks(window) {
        let n = chunk.len() as f64;
        let width = chunk[0].noise.len();
        let escapes: u64 = chunk.iter().map(|o| o.escapes).sum();
        cum += escapes;
        windows.push(WindowRecord {
            start: chunk[0].t,
            steps: chunk.len() as u64,
            backlog_mean: chunk.iter().map(|o| o.backlog as f64).sum::<f64>() / n,
            noise_mean: (0..width).map(|s| chunk.iter().map(|o| o.noise[s]).sum::<f64>() / n).collect(),
            escapes,
            escapes_cum: cum,
            empty_visits: chunk.iter().filter(|o| o.backlog == 0).count() as u64,
            max_bin: chunk.iter().map(|o| o.max_bin).max().unwrap_or(0),
        });
    }
    let sojourn = trace.last().map(|last| {
        let mut left = false;
        for o in trace {
            if o.backlog > 0 {
                left = true;
            } else if left {
                return Sojourn::Returned(o.t);
            }
        }
        Sojourn::Censored(last.t)
    });
    RunSummary { windows, sojourn }
}

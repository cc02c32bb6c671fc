//! The volume process: a `j`-jammed process whose population is thinned
//! to the new expectations whenever the high-level state changes.

use super::rule::{hls_with_f, is_back_transition, Outcome, RuleVariant};
use super::state::{HighLevelState, HlsContext, HlsError};
use crate::engine::{binomial, InitialPopulation, Mode, Process, ProcessKind, StepReport};
use crate::recurrence::f_step;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct VolumeState {
    pub hls: HighLevelState,
    /// `F^Psi(t)` for bins `1..=j`.
    pub f: Vec<f64>,
    jammed: Process,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct VolumeStep {
    pub report: StepReport,
    pub outcome: Outcome,
    pub changed: bool,
    pub back_transition: bool,
}

impl VolumeState {
    /// Starts at `state` with the given counts for bins `1..=j`.
    pub fn new(ctx: &HlsContext, state: HighLevelState, counts: Vec<u64>, seed: u64) -> Result<Self, HlsError> {
        ctx.validate(&state)?;
        if counts.len() != state.j {
            return Err(HlsError::InvariantViolation(format!("{} counts for j = {}", counts.len(), state.j)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jammed = jammed(ctx, &state, counts, rng.random())?;
        Ok(VolumeState {
            f: state.z.clone(),
            hls: state,
            jammed,
            rng,
        })
    }

    pub fn t(&self) -> u64 {
        self.jammed.t
    }

    /// Occupancy of bins `1..=j`.
    pub fn counts(&self) -> Vec<u64> {
        (1..=self.hls.j).map(|k| self.jammed.count(0, k)).collect()
    }

    pub fn step(&mut self, ctx: &HlsContext) -> Result<VolumeStep, HlsError> {
        let report = self
            .jammed
            .step()
            .map_err(|e| HlsError::InvariantViolation(e.to_string()))?;
        let t = self.jammed.t;
        let b = self.counts();
        let p: Vec<f64> = (0..=self.hls.j).map(|k| ctx.p(k)).collect();
        let mut next = vec![0.0; self.hls.j];
        f_step(&p, ctx.lambda, &vec![0.0; self.hls.j], &self.f, &mut next);
        self.f = next;
        let outcome = hls_with_f(ctx, &self.hls, &b, t, &self.f, RuleVariant::Faithful)?;
        let changed = outcome.state != self.hls;
        let back_transition = is_back_transition(&self.hls, &outcome.state, outcome.tag);
        if changed {
            let new = &outcome.state;
            let mut thinned = vec![0u64; new.j];
            for k in 1..=self.hls.j {
                let fk = self.f[k - 1];
                let ratio = if fk > 0.0 { (new.z[k - 1] / fk).min(1.0) } else { 0.0 };
                thinned[k - 1] = binomial(&mut self.rng, b[k - 1], ratio);
            }
            let seed = self.rng.random();
            let mut y = jammed(ctx, new, thinned, seed)?;
            y.t = t;
            self.jammed = y;
            self.f = new.z.clone();
            self.hls = new.clone();
        }
        Ok(VolumeStep {
            report,
            outcome,
            changed,
            back_transition,
        })
    }
}

fn jammed(ctx: &HlsContext, state: &HighLevelState, counts: Vec<u64>, seed: u64) -> Result<Process, HlsError> {
    let mut p = Process::new(
        ProcessKind::JJammed { j: state.j },
        ctx.seq.clone(),
        ctx.lambda,
        state.tau,
        InitialPopulation::Counts(counts),
        seed,
        Mode::Count,
    )
    .map_err(|e| HlsError::InvariantViolation(e.to_string()))?;
    p.t = state.tau;
    Ok(p)
}

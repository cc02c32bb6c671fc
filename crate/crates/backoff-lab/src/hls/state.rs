use crate::classify::{classify_range, BinClass, ClassKind, ClassifierConstants};
use crate::recurrence::{f_at, mu_canonical, RecurrenceError};
use crate::send_sequence::{SendSequence, SequenceError};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HlsError {
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("domain violation: {0}")]
    DomainViolation(String),
    #[error("bin {j} beyond the precomputed limit {limit}")]
    BinLimit { j: usize, limit: usize },
    #[error(transparent)]
    Recurrence(#[from] RecurrenceError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateType {
    Failure,
    Initialising,
    Advancing,
    Filling,
    Refilling,
    Stabilising,
}

impl StateType {
    pub fn name(self) -> &'static str {
        match self {
            StateType::Failure => "failure",
            StateType::Initialising => "initialising",
            StateType::Advancing => "advancing",
            StateType::Filling => "filling",
            StateType::Refilling => "refilling",
            StateType::Stabilising => "stabilising",
        }
    }
}

impl fmt::Display for StateType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `(g, tau, j, z, S, type)`; `z[k-1]` is bin `k`, sets hold bin indices.
#[derive(Debug, Clone, PartialEq)]
pub struct HighLevelState {
    pub g: u64,
    pub tau: u64,
    pub j: usize,
    pub z: Vec<f64>,
    pub sets: Vec<Vec<usize>>,
    pub kind: StateType,
}

/// Dwell exponents of the rule: `t >= tau + j^e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleConstants {
    pub advance_exp: f64,
    pub refill_exp: f64,
    pub stabilise_exp: f64,
}

impl RuleConstants {
    pub fn genuine(phi: f64) -> Self {
        RuleConstants {
            advance_exp: 24.0,
            refill_exp: phi + 46.0,
            stabilise_exp: phi + 72.0,
        }
    }

    pub fn synthetic() -> Self {
        RuleConstants {
            advance_exp: 1.0,
            refill_exp: 1.5,
            stabilise_exp: 2.0,
        }
    }

    pub fn dwell_over(exp: f64, tau: u64, j: usize, t: u64) -> bool {
        (t - tau) as f64 >= (j as f64).powf(exp)
    }
}

/// Everything the rule needs about one `(seq, lambda)` pair, precomputed
/// for bins `1..=limit`.
#[derive(Debug, Clone)]
pub struct HlsContext {
    pub seq: Arc<SendSequence>,
    pub lambda: f64,
    pub consts: ClassifierConstants,
    pub rule: RuleConstants,
    pub limit: usize,
    classes: Vec<BinClass>,
    mu: Vec<f64>,
    probs: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

const REL_TOL: f64 = 1e-12;

fn log_ge(a: f64, b: f64) -> bool {
    a >= b - REL_TOL * b.abs().max(1.0)
}

impl HlsContext {
    pub fn new(
        seq: Arc<SendSequence>,
        consts: ClassifierConstants,
        rule: RuleConstants,
        limit: usize,
    ) -> Result<Self, HlsError> {
        let lambda = consts.lambda;
        let classes = classify_range(&seq, &consts, limit)?;
        let mu = mu_canonical(&seq, lambda, consts.phi, limit)?;
        let probs = (0..=limit).map(|k| seq.prob(k)).collect::<Result<Vec<_>, _>>()?;
        let weights = (0..=limit).map(|k| seq.weight(k)).collect::<Result<Vec<_>, _>>()?;
        let log_weights = (0..=limit).map(|k| seq.log_weight(k)).collect::<Result<Vec<_>, _>>()?;
        Ok(HlsContext {
            seq,
            lambda,
            consts,
            rule,
            limit,
            classes,
            mu,
            probs,
            weights,
            log_weights,
        })
    }

    /// Synthetic classifier and rule constants.
    pub fn synthetic(seq: Arc<SendSequence>, lambda: f64, limit: usize) -> Result<Self, HlsError> {
        Self::new(seq, ClassifierConstants::synthetic(lambda), RuleConstants::synthetic(), limit)
    }

    fn check(&self, j: usize) -> Result<(), HlsError> {
        if j == 0 || j > self.limit {
            Err(HlsError::BinLimit { j, limit: self.limit })
        } else {
            Ok(())
        }
    }

    pub fn class(&self, j: usize) -> Result<&BinClass, HlsError> {
        self.check(j)?;
        Ok(&self.classes[j - 1])
    }

    pub fn covered(&self, j: usize) -> Result<bool, HlsError> {
        Ok(self.class(j)?.kind.is_covered())
    }

    /// `mu_k^gamma` at the canonical damping.
    pub fn mu(&self, k: usize) -> f64 {
        self.mu[k - 1]
    }

    pub fn p(&self, k: usize) -> f64 {
        self.probs[k]
    }

    pub fn w(&self, k: usize) -> f64 {
        self.weights[k]
    }

    /// `Upsilon_{j, >= W}` from `ln W`.
    pub fn upsilon(&self, j: usize, log_threshold: f64) -> Vec<usize> {
        (1..j).filter(|&l| log_ge(self.log_weights[l], log_threshold)).collect()
    }

    /// `Upsilon_{j, >= j^2}`.
    pub fn heavy(&self, j: usize) -> Vec<usize> {
        self.upsilon(j, 2.0 * (j as f64).ln())
    }

    /// `Upsilon_{j, >= j^chi}`.
    pub fn very_heavy(&self, j: usize) -> Vec<usize> {
        self.upsilon(j, self.consts.chi * (j as f64).ln())
    }

    /// `Upsilon_{j+1, >= j^2}`: bins of `[j]` with weight at least `j^2`.
    pub fn heavy_through(&self, j: usize) -> Vec<usize> {
        self.upsilon(j + 1, 2.0 * (j as f64).ln())
    }

    /// Whether `W_k < j^2`.
    pub fn light(&self, k: usize, j: usize) -> bool {
        !log_ge(self.log_weights[k], 2.0 * (j as f64).ln())
    }

    /// `sum_{k in S} p_k b_k`, with `b[k-1]` the count of bin `k` and
    /// missing entries read as zero.
    pub fn noise(&self, set: &[usize], b: &[u64]) -> f64 {
        set.iter().map(|&k| self.probs[k] * b.get(k - 1).copied().unwrap_or(0) as f64).sum()
    }

    /// Noise floor (T3) for every set of the family.
    pub fn noise_floor_holds(&self, sets: &[Vec<usize>], b: &[u64]) -> bool {
        sets.iter().all(|s| self.noise(s, b) >= self.lambda * s.len() as f64 / 40.0)
    }

    /// `F^Psi(t)` for bins `1..=j`.
    pub fn f_of(&self, state: &HighLevelState, t: u64) -> Result<Vec<f64>, HlsError> {
        if t < state.tau {
            return Err(HlsError::DomainViolation(format!("t = {t} before tau = {}", state.tau)));
        }
        let zero = vec![0.0; state.j];
        Ok(f_at(&self.seq, self.lambda, &zero, &state.z, t - state.tau)?)
    }

    fn mu_prefix(&self, j: usize) -> Vec<f64> {
        let mut z: Vec<f64> = self.mu[..j - 1].to_vec();
        z.push(0.0);
        z
    }

    pub fn failure(&self, g: u64, tau: u64, j: usize) -> HighLevelState {
        HighLevelState {
            g,
            tau,
            j,
            z: vec![0.0; j],
            sets: Vec::new(),
            kind: StateType::Failure,
        }
    }

    pub fn initialising(&self, tau: u64, j: usize) -> Result<HighLevelState, HlsError> {
        self.check(j)?;
        Ok(HighLevelState {
            g: 0,
            tau,
            j,
            z: (1..=j).map(|k| 0.75 * self.lambda * self.weights[k]).collect(),
            sets: Vec::new(),
            kind: StateType::Initialising,
        })
    }

    pub fn advancing(&self, g: u64, tau: u64, j: usize) -> Result<HighLevelState, HlsError> {
        let class = self.class(j)?;
        let set = match class.kind {
            ClassKind::ManyCovered => self.upsilon(j, class.wtilde.w.ln()),
            ClassKind::HeavyCovered => self.heavy(j),
            k => {
                return Err(HlsError::InvariantViolation(format!(
                    "advancing state needs a covered bin; bin {j} is {}",
                    k.name()
                )))
            }
        };
        Ok(HighLevelState {
            g,
            tau,
            j,
            z: self.mu_prefix(j),
            sets: nonempty(vec![set]),
            kind: StateType::Advancing,
        })
    }

    fn require_exposed(&self, j: usize, what: &str) -> Result<(), HlsError> {
        let class = self.class(j)?;
        if class.kind.is_covered() {
            return Err(HlsError::InvariantViolation(format!(
                "{what} state needs an exposed bin; bin {j} is {}",
                class.kind.name()
            )));
        }
        Ok(())
    }

    fn singletons(&self, j: usize) -> Vec<Vec<usize>> {
        self.very_heavy(j).into_iter().map(|k| vec![k]).collect()
    }

    pub fn filling(&self, g: u64, tau: u64, j: usize, z_j: f64) -> Result<HighLevelState, HlsError> {
        self.require_exposed(j, "filling")?;
        let class = self.class(j)?;
        let heavy = self.heavy(j);
        let low: Vec<usize> = self
            .upsilon(j, class.wtilde.w.ln())
            .into_iter()
            .filter(|k| !heavy.contains(k))
            .collect();
        let mut sets = vec![low];
        sets.extend(self.singletons(j));
        let mut z = self.mu_prefix(j);
        z[j - 1] = z_j;
        Ok(HighLevelState {
            g,
            tau,
            j,
            z,
            sets: nonempty(sets),
            kind: StateType::Filling,
        })
    }

    /// `high` gives `z_k` for bins of `[j]` with `W_k >= j^2`; light bins
    /// are zero.
    pub fn refilling<F: Fn(usize) -> f64>(&self, g: u64, tau: u64, j: usize, high: F) -> Result<HighLevelState, HlsError> {
        self.require_exposed(j, "refilling")?;
        let z = (1..=j).map(|k| if self.light(k, j) { 0.0 } else { high(k) }).collect();
        Ok(HighLevelState {
            g,
            tau,
            j,
            z,
            sets: nonempty(self.singletons(j)),
            kind: StateType::Refilling,
        })
    }

    pub fn stabilising(&self, g: u64, tau: u64, j: usize, z_j: f64) -> Result<HighLevelState, HlsError> {
        self.require_exposed(j, "stabilising")?;
        let lnj = (j as f64).ln();
        let cut = (lnj * lnj).floor() as usize;
        let first: Vec<usize> = (1..j).filter(|&k| k <= cut && self.light(k, j)).collect();
        let second: Vec<usize> = (1..j).filter(|&k| k > cut && self.light(k, j)).collect();
        let mut sets = vec![first, second];
        sets.extend(self.singletons(j));
        let mut z = self.mu_prefix(j);
        z[j - 1] = z_j;
        Ok(HighLevelState {
            g,
            tau,
            j,
            z,
            sets: nonempty(sets),
            kind: StateType::Stabilising,
        })
    }

    /// Checks a state against the invariants of its type.
    pub fn validate(&self, s: &HighLevelState) -> Result<(), HlsError> {
        let bad = |m: String| Err(HlsError::InvariantViolation(m));
        if s.z.len() != s.j {
            return bad(format!("z has length {} for j = {}", s.z.len(), s.j));
        }
        if s.z.iter().any(|v| !(*v >= 0.0)) {
            return bad("negative entry in z".into());
        }
        let mut seen = vec![false; s.j + 1];
        for set in &s.sets {
            for &k in set {
                if k == 0 || k > s.j {
                    return bad(format!("set member {k} outside [{}]", s.j));
                }
                if seen[k] {
                    return bad(format!("sets overlap at {k}"));
                }
                seen[k] = true;
            }
        }
        let expect = match s.kind {
            StateType::Failure => self.failure(s.g, s.tau, s.j),
            StateType::Initialising => {
                if s.g != 0 {
                    return bad("initialising state with g != 0".into());
                }
                self.initialising(s.tau, s.j)?
            }
            StateType::Advancing => self.advancing(s.g, s.tau, s.j)?,
            StateType::Filling => self.filling(s.g, s.tau, s.j, s.z[s.j - 1])?,
            StateType::Refilling => self.refilling(s.g, s.tau, s.j, |k| s.z[k - 1])?,
            StateType::Stabilising => self.stabilising(s.g, s.tau, s.j, s.z[s.j - 1])?,
        };
        if expect != *s {
            return bad(format!("{} state does not match its definition", s.kind));
        }
        Ok(())
    }
}

fn nonempty(sets: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    sets.into_iter().filter(|s| !s.is_empty()).collect()
}

//! Send sequences `p_0 = 1, p_1, p_2, ...` and their weights `W_k = 1/p_k`.
//!
//! Weights are handled in natural-log space; the raw weight is only a
//! convenience and saturates to `+inf` once it leaves the `f64` range.

use crate::classify::ClassifierConstants;
use thiserror::Error;

const CACHE_LEN: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SequenceError {
    #[error("invalid family parameter: {0}")]
    InvalidFamilyParameter(String),
    #[error("bin {index} is beyond the explicit list (length {len})")]
    IndexUnavailable { index: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Constant { p: f64 },
    BinaryExponential,
    Geometric { base: u64 },
    Polynomial { exponent: f64 },
    /// `probs[k]` is `p_k`; `probs[0]` must be 1.
    Explicit { probs: Vec<f64> },
    /// Alternates `C^{-k}` (even intervals) and `1/2` (odd intervals) along
    /// the breakpoints `schedule = (a_0 = 0, a_1, ...)`. The last interval is
    /// open-ended.
    InterleavedAlohaExp { base: u64, schedule: Vec<u64> },
    /// Sequence with infinitely many weakly exposed bins: `C^{-a_k}` at the
    /// tower points `a_k = (2C)^{a_{k-1}}` (k >= start), a run of
    /// `a_k^{-chi}` just below each of them and `1/2` elsewhere.
    WeaklyExposedExample { base: u64, start: u32, lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SendSequence {
    family: Family,
    log_w: Vec<f64>,
    /// Tower points with their run lengths, only for the weakly exposed family.
    towers: Vec<(u64, u64)>,
    chi: f64,
}

impl SendSequence {
    pub fn new(family: Family) -> Result<Self, SequenceError> {
        validate(&family)?;
        let mut seq = SendSequence {
            family,
            log_w: Vec::new(),
            towers: Vec::new(),
            chi: 0.0,
        };
        if let Family::WeaklyExposedExample { base, start, lambda } = seq.family {
            let consts = ClassifierConstants::genuine(lambda);
            seq.chi = consts.chi;
            seq.towers = tower_points(base, start, &consts);
        }
        let n = match &seq.family {
            Family::Explicit { probs } => probs.len(),
            _ => CACHE_LEN,
        };
        seq.log_w = (0..n).map(|k| seq.compute_log_weight(k)).collect();
        Ok(seq)
    }

    pub fn binary_exponential() -> Self {
        Self::new(Family::BinaryExponential).expect("valid family")
    }

    pub fn explicit(probs: Vec<f64>) -> Result<Self, SequenceError> {
        Self::new(Family::Explicit { probs })
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// Number of bins for which the sequence is defined, if finite.
    pub fn defined_len(&self) -> Option<usize> {
        match &self.family {
            Family::Explicit { probs } => Some(probs.len()),
            _ => None,
        }
    }

    pub fn prob(&self, k: usize) -> Result<f64, SequenceError> {
        self.check_index(k)?;
        Ok(match &self.family {
            Family::Constant { p } => {
                if k == 0 {
                    1.0
                } else {
                    *p
                }
            }
            Family::BinaryExponential => pow2_neg(k),
            Family::Geometric { base } => (*base as f64).powi(-(k.min(i32::MAX as usize) as i32)),
            Family::Polynomial { exponent } => {
                if k == 0 {
                    1.0
                } else {
                    (k as f64).powf(-exponent)
                }
            }
            Family::Explicit { probs } => probs[k],
            _ => (-self.log_weight(k)?).exp(),
        })
    }

    pub fn log_weight(&self, k: usize) -> Result<f64, SequenceError> {
        self.check_index(k)?;
        Ok(match self.log_w.get(k) {
            Some(v) => *v,
            None => self.compute_log_weight(k),
        })
    }

    /// `W_k`, or `+inf` when it is not representable.
    pub fn weight(&self, k: usize) -> Result<f64, SequenceError> {
        self.check_index(k)?;
        Ok(match &self.family {
            Family::Constant { p } if k > 0 => 1.0 / p,
            Family::BinaryExponential => pow2(k),
            Family::Geometric { base } => (*base as f64).powi(k.min(i32::MAX as usize) as i32),
            Family::Polynomial { exponent } if k > 0 => (k as f64).powf(*exponent),
            Family::Explicit { probs } => 1.0 / probs[k],
            _ if k == 0 => 1.0,
            _ => self.log_weight(k)?.exp(),
        })
    }

    fn check_index(&self, k: usize) -> Result<(), SequenceError> {
        if let Family::Explicit { probs } = &self.family {
            if k >= probs.len() {
                return Err(SequenceError::IndexUnavailable {
                    index: k,
                    len: probs.len(),
                });
            }
        }
        Ok(())
    }

    fn compute_log_weight(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let kf = k as f64;
        match &self.family {
            Family::Constant { p } => -p.ln(),
            Family::BinaryExponential => kf * std::f64::consts::LN_2,
            Family::Geometric { base } => kf * (*base as f64).ln(),
            Family::Polynomial { exponent } => exponent * kf.ln(),
            Family::Explicit { probs } => -probs[k].ln(),
            Family::InterleavedAlohaExp { base, schedule } => {
                let k64 = k as u64;
                let interval = schedule.partition_point(|&a| a <= k64) - 1;
                if interval % 2 == 0 {
                    kf * (*base as f64).ln()
                } else {
                    std::f64::consts::LN_2
                }
            }
            Family::WeaklyExposedExample { base, .. } => {
                let k64 = k as u64;
                for &(a, run) in &self.towers {
                    if k64 == a {
                        return kf * (*base as f64).ln();
                    }
                    if k64 < a && k64 >= a.saturating_sub(run) {
                        return self.chi * (a as f64).ln();
                    }
                }
                std::f64::consts::LN_2
            }
        }
    }
}

fn pow2(k: usize) -> f64 {
    if k > 1100 {
        f64::INFINITY
    } else {
        2f64.powi(k as i32)
    }
}

fn pow2_neg(k: usize) -> f64 {
    if k > 1100 {
        0.0
    } else {
        2f64.powi(-(k as i32))
    }
}

/// Tower points `a_k` (k >= start) that fit in `u64`, with run lengths
/// `R(k) = ceil(C_Upsilon LL(a_k) / lambda)`.
fn tower_points(base: u64, start: u32, consts: &ClassifierConstants) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let two_c = 2.0 * base as f64;
    let mut a: f64 = 0.0;
    let mut k = 0u32;
    loop {
        if k >= start {
            if a >= u64::MAX as f64 {
                break;
            }
            let ak = a as u64;
            let run = (consts.c_upsilon * consts.ll_of(ak as f64) / consts.lambda).ceil();
            out.push((ak, run.min(u64::MAX as f64) as u64));
        }
        let next = two_c.powf(a);
        if !next.is_finite() || next >= u64::MAX as f64 {
            break;
        }
        a = next;
        k += 1;
    }
    out
}

fn validate(family: &Family) -> Result<(), SequenceError> {
    let bad = |msg: String| Err(SequenceError::InvalidFamilyParameter(msg));
    match family {
        Family::Constant { p } => {
            if !(*p > 0.0 && *p <= 1.0) {
                return bad(format!("constant probability {p} not in (0,1]"));
            }
        }
        Family::BinaryExponential => {}
        Family::Geometric { base } => {
            if *base < 2 {
                return bad(format!("geometric base {base} must be an integer >= 2"));
            }
        }
        Family::Polynomial { exponent } => {
            if !(*exponent > 0.0) || !exponent.is_finite() {
                return bad(format!("polynomial exponent {exponent} must be positive"));
            }
        }
        Family::Explicit { probs } => {
            if probs.is_empty() {
                return bad("explicit list is empty".into());
            }
            if probs[0] != 1.0 {
                return bad(format!("explicit p_0 = {} but must be 1", probs[0]));
            }
            if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(**p > 0.0 && **p <= 1.0)) {
                return bad(format!("explicit p_{i} = {p} not in (0,1]"));
            }
        }
        Family::InterleavedAlohaExp { base, schedule } => {
            if *base < 2 {
                return bad(format!("interleaved base {base} must be an integer >= 2"));
            }
            if schedule.first() != Some(&0) {
                return bad("schedule must start with a_0 = 0".into());
            }
            if schedule.windows(2).any(|w| w[0] >= w[1]) {
                return bad("schedule must be strictly increasing".into());
            }
        }
        Family::WeaklyExposedExample { base, start, lambda } => {
            if *base < 2 {
                return bad(format!("base {base} must be an integer >= 2"));
            }
            if *start < 1 {
                return bad("start index must be at least 1".into());
            }
            if !(*lambda > 0.0 && *lambda < 1.0) {
                return bad(format!("rate {lambda} not in (0,1)"));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapReport {
    /// `passes[j-1]` tells whether `log W_j <= j ln(2/lambda)`.
    pub passes: Vec<bool>,
    pub first_failure: Option<usize>,
}

/// Checks `W_j <= (2/lambda)^j` for `j in 1..=j_max`.
pub fn validate_cap(seq: &SendSequence, lambda: f64, j_max: usize) -> Result<CapReport, SequenceError> {
    let per_bin = (2.0 / lambda).ln();
    let mut passes = Vec::with_capacity(j_max);
    for j in 1..=j_max {
        passes.push(seq.log_weight(j)? <= j as f64 * per_bin);
    }
    let first_failure = passes.iter().position(|ok| !ok).map(|i| i + 1);
    Ok(CapReport { passes, first_failure })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fam(f: Family) -> SendSequence {
        SendSequence::new(f).unwrap()
    }

    #[test]
    fn binary_exponential_values() {
        let s = SendSequence::binary_exponential();
        assert_eq!(s.prob(3).unwrap(), 0.125);
        assert_eq!(s.prob(0).unwrap(), 1.0);
        assert!((s.log_weight(10).unwrap() - 6.931471805599453).abs() < 1e-12);
    }

    #[test]
    fn polynomial_and_constant() {
        let s = fam(Family::Polynomial { exponent: 2.0 });
        assert!((s.prob(3).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(s.prob(0).unwrap(), 1.0);
        let c = fam(Family::Constant { p: 0.5 });
        assert_eq!(c.prob(7).unwrap(), 0.5);
        assert_eq!(c.prob(0).unwrap(), 1.0);
    }

    #[test]
    fn geometric_log_weight_beyond_f64() {
        let s = fam(Family::Geometric { base: 10 });
        assert!((s.prob(4).unwrap() - 1e-4).abs() < 1e-18);
        assert!((s.log_weight(400).unwrap() - 921.0340371976183).abs() < 1e-9);
        assert!(s.weight(400).unwrap().is_infinite());
    }

    #[test]
    fn interleaved_even_interval() {
        let s = fam(Family::InterleavedAlohaExp {
            base: 10,
            schedule: vec![0, 20, 40],
        });
        assert!((s.prob(5).unwrap() - 1e-5).abs() < 1e-18);
        assert_eq!(s.prob(25).unwrap(), 0.5);
        assert!((s.log_weight(45).unwrap() - 45.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn explicit_beyond_list() {
        let s = SendSequence::explicit(vec![1.0, 0.5]).unwrap();
        assert_eq!(
            s.prob(2),
            Err(SequenceError::IndexUnavailable { index: 2, len: 2 })
        );
        assert!(SendSequence::explicit(vec![0.5]).is_err());
        assert!(SendSequence::explicit(vec![]).is_err());
        assert!(SendSequence::explicit(vec![1.0, 1.5]).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(SendSequence::new(Family::Geometric { base: 1 }).is_err());
        assert!(SendSequence::new(Family::Polynomial { exponent: 0.0 }).is_err());
        assert!(SendSequence::new(Family::InterleavedAlohaExp {
            base: 10,
            schedule: vec![0, 5, 5]
        })
        .is_err());
        assert!(SendSequence::new(Family::Constant { p: 0.0 }).is_err());
    }

    #[test]
    fn weakly_exposed_structure() {
        let s = fam(Family::WeaklyExposedExample {
            base: 10,
            start: 2,
            lambda: 0.5,
        });
        // a_2 = 20 is the first tower point; the run just below it has
        // weight 20^chi and the rest is ALOHA.
        assert!((s.log_weight(20).unwrap() - 20.0 * 10f64.ln()).abs() < 1e-9);
        assert!((s.log_weight(19).unwrap() - 1000.0 * 20f64.ln()).abs() < 1e-6);
        assert!((s.log_weight(21).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(s.prob(0).unwrap(), 1.0);
    }

    #[test]
    fn cap_examples() {
        let r = validate_cap(&SendSequence::binary_exponential(), 0.5, 50).unwrap();
        assert!(r.passes.iter().all(|p| *p));
        assert_eq!(r.first_failure, None);
        let r = validate_cap(&fam(Family::Constant { p: 1.0 }), 0.5, 10).unwrap();
        assert_eq!(r.first_failure, None);
        let r = validate_cap(&fam(Family::Geometric { base: 10 }), 1.9, 3).unwrap();
        assert_eq!(r.first_failure, Some(1));
    }
}

//! Mean-tracking recurrences (`f`, `F`, `h`) and the constants derived from
//! them: `mu^Gamma`, the fill times, `kappa`, the escape constants, excess
//! and the pseudorandomness conditions.

use crate::hls::state::HighLevelState;
use crate::send_sequence::{SendSequence, SequenceError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecurrenceError {
    #[error("incompatible lengths: expected {expected}, got {got}")]
    IncompatibleLengths { expected: usize, got: usize },
    #[error("numeric overflow (log-scale estimate {log_estimate})")]
    NumericOverflow { log_estimate: f64 },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    F,
    H,
}

/// Values of a recurrence over `t = 0..=T`; `values[t][x-1]` is bin `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationTrace {
    pub kind: TraceKind,
    pub j: usize,
    pub origin: u64,
    pub values: Vec<Vec<f64>>,
}

impl ExpectationTrace {
    pub fn last(&self) -> &[f64] {
        self.values.last().expect("trace always holds t = 0")
    }
}

/// `(p_0, p_1, ..., p_j)`.
pub fn probs(seq: &SendSequence, j: usize) -> Result<Vec<f64>, SequenceError> {
    (0..=j).map(|k| seq.prob(k)).collect()
}

/// The canonical damping `gamma_x = 1/(4 x^phi)` for `x = 1..=j`.
pub fn gamma_canonical(phi: f64, j: usize) -> Vec<f64> {
    (1..=j).map(|x| 0.25 / (x as f64).powf(phi)).collect()
}

/// `mu_x^Gamma = lambda W_x prod_{a<=x} (1 - Gamma_a)`; `gamma[a-1]` is
/// `Gamma_a`.
pub fn mu_gamma(seq: &SendSequence, lambda: f64, gamma: &[f64], x: usize) -> Result<f64, RecurrenceError> {
    if x == 0 {
        return Ok(lambda);
    }
    if gamma.len() < x {
        return Err(RecurrenceError::IncompatibleLengths {
            expected: x,
            got: gamma.len(),
        });
    }
    let w = seq.weight(x)?;
    let damp: f64 = gamma[..x].iter().map(|g| 1.0 - g).product();
    let mu = lambda * w * damp;
    if !mu.is_finite() {
        return Err(RecurrenceError::NumericOverflow {
            log_estimate: lambda.ln() + seq.log_weight(x)? + damp.ln(),
        });
    }
    Ok(mu)
}

/// `mu^gamma` for bins `1..=j` with the canonical damping for `phi`. Checks
/// `2 lambda W_x / 3 <= mu_x <= 3 lambda W_x / 4`.
pub fn mu_canonical(seq: &SendSequence, lambda: f64, phi: f64, j: usize) -> Result<Vec<f64>, RecurrenceError> {
    let gamma = gamma_canonical(phi, j);
    let mut out = Vec::with_capacity(j);
    let mut damp = 1.0;
    for x in 1..=j {
        damp *= 1.0 - gamma[x - 1];
        let w = seq.weight(x)?;
        let mu = lambda * w * damp;
        if !mu.is_finite() {
            return Err(RecurrenceError::NumericOverflow {
                log_estimate: lambda.ln() + seq.log_weight(x)? + damp.ln(),
            });
        }
        let lw = lambda * w;
        assert!(
            mu >= 2.0 * lw / 3.0 * (1.0 - 1e-12) && mu <= 0.75 * lw * (1.0 + 1e-12),
            "mu^gamma outside [2/3, 3/4] lambda W at bin {x}"
        );
        out.push(mu);
    }
    Ok(out)
}

/// One step of `f`: `next_x = (1-p_x) cur_x + (1-Gamma_x) p_{x-1} cur_{x-1}`
/// with `cur_0 = lambda`.
pub fn f_step(p: &[f64], lambda: f64, gamma: &[f64], cur: &[f64], next: &mut [f64]) {
    let mut below = lambda;
    for x in 1..=cur.len() {
        next[x - 1] = (1.0 - p[x]) * cur[x - 1] + (1.0 - gamma[x - 1]) * p[x - 1] * below;
        below = cur[x - 1];
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), RecurrenceError> {
    if expected == got {
        Ok(())
    } else {
        Err(RecurrenceError::IncompatibleLengths { expected, got })
    }
}

/// Full trace of `f^{Gamma,z}` over `0..=horizon`.
pub fn f_run(
    seq: &SendSequence,
    lambda: f64,
    gamma: &[f64],
    z: &[f64],
    horizon: u64,
) -> Result<ExpectationTrace, RecurrenceError> {
    let j = z.len();
    check_len(j, gamma.len())?;
    let p = probs(seq, j)?;
    let mut values = Vec::with_capacity(horizon as usize + 1);
    values.push(z.to_vec());
    let mut next = vec![0.0; j];
    for _ in 0..horizon {
        f_step(&p, lambda, gamma, values.last().unwrap(), &mut next);
        values.push(next.clone());
    }
    Ok(ExpectationTrace {
        kind: TraceKind::F,
        j,
        origin: 0,
        values,
    })
}

/// `f^{Gamma,z}(horizon)` without storing the trace.
pub fn f_at(
    seq: &SendSequence,
    lambda: f64,
    gamma: &[f64],
    z: &[f64],
    horizon: u64,
) -> Result<Vec<f64>, RecurrenceError> {
    let j = z.len();
    check_len(j, gamma.len())?;
    let p = probs(seq, j)?;
    let mut cur = z.to_vec();
    let mut next = vec![0.0; j];
    for _ in 0..horizon {
        f_step(&p, lambda, gamma, &cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// `ceil((4/lambda) j R / min Lambda_k)`.
pub fn fill_time_bound(lambda: f64, j: usize, r: f64, big_lambda: &[f64]) -> u64 {
    if r <= 0.0 {
        return 0;
    }
    let min = big_lambda.iter().cloned().fold(f64::INFINITY, f64::min);
    (4.0 / lambda * j as f64 * r / min).ceil() as u64
}

/// `T^{p,j} = 80 j^2 floor(sum_{x in [j]} W_x)`.
pub fn t_prot(seq: &SendSequence, j: usize) -> Result<u64, RecurrenceError> {
    let mut sum = 0.0;
    for x in 1..=j {
        sum += seq.weight(x)?;
    }
    let jf = j as f64;
    let t = 80.0 * jf * jf * sum.floor();
    if !t.is_finite() || t >= u64::MAX as f64 {
        let mut log_sum = f64::NEG_INFINITY;
        for x in 1..=j {
            let l = seq.log_weight(x)?;
            log_sum = log_sum.max(l) + (1.0 + (-(log_sum - l).abs()).exp()).ln();
        }
        return Err(RecurrenceError::NumericOverflow {
            log_estimate: 80f64.ln() + 2.0 * jf.ln() + log_sum,
        });
    }
    Ok(t as u64)
}

/// `F^Psi_{[j]}(t) = f^{0,z}(t - tau)`.
pub fn f_of_state(state: &HighLevelState, t: u64, seq: &SendSequence, lambda: f64) -> Result<Vec<f64>, RecurrenceError> {
    assert!(t >= state.tau, "F is defined from tau on");
    let zero = vec![0.0; state.j];
    f_at(seq, lambda, &zero, &state.z, t - state.tau)
}

/// `M_S = sum_{k in S} max{0, mu_k^gamma - F_k}` given the current `F`
/// and `mu^gamma` vectors.
pub fn missing_from(f: &[f64], mu: &[f64], set: &[usize]) -> f64 {
    set.iter().map(|&k| (mu[k - 1] - f[k - 1]).max(0.0)).sum()
}

/// `M_S^Psi(t)` with `mu` at the canonical damping for `phi`.
pub fn missing(
    state: &HighLevelState,
    set: &[usize],
    t: u64,
    seq: &SendSequence,
    lambda: f64,
    phi: f64,
) -> Result<f64, RecurrenceError> {
    let f = f_of_state(state, t, seq, lambda)?;
    let mu = mu_canonical(seq, lambda, phi, state.j)?;
    Ok(missing_from(&f, &mu, set))
}

/// One step of `h`: `next_x = (1-p_x) cur_x + p_{x-1} cur_{x-1} + nu`, `cur_0 = 0`.
pub fn h_step(p: &[f64], nu: f64, cur: &[f64], next: &mut [f64]) {
    let mut below = 0.0;
    for x in 1..=cur.len() {
        next[x - 1] = (1.0 - p[x]) * cur[x - 1] + p[x - 1] * below + nu;
        below = cur[x - 1];
    }
}

pub fn h_run(seq: &SendSequence, nu: f64, a: &[f64], horizon: u64) -> Result<ExpectationTrace, RecurrenceError> {
    let j = a.len();
    let p = probs(seq, j)?;
    let mut values = Vec::with_capacity(horizon as usize + 1);
    values.push(a.to_vec());
    let mut next = vec![0.0; j];
    for _ in 0..horizon {
        h_step(&p, nu, values.last().unwrap(), &mut next);
        values.push(next.clone());
    }
    Ok(ExpectationTrace {
        kind: TraceKind::H,
        j,
        origin: 0,
        values,
    })
}

/// `kappa_{x,nu} = x nu W_x` for `x = 1..=j`.
pub fn kappa(seq: &SendSequence, nu: f64, j: usize) -> Result<Vec<f64>, SequenceError> {
    (1..=j).map(|x| Ok(x as f64 * nu * seq.weight(x)?)).collect()
}

/// `xi`, `P_k`, `nu^hi`, `nu^lo`, all kept as logs.
#[derive(Debug, Clone, PartialEq)]
pub struct EscapeConstants {
    pub log_xi: f64,
    /// Explicit `P_0, P_1, ...` replacing the product formula.
    pub p_override: Option<Vec<f64>>,
}

impl EscapeConstants {
    /// `xi = (1/160) (lambda/4)^{10^7/lambda^3}`.
    pub fn genuine(lambda: f64) -> Self {
        EscapeConstants {
            log_xi: -(160f64.ln()) + 1e7 / lambda.powi(3) * (lambda / 4.0).ln(),
            p_override: None,
        }
    }

    /// Keeps `P_k = xi prod (1 + 1/l^2)` but with a desk-scale `xi`.
    pub fn with_xi(xi: f64) -> Self {
        EscapeConstants {
            log_xi: xi.ln(),
            p_override: None,
        }
    }

    /// Replaces `P` outright; `xi` becomes `P_0`.
    pub fn with_p(p: Vec<f64>) -> Self {
        EscapeConstants {
            log_xi: p.first().map_or(f64::NEG_INFINITY, |v| v.ln()),
            p_override: Some(p),
        }
    }

    pub fn log_p(&self, k: usize) -> f64 {
        if let Some(p) = &self.p_override {
            return p.get(k).copied().unwrap_or(f64::NAN).ln();
        }
        self.log_xi + (1..=k).map(|l| (1.0 + 1.0 / (l * l) as f64).ln()).sum::<f64>()
    }

    pub fn p(&self, k: usize) -> f64 {
        self.log_p(k).exp()
    }

    pub fn nu_hi(j: usize) -> f64 {
        (j as f64).ln().powi(-100)
    }

    pub fn nu_lo(j: usize) -> f64 {
        (j as f64).powi(-100)
    }
}

/// `excess(x, delta)` with `delta` given as `ln delta`.
pub fn excess_log(x: &[f64], log_delta: f64, consts: &EscapeConstants, seq: &SendSequence) -> Result<f64, SequenceError> {
    let mut total = 0.0;
    for (i, xk) in x.iter().enumerate() {
        let k = i + 1;
        let threshold = (log_delta + consts.log_p(k) + seq.log_weight(k)?).exp();
        total += (xk - threshold).max(0.0);
    }
    Ok(total)
}

/// `sum_k max{0, x_k - delta P_k W_k}`.
pub fn excess(x: &[f64], delta: f64, consts: &EscapeConstants, seq: &SendSequence) -> Result<f64, SequenceError> {
    excess_log(x, delta.ln(), consts, seq)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionParams {
    pub lambda: f64,
    pub d: f64,
    pub varpi: f64,
    pub theta: f64,
    pub nu: f64,
    pub g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionReport {
    pub con1: bool,
    pub con2: bool,
    pub con3: bool,
    pub con4: bool,
    /// `d - excess(m, 1)`.
    pub con1_slack: f64,
    /// `lambda j / 500 - excess(m, xi^{-1/3})`.
    pub con2_slack: f64,
    /// Smallest `nu k + (1+theta) P_k - p_k m_k` over the checked bins.
    pub con3_slack: f64,
    /// Smallest `G j^2 - p_k m_k`.
    pub con4_slack: f64,
}

fn le_tol(a: f64, b: f64) -> bool {
    a <= b + 1e-12 * b.abs().max(a.abs()).max(1e-300)
}

pub fn check_conditions(
    m: &[f64],
    params: &ConditionParams,
    consts: &EscapeConstants,
    seq: &SendSequence,
) -> Result<ConditionReport, SequenceError> {
    let j = m.len();
    let e1 = excess_log(m, 0.0, consts, seq)?;
    let e2 = excess_log(m, -consts.log_xi / 3.0, consts, seq)?;
    let cap2 = params.lambda * j as f64 / 500.0;
    let mut con3 = true;
    let mut con4 = true;
    let mut slack3 = f64::INFINITY;
    let mut slack4 = f64::INFINITY;
    let cap4 = params.g * (j * j) as f64;
    for (i, mk) in m.iter().enumerate() {
        let k = i + 1;
        let pm = seq.prob(k)? * mk;
        if seq.weight(k)? >= params.varpi {
            let rhs = params.nu * k as f64 + (1.0 + params.theta) * consts.p(k);
            con3 &= le_tol(pm, rhs);
            slack3 = slack3.min(rhs - pm);
        }
        con4 &= le_tol(pm, cap4);
        slack4 = slack4.min(cap4 - pm);
    }
    Ok(ConditionReport {
        con1: le_tol(e1, params.d),
        con2: le_tol(e2, cap2),
        con3,
        con4,
        con1_slack: params.d - e1,
        con2_slack: cap2 - e2,
        con3_slack: slack3,
        con4_slack: slack4,
    })
}

/// `d`-AF-good: Con1 for `d` and Con2.
pub fn af_good(m: &[f64], lambda: f64, d: f64, consts: &EscapeConstants, seq: &SendSequence) -> Result<bool, SequenceError> {
    let params = ConditionParams {
        lambda,
        d,
        varpi: f64::INFINITY,
        theta: 0.0,
        nu: 0.0,
        g: f64::INFINITY,
    };
    let r = check_conditions(m, &params, consts, seq)?;
    Ok(r.con1 && r.con2)
}

/// `(d, varpi, theta, G)`-RS-good: Con1 for `d`, Con3 for
/// `(varpi, theta, nu_j^hi)` and Con4 for `G`.
pub fn rs_good(
    m: &[f64],
    lambda: f64,
    d: f64,
    varpi: f64,
    theta: f64,
    g: f64,
    consts: &EscapeConstants,
    seq: &SendSequence,
) -> Result<bool, SequenceError> {
    let params = ConditionParams {
        lambda,
        d,
        varpi,
        theta,
        nu: EscapeConstants::nu_hi(m.len()),
        g,
    };
    let r = check_conditions(m, &params, consts, seq)?;
    Ok(r.con1 && r.con3 && r.con4)
}

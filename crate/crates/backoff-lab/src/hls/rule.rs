//! The backoff-bounding rule and an axiom checker for it.

use super::state::{HighLevelState, HlsContext, HlsError, RuleConstants, StateType};
use crate::engine::poisson;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleTag {
    R1i,
    R1ii,
    R1iii,
    R2i,
    R2ii,
    R3,
    R4i,
    R4ii,
    R5i,
    R5ii,
    R6i,
    R6ii,
}

impl RuleTag {
    pub fn name(self) -> &'static str {
        match self {
            RuleTag::R1i => "R1(i)",
            RuleTag::R1ii => "R1(ii)",
            RuleTag::R1iii => "R1(iii)",
            RuleTag::R2i => "R2(i)",
            RuleTag::R2ii => "R2(ii)",
            RuleTag::R3 => "R3",
            RuleTag::R4i => "R4(i)",
            RuleTag::R4ii => "R4(ii)",
            RuleTag::R5i => "R5(i)",
            RuleTag::R5ii => "R5(ii)",
            RuleTag::R6i => "R6(i)",
            RuleTag::R6ii => "R6(ii)",
        }
    }
}

/// The faithful rule, or a deliberately broken copy used to check that
/// the axiom checker notices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RuleVariant {
    #[default]
    Faithful,
    /// R2(ii) keeps `min(F_k, mu_k)` on light bins instead of zeroing them.
    SkipR2Zeroing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub state: HighLevelState,
    pub tag: RuleTag,
    /// A (T3) fallback replaced the proposed successor.
    pub fallback: bool,
}

fn check_domain(psi: &HighLevelState, b: &[u64], t: u64) -> Result<(), HlsError> {
    if t <= psi.tau {
        return Err(HlsError::DomainViolation(format!("t = {t} not after tau = {}", psi.tau)));
    }
    if psi.kind == StateType::Initialising && t != psi.tau + 1 {
        return Err(HlsError::DomainViolation("initialising state is only defined at tau + 1".into()));
    }
    if b.len() != psi.j {
        return Err(HlsError::DomainViolation(format!("{} counts for j = {}", b.len(), psi.j)));
    }
    Ok(())
}

/// `hls(Psi, b, t)` given `F^Psi(t)` for bins `1..=j`.
pub fn hls_with_f(
    ctx: &HlsContext,
    psi: &HighLevelState,
    b: &[u64],
    t: u64,
    f: &[f64],
    variant: RuleVariant,
) -> Result<Outcome, HlsError> {
    check_domain(psi, b, t)?;
    let (g, j, lambda) = (psi.g + 1, psi.j, ctx.lambda);
    let fail = |tag| Outcome {
        state: ctx.failure(g, t, j),
        tag,
        fallback: false,
    };
    let moved = |state, tag, fallback| Outcome { state, tag, fallback };
    let bk = |k: usize| b[k - 1] as f64;
    let fk = |k: usize| f[k - 1];

    if psi.kind == StateType::Failure {
        return Ok(fail(RuleTag::R1i));
    }
    if ctx.very_heavy(j).into_iter().any(|k| fk(k) < lambda * ctx.w(k) / 2.0) {
        return Ok(fail(RuleTag::R1ii));
    }
    if ctx
        .heavy(j)
        .into_iter()
        .any(|k| fk(k) >= lambda * ctx.w(k) / 2.0 && bk(k) < lambda * ctx.w(k) / 4.0)
    {
        return Ok(fail(RuleTag::R1iii));
    }

    if !ctx.noise_floor_holds(&psi.sets, b) {
        if matches!(psi.kind, StateType::Refilling | StateType::Advancing) {
            return Ok(fail(RuleTag::R2i));
        }
        let mut state = ctx.refilling(g, t, j, |k| fk(k).min(ctx.mu(k)))?;
        if variant == RuleVariant::SkipR2Zeroing {
            for k in 1..=j {
                state.z[k - 1] = fk(k).min(ctx.mu(k));
            }
        }
        return Ok(moved(state, RuleTag::R2ii, false));
    }

    let guarded = |state: HighLevelState, tag, fallback: HighLevelState| {
        if ctx.noise_floor_holds(&state.sets, b) {
            Ok(moved(state, tag, false))
        } else {
            Ok(moved(fallback, tag, true))
        }
    };
    let dwell = |exp| RuleConstants::dwell_over(exp, psi.tau, j, t);

    match psi.kind {
        StateType::Failure => unreachable!(),
        StateType::Initialising => {
            let next = if ctx.covered(j)? {
                ctx.advancing(g, t, j)?
            } else {
                ctx.filling(g, t, j, 0.0)?
            };
            guarded(next, RuleTag::R3, ctx.failure(g, t, j))
        }
        StateType::Advancing | StateType::Filling => {
            if dwell(ctx.rule.advance_exp) && fk(j) >= ctx.mu(j) {
                let next = if ctx.covered(j + 1)? {
                    ctx.advancing(g, t, j + 1)?
                } else {
                    ctx.filling(g, t, j + 1, 0.0)?
                };
                guarded(next, RuleTag::R4i, ctx.failure(g, t, j))
            } else {
                Ok(moved(psi.clone(), RuleTag::R4ii, false))
            }
        }
        StateType::Refilling => {
            if dwell(ctx.rule.refill_exp) && (1..j).all(|k| fk(k) >= ctx.mu(k)) {
                guarded(
                    ctx.stabilising(g, t, j, fk(j))?,
                    RuleTag::R5i,
                    ctx.refilling(g, t, j, fk)?,
                )
            } else {
                Ok(moved(psi.clone(), RuleTag::R5ii, false))
            }
        }
        StateType::Stabilising => {
            if dwell(ctx.rule.stabilise_exp) {
                guarded(ctx.filling(g, t, j, fk(j))?, RuleTag::R6i, ctx.refilling(g, t, j, fk)?)
            } else {
                Ok(moved(psi.clone(), RuleTag::R6ii, false))
            }
        }
    }
}

/// `hls(Psi, b, t)`, computing `F^Psi(t)` from the state.
pub fn hls(ctx: &HlsContext, psi: &HighLevelState, b: &[u64], t: u64, variant: RuleVariant) -> Result<Outcome, HlsError> {
    check_domain(psi, b, t)?;
    let f = ctx.f_of(psi, t)?;
    hls_with_f(ctx, psi, b, t, &f, variant)
}

/// Refilling targets reached from refilling through R5(i) or from
/// stabilising through R2(ii) or R6(i).
pub fn is_back_transition(prev: &HighLevelState, next: &HighLevelState, tag: RuleTag) -> bool {
    if prev == next || next.kind != StateType::Refilling {
        return false;
    }
    match prev.kind {
        StateType::Refilling => tag == RuleTag::R5i,
        StateType::Stabilising => matches!(tag, RuleTag::R2ii | RuleTag::R6i),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: HighLevelState,
    pub b: Vec<u64>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomViolation {
    pub sample: usize,
    pub axiom: &'static str,
    pub detail: String,
}

/// Draws a random domain triple for `ctx` with `j <= ctx.limit - 1`.
pub fn sample_domain<R: Rng>(ctx: &HlsContext, rng: &mut R) -> Result<Sample, HlsError> {
    let j_max = ctx.limit.saturating_sub(1).max(1);
    let j = rng.random_range(1..=j_max);
    let covered = ctx.covered(j)?;
    let g = rng.random_range(0..5u64);
    let tau = rng.random_range(0..50u64);
    let jitter = |rng: &mut R, v: f64| v * rng.random_range(0.0..1.3);
    let roll = rng.random_range(0..6u32);
    let state = match roll {
        0 => ctx.failure(g, tau, j),
        1 => ctx.initialising(tau, j)?,
        _ if covered => ctx.advancing(g, tau, j)?,
        2 | 3 => {
            let zj = jitter(rng, ctx.mu(j));
            ctx.filling(g, tau, j, zj)?
        }
        4 => {
            let scale: Vec<f64> = (1..=j).map(|_| rng.random_range(0.3..1.3)).collect();
            ctx.refilling(g, tau, j, |k| ctx.mu(k) * scale[k - 1])?
        }
        _ => {
            let zj = jitter(rng, ctx.mu(j));
            ctx.stabilising(g, tau, j, zj)?
        }
    };
    let t = if state.kind == StateType::Initialising {
        tau + 1
    } else {
        let exp = match state.kind {
            StateType::Refilling => ctx.rule.refill_exp,
            StateType::Stabilising => ctx.rule.stabilise_exp,
            _ => ctx.rule.advance_exp,
        };
        let threshold = (j as f64).powf(exp).ceil() as u64;
        let d = match rng.random_range(0..4u32) {
            0 => 1,
            1 => threshold.max(1),
            2 => (threshold + 1).max(1),
            _ => rng.random_range(1..=2 * threshold + 2),
        };
        tau + d
    };
    let f = ctx.f_of(&state, t)?;
    const SCALES: [f64; 5] = [0.0, 0.1, 0.5, 1.0, 1.5];
    // One scale for all bins, one per bin, or light bins emptied.
    let mode = rng.random_range(0..3u32);
    let shared = SCALES[rng.random_range(0..5)];
    let b = f
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let scale = match mode {
                0 => shared,
                1 => SCALES[rng.random_range(0..5)],
                _ if ctx.light(i + 1, j) => 0.0,
                _ => 1.0,
            };
            poisson(rng, v * scale)
        })
        .collect();
    Ok(Sample { state, b, t })
}

fn raise<R: Rng>(rng: &mut R, b: &[u64], allowed: &dyn Fn(usize) -> bool) -> Vec<u64> {
    let big = rng.random_bool(0.3);
    b.iter()
        .enumerate()
        .map(|(i, &v)| {
            if !allowed(i + 1) || rng.random_bool(0.3) {
                v
            } else if big {
                v + 1_000_000
            } else {
                v + rng.random_range(0..20u64)
            }
        })
        .collect()
}

/// Checks (T1)-(T5) and (V1)-(V3) on every sample, using `raises` random
/// raised vectors per sample for (V2)/(V3).
pub fn check_axioms<R: Rng>(
    ctx: &HlsContext,
    samples: &[Sample],
    variant: RuleVariant,
    raises: usize,
    rng: &mut R,
) -> Result<Vec<AxiomViolation>, HlsError> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut report = |axiom, detail: String| {
            out.push(AxiomViolation {
                sample: i,
                axiom,
                detail,
            })
        };
        let psi = &s.state;
        let f = ctx.f_of(psi, s.t)?;
        let o = hls_with_f(ctx, psi, &s.b, s.t, &f, variant)?;
        let next = &o.state;
        let changed = next != psi;
        if changed && (next.g != psi.g + 1 || next.tau != s.t) {
            report("T1", format!("g {} -> {}, tau' = {}", psi.g, next.g, next.tau));
        }
        if psi.kind == StateType::Failure && *next != ctx.failure(psi.g + 1, s.t, psi.j) {
            report("T2", format!("failure went to {}", next.kind));
        }
        if !ctx.noise_floor_holds(&next.sets, &s.b) {
            report("T3", format!("noise floor fails after {}", o.tag.name()));
        }
        if next.j < psi.j || next.z[psi.j..].iter().any(|v| *v != 0.0) {
            report("T4", format!("j {} -> {}", psi.j, next.j));
        }
        if psi.kind == StateType::Initialising && next.j != psi.j {
            report("T4", "initialising state changed j".into());
        }
        if next.kind == StateType::Initialising {
            report("T5", "successor is initialising".into());
        }
        if changed {
            for l in 1..=psi.j {
                let (z, fl) = (next.z[l - 1], f[l - 1]);
                if z > fl * (1.0 + 1e-9) + 1e-12 {
                    report("V1", format!("z'_{l} = {z} > F_{l} = {fl}"));
                }
            }
        }
        for _ in 0..raises {
            if changed {
                let zero = |k: usize| k <= next.j && next.z[k - 1] == 0.0;
                let up = raise(rng, &s.b, &|k| !zero(k));
                let again = hls_with_f(ctx, psi, &up, s.t, &f, variant)?;
                if again.state != *next {
                    report("V3", format!("{} via {} became {} under {:?}", next.kind, o.tag.name(), again.state.kind, up));
                    break;
                }
            } else {
                let up = raise(rng, &s.b, &|_| true);
                let again = hls_with_f(ctx, psi, &up, s.t, &f, variant)?;
                if again.state != *psi {
                    report("V2", format!("{} left under {:?}", psi.kind, up));
                    break;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::send_sequence::SendSequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn ctx(probs: Vec<f64>, lambda: f64) -> HlsContext {
        let n = probs.len() - 1;
        HlsContext::synthetic(Arc::new(SendSequence::explicit(probs).unwrap()), lambda, n).unwrap()
    }

    #[test]
    fn failure_goes_to_failure() {
        let c = ctx(vec![1.0, 0.5, 0.5], 0.3);
        let s = c.failure(2, 5, 2);
        let o = hls(&c, &s, &[0, 0], 9, RuleVariant::Faithful).unwrap();
        assert_eq!(o.state, c.failure(3, 9, 2));
        assert_eq!(o.tag, RuleTag::R1i);
    }

    #[test]
    fn domain_is_checked() {
        let c = ctx(vec![1.0, 0.5, 0.5], 0.3);
        let s = c.initialising(5, 2).unwrap();
        assert!(matches!(hls(&c, &s, &[0, 0], 7, RuleVariant::Faithful), Err(HlsError::DomainViolation(_))));
        assert!(matches!(hls(&c, &s, &[0, 0], 5, RuleVariant::Faithful), Err(HlsError::DomainViolation(_))));
        assert!(hls(&c, &s, &[0, 0], 6, RuleVariant::Faithful).is_ok());
    }

    /// Many light bins with a heavy bin at 12: bin 12 is exposed, its
    /// filling state carries one low-weight set `[11]` and no singletons.
    fn exposed_twelve() -> HlsContext {
        let mut probs = vec![1.0];
        probs.extend(std::iter::repeat(0.5).take(11));
        probs.push(1e-12);
        probs.push(0.5);
        ctx(probs, 0.2)
    }

    #[test]
    fn quiet_low_weight_set_sends_filling_to_refilling() {
        let c = exposed_twelve();
        let s = c.filling(1, 0, 12, 0.0).unwrap();
        assert_eq!(s.sets, vec![(1..=11).collect::<Vec<_>>()]);
        let b = vec![0u64; 12];
        let f = c.f_of(&s, 3).unwrap();
        let o = hls(&c, &s, &b, 3, RuleVariant::Faithful).unwrap();
        assert_eq!(o.tag, RuleTag::R2ii);
        assert_eq!(o.state.kind, StateType::Refilling);
        // Only bin 12 has weight >= 144.
        let mut z = vec![0.0; 12];
        z[11] = f[11].min(c.mu(12));
        assert_eq!(o.state.z, z);
        assert_eq!((o.state.g, o.state.tau), (2, 3));
    }

    #[test]
    fn healthy_advancing_state_stays() {
        let mut probs = vec![1.0];
        probs.extend(std::iter::repeat(1.0 / 1024.0).take(20));
        probs.push(0.5);
        probs.push(0.5);
        let c = ctx(probs, 0.2);
        assert!(c.covered(21).unwrap());
        let s = c.advancing(0, 0, 21).unwrap();
        let b: Vec<u64> = (1..=21).map(|k| (c.lambda * c.w(k)) as u64).collect();
        let o = hls(&c, &s, &b, 1, RuleVariant::Faithful).unwrap();
        assert_eq!(o.state, s);
        assert_eq!(o.tag, RuleTag::R4ii);
    }

    #[test]
    fn back_transitions() {
        let c = exposed_twelve();
        let r = c.refilling(0, 0, 12, |_| 1.0).unwrap();
        let st = c.stabilising(1, 5, 12, 1.0).unwrap();
        let r2 = c.refilling(2, 9, 12, |_| 1.0).unwrap();
        assert!(!is_back_transition(&r, &st, RuleTag::R5i));
        assert!(is_back_transition(&st, &r2, RuleTag::R6i));
        assert!(is_back_transition(&st, &r2, RuleTag::R2ii));
        assert!(is_back_transition(&r, &r2, RuleTag::R5i));
        assert!(!is_back_transition(&r, &r, RuleTag::R5ii));
    }

    #[test]
    fn axioms_hold_on_fixture() {
        let c = exposed_twelve();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<Sample> = (0..300).map(|_| sample_domain(&c, &mut rng).unwrap()).collect();
        let v = check_axioms(&c, &samples, RuleVariant::Faithful, 4, &mut rng).unwrap();
        assert!(v.is_empty(), "{:?}", &v[..v.len().min(3)]);
    }

    #[test]
    fn mutation_is_caught() {
        let c = exposed_twelve();
        let s = c.filling(1, 0, 12, 0.0).unwrap();
        let samples = vec![Sample {
            state: s,
            b: vec![0; 12],
            t: 40,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = check_axioms(&c, &samples, RuleVariant::SkipR2Zeroing, 20, &mut rng).unwrap();
        assert!(v.iter().any(|v| v.axiom == "V3"));
    }
}

//! The VEB composite: a backoff process `X` with cohorts A and B, the
//! volume process driven by the A-births, and the escape process fed by
//! `X`'s escapes, all sharing send decisions ball by ball.

use super::rule::{hls_with_f, is_back_transition, RuleTag, RuleVariant};
use super::state::{HighLevelState, HlsContext, HlsError, StateType};
use crate::engine::{binomial, escape_rate, poisson, BallId};
use crate::recurrence::{f_at, f_step, t_prot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct VebConfig {
    pub j0: usize,
    /// Steps after the warmup.
    pub horizon: u64,
    pub seed: u64,
    /// Minimum size of the quiet-set union that produces escape pressure.
    pub set_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VebTransition {
    pub t: u64,
    pub g: u64,
    pub tau: u64,
    pub j: usize,
    pub kind: StateType,
    pub tag: RuleTag,
    pub back_transition: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VebTrace {
    pub warmup: u64,
    pub transitions: Vec<VebTransition>,
    pub i1_violations: u64,
    pub i2_violations: u64,
    pub checked_steps: u64,
    pub max_backlog: u64,
    pub final_state: HighLevelState,
    /// Volume counts of bins `1..=j0` right after the warmup.
    pub initial_volume: Vec<u64>,
}

const X: usize = 0;
const Y: usize = 1;
const E: usize = 2;

#[derive(Debug, Clone)]
struct Ball {
    id: BallId,
    /// Bin in `X`, the volume process and the escape process.
    bin: [Option<usize>; 3],
}

struct Composite<'a> {
    ctx: &'a HlsContext,
    rng: ChaCha8Rng,
    t: u64,
    named: Vec<Ball>,
    /// Cohort-B counts of `X` by bin.
    x_b: Vec<u64>,
    /// Escape-process balls that never belonged to `X` or the volume.
    e_anon: Vec<u64>,
    max_backlog: u64,
}

fn add(v: &mut Vec<u64>, i: usize, n: u64) {
    if v.len() <= i {
        v.resize(i + 1, 0);
    }
    v[i] += n;
}

/// `Po(mean)` conditioned on being at least one, by inverse CDF.
fn poisson_positive<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    let p0 = (-mean).exp();
    let u = p0 + (1.0 - p0) * rng.random::<f64>();
    let mut k = 1u64;
    let mut pk = mean * p0;
    let mut cdf = p0 + pk;
    while cdf < u && pk > 0.0 {
        k += 1;
        pk *= mean / k as f64;
        cdf += pk;
    }
    k
}

impl<'a> Composite<'a> {
    fn e_counts(&self, j: usize) -> Vec<u64> {
        let mut c = self.e_anon.clone();
        c.resize(j + 1, 0);
        for b in &self.named {
            if let Some(i) = b.bin[E] {
                c[i] += 1;
            }
        }
        c
    }

    fn y_counts(&self, j: usize) -> Vec<u64> {
        let mut c = vec![0u64; j];
        for b in &self.named {
            if let Some(i) = b.bin[Y] {
                c[i - 1] += 1;
            }
        }
        c
    }

    /// One synchronised step. `volume` is `Some(psi)` after the warmup.
    fn step(&mut self, volume: Option<&HighLevelState>, set_floor: f64) {
        let t = self.t + 1;
        let ctx = self.ctx;
        let lambda = ctx.lambda;
        let j = volume.map_or(0, |s| s.j);

        let nu = volume.map(|psi| {
            let e = self.e_counts(j);
            escape_rate(&psi.sets, lambda, set_floor, |s| {
                s.iter().map(|&k| ctx.seq.prob(k).unwrap_or(0.0) * e[k] as f64).sum()
            })
        });

        let n_a = poisson(&mut self.rng, lambda);
        let n_b = if volume.is_none() {
            poisson_positive(&mut self.rng, lambda)
        } else {
            poisson(&mut self.rng, lambda)
        };
        for o in 0..n_a {
            self.named.push(Ball {
                id: BallId {
                    birth: t,
                    entry_bin: 0,
                    cohort: 0,
                    ordinal: o as u32,
                },
                bin: [Some(0), volume.map(|_| 0), None],
            });
        }
        add(&mut self.x_b, 0, n_b);

        // Send decisions: one uniform per named ball, binomials for counts.
        let mut sends: Vec<[bool; 3]> = Vec::with_capacity(self.named.len());
        for b in &self.named {
            let u: f64 = self.rng.random();
            let mut s = [false; 3];
            for p in 0..3 {
                if let Some(i) = b.bin[p] {
                    s[p] = u < ctx.seq.prob(i).unwrap_or(0.0);
                }
            }
            sends.push(s);
        }
        let b_sends: Vec<u64> = (0..self.x_b.len())
            .map(|i| binomial(&mut self.rng, self.x_b[i], self.ctx.seq.prob(i).unwrap_or(0.0)))
            .collect();
        let e_sends: Vec<u64> = (0..self.e_anon.len())
            .map(|i| binomial(&mut self.rng, self.e_anon[i], self.ctx.seq.prob(i).unwrap_or(0.0)))
            .collect();

        let x_total = sends.iter().filter(|s| s[X]).count() as u64 + b_sends.iter().sum::<u64>();
        // Source bin of X's escape, and which named ball escaped (if any).
        let mut x_escape: Option<(usize, Option<usize>)> = None;
        if x_total == 1 {
            x_escape = match sends.iter().position(|s| s[X]) {
                Some(n) => Some((self.named[n].bin[X].unwrap(), Some(n))),
                None => Some((b_sends.iter().position(|s| *s == 1).unwrap(), None)),
            };
        }

        for (n, b) in self.named.iter_mut().enumerate() {
            for p in 0..3 {
                if let (Some(i), true) = (b.bin[p], sends[n][p]) {
                    let escapes = match p {
                        X => x_escape.is_some_and(|(_, m)| m == Some(n)),
                        _ => i >= j,
                    };
                    b.bin[p] = if escapes { None } else { Some(i + 1) };
                }
            }
        }
        let escaped_b = match x_escape {
            Some((i, None)) => Some(i),
            _ => None,
        };
        let mut moved = vec![0u64; self.x_b.len() + 1];
        for i in 0..self.x_b.len() {
            self.x_b[i] -= b_sends[i];
            moved[i + 1] += b_sends[i] - u64::from(escaped_b == Some(i));
        }
        for (i, m) in moved.into_iter().enumerate() {
            if m > 0 {
                add(&mut self.x_b, i, m);
            }
        }
        let mut e_moved = vec![0u64; self.e_anon.len() + 1];
        for i in 0..self.e_anon.len() {
            self.e_anon[i] -= e_sends[i];
            if i < j {
                e_moved[i + 1] += e_sends[i];
            }
        }
        for (i, m) in e_moved.into_iter().enumerate() {
            if m > 0 {
                add(&mut self.e_anon, i, m);
            }
        }

        // End-of-step arrivals into the escape process.
        if let Some(nu) = nu {
            let mut driven = None;
            if let Some((i, who)) = x_escape {
                if i < j {
                    driven = Some(i + 1);
                    match who {
                        Some(n) if self.named[n].bin[E].is_none() => self.named[n].bin[E] = Some(i + 1),
                        Some(_) => {}
                        None => add(&mut self.e_anon, i + 1, 1),
                    }
                }
            }
            for i in 1..=j {
                let hit = self.rng.random::<f64>() < nu;
                if hit && driven != Some(i) {
                    add(&mut self.e_anon, i, 1);
                }
            }
        }

        self.named.retain(|b| b.bin.iter().any(|x| x.is_some()));
        let backlog = self.named.iter().filter(|b| b.bin[X].is_some()).count() as u64 + self.x_b.iter().sum::<u64>();
        self.max_backlog = self.max_backlog.max(backlog);
        self.t = t;
    }

    /// Drops volume membership so that bin `k` keeps `keep[k-1]` balls,
    /// retaining the least identities.
    fn thin_volume(&mut self, keep: &[u64]) {
        let mut order: Vec<usize> = (0..self.named.len()).filter(|&n| self.named[n].bin[Y].is_some()).collect();
        order.sort_by_key(|&n| self.named[n].id);
        let mut kept = vec![0u64; keep.len()];
        for n in order {
            let i = self.named[n].bin[Y].unwrap();
            if i == 0 || i > keep.len() || kept[i - 1] >= keep[i - 1] {
                self.named[n].bin[Y] = None;
            } else {
                kept[i - 1] += 1;
            }
        }
    }

    fn i2_violations(&self) -> u64 {
        self.named
            .iter()
            .filter(|b| b.bin[Y].is_some() && b.bin[E] != b.bin[Y] && b.bin[X] != b.bin[Y])
            .count() as u64
    }
}

/// Runs the composite for `warmup + horizon` steps, where the warmup is
/// `T^{p,j0}` steps of `X` alone with at least one cohort-B birth per step.
pub fn veb_run(ctx: &HlsContext, cfg: &VebConfig) -> Result<VebTrace, HlsError> {
    let warmup = t_prot(&ctx.seq, cfg.j0)?;
    let mut c = Composite {
        ctx,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        t: 0,
        named: Vec::new(),
        x_b: Vec::new(),
        e_anon: Vec::new(),
        max_backlog: 0,
    };
    for _ in 0..warmup {
        c.step(None, cfg.set_floor);
    }

    let mut psi = ctx.initialising(warmup, cfg.j0)?;
    let zero = vec![0.0; cfg.j0];
    let filled = f_at(&ctx.seq, ctx.lambda, &zero, &zero, warmup)?;
    let mut initial = vec![0u64; cfg.j0];
    for b in &mut c.named {
        if let Some(i) = b.bin[X] {
            if (1..=cfg.j0).contains(&i) {
                b.bin[Y] = Some(i);
                initial[i - 1] += 1;
            }
        }
    }
    for k in 1..=cfg.j0 {
        let fk = filled[k - 1];
        let ratio = if fk > 0.0 { (psi.z[k - 1] / fk).min(1.0) } else { 0.0 };
        initial[k - 1] = binomial(&mut c.rng, initial[k - 1], ratio);
    }
    c.thin_volume(&initial);

    let mut f = psi.z.clone();
    let mut trace = VebTrace {
        warmup,
        transitions: Vec::new(),
        i1_violations: 0,
        i2_violations: 0,
        checked_steps: 0,
        max_backlog: 0,
        final_state: psi.clone(),
        initial_volume: initial,
    };
    for _ in 0..cfg.horizon {
        c.step(Some(&psi), cfg.set_floor);
        let t = c.t;
        let b = c.y_counts(psi.j);
        let p: Vec<f64> = (0..=psi.j).map(|k| ctx.p(k)).collect();
        let mut next = vec![0.0; psi.j];
        f_step(&p, ctx.lambda, &vec![0.0; psi.j], &f, &mut next);
        f = next;
        let o = hls_with_f(ctx, &psi, &b, t, &f, RuleVariant::Faithful)?;
        if o.state != psi {
            let new = o.state.clone();
            let mut keep = vec![0u64; new.j];
            for k in 1..=psi.j {
                let ratio = if f[k - 1] > 0.0 { (new.z[k - 1] / f[k - 1]).min(1.0) } else { 0.0 };
                keep[k - 1] = binomial(&mut c.rng, b[k - 1], ratio);
            }
            c.thin_volume(&keep);
            trace.transitions.push(VebTransition {
                t,
                g: new.g,
                tau: new.tau,
                j: new.j,
                kind: new.kind,
                tag: o.tag,
                back_transition: is_back_transition(&psi, &new, o.tag),
            });
            f = new.z.clone();
            psi = new;
        }
        if !matches!(psi.kind, StateType::Initialising | StateType::Failure) {
            trace.checked_steps += 1;
            if !ctx.noise_floor_holds(&psi.sets, &b) {
                trace.i1_violations += 1;
            }
            trace.i2_violations += c.i2_violations();
        }
    }
    trace.max_backlog = c.max_backlog;
    trace.final_state = psi;
    Ok(trace)
}

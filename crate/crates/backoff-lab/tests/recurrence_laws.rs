use backoff_lab::recurrence::{
    f_at, f_of_state, f_run, fill_time_bound, gamma_canonical, h_run, kappa, missing, mu_gamma, t_prot,
};
use backoff_lab::{HighLevelState, SendSequence, StateType};
use proptest::prelude::*;

const TOL: f64 = 1e-9;

fn seq_of(weights: &[f64]) -> SendSequence {
    let mut p = vec![1.0];
    p.extend(weights.iter().map(|w| 1.0 / w));
    SendSequence::explicit(p).unwrap()
}

fn weights(j: usize, max_w: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1.0..max_w, j)
}

/// Straight transcription of the f recurrence, used as an oracle.
fn naive_f(w: &[f64], lambda: f64, gamma: &[f64], z: &[f64], t: usize) -> Vec<f64> {
    let p = |k: usize| if k == 0 { 1.0 } else { 1.0 / w[k - 1] };
    let mut cur = z.to_vec();
    for _ in 0..t {
        let prev = cur.clone();
        for x in 1..=z.len() {
            let below = if x == 1 { lambda } else { prev[x - 2] };
            cur[x - 1] = (1.0 - p(x)) * prev[x - 1] + (1.0 - gamma[x - 1]) * p(x - 1) * below;
        }
    }
    cur
}

fn mus(seq: &SendSequence, lambda: f64, gamma: &[f64]) -> Vec<f64> {
    (1..=gamma.len()).map(|x| mu_gamma(seq, lambda, gamma, x).unwrap()).collect()
}

#[test]
fn f_hand_unrolled() {
    let seq = seq_of(&[2.0]);
    let tr = f_run(&seq, 0.5, &[0.0], &[0.0], 3).unwrap();
    let got: Vec<f64> = tr.values.iter().map(|v| v[0]).collect();
    assert_eq!(got, vec![0.0, 0.5, 0.75, 0.875]);
    let fixed = f_run(&seq, 0.5, &[0.0], &[1.0], 50).unwrap();
    assert!(fixed.values.iter().all(|v| v[0] == 1.0));
}

#[test]
fn monotone_start_from_damped_fixed_point() {
    let seq = seq_of(&[2.0, 4.0]);
    let lambda = 0.3;
    let start = mus(&seq, lambda, &gamma_canonical(2.0, 2));
    let tr = f_run(&seq, lambda, &[0.0, 0.0], &start, 100).unwrap();
    for w in tr.values.windows(2) {
        for x in 0..2 {
            assert!(w[1][x] >= w[0][x] - TOL);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f_matches_naive_transcription(
        w in weights(5, 40.0),
        lambda in 0.01f64..0.99,
        gamma in prop::collection::vec(0.0f64..1.0, 5),
        z in prop::collection::vec(0.0f64..30.0, 5),
        t in 0usize..200,
    ) {
        let seq = seq_of(&w);
        let got = f_at(&seq, lambda, &gamma, &z, t as u64).unwrap();
        let want = naive_f(&w, lambda, &gamma, &z, t);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn f_stays_between_zero_and_mu(
        w in weights(6, 64.0),
        lambda in 0.01f64..0.99,
        gamma in prop::collection::vec(0.0f64..1.0, 6),
        frac in prop::collection::vec(0.0f64..=1.0, 6),
        t in 0u64..1000,
    ) {
        let seq = seq_of(&w);
        let mu = mus(&seq, lambda, &gamma);
        let z: Vec<f64> = mu.iter().zip(&frac).map(|(m, f)| m * f).collect();
        let tr = f_run(&seq, lambda, &gamma, &z, t).unwrap();
        for v in &tr.values {
            for x in 0..6 {
                prop_assert!(v[x] >= 0.0 && v[x] <= mu[x] * (1.0 + TOL));
            }
        }
    }

    #[test]
    fn prefix_sums_never_shrink(
        w in weights(6, 64.0),
        lambda in 0.01f64..0.99,
        gamma in prop::collection::vec(0.0f64..1.0, 6),
        frac in prop::collection::vec(0.0f64..=1.0, 6),
        t in 1u64..500,
    ) {
        let seq = seq_of(&w);
        let mu = mus(&seq, lambda, &gamma);
        let z: Vec<f64> = mu.iter().zip(&frac).map(|(m, f)| m * f).collect();
        let tr = f_run(&seq, lambda, &gamma, &z, t).unwrap();
        for pair in tr.values.windows(2) {
            for jp in 1..=6 {
                let before: f64 = pair[0][..jp].iter().sum();
                let after: f64 = pair[1][..jp].iter().sum();
                prop_assert!(after >= before - TOL * before.max(1.0));
            }
        }
    }

    #[test]
    fn f_is_ordered_in_damping_and_start(
        w in weights(5, 32.0),
        lambda in 0.01f64..0.99,
        low in prop::collection::vec(0.0f64..1.0, 5),
        extra in prop::collection::vec(0.0f64..1.0, 5),
        a in prop::collection::vec(0.0f64..20.0, 5),
        bump in prop::collection::vec(0.0f64..20.0, 5),
        t in 0u64..300,
    ) {
        let seq = seq_of(&w);
        let big: Vec<f64> = low.iter().zip(&extra).map(|(g, e)| g + (1.0 - g) * e).collect();
        let z: Vec<f64> = a.iter().zip(&bump).map(|(x, y)| x + y).collect();
        let hi = f_at(&seq, lambda, &low, &z, t).unwrap();
        let lo = f_at(&seq, lambda, &big, &a, t).unwrap();
        for x in 0..5 {
            prop_assert!(hi[x] >= lo[x] - TOL * lo[x].max(1.0));
        }
    }

    #[test]
    fn bins_fill_by_the_fill_time(
        w in weights(8, 32.0),
        j in 1usize..=8,
        lambda in 0.05f64..0.95,
        big_frac in prop::collection::vec(0.04f64..1.0, 8),
        gamma_frac in prop::collection::vec(0.0f64..=1.0, 8),
        z_frac in prop::collection::vec(0.0f64..2.0, 8),
    ) {
        let w = &w[..j];
        let seq = seq_of(w);
        let big: Vec<f64> = big_frac[..j].iter().map(|f| f * 0.5 / j as f64).collect();
        let gamma: Vec<f64> = big.iter().zip(&gamma_frac).map(|(l, g)| l / 2.0 * g).collect();
        let mu = mus(&seq, lambda, &big);
        for x in 0..j {
            prop_assert!(mu[x] >= lambda * w[x] / 2.0);
        }
        let z: Vec<f64> = mu.iter().zip(&z_frac).map(|(m, f)| m * f).collect();
        let r: f64 = mu.iter().zip(&z).map(|(m, z)| (m - z).max(0.0)).sum();
        let t = fill_time_bound(lambda, j, r, &big);
        let f = f_at(&seq, lambda, &gamma, &z, t).unwrap();
        for x in 0..j {
            prop_assert!(f[x] >= mu[x] * (1.0 - TOL), "bin {} at t={}: {} < {}", x + 1, t, f[x], mu[x]);
        }
    }

    #[test]
    fn kappa_is_a_fixed_point(
        w in prop::collection::vec(1.0f64..1e6, 32),
        j in 1usize..=32,
        nu in 1e-6f64..0.1,
        t in 0u64..=1000,
    ) {
        let seq = seq_of(&w[..j]);
        let k = kappa(&seq, nu, j).unwrap();
        let tr = h_run(&seq, nu, &k, t).unwrap();
        for (a, b) in tr.last().iter().zip(&k) {
            prop_assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn h_stays_below_kappa(
        w in prop::collection::vec(1.0f64..1e4, 16),
        j in 1usize..=16,
        nu in 1e-5f64..0.1,
        frac in prop::collection::vec(0.0f64..=1.0, 16),
        t in 0u64..500,
    ) {
        let seq = seq_of(&w[..j]);
        let k = kappa(&seq, nu, j).unwrap();
        let a: Vec<f64> = k.iter().zip(&frac).map(|(k, f)| k * f).collect();
        let tr = h_run(&seq, nu, &a, t).unwrap();
        for v in &tr.values {
            for x in 0..j {
                prop_assert!(v[x] <= k[x] * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn missing_mass_never_grows(
        w in weights(6, 64.0),
        lambda in 0.01f64..0.99,
        frac in prop::collection::vec(0.0f64..=1.0, 6),
        tau in 0u64..50,
        span in 1u64..300,
    ) {
        let seq = seq_of(&w);
        let mu = mus(&seq, lambda, &gamma_canonical(3.0, 6));
        let state = HighLevelState {
            g: 1,
            tau,
            j: 6,
            z: mu.iter().zip(&frac).map(|(m, f)| m * f).collect(),
            sets: vec![],
            kind: StateType::Filling,
        };
        prop_assert_eq!(f_of_state(&state, tau, &seq, lambda).unwrap(), state.z.clone());
        for jp in 1..=6 {
            let set: Vec<usize> = (1..=jp).collect();
            let mut prev = missing(&state, &set, tau, &seq, lambda, 3.0).unwrap();
            for t in (tau + 1)..=(tau + span).min(tau + 60) {
                let m = missing(&state, &set, t, &seq, lambda, 3.0).unwrap();
                prop_assert!(m <= prev + TOL * prev.max(1.0));
                prev = m;
            }
        }
    }
}

#[test]
fn fill_law_at_protection_time() {
    let seq = seq_of(&[2.0, 2.0, 4.0]);
    let t = t_prot(&seq, 3).unwrap();
    assert_eq!(t, 80 * 9 * 8);
    let f = f_at(&seq, 0.5, &[0.0; 3], &[0.0; 3], t).unwrap();
    for (k, w) in [2.0, 2.0, 4.0].iter().enumerate() {
        assert!(f[k] >= 0.9 * 0.5 * w);
    }
}

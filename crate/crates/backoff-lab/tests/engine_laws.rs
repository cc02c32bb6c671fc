use backoff_lab::engine::{coupled_step_standard, InitialPopulation, Mode};
use backoff_lab::metrics::{bin_moments, poisson_gof};
use backoff_lab::{Process, ProcessKind, SendSequence};
use proptest::prelude::*;
use std::sync::Arc;

fn f_oracle(p: &[f64], lambda: f64, j: usize, t: usize) -> Vec<f64> {
    let mut cur = vec![0.0; j];
    for _ in 0..t {
        let prev = cur.clone();
        for x in 1..=j {
            let below = if x == 1 { lambda } else { prev[x - 2] };
            cur[x - 1] = (1.0 - p[x]) * prev[x - 1] + p[x - 1] * below;
        }
    }
    cur
}

#[test]
fn jammed_bins_are_poisson_at_small_scale() {
    let probs = vec![1.0, 0.5, 0.5, 0.25];
    let seq = Arc::new(SendSequence::explicit(probs.clone()).unwrap());
    let expected = f_oracle(&probs, 0.5, 3, 50);
    let replicas: Vec<Vec<u64>> = (0..2000u64)
        .map(|r| {
            let mut p = Process::new(ProcessKind::JJammed { j: 3 }, seq.clone(), 0.5, 0, InitialPopulation::Empty, 900 ^ r, Mode::Count).unwrap();
            p.run(50, |_, _| {}).unwrap();
            (1..=3).map(|k| p.count(0, k)).collect()
        })
        .collect();
    let moments = bin_moments(&replicas);
    for (k, (mean, var)) in moments.iter().enumerate() {
        let se = (expected[k] / 2000.0).sqrt();
        assert!((mean - expected[k]).abs() <= 4.0 * se, "bin {}: {mean} vs {}", k + 1, expected[k]);
        assert!((var / mean - 1.0).abs() < 0.15);
        let col: Vec<u64> = replicas.iter().map(|r| r[k]).collect();
        assert!(poisson_gof(&col, expected[k]).unwrap().chi2_p > 1e-4);
    }
}

#[test]
fn externally_jammed_stays_stationary() {
    let seq = Arc::new(SendSequence::explicit(vec![1.0, 0.5, 0.25, 0.125]).unwrap());
    let lambda = 0.5;
    let means: Vec<f64> = [2.0, 4.0, 8.0].iter().map(|w| lambda * w).collect();
    let n = 2000u64;
    let mut sums = [0.0; 3];
    for r in 0..n {
        let mut p = Process::new(
            ProcessKind::ExternallyJammed { track: Some(3) },
            seq.clone(),
            lambda,
            0,
            InitialPopulation::Poisson(means.clone()),
            r,
            Mode::Count,
        )
        .unwrap();
        p.run(80, |_, _| {}).unwrap();
        for k in 0..3 {
            sums[k] += p.count(0, k + 1) as f64;
        }
    }
    for k in 0..3 {
        let m = sums[k] / n as f64;
        assert!((m - means[k]).abs() <= 4.0 * (means[k] / n as f64).sqrt(), "bin {}: {m}", k + 1);
    }
}

fn coupled(lower: ProcessKind, upper: ProcessKind, lo_rate: f64, hi_rate: f64, seed: u64, steps: u64) -> usize {
    let seq = Arc::new(SendSequence::binary_exponential());
    let mut lo = Process::new(lower, seq.clone(), lo_rate, 0, InitialPopulation::Empty, seed, Mode::Identity).unwrap();
    let mut hi = Process::new(upper, seq, hi_rate, 0, InitialPopulation::Empty, seed ^ 0x5555, Mode::Identity).unwrap();
    let mut bad = 0;
    for _ in 0..steps {
        let (_, _, check) = coupled_step_standard(&mut lo, &mut hi).unwrap();
        bad += check.violations.len();
    }
    bad
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn couplings_keep_subsets(seed in any::<u64>()) {
        prop_assert_eq!(coupled(ProcessKind::Backoff { cohorts: 1 }, ProcessKind::Backoff { cohorts: 1 }, 0.2, 0.5, seed, 200), 0);
        prop_assert_eq!(coupled(ProcessKind::TwoStream, ProcessKind::Backoff { cohorts: 2 }, 0.6, 0.6, seed, 200), 0);
        prop_assert_eq!(coupled(ProcessKind::UnderBackoff, ProcessKind::Backoff { cohorts: 3 }, 0.6, 0.6, seed, 200), 0);
    }

    #[test]
    fn backlog_balances_births_and_escapes(seed in any::<u64>(), lambda in 0.05f64..0.9, mode in 0usize..3) {
        let mode = [Mode::Count, Mode::CountPerBall, Mode::Identity][mode];
        let seq = Arc::new(SendSequence::binary_exponential());
        let mut p = Process::new(ProcessKind::Backoff { cohorts: 1 }, seq, lambda, 0, InitialPopulation::Counts(vec![3, 1]), seed, mode).unwrap();
        let mut births = 0;
        let mut escapes = 0;
        for r in p.run_collect(300).unwrap() {
            births += r.births;
            escapes += r.total_escapes();
            prop_assert!(r.total_escapes() <= 1);
        }
        prop_assert_eq!(p.backlog(), 4 + births - escapes);
    }

    #[test]
    fn same_seed_same_run(seed in any::<u64>()) {
        let seq = Arc::new(SendSequence::binary_exponential());
        let run = |s| {
            let mut p = Process::new(ProcessKind::Backoff { cohorts: 2 }, seq.clone(), 0.4, 0, InitialPopulation::Empty, s, Mode::Identity).unwrap();
            p.run_collect(200).unwrap()
        };
        prop_assert_eq!(run(seed), run(seed));
    }
}

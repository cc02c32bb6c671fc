//! Experiment orchestration. Replica `r` runs with seed `base_seed ^ r`;
//! replicas run one after another and their records are written in
//! replica order, so identical configurations give identical files (the
//! manifest, which records wall time, excepted).

use crate::config::{
    ExperimentConfig, InitialSpec, LowerKind, ProcessSpec, Recurrence,
};
use crate::output::{Row, Table};
use crate::row;
use backoff_lab::classify::{classify_range, ClassifierConstants};
use backoff_lab::engine::{coupled_step_standard, EngineError, InitialPopulation, Mode};
use backoff_lab::hls::{check_axioms, hls, sample_domain, veb_run, HlsContext, HlsError, RuleConstants, VebConfig};
use backoff_lab::metrics::{summarize, Observation, Sojourn};
use backoff_lab::recurrence::{f_run, h_run, RecurrenceError};
use backoff_lab::{Process, ProcessKind, SendSequence, SequenceError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Recurrence(#[from] RecurrenceError),
    #[error(transparent)]
    Hls(#[from] HlsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Classify,
    Trace,
    Simulate,
    Couple,
    HlsCheck,
    Veb,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Classify => "classify",
            Command::Trace => "trace",
            Command::Simulate => "simulate",
            Command::Couple => "couple",
            Command::HlsCheck => "hls-check",
            Command::Veb => "veb",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    /// Data files in write order (the manifest is not listed).
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
    /// Invariant or axiom violations found.
    pub violations: u64,
    /// Replicas that stopped with an error.
    pub failures: u64,
}

struct Batch {
    files: Vec<PathBuf>,
    violations: u64,
    failures: u64,
    replicas: Vec<serde_json::Value>,
    extra: serde_json::Map<String, serde_json::Value>,
}

impl Batch {
    fn new() -> Self {
        Batch {
            files: Vec::new(),
            violations: 0,
            failures: 0,
            replicas: Vec::new(),
            extra: serde_json::Map::new(),
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, cmd: Command) -> Result<RunOutcome, RunError> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(RunError::Validation(errs.join("; ")));
    }
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.output.dir)?;
    let seq = Arc::new(cfg.send_sequence()?);
    let mut batch = Batch::new();
    match cmd {
        Command::Classify => classify(cfg, &seq, &mut batch)?,
        Command::Trace => trace(cfg, &seq, &mut batch)?,
        Command::Simulate => match cfg.process {
            ProcessSpec::Veb { .. } => veb(cfg, &seq, &mut batch)?,
            _ => simulate(cfg, &seq, &mut batch)?,
        },
        Command::Couple => couple(cfg, &seq, &mut batch)?,
        Command::HlsCheck => hls_check(cfg, &seq, &mut batch)?,
        Command::Veb => veb(cfg, &seq, &mut batch)?,
    }
    let manifest = cfg.output.dir.join("manifest.json");
    let files: Vec<String> = batch
        .files
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let mut doc = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": cmd.name(),
        "config": crate::config::render(cfg),
        "wall_time_secs": started.elapsed().as_secs_f64(),
        "outputs": files,
        "violations": batch.violations,
        "failures": batch.failures,
        "replicas": batch.replicas,
    });
    doc.as_object_mut().unwrap().extend(batch.extra);
    std::fs::write(&manifest, serde_json::to_string_pretty(&doc).unwrap() + "\n")?;
    Ok(RunOutcome {
        files: batch.files,
        manifest,
        violations: batch.violations,
        failures: batch.failures,
    })
}

fn write(cfg: &ExperimentConfig, batch: &mut Batch, table: &Table, stem: &str) -> Result<(), RunError> {
    batch.files.push(table.write(&cfg.output.dir, stem, cfg.output.format)?);
    Ok(())
}

fn classifier_constants(cfg: &ExperimentConfig) -> ClassifierConstants {
    if cfg.synthetic_constants {
        ClassifierConstants::synthetic(cfg.lambda)
    } else {
        ClassifierConstants::genuine(cfg.lambda)
    }
}

fn hls_context(cfg: &ExperimentConfig, seq: &Arc<SendSequence>, limit: usize) -> Result<HlsContext, HlsError> {
    if cfg.synthetic_constants {
        HlsContext::synthetic(seq.clone(), cfg.lambda, limit)
    } else {
        let consts = ClassifierConstants::genuine(cfg.lambda);
        let rule = RuleConstants::genuine(consts.phi);
        HlsContext::new(seq.clone(), consts, rule, limit)
    }
}

fn classify(cfg: &ExperimentConfig, seq: &SendSequence, batch: &mut Batch) -> Result<(), RunError> {
    let spec = cfg
        .classify
        .as_ref()
        .ok_or_else(|| RunError::Validation("classify needs a [classify] section".into()))?;
    let mut t = Table::with_columns(&["j", "class", "prop1", "prop2", "prop3", "wtilde", "upsilon", "log_weight"]);
    for c in classify_range(seq, &classifier_constants(cfg), spec.j_max)? {
        t.push(row![
            "j" => c.j,
            "class" => c.kind.name(),
            "prop1" => c.prop1,
            "prop2" => c.prop2,
            "prop3" => c.prop3,
            "wtilde" => c.wtilde.w,
            "upsilon" => c.wtilde.count,
            "log_weight" => c.log_weight,
        ]);
    }
    write(cfg, batch, &t, "classify")
}

fn trace(cfg: &ExperimentConfig, seq: &SendSequence, batch: &mut Batch) -> Result<(), RunError> {
    let spec = cfg
        .trace
        .as_ref()
        .ok_or_else(|| RunError::Validation("trace needs a [trace] section".into()))?;
    let j = spec.j;
    let zero = vec![0.0; j];
    let start = spec.start.clone().unwrap_or_else(|| zero.clone());
    let (prefix, origin, tr) = match spec.recurrence {
        Recurrence::Jammed => {
            let gamma = spec.gamma.clone().unwrap_or_else(|| zero.clone());
            ("f", 0, f_run(seq, cfg.lambda, &gamma, &start, cfg.horizon())?)
        }
        Recurrence::Escape => ("h", 0, h_run(seq, spec.nu.unwrap_or(0.0), &start, cfg.horizon())?),
        Recurrence::State => ("F", spec.tau, f_run(seq, cfg.lambda, &zero, &start, cfg.horizon())?),
    };
    let mut t = Table::default();
    for (i, v) in tr.values.iter().enumerate() {
        let mut r: Row = row!["t" => origin + i as u64];
        r.extend(v.iter().enumerate().map(|(k, x)| (format!("{prefix}_{}", k + 1), (*x).into())));
        t.push(r);
    }
    write(cfg, batch, &t, "trace")
}

fn engine_kind(cfg: &ExperimentConfig) -> Result<ProcessKind, RunError> {
    Ok(match &cfg.process {
        ProcessSpec::Backoff { cohorts } => ProcessKind::Backoff { cohorts: *cohorts },
        ProcessSpec::JJammed { j } => ProcessKind::JJammed { j: *j },
        ProcessSpec::ExternallyJammed { track } => ProcessKind::ExternallyJammed { track: *track },
        ProcessSpec::TwoStream => ProcessKind::TwoStream,
        ProcessSpec::UnderBackoff => ProcessKind::UnderBackoff,
        ProcessSpec::ConstantEscape { j, nu } => ProcessKind::ConstantEscape { j: *j, nu: *nu },
        ProcessSpec::Escape { j, sets, set_floor } => ProcessKind::Escape {
            j: *j,
            sets: sets.clone(),
            lambda: cfg.lambda,
            set_floor: *set_floor,
        },
        ProcessSpec::Veb { .. } => return Err(RunError::Validation("veb runs through the veb command".into())),
    })
}

fn initial(cfg: &ExperimentConfig, seq: &SendSequence) -> Result<InitialPopulation, SequenceError> {
    Ok(match &cfg.initial {
        InitialSpec::Empty => InitialPopulation::Empty,
        InitialSpec::Counts { counts } => InitialPopulation::Counts(counts.clone()),
        InitialSpec::Poisson { means } => InitialPopulation::Poisson(means.clone()),
        InitialSpec::Stationary { bins } => InitialPopulation::Poisson(
            (1..=*bins).map(|k| Ok(cfg.lambda * seq.weight(k)?)).collect::<Result<_, SequenceError>>()?,
        ),
    })
}

fn failure_row(r: u64, seed: u64, err: &dyn std::fmt::Display) -> Row {
    row!["replica" => r, "seed" => seed, "error" => err.to_string()]
}

fn simulate(cfg: &ExperimentConfig, seq: &Arc<SendSequence>, batch: &mut Batch) -> Result<(), RunError> {
    let kind = engine_kind(cfg)?;
    let sets: Vec<Vec<usize>> = cfg.observers.sets.iter().map(|s| s.bins.clone()).collect();
    let mut summary = Table::with_columns(&["replica", "seed", "window_start", "backlog_mean"]);
    for s in &cfg.observers.sets {
        summary.columns.push(format!("noise_{}", s.name));
    }
    summary.columns.extend(["escapes_cum", "empty_visits", "max_bin"].map(String::from));
    let mut failures = Table::with_columns(&["replica", "seed", "error"]);
    let nb = cfg.observers.bin_means;
    let steps = cfg.horizon() as usize + 1;
    let mut bin_sums = vec![0.0; steps * nb];
    let mut ok_replicas = 0u64;
    let init = initial(cfg, seq)?;
    for r in 0..cfg.replicas() {
        let seed = cfg.seed(r);
        let mut trace = Vec::with_capacity(steps);
        let mut bins = vec![0.0; steps * nb];
        let mut record_bins = |p: &Process, t: usize| {
            for k in 0..nb {
                bins[t * nb + k] = (0..p.streams()).map(|s| p.count(s, k + 1)).sum::<u64>() as f64;
            }
        };
        let result = Process::new(kind.clone(), seq.clone(), cfg.lambda, 0, init.clone(), seed, Mode::Count).and_then(|mut p| {
            record_bins(&p, 0);
            p.run(cfg.horizon(), |p, rep| {
                trace.push(Observation::of(p, rep, &sets));
                record_bins(p, rep.t as usize);
            })?;
            Ok(p)
        });
        match result {
            Ok(_) => {
                ok_replicas += 1;
                for (acc, v) in bin_sums.iter_mut().zip(&bins) {
                    *acc += v;
                }
                let sum = summarize(&trace, cfg.observers.window);
                for w in &sum.windows {
                    let mut row: Row = row!["replica" => r, "seed" => seed, "window_start" => w.start, "backlog_mean" => w.backlog_mean];
                    for (s, v) in cfg.observers.sets.iter().zip(&w.noise_mean) {
                        row.push((format!("noise_{}", s.name), (*v).into()));
                    }
                    row.extend(row!["escapes_cum" => w.escapes_cum, "empty_visits" => w.empty_visits, "max_bin" => w.max_bin]);
                    summary.push(row);
                }
                let (status, at) = match sum.sojourn {
                    Some(Sojourn::Returned(t)) => ("returned", t),
                    Some(Sojourn::Censored(t)) => ("censored", t),
                    None => ("empty", 0),
                };
                batch.replicas.push(json!({"replica": r, "seed": seed, "status": "ok", "sojourn": status, "sojourn_t": at}));
            }
            Err(e) => {
                batch.failures += 1;
                failures.push(failure_row(r, seed, &e));
                batch.replicas.push(json!({"replica": r, "seed": seed, "status": "failed", "error": e.to_string()}));
            }
        }
    }
    write(cfg, batch, &summary, "summary")?;
    write(cfg, batch, &failures, "failures")?;
    if nb > 0 {
        let mut t = Table::default();
        for step in 0..steps {
            let mut row: Row = row!["t" => step];
            for k in 0..nb {
                let mean = if ok_replicas == 0 { f64::NAN } else { bin_sums[step * nb + k] / ok_replicas as f64 };
                row.push((format!("b_{}", k + 1), mean.into()));
            }
            t.push(row);
        }
        write(cfg, batch, &t, "bin_means")?;
    }
    Ok(())
}

fn couple(cfg: &ExperimentConfig, seq: &Arc<SendSequence>, batch: &mut Batch) -> Result<(), RunError> {
    let spec = cfg
        .couple
        .as_ref()
        .ok_or_else(|| RunError::Validation("couple needs a [couple] section".into()))?;
    let upper_kind = engine_kind(cfg)?;
    let lower_kind = match spec.lower {
        LowerKind::Backoff => upper_kind.clone(),
        LowerKind::TwoStream => ProcessKind::TwoStream,
        LowerKind::UnderBackoff => ProcessKind::UnderBackoff,
    };
    let mut t = Table::with_columns(&["replica", "seed", "steps", "lower_backlog", "upper_backlog", "violations", "first_violation"]);
    let mut failures = Table::with_columns(&["replica", "seed", "error"]);
    for r in 0..cfg.replicas() {
        let seed = cfg.seed(r);
        let run = || -> Result<Row, EngineError> {
            let mut lo = Process::new(lower_kind.clone(), seq.clone(), spec.lower_lambda, 0, InitialPopulation::Empty, seed, Mode::Identity)?;
            let mut hi = Process::new(upper_kind.clone(), seq.clone(), cfg.lambda, 0, InitialPopulation::Empty, seed, Mode::Identity)?;
            let mut count = 0u64;
            let mut first = String::new();
            for _ in 0..cfg.horizon() {
                let (_, _, check) = coupled_step_standard(&mut lo, &mut hi)?;
                if first.is_empty() {
                    if let Some((inv, s, b)) = check.violations.first() {
                        first = format!("t={} {inv} stream {s} bin {b}", lo.t);
                    }
                }
                count += check.violations.len() as u64;
            }
            Ok(row![
                "replica" => r,
                "seed" => seed,
                "steps" => cfg.horizon(),
                "lower_backlog" => lo.backlog(),
                "upper_backlog" => hi.backlog(),
                "violations" => count,
                "first_violation" => first,
            ])
        };
        match run() {
            Ok(row) => {
                if let Some((_, crate::output::Cell::UInt(v))) = row.iter().find(|(k, _)| k == "violations") {
                    batch.violations += v;
                }
                batch.replicas.push(json!({"replica": r, "seed": seed, "status": "ok"}));
                t.push(row);
            }
            Err(e) => {
                batch.failures += 1;
                failures.push(failure_row(r, seed, &e));
                batch.replicas.push(json!({"replica": r, "seed": seed, "status": "failed", "error": e.to_string()}));
            }
        }
    }
    write(cfg, batch, &t, "couple")?;
    write(cfg, batch, &failures, "failures")
}

fn hls_check(cfg: &ExperimentConfig, seq: &Arc<SendSequence>, batch: &mut Batch) -> Result<(), RunError> {
    let spec = cfg
        .hls_check
        .as_ref()
        .ok_or_else(|| RunError::Validation("hls-check needs a [hls_check] section".into()))?;
    let ctx = hls_context(cfg, seq, spec.limit)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed);
    let samples = (0..spec.samples)
        .map(|_| sample_domain(&ctx, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tags: BTreeMap<&str, u64> = BTreeMap::new();
    for s in &samples {
        *tags.entry(hls(&ctx, &s.state, &s.b, s.t, spec.variant.into())?.tag.name()).or_default() += 1;
    }
    let found = check_axioms(&ctx, &samples, spec.variant.into(), spec.raises, &mut rng)?;
    let mut t = Table::with_columns(&["sample", "axiom", "detail"]);
    for v in &found {
        t.push(row!["sample" => v.sample, "axiom" => v.axiom, "detail" => v.detail.clone()]);
    }
    batch.violations += found.len() as u64;
    batch.extra.insert("samples".into(), json!(samples.len()));
    batch.extra.insert("rule_tags".into(), json!(tags));
    write(cfg, batch, &t, "hls_check")
}

fn veb(cfg: &ExperimentConfig, seq: &Arc<SendSequence>, batch: &mut Batch) -> Result<(), RunError> {
    let ProcessSpec::Veb { j0, set_floor, limit } = cfg.process else {
        return Err(RunError::Validation("veb needs process kind \"veb\"".into()));
    };
    let ctx = hls_context(cfg, seq, limit)?;
    let mut t = Table::default();
    for r in 0..cfg.replicas() {
        let seed = cfg.seed(r);
        let vc = VebConfig {
            j0,
            horizon: cfg.horizon(),
            seed,
            set_floor,
        };
        match veb_run(&ctx, &vc) {
            Ok(tr) => {
                for x in &tr.transitions {
                    t.push(row![
                        "record" => "transition",
                        "replica" => r,
                        "seed" => seed,
                        "t" => x.t,
                        "g" => x.g,
                        "tau" => x.tau,
                        "j" => x.j,
                        "type" => x.kind.name(),
                        "tag" => x.tag.name(),
                        "back_transition" => x.back_transition,
                    ]);
                }
                t.push(row![
                    "record" => "summary",
                    "replica" => r,
                    "seed" => seed,
                    "warmup" => tr.warmup,
                    "transitions" => tr.transitions.len(),
                    "i1_violations" => tr.i1_violations,
                    "i2_violations" => tr.i2_violations,
                    "checked_steps" => tr.checked_steps,
                    "max_backlog" => tr.max_backlog,
                    "final_type" => tr.final_state.kind.name(),
                ]);
                batch.violations += tr.i2_violations;
                batch.replicas.push(json!({"replica": r, "seed": seed, "status": "ok"}));
            }
            Err(e) => {
                batch.failures += 1;
                t.push(row!["record" => "failure", "replica" => r, "seed" => seed, "error" => e.to_string()]);
                batch.replicas.push(json!({"replica": r, "seed": seed, "status": "failed", "error": e.to_string()}));
            }
        }
    }
    write(cfg, batch, &t, "veb")
}

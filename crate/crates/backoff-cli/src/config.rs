//! Experiment configuration: a TOML document with top-level scalars and
//! one table per concern.
//!
//! ```toml
//! name = "demo"
//! lambda = 0.5
//! horizon = 1000
//! replicas = 2
//! base_seed = 42
//!
//! [sequence]
//! family = "binary_exponential"
//!
//! [process]
//! kind = "backoff"
//! cohorts = 1
//! ```

use backoff_lab::hls::RuleVariant;
use backoff_lab::{Family, SendSequence};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub lambda: f64,
    #[serde(default)]
    pub horizon: i64,
    #[serde(default = "one")]
    pub replicas: i64,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub synthetic_constants: bool,
    pub sequence: SequenceSpec,
    pub process: ProcessSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub observers: ObserverSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classify: Option<ClassifySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub couple: Option<CoupleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hls_check: Option<HlsCheckSpec>,
}

fn one() -> i64 {
    1
}

fn one_usize() -> usize {
    1
}

fn four() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SequenceSpec {
    Constant { p: f64 },
    BinaryExponential,
    Geometric { base: u64 },
    Polynomial { exponent: f64 },
    Explicit { probs: Vec<f64> },
    Interleaved { base: u64, schedule: Vec<u64> },
    WeaklyExposed { base: u64, start: u32 },
}

impl SequenceSpec {
    pub fn family(&self, lambda: f64) -> Family {
        match self.clone() {
            SequenceSpec::Constant { p } => Family::Constant { p },
            SequenceSpec::BinaryExponential => Family::BinaryExponential,
            SequenceSpec::Geometric { base } => Family::Geometric { base },
            SequenceSpec::Polynomial { exponent } => Family::Polynomial { exponent },
            SequenceSpec::Explicit { probs } => Family::Explicit { probs },
            SequenceSpec::Interleaved { base, schedule } => Family::InterleavedAlohaExp { base, schedule },
            SequenceSpec::WeaklyExposed { base, start } => Family::WeaklyExposedExample { base, start, lambda },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessSpec {
    Backoff {
        #[serde(default = "one_usize")]
        cohorts: usize,
    },
    JJammed {
        j: usize,
    },
    ExternallyJammed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        track: Option<usize>,
    },
    TwoStream,
    UnderBackoff,
    ConstantEscape {
        j: usize,
        nu: f64,
    },
    Escape {
        j: usize,
        sets: Vec<Vec<usize>>,
        #[serde(default = "four")]
        set_floor: f64,
    },
    /// The composite backoff/volume/escape simulation.
    Veb {
        j0: usize,
        #[serde(default = "four")]
        set_floor: f64,
        #[serde(default = "veb_limit")]
        limit: usize,
    },
}

fn veb_limit() -> usize {
    32
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    #[default]
    Empty,
    /// Counts for bins `1, 2, ...`.
    Counts { counts: Vec<u64> },
    /// Independent Poisson counts with these means for bins `1, 2, ...`.
    Poisson { means: Vec<f64> },
    /// Poisson with mean `lambda W_k` on bins `1..=bins`.
    Stationary { bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSet {
    pub name: String,
    pub bins: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverSpec {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub sets: Vec<NamedSet>,
    /// Average bins `1..=bin_means` over replicas at every step.
    #[serde(default)]
    pub bin_means: usize,
}

fn default_window() -> usize {
    100
}

impl Default for ObserverSpec {
    fn default() -> Self {
        ObserverSpec {
            window: default_window(),
            sets: Vec::new(),
            bin_means: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default)]
    pub format: Format,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: default_dir(),
            format: Format::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySpec {
    pub j_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recurrence {
    #[serde(rename = "f")]
    Jammed,
    #[serde(rename = "h")]
    Escape,
    #[serde(rename = "F")]
    State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub recurrence: Recurrence,
    pub j: usize,
    /// Damping for `f`; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    /// Starting vector; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
    /// Arrival rate for `h`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    /// Start time of the state for `F`.
    #[serde(default)]
    pub tau: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerKind {
    Backoff,
    TwoStream,
    UnderBackoff,
}

/// The lower process of a standard coupling; the upper one is `process`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupleSpec {
    pub lower: LowerKind,
    pub lower_lambda: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantSpec {
    #[default]
    Faithful,
    SkipR2Zeroing,
}

impl From<VariantSpec> for RuleVariant {
    fn from(v: VariantSpec) -> Self {
        match v {
            VariantSpec::Faithful => RuleVariant::Faithful,
            VariantSpec::SkipR2Zeroing => RuleVariant::SkipR2Zeroing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HlsCheckSpec {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_limit")]
    pub limit: usize,
    #[serde(default = "default_raises")]
    pub raises: usize,
    #[serde(default)]
    pub variant: VariantSpec,
}

fn default_samples() -> usize {
    10_000
}

fn default_limit() -> usize {
    33
}

fn default_raises() -> usize {
    4
}

impl ExperimentConfig {
    pub fn horizon(&self) -> u64 {
        self.horizon.max(0) as u64
    }

    pub fn replicas(&self) -> u64 {
        self.replicas.max(1) as u64
    }

    /// Seed of replica `r`.
    pub fn seed(&self, r: u64) -> u64 {
        self.base_seed ^ r
    }

    pub fn send_sequence(&self) -> Result<SendSequence, backoff_lab::SequenceError> {
        SendSequence::new(self.sequence.family(self.lambda))
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            errs.push(format!("birth rate out of range: lambda = {} not in (0,1)", self.lambda));
        }
        if self.horizon < 0 {
            errs.push(format!("horizon must be non-negative, got {}", self.horizon));
        }
        if self.replicas < 1 {
            errs.push(format!("replicas must be at least 1, got {}", self.replicas));
        }
        if let Err(e) = self.send_sequence() {
            errs.push(format!("sequence: {e}"));
        }
        match &self.process {
            ProcessSpec::Backoff { cohorts } if *cohorts == 0 || *cohorts > 255 => {
                errs.push(format!("backoff cohorts must be in 1..=255, got {cohorts}"));
            }
            ProcessSpec::JJammed { j } | ProcessSpec::ConstantEscape { j, .. } | ProcessSpec::Escape { j, .. } if *j == 0 => {
                errs.push("process bin j must be at least 1".into());
            }
            ProcessSpec::ExternallyJammed { track: Some(0) } => errs.push("tracked bin must be at least 1".into()),
            _ => {}
        }
        match &self.process {
            ProcessSpec::ConstantEscape { nu, .. } if !(*nu >= 0.0 && *nu <= 1.0) => {
                errs.push(format!("arrival rate nu = {nu} not in [0,1]"));
            }
            ProcessSpec::Escape { j, sets, .. } => {
                if sets.iter().flatten().any(|b| *b == 0 || b > j) {
                    errs.push(format!("escape sets must hold bins in 1..={j}"));
                }
            }
            ProcessSpec::Veb { j0, limit, .. } => {
                if self.lambda >= 1.0 / 120.0 {
                    errs.push(format!("veb needs lambda < 1/120, got {}", self.lambda));
                }
                if *j0 == 0 || j0 >= limit {
                    errs.push(format!("veb needs 1 <= j0 < limit, got j0 = {j0}, limit = {limit}"));
                }
            }
            _ => {}
        }
        if self.observers.window == 0 {
            errs.push("observer window must be positive".into());
        }
        let mut names: Vec<&str> = self.observers.sets.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            errs.push("observer set names must be unique".into());
        }
        if self.observers.sets.iter().any(|s| s.bins.contains(&0)) {
            errs.push("observer sets hold bins numbered from 1".into());
        }
        if let Some(c) = &self.classify {
            if c.j_max == 0 {
                errs.push("classify j_max must be at least 1".into());
            }
        }
        if let Some(t) = &self.trace {
            if t.j == 0 {
                errs.push("trace j must be at least 1".into());
            }
            for (what, v) in [("gamma", &t.gamma), ("start", &t.start)] {
                if let Some(v) = v {
                    if v.len() != t.j {
                        errs.push(format!("trace {what} has {} entries, expected {}", v.len(), t.j));
                    }
                }
            }
            if t.recurrence == Recurrence::Escape && t.nu.is_none() {
                errs.push("trace of h needs nu".into());
            }
        }
        if let Some(c) = &self.couple {
            if !(c.lower_lambda > 0.0 && c.lower_lambda <= self.lambda) {
                errs.push(format!("lower_lambda = {} not in (0, lambda]", c.lower_lambda));
            }
            let cohorts = match (c.lower, &self.process) {
                (LowerKind::Backoff, ProcessSpec::Backoff { .. }) => None,
                (LowerKind::TwoStream, ProcessSpec::Backoff { cohorts }) => Some((2, *cohorts)),
                (LowerKind::UnderBackoff, ProcessSpec::Backoff { cohorts }) => Some((3, *cohorts)),
                _ => Some((0, 0)),
            };
            if let Some((want, got)) = cohorts {
                if want != got {
                    errs.push(format!("coupling needs a backoff upper process with matching cohorts ({want}), got {:?}", self.process));
                }
            }
        }
        if let Some(h) = &self.hls_check {
            if h.limit < 2 {
                errs.push("hls_check limit must be at least 2".into());
            }
        }
        errs
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        ConfigError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let errs = cfg.validate();
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Validation(errs))
    }
}

pub fn render(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("configuration is always representable")
}

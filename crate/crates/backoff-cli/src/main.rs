use backoff_cli::config::{parse_config, ConfigError, ExperimentConfig, Format};
use backoff_cli::plot::{emit_plot_data, load_series, PlotError};
use backoff_cli::runner::{run_experiment, Command, RunError};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VIOLATIONS: u8 = 3;

#[derive(Parser)]
#[command(name = "backoff-lab", version, about = "Backoff process laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Desk-scale classifier and rule constants.
    #[arg(long)]
    synthetic_constants: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Classify bins 1..=j_max.
    Classify(Common),
    /// Evaluate the f, h or F recurrence.
    Trace(Common),
    /// Run replicas of a process and write windowed summaries.
    Simulate(Common),
    /// Run a standard coupling and check its subset invariants.
    Couple(Common),
    /// Check the transition-rule axioms on random domain samples.
    HlsCheck(Common),
    /// Run the composite backoff/volume/escape simulation.
    Veb(Common),
    /// Extract long-format series from wide CSV outputs.
    Plotdata {
        /// Wide CSV files written by other subcommands.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Comma-separated series keys.
        #[arg(long, value_delimiter = ',')]
        series: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| ConfigError::Parse {
        line: 0,
        column: 0,
        message: format!("{}: {e}", common.config.display()),
    })?;
    let mut cfg = parse_config(&text)?;
    if let Some(s) = common.seed {
        cfg.base_seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    if let Some(f) = common.format {
        cfg.output.format = f;
    }
    cfg.synthetic_constants |= common.synthetic_constants;
    Ok(cfg)
}

fn run(common: &Common, cmd: Command) -> ExitCode {
    let cfg = match load(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    match run_experiment(&cfg, cmd) {
        Ok(out) => {
            for f in &out.files {
                println!("{}", f.display());
            }
            if out.violations > 0 {
                eprintln!("{} invariant violations detected", out.violations);
                ExitCode::from(EXIT_VIOLATIONS)
            } else if out.failures > 0 {
                eprintln!("{} replicas failed", out.failures);
                ExitCode::from(EXIT_RUNTIME)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(RunError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn plotdata(input: &[PathBuf], series: &[String], out: &PathBuf) -> ExitCode {
    let result = (|| {
        let mut all = Vec::new();
        for p in input {
            all.extend(load_series(p)?);
        }
        std::fs::create_dir_all(out)?;
        let path = out.join("plot.csv");
        emit_plot_data(&all, series, &path)?;
        Ok::<_, PlotError>(path)
    })();
    match result {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e @ PlotError::UnknownSeries(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Cmd::Classify(c) => run(c, Command::Classify),
        Cmd::Trace(c) => run(c, Command::Trace),
        Cmd::Simulate(c) => run(c, Command::Simulate),
        Cmd::Couple(c) => run(c, Command::Couple),
        Cmd::HlsCheck(c) => run(c, Command::HlsCheck),
        Cmd::Veb(c) => run(c, Command::Veb),
        Cmd::Plotdata { input, series, out } => plotdata(input, series, out),
    }
}

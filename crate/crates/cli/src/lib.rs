//! Scenario loading, output files and the `run` / `verify` commands behind
//! the `rendezvous` binary.

pub mod output;
pub mod summary;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rendezvous_core::scenario::{preset, GainMode, Scenario, ScenarioConfig, PRESET_NAMES};
use rendezvous_core::sim::{compare_gain_modes, episode_seed};
use rendezvous_core::verify::{run_suite, Suite};

pub const OUT_DIR_ENV: &str = "RENDEZVOUS_OUT_DIR";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid scenario. Exit status 2.
    Config(String),
    /// Failure while simulating or writing results. Exit status 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    /// Always one line: `error[config]: ...` or `error[runtime]: ...`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        write!(f, "error[{kind}]: {}", msg.replace('\n', " "))
    }
}

impl std::error::Error for CliError {}

impl From<rendezvous_core::Error> for CliError {
    fn from(e: rendezvous_core::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

pub fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "rendezvous", version, about = "Distributed LQG rendezvous simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario (Monte Carlo batch) and write traces and statistics.
    Run(RunArgs),
    /// Run one of the built-in oracle checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Local,
    Global,
}

impl From<ModeArg> for GainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Local => GainMode::Local,
            ModeArg::Global => GainMode::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Kalman,
    Riccati,
    Lemma1,
    Bound,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Kalman => Suite::Kalman,
            SuiteArg::Riccati => Suite::Riccati,
            SuiteArg::Lemma1 => Suite::Lemma1,
            SuiteArg::Bound => Suite::Bound,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario TOML file or preset name (paper-sec5-low-noise, paper-sec5-high-noise).
    #[arg(long)]
    pub scenario: String,
    /// Master seed; overrides the scenario's `master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo runs; overrides `monte_carlo_runs`.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    pub out: PathBuf,
    /// Also write the synthesized Pi and gain sequences.
    #[arg(long)]
    pub dump_gains: bool,
    /// Gain synthesis mode; overrides `gain_mode`.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Keep stepping after convergence, up to max_steps.
    #[arg(long)]
    pub run_to_horizon: bool,
    /// Number of runs whose full trace is written as CSV.
    #[arg(long, default_value_t = 1)]
    pub traces: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: SuiteArg,
    #[arg(long, default_value_t = 20_240_601)]
    pub seed: u64,
}

/// Resolves a preset name or reads, parses and validates a TOML scenario.
pub fn load_scenario(spec: &str) -> Result<ScenarioConfig, CliError> {
    if let Some(cfg) = preset(spec) {
        return Ok(cfg);
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!(
            "cannot read scenario {}: {e} (known presets: {})",
            path.display(),
            PRESET_NAMES.join(", ")
        ))
    })?;
    let cfg = parse_scenario(&text).map_err(|msg| CliError::Config(format!("{}: {msg}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses scenario TOML; errors carry `line:col` of the offending span.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, String> {
    toml::from_str(text).map_err(|e| {
        let location = e
            .span()
            .map(|span| {
                let before = &text[..span.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                format!("{line}:{col}: ")
            })
            .unwrap_or_default();
        format!("{location}{}", e.message().trim())
    })
}

pub fn run_command(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => run(args).map(|_| ()),
        Command::Verify(args) => verify(args),
    }
}

/// Files written by one `run` invocation.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub summary: summary::RunSummary,
    pub manifest: summary::RunManifest,
}

pub fn run(args: RunArgs) -> Result<RunOutputs, CliError> {
    let start = Instant::now();
    let mut cfg = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(runs) = args.runs {
        cfg.monte_carlo_runs = runs;
    }
    if let Some(mode) = args.mode {
        cfg.gain_mode = mode.into();
    }
    cfg.run_to_horizon |= args.run_to_horizon;
    let scenario = Scenario::new(cfg)?;
    let cfg = scenario.config();

    std::fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    let mut written = Vec::new();

    let series = scenario.monte_carlo_series()?;
    let stats = rendezvous_core::BatchStats::aggregate(&series);

    for run in 0..args.traces.min(cfg.monte_carlo_runs) {
        let trace = scenario.run_episode(episode_seed(cfg.master_seed, run))?;
        let path = args.out.join(format!("trace_run{run:04}.csv"));
        output::emit_trace_csv(&trace, &path)?;
        written.push(path);
    }

    let comparison = compare_gain_modes(cfg)?;
    let summary = summary::RunSummary::build(&scenario, &stats, comparison);

    let path = args.out.join("series.csv");
    output::emit_series_csv(&summary, cfg.h, &path)?;
    written.push(path);

    if args.dump_gains {
        let path = args.out.join("gains.csv");
        output::emit_gains_csv(&scenario, &path)?;
        written.push(path);
    }

    let path = args.out.join("scenario.toml");
    let toml_text = toml::to_string(cfg).map_err(|e| CliError::Runtime(format!("serializing scenario: {e}")))?;
    output::write_file(&path, toml_text.as_bytes())?;
    written.push(path);

    let path = args.out.join("summary.json");
    output::write_json(&summary, &path)?;
    written.push(path);

    let manifest_path = args.out.join("manifest.json");
    written.push(manifest_path.clone());
    let manifest = summary::RunManifest {
        scenario: cfg.name.clone(),
        config_hash: summary.config_hash.clone(),
        master_seed: cfg.master_seed,
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: written.iter().map(|p| p.display().to_string()).collect(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    output::write_json(&manifest, &manifest_path)?;

    println!(
        "{}: {} runs, converged {}/{}, terminal MSE {:.4e} m^2, outputs in {}",
        cfg.name,
        stats.runs,
        stats.convergence_steps.iter().flatten().count(),
        stats.runs,
        stats.terminal_true_mse,
        args.out.display()
    );
    Ok(RunOutputs { summary, manifest })
}

pub fn verify(args: VerifyArgs) -> Result<(), CliError> {
    let report = run_suite(args.suite.into(), args.seed)?;
    for line in &report.lines {
        println!("{line}");
    }
    println!(
        "{}: {}/{} checks passed",
        report.suite,
        report.lines.len() - report.failures(),
        report.lines.len()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{} suite: {} checks failed", report.suite, report.failures())))
    }
}

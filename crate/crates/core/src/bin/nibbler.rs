//! Command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, oracle mismatch),
//! 2 invalid configuration, 3 at least one run diverged.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use toml::{Table, Value};

use nibbler::harness::{self, ConfigError, ExperimentConfig, RunError, SweepConfig};
use nibbler::metrics::summarize;
use nibbler::multicatch::{write_trajectory, BoardConfig, EnvSpec};
use nibbler::oracle;
use nibbler::rng::{self, roles};

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "nibbler", version, about = "Multi-catch scaling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment over its seeds.
    Run(RunArgs),
    /// Run the Cartesian product of a grid over a base config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `base.log.output`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Thresholds and doubling ratios from run directories.
    Metrics {
        /// Run directories, or directories containing them.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        r_thresh: f64,
        /// Write the JSON summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run brute-force validators.
    Oracle {
        #[arg(long, value_enum, default_value_t = OracleCheck::All)]
        check: OracleCheck,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Dump a random-policy trajectory: `t,action,reward,bits` per line.
    Trajectory {
        /// Environment TOML (the `[env]` keys at top level).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        steps: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OracleCheck {
    All,
    Grad,
    Env,
    Td,
    Topk,
    Discovery,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algorithm {
    Nibbler,
    Q,
    Qv,
}

/// Flags mirror the config fields. Values in `--config` take precedence.
#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of boards (`env.num_parallel`).
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long)]
    heterogeneous: bool,
    #[arg(long, value_enum, default_value_t = Algorithm::Nibbler)]
    algorithm: Algorithm,
    #[arg(long, default_value_t = 1_000_000)]
    total_steps: u64,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 100_000)]
    window: u64,
    #[arg(long, default_value_t = 10_000)]
    interval: u64,
    #[arg(long, default_value = "runs")]
    output: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    r_thresh: f64,
    /// Save a resumable checkpoint every this many steps; a run directory
    /// left by an interrupted run is resumed.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

impl RunArgs {
    fn to_table(&self) -> Table {
        let mut env = Table::new();
        env.insert("num_parallel".into(), Value::Integer(self.n as i64));
        if self.heterogeneous {
            env.insert("heterogeneous".into(), Value::Boolean(true));
        }
        let mut algorithm = Table::new();
        let kind = match self.algorithm {
            Algorithm::Nibbler => "nibbler",
            Algorithm::Q => "q",
            Algorithm::Qv => "qv",
        };
        algorithm.insert("kind".into(), Value::String(kind.into()));
        let mut log = Table::new();
        log.insert("window".into(), Value::Integer(self.window as i64));
        log.insert("interval".into(), Value::Integer(self.interval as i64));
        log.insert("output".into(), Value::String(self.output.display().to_string()));
        let mut t = Table::new();
        t.insert("env".into(), Value::Table(env));
        t.insert("algorithm".into(), Value::Table(algorithm));
        t.insert("log".into(), Value::Table(log));
        t.insert("total_steps".into(), Value::Integer(self.total_steps as i64));
        t.insert("seeds".into(), Value::Array(self.seeds.iter().map(|&s| Value::Integer(s as i64)).collect()));
        t.insert("r_thresh".into(), Value::Float(self.r_thresh));
        t
    }
}

/// Recursively overlays `top` onto `base`. A different algorithm `kind`
/// replaces the whole algorithm table.
fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => {
                if key == "algorithm" && t.get("kind").is_some_and(|k| Some(k) != b.get("kind")) {
                    *b = t;
                } else {
                    merge(b, t);
                }
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

enum Failure {
    Invalid(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => Failure::Invalid(c.into()),
            other => Failure::Other(other.into()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Invalid(e.into())
    }
}

fn read_table(path: &Path) -> Result<Table, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<Table>()
        .map_err(|e| Failure::Invalid(anyhow::anyhow!("{}: {e}", path.display())))
}

fn cmd_run(args: RunArgs) -> Result<u8, Failure> {
    let mut table = args.to_table();
    if let Some(path) = &args.config {
        merge(&mut table, read_table(path)?);
    }
    let cfg: ExperimentConfig = Value::Table(table).try_into().map_err(ConfigError::from)?;
    let logs = harness::run_experiment(&cfg, args.checkpoint_every)?;
    let diverged: Vec<u64> = logs.iter().filter(|l| l.meta.diverged_at.is_some()).map(|l| l.meta.seed).collect();
    let summary = summarize(&logs, cfg.r_thresh);
    println!("{}", serde_json::to_string_pretty(&summary).context("serializing summary")?);
    if let Some(root) = &cfg.log.output {
        eprintln!("runs written under {}/{}-seed*", root.display(), cfg.hash());
    }
    if diverged.is_empty() {
        Ok(0)
    } else {
        eprintln!("diverged seeds: {diverged:?}");
        Ok(EXIT_DIVERGED)
    }
}

fn cmd_sweep(config: &Path, output: Option<PathBuf>) -> Result<u8, Failure> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut sweep = SweepConfig::from_toml(&text)?;
    if output.is_some() {
        sweep.base.log.output = output;
    }
    let rows = harness::run_sweep(&sweep)?;
    print!("{}", harness::summary_csv(&rows));
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see the error column", rows.len());
    }
    Ok(if rows.iter().any(|r| !r.diverged_seeds.is_empty()) { EXIT_DIVERGED } else { 0 })
}

fn cmd_metrics(paths: &[PathBuf], r_thresh: f64, out: Option<&Path>) -> Result<u8, Failure> {
    let mut logs = Vec::new();
    for path in paths {
        for dir in harness::find_run_dirs(path)? {
            logs.push(harness::read_run_dir(&dir)?);
        }
    }
    if logs.is_empty() {
        return Err(Failure::Other(anyhow::anyhow!("no run directories found")));
    }
    let json = serde_json::to_string_pretty(&summarize(&logs, r_thresh)).context("serializing summary")?;
    match out {
        Some(path) => harness::write_atomic(path, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(0)
}

fn cmd_oracle(check: OracleCheck, seed: u64) -> Result<u8, Failure> {
    let mut ok = true;
    let mut report = serde_json::Map::new();
    let wants = |c| check == OracleCheck::All || check == c;
    if wants(OracleCheck::Grad) {
        let r = oracle::gradient_oracle(100, seed);
        ok &= r.max_rel_err < 1e-5;
        report.insert("grad".into(), serde_json::to_value(r).context("gradient report")?);
    }
    if wants(OracleCheck::Env) {
        let r = oracle::env_oracle(&BoardConfig::standard(1), 1_000_000, seed);
        ok &= r.z <= 3.0;
        report.insert("env".into(), serde_json::to_value(r).context("env report")?);
    }
    if wants(OracleCheck::Td) {
        let r = oracle::td_oracle(200_000, seed);
        ok &= r.max_abs_err < 1e-2;
        report.insert("td".into(), serde_json::to_value(r).context("td report")?);
    }
    if wants(OracleCheck::Topk) {
        let r = oracle::top_k_oracle(1000, 200, 50, seed);
        ok &= r.converged == r.cases && r.max_changes_per_call <= 1;
        report.insert("topk".into(), serde_json::to_value(r).context("topk report")?);
    }
    if wants(OracleCheck::Discovery) {
        let r = oracle::discovery_oracle(2, 500_000, seed);
        let near = |ws: &[f64], target: f64| ws.iter().all(|w| (w - target).abs() <= 0.05);
        ok &= near(&r.plus_weights, 0.2) && near(&r.minus_weights, -0.2) && r.selected == r.expected;
        report.insert("discovery".into(), serde_json::to_value(r).context("discovery report")?);
    }
    report.insert("pass".into(), ok.into());
    println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
    Ok(if ok { 0 } else { EXIT_FAILURE })
}

fn cmd_trajectory(config: Option<&Path>, n: usize, steps: u64, seed: u64, out: Option<&Path>) -> Result<u8, Failure> {
    let spec = match config {
        Some(path) => {
            let table = read_table(path)?;
            let spec: EnvSpec = Value::Table(table).try_into().map_err(ConfigError::from)?;
            spec
        }
        None => EnvSpec::standard(n),
    };
    let mut env = spec.build(rng::derive_seed(seed, roles::ENV, 0)).map_err(ConfigError::from)?;
    let mut policy = rng::stream(seed, roles::AGENT, 0);
    let sink: Box<dyn Write> = match out {
        Some(path) => Box::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut sink = BufWriter::new(sink);
    write_trajectory(&mut env, steps, &mut policy, &mut sink).context("writing trajectory")?;
    sink.flush().context("writing trajectory")?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep { config, output } => cmd_sweep(&config, output),
        Command::Metrics { paths, r_thresh, out } => cmd_metrics(&paths, r_thresh, out.as_deref()),
        Command::Oracle { check, seed } => cmd_oracle(check, seed),
        Command::Trajectory { config, n, steps, seed, out } => {
            cmd_trajectory(config.as_deref(), n, steps, seed, out.as_deref())
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

//! Experiment driver: configs, per-seed runs, checkpoints, output layout
//! and sweeps.
//!
//! A run is a pure function of `(config, seed)`. The environment and agent
//! get their own master seeds, `derive_seed(seed, "env", 0)` and
//! `derive_seed(seed, "agent", 0)`, from which every internal stream is
//! derived in turn.
//!
//! Output layout, one directory per run under `log.output`:
//!
//! ```text
//! <hash>-seed<seed>/log.csv          timestep,avg_reward
//! <hash>-seed<seed>/meta.json        RunMeta
//! <hash>-seed<seed>/config.toml      the experiment config, minus log.output
//! <hash>-seed<seed>/weights.bin      final weights (NBLW tensor file)
//! <hash>-seed<seed>/checkpoint.json  RunState, only while checkpointing
//! ```
//!
//! `<hash>` is the first 16 hex digits of the SHA-256 of the config's
//! canonical JSON with `seeds` and `log.output` removed.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{BaselineAgent, BaselineConfig, BaselineVariant};
use crate::metrics::{aggregate_thresholds, timesteps_to_threshold, RewardTracker, RunLog, RunMeta, Smoothing, ThresholdSummary};
use crate::micrograd::{write_tensors, Tensor};
use crate::multicatch::{Action, EnvError, EnvSpec, MultiCatchEnv, NUM_ACTIONS};
use crate::nibbler::{AgentError, NibblerAgent, NibblerConfig, UpdateOrder};
use crate::rng::{self, roles};
use crate::selection::SlotReset;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("invalid config `env`: {0}")]
    Env(#[from] EnvError),
    #[error("invalid config `algorithm`: {0}")]
    Agent(#[from] AgentError),
}

fn invalid<T>(field: &str, reason: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid { field: field.to_string(), reason: reason.into() })
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Optional Nibbler settings; unset fields take the defaults for the
/// environment's `n` and `m`. Setting `kappa` or `h` without `alpha`
/// re-derives `alpha = alpha_b = kappa / sqrt(h)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NibblerOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_inputs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_cumulants: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_reset: Option<SlotReset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_order: Option<UpdateOrder>,
}

impl NibblerOverrides {
    pub fn resolve(&self, n: usize, m: usize) -> NibblerConfig {
        let mut c = NibblerConfig::default_for(n, m);
        if let Some(v) = self.h {
            c.h = v;
        }
        if let Some(v) = self.kappa {
            c.kappa = v;
        }
        c.rederive_step_sizes();
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(g, d, alpha, alpha_b, tau_inputs, tau_cumulants, gamma, epsilon, nu, slot_reset, update_order);
        if self.alpha.is_some() && self.alpha_b.is_none() {
            c.alpha_b = c.alpha;
        }
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl BaselineOverrides {
    pub fn resolve(&self, variant: BaselineVariant) -> BaselineConfig {
        let mut c = BaselineConfig::new(variant);
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(hidden_dim, alpha, nu, epsilon, gamma);
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgorithmSpec {
    Nibbler(NibblerOverrides),
    Q(BaselineOverrides),
    Qv(BaselineOverrides),
}

impl AlgorithmSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmSpec::Nibbler(_) => "nibbler",
            AlgorithmSpec::Q(_) => "q",
            AlgorithmSpec::Qv(_) => "qv",
        }
    }
}

fn default_window() -> usize {
    100_000
}

fn default_interval() -> u64 {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_interval")]
    pub interval: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub smoothing: Smoothing,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig { window: default_window(), interval: default_interval(), output: None, smoothing: Smoothing::Trailing }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub algorithm: AlgorithmSpec,
    pub total_steps: u64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub log: LogConfig,
    #[serde(default)]
    pub r_thresh: f64,
}

impl ExperimentConfig {
    pub fn new(env: EnvSpec, algorithm: AlgorithmSpec, total_steps: u64, seeds: Vec<u64>) -> Self {
        ExperimentConfig { env, algorithm, total_steps, seeds, log: LogConfig::default(), r_thresh: 0.0 }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return invalid("seeds", "must list at least one seed");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return invalid("seeds", format!("seed {} is listed twice", w[0]));
        }
        if self.log.window == 0 {
            return invalid("log.window", "must be at least 1");
        }
        if self.log.interval == 0 {
            return invalid("log.interval", "must be at least 1");
        }
        if self.total_steps < self.log.window as u64 {
            return invalid(
                "total_steps",
                format!("{} is shorter than log.window = {}", self.total_steps, self.log.window),
            );
        }
        if !self.r_thresh.is_finite() {
            return invalid("r_thresh", "must be finite");
        }
        self.env.validate()?;
        // Agent settings depend on the observation length; build an env to get it.
        let env = self.env.build(0)?;
        self.check_agent(self.env.num_parallel, env.observation_len())
    }

    fn check_agent(&self, n: usize, m: usize) -> Result<(), ConfigError> {
        match &self.algorithm {
            AlgorithmSpec::Nibbler(o) => o.resolve(n, m).validate(m)?,
            AlgorithmSpec::Q(o) => o.resolve(BaselineVariant::Q).validate()?,
            AlgorithmSpec::Qv(o) => o.resolve(BaselineVariant::Qv).validate()?,
        }
        Ok(())
    }

    /// Hash of everything that determines a run apart from the seed.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes to JSON");
        let obj = value.as_object_mut().expect("config is a JSON object");
        obj.remove("seeds");
        if let Some(log) = obj.get_mut("log").and_then(|l| l.as_object_mut()) {
            log.remove("output");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir_name(&self, seed: u64) -> String {
        format!("{}-seed{seed}", self.hash())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Agent {
    Nibbler(Box<NibblerAgent>),
    Baseline(Box<BaselineAgent>),
}

impl Agent {
    pub fn build(spec: &AlgorithmSpec, n: usize, m: usize, seed: u64) -> Result<Self, AgentError> {
        Ok(match spec {
            AlgorithmSpec::Nibbler(o) => Agent::Nibbler(Box::new(NibblerAgent::new(o.resolve(n, m), m, NUM_ACTIONS, seed)?)),
            AlgorithmSpec::Q(o) => {
                Agent::Baseline(Box::new(BaselineAgent::new(o.resolve(BaselineVariant::Q), m, NUM_ACTIONS, seed)?))
            }
            AlgorithmSpec::Qv(o) => {
                Agent::Baseline(Box::new(BaselineAgent::new(o.resolve(BaselineVariant::Qv), m, NUM_ACTIONS, seed)?))
            }
        })
    }

    pub fn step(&mut self, reward: f64, observation: &[u8]) -> Result<usize, AgentError> {
        match self {
            Agent::Nibbler(a) => a.step(reward, observation),
            Agent::Baseline(a) => a.step(reward, observation),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Agent::Nibbler(a) => a.is_finite(),
            Agent::Baseline(a) => a.is_finite(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Agent::Nibbler(a) => a.param_count(),
            Agent::Baseline(a) => a.param_count(),
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        match self {
            Agent::Nibbler(a) => a.tensors(),
            Agent::Baseline(a) => a.tensors(),
        }
    }
}

/// Everything needed to continue a run: environment, agent, smoother and
/// the pending action. Serialized as JSON; floats round-trip exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunState {
    pub config_hash: String,
    pub seed: u64,
    pub n: usize,
    pub algorithm: String,
    pub total_steps: u64,
    pub t: u64,
    pub env: MultiCatchEnv,
    pub agent: Agent,
    pub tracker: RewardTracker,
    pub action: usize,
    pub diverged_at: Option<u64>,
}

impl RunState {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self, ConfigError> {
        let env = cfg.env.build(rng::derive_seed(seed, roles::ENV, 0))?;
        let n = cfg.env.num_parallel;
        let mut agent = Agent::build(&cfg.algorithm, n, env.observation_len(), rng::derive_seed(seed, roles::AGENT, 0))?;
        // First call only caches the initial observation and picks A_0.
        let action = agent.step(0.0, env.observation().bits())?;
        Ok(RunState {
            config_hash: cfg.hash(),
            seed,
            n,
            algorithm: cfg.algorithm.name().to_string(),
            total_steps: cfg.total_steps,
            t: 0,
            env,
            agent,
            tracker: RewardTracker::new(cfg.log.window, cfg.log.interval, cfg.log.smoothing),
            action,
            diverged_at: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.total_steps || self.diverged_at.is_some()
    }

    /// Advances by up to `steps` environment steps. Weights are checked for
    /// non-finite values at every eval point and at the end; a divergent run
    /// stops there.
    pub fn advance(&mut self, steps: u64) {
        let end = self.total_steps.min(self.t.saturating_add(steps));
        let interval = self.tracker.interval();
        while self.t < end && self.diverged_at.is_none() {
            let (reward, obs) = self.env.step(Action::ALL[self.action]);
            let reward = f64::from(reward);
            self.tracker.push(reward);
            self.action = self.agent.step(reward, obs.bits()).expect("observation length fixed by construction");
            self.t += 1;
            if (self.t % interval == 0 || self.t == end) && !self.agent.is_finite() {
                self.diverged_at = Some(self.t);
            }
        }
    }

    pub fn run_to_end(&mut self) {
        self.advance(u64::MAX);
    }

    pub fn log(&self, cfg: &ExperimentConfig) -> RunLog {
        RunLog {
            points: self.tracker.points().to_vec(),
            meta: RunMeta {
                n: self.n,
                algorithm: self.algorithm.clone(),
                seed: self.seed,
                config_hash: self.config_hash.clone(),
                window: cfg.log.window,
                interval: cfg.log.interval,
                smoothing: cfg.log.smoothing,
                diverged_at: self.diverged_at,
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Runs one seed to completion in memory.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunLog, ConfigError> {
    let mut state = RunState::new(cfg, seed)?;
    state.run_to_end();
    Ok(state.log(cfg))
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(contents).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Runs one seed, writing its directory under `root`. With
/// `checkpoint_every = Some(k)` a checkpoint is saved every `k` steps and an
/// existing checkpoint in the run directory is resumed from.
pub fn run_seed_to_dir(
    cfg: &ExperimentConfig,
    seed: u64,
    root: &Path,
    checkpoint_every: Option<u64>,
) -> Result<RunLog, RunError> {
    let final_dir = root.join(cfg.run_dir_name(seed));
    let work_dir = root.join(format!("{}.partial", cfg.run_dir_name(seed)));
    fs::create_dir_all(&work_dir).map_err(io_err(&work_dir))?;
    let ckpt = work_dir.join("checkpoint.json");

    let mut state = match checkpoint_every {
        Some(_) if ckpt.exists() => {
            let text = fs::read_to_string(&ckpt).map_err(io_err(&ckpt))?;
            let state = RunState::from_json(&text)
                .map_err(|e| RunError::Checkpoint { path: ckpt.clone(), reason: e.to_string() })?;
            if state.config_hash != cfg.hash() || state.seed != seed {
                return Err(RunError::Checkpoint { path: ckpt, reason: "belongs to a different config or seed".into() });
            }
            state
        }
        _ => RunState::new(cfg, seed)?,
    };
    while !state.is_done() {
        match checkpoint_every {
            Some(k) => {
                state.advance(k.max(1));
                if !state.is_done() {
                    write_atomic(&ckpt, state.to_json().as_bytes())?;
                }
            }
            None => state.run_to_end(),
        }
    }

    let log = state.log(cfg);
    write_atomic(&work_dir.join("log.csv"), log.to_csv().as_bytes())?;
    let meta = serde_json::to_string_pretty(&log.meta).expect("meta serializes");
    write_atomic(&work_dir.join("meta.json"), meta.as_bytes())?;
    // Stored without `log.output` so run directories are relocatable.
    let mut stored = cfg.clone();
    stored.log.output = None;
    write_atomic(&work_dir.join("config.toml"), stored.to_toml().as_bytes())?;
    let mut weights = Vec::new();
    if state.agent.is_finite() {
        write_tensors(&state.agent.tensors(), &mut weights).expect("writing to memory");
        write_atomic(&work_dir.join("weights.bin"), &weights)?;
    }
    if ckpt.exists() {
        fs::remove_file(&ckpt).map_err(io_err(&ckpt))?;
    }
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(io_err(&final_dir))?;
    }
    fs::rename(&work_dir, &final_dir).map_err(io_err(&final_dir))?;
    Ok(log)
}

fn map_seeds<T: Send>(seeds: &[u64], f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| f(s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seeds.iter().map(|&s| f(s)).collect()
    }
}

/// Runs every seed (concurrently when the `parallel` feature is on). Logs
/// are written under `log.output` when it is set.
pub fn run_experiment(cfg: &ExperimentConfig, checkpoint_every: Option<u64>) -> Result<Vec<RunLog>, RunError> {
    cfg.validate()?;
    let results = match &cfg.log.output {
        Some(root) => {
            fs::create_dir_all(root).map_err(io_err(root))?;
            map_seeds(&cfg.seeds, |s| run_seed_to_dir(cfg, s, root, checkpoint_every))
        }
        None => map_seeds(&cfg.seeds, |s| run_seed(cfg, s).map_err(RunError::from)),
    };
    results.into_iter().collect()
}

/// Reads a run directory written by [`run_seed_to_dir`].
pub fn read_run_dir(dir: &Path) -> Result<RunLog, RunError> {
    let csv_path = dir.join("log.csv");
    let meta_path = dir.join("meta.json");
    let csv = fs::read_to_string(&csv_path).map_err(io_err(&csv_path))?;
    let meta = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let points = RunLog::points_from_csv(&csv)
        .map_err(|e| RunError::Checkpoint { path: csv_path.clone(), reason: e.to_string() })?;
    let meta = serde_json::from_str(&meta).map_err(|e| RunError::Checkpoint { path: meta_path, reason: e.to_string() })?;
    Ok(RunLog { points, meta })
}

/// Every run directory directly under `root` (or `root` itself).
pub fn find_run_dirs(root: &Path) -> Result<Vec<PathBuf>, RunError> {
    if root.join("meta.json").exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.join("meta.json").exists() && path.join("log.csv").exists() {
            dirs.push(path);
        } else if path.is_dir() {
            dirs.extend(find_run_dirs(&path)?);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Axes of a sweep. Empty axes keep the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub n: Vec<usize>,
    /// Answer-network width `d` for Nibbler, trunk width for the baselines.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub g: Vec<usize>,
    #[serde(default)]
    pub h: Vec<usize>,
    /// Sets `alpha` (and `alpha_b` for Nibbler).
    #[serde(default)]
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub grid: SweepGrid,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n: Option<usize>,
    pub hidden: Option<usize>,
    pub g: Option<usize>,
    pub h: Option<usize>,
    pub alpha: Option<f64>,
}

fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: SweepConfig = toml::from_str(text)?;
        let g = &cfg.grid;
        if g.n.is_empty() && g.hidden.is_empty() && g.g.is_empty() && g.h.is_empty() && g.alpha.is_empty() {
            return invalid("grid", "needs at least one non-empty axis");
        }
        Ok(cfg)
    }

    pub fn cells(&self) -> Vec<SweepCell> {
        let g = &self.grid;
        let mut cells = Vec::new();
        for n in axis(&g.n) {
            for hidden in axis(&g.hidden) {
                for gg in axis(&g.g) {
                    for h in axis(&g.h) {
                        for alpha in axis(&g.alpha) {
                            cells.push(SweepCell { n, hidden, g: gg, h, alpha });
                        }
                    }
                }
            }
        }
        cells
    }
}

impl SweepCell {
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = base.clone();
        if let Some(n) = self.n {
            cfg.env.num_parallel = n;
        }
        match &mut cfg.algorithm {
            AlgorithmSpec::Nibbler(o) => {
                if let Some(v) = self.hidden {
                    o.d = Some(v);
                }
                if let Some(v) = self.g {
                    o.g = Some(v);
                }
                if let Some(v) = self.h {
                    o.h = Some(v);
                }
                if let Some(v) = self.alpha {
                    o.alpha = Some(v);
                    o.alpha_b = Some(v);
                }
            }
            AlgorithmSpec::Q(o) | AlgorithmSpec::Qv(o) => {
                if self.g.is_some() || self.h.is_some() {
                    return invalid("grid", "g and h apply only to nibbler");
                }
                if let Some(v) = self.hidden {
                    o.hidden_dim = Some(v);
                }
                if let Some(v) = self.alpha {
                    o.alpha = Some(v);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of a sweep summary, computed only from the cell's run logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: SweepCell,
    pub algorithm: String,
    pub config_hash: Option<String>,
    pub t_threshold: Option<ThresholdSummary>,
    /// Median over seeds of the last smoothed reward.
    pub final_reward: Option<f64>,
    pub diverged_seeds: Vec<u64>,
    pub error: Option<String>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let k = values.len();
    Some(if k % 2 == 1 { values[k / 2] } else { 0.5 * (values[k / 2 - 1] + values[k / 2]) })
}

pub fn summarize_cell(cell: SweepCell, logs: &[RunLog], r_thresh: f64) -> CellSummary {
    let per_seed: Vec<Option<u64>> = logs
        .iter()
        .map(|l| if l.meta.diverged_at.is_some() { None } else { timesteps_to_threshold(&l.points, r_thresh) })
        .collect();
    let mut finals: Vec<f64> =
        logs.iter().filter(|l| l.meta.diverged_at.is_none()).filter_map(RunLog::final_reward).collect();
    CellSummary {
        cell,
        algorithm: logs.first().map(|l| l.meta.algorithm.clone()).unwrap_or_default(),
        config_hash: logs.first().map(|l| l.meta.config_hash.clone()),
        t_threshold: Some(aggregate_thresholds(&per_seed)),
        final_reward: median(&mut finals),
        diverged_seeds: logs.iter().filter(|l| l.meta.diverged_at.is_some()).map(|l| l.meta.seed).collect(),
        error: None,
    }
}

/// Runs every cell; a cell that fails validation or I/O is recorded and the
/// sweep continues. Writes `summary.json` and `summary.csv` under the base
/// config's `log.output` when set.
pub fn run_sweep(sweep: &SweepConfig) -> Result<Vec<CellSummary>, RunError> {
    let mut rows = Vec::new();
    for cell in sweep.cells() {
        let outcome = cell.apply(&sweep.base).map_err(RunError::from).and_then(|cfg| {
            let logs = run_experiment(&cfg, None)?;
            Ok((cfg, logs))
        });
        rows.push(match outcome {
            Ok((cfg, logs)) => summarize_cell(cell, &logs, cfg.r_thresh),
            Err(e) => CellSummary {
                cell,
                algorithm: sweep.base.algorithm.name().to_string(),
                config_hash: None,
                t_threshold: None,
                final_reward: None,
                diverged_seeds: Vec::new(),
                error: Some(e.to_string()),
            },
        });
    }
    if let Some(root) = &sweep.base.log.output {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let json = serde_json::to_string_pretty(&rows).expect("summary serializes");
        write_atomic(&root.join("summary.json"), json.as_bytes())?;
        write_atomic(&root.join("summary.csv"), summary_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[CellSummary]) -> String {
    fn opt<T: ToString>(v: Option<T>) -> String {
        v.map(|v| v.to_string()).unwrap_or_default()
    }
    let mut out = String::from(
        "n,hidden,g,h,alpha,algorithm,config_hash,t_threshold_median,t_threshold_min,t_threshold_max,reached,seeds,final_reward,diverged,error\n",
    );
    for r in rows {
        let t = r.t_threshold.as_ref();
        let line = [
            opt(r.cell.n),
            opt(r.cell.hidden),
            opt(r.cell.g),
            opt(r.cell.h),
            opt(r.cell.alpha),
            r.algorithm.clone(),
            opt(r.config_hash.clone()),
            opt(t.and_then(|t| t.median)),
            opt(t.and_then(|t| t.min)),
            opt(t.and_then(|t| t.max)),
            opt(t.map(|t| t.reached)),
            opt(t.map(|t| t.seeds)),
            opt(r.final_reward),
            r.diverged_seeds.len().to_string(),
            r.error.clone().unwrap_or_default().replace(',', ";"),
        ]
        .join(",");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

//! WebAssembly bindings for the browser demo: step a multi-catch by hand,
//! train a small Nibbler agent and watch its curve, and compute the exact
//! random-policy reward of a single board.

use wasm_bindgen::prelude::*;

use nibbler::harness::{AlgorithmSpec, ExperimentConfig, NibblerOverrides, RunState};
use nibbler::multicatch::{
    make_multicatch, Action, BoardConfig, BoardOverrides, EnvSpec, MultiCatchEnv, CATCH_BIT, HOT_BIT, MINUS_BIT,
    MISS_BIT, PLUS_BIT, RESET_BIT,
};
use nibbler::oracle::BoardChain;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Unpermuted bits of every board, concatenated; what the page draws.
fn raw_bits(env: &MultiCatchEnv) -> Vec<u8> {
    env.raw_observation().to_vec()
}

/// A multi-catch driven by the user's actions.
#[wasm_bindgen]
pub struct Playground {
    env: MultiCatchEnv,
    total_reward: i64,
    steps: u64,
}

#[wasm_bindgen]
impl Playground {
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, seed: u32) -> Result<Playground, JsError> {
        let env = make_multicatch(n, u64::from(seed), &BoardOverrides::default()).map_err(js_err)?;
        Ok(Playground { env, total_reward: 0, steps: 0 })
    }

    /// Broadcasts action 0 (left), 1 (stay) or 2 (right); returns the reward.
    pub fn step(&mut self, action: usize) -> Result<i32, JsError> {
        let action = Action::from_index(action).map_err(js_err)?;
        let reward = self.env.step(action).0;
        self.total_reward += i64::from(reward);
        self.steps += 1;
        Ok(reward)
    }

    pub fn bits(&self) -> Vec<u8> {
        raw_bits(&self.env)
    }

    pub fn total_reward(&self) -> f64 {
        self.total_reward as f64
    }

    pub fn steps(&self) -> f64 {
        self.steps as f64
    }
}

/// A Nibbler agent learning online on a multi-catch.
#[wasm_bindgen]
pub struct Trainer {
    state: RunState,
    cursor: usize,
}

#[wasm_bindgen]
impl Trainer {
    /// `d` is the answer-network width; the defaults are heavy for a browser.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, d: usize, seed: u32, window: usize, interval: u32) -> Result<Trainer, JsError> {
        let (seed, interval) = (u64::from(seed), u64::from(interval));
        let algorithm = AlgorithmSpec::Nibbler(NibblerOverrides { d: Some(d), ..Default::default() });
        let mut cfg = ExperimentConfig::new(EnvSpec::standard(n), algorithm, u64::MAX, vec![seed]);
        cfg.log.window = window;
        cfg.log.interval = interval;
        cfg.validate().map_err(js_err)?;
        let state = RunState::new(&cfg, seed).map_err(js_err)?;
        Ok(Trainer { state, cursor: 0 })
    }

    /// Runs `steps` agent-environment steps and returns the new curve points
    /// flattened as `[t0, r0, t1, r1, ...]`. NaN reward marks divergence.
    pub fn train(&mut self, steps: u32) -> Vec<f64> {
        self.state.advance(u64::from(steps));
        let points = &self.state.tracker.points()[self.cursor..];
        self.cursor += points.len();
        let mut out: Vec<f64> = points.iter().flat_map(|p| [p.timestep as f64, p.avg_reward]).collect();
        if let Some(t) = self.state.diverged_at {
            out.extend([t as f64, f64::NAN]);
        }
        out
    }

    pub fn steps(&self) -> f64 {
        self.state.t as f64
    }

    pub fn bits(&self) -> Vec<u8> {
        raw_bits(&self.state.env)
    }

    /// The bits currently chosen as cumulants, as "board b: name" labels.
    pub fn cumulants(&self) -> Vec<String> {
        let nibbler::harness::Agent::Nibbler(agent) = &self.state.agent else {
            return Vec::new();
        };
        let env = &self.state.env;
        let inverse = env.permutation().inverse();
        agent.cumulant_indices().iter().map(|&j| bit_label(env, inverse.image(j))).collect()
    }
}

/// Human-readable name of an unpermuted bit.
fn bit_label(env: &MultiCatchEnv, raw: usize) -> String {
    for (b, layout) in env.layouts().iter().enumerate() {
        if !layout.contains(raw) {
            continue;
        }
        let local = raw - layout.offset;
        let cells = layout.num_rows * layout.num_cols;
        if local < cells {
            return format!("board {b}: cell ({}, {})", local / layout.num_cols, local % layout.num_cols);
        }
        let name = match local - cells {
            RESET_BIT => "reset",
            HOT_BIT => "hot",
            CATCH_BIT => "catch",
            MISS_BIT => "miss",
            PLUS_BIT => "plus",
            MINUS_BIT => "minus",
            _ => "status",
        };
        return format!("board {b}: {name}");
    }
    format!("bit {raw}")
}

/// Exact long-run average reward of one board under a uniformly random
/// policy, from the board's enumerated state space.
#[wasm_bindgen]
pub fn random_policy_reward(num_rows: usize, num_cols: usize, p_hot: f64) -> Result<f64, JsError> {
    let config = BoardConfig { num_rows, num_cols, p_hot, ..BoardConfig::standard(1) };
    config.validate().map_err(js_err)?;
    let chain = BoardChain::enumerate(&config, [1.0 / 3.0; 3]);
    Ok(chain.average_reward())
}

/// Number of states in the enumerated board chain.
#[wasm_bindgen]
pub fn board_state_count(num_rows: usize, num_cols: usize) -> Result<usize, JsError> {
    let config = BoardConfig { num_rows, num_cols, ..BoardConfig::standard(1) };
    config.validate().map_err(js_err)?;
    Ok(BoardChain::enumerate(&config, [1.0 / 3.0; 3]).len())
}

//! Continuing catch boards and their composite, multi-catch.
//!
//! A single board is a small continuing MDP: a ball waits in a reset slot,
//! drops into the top row with probability `p_arrival`, falls one row per
//! step (drifting with `wind`), and is caught or missed at the bottom row.
//! A board may turn *hot* when the ball enters; only hot boards follow a
//! catch/miss with a plus/minus hold that eventually pays out `+1`/`-1`.
//!
//! Multi-catch runs `n` boards side by side. Every board receives the same
//! action, rewards are summed, and the concatenated board observations pass
//! through one fixed random permutation.
//!
//! Unpermuted per-board observation layout (`rows * cols + 6` bits):
//!
//! ```text
//! [cell(0,0) .. cell(rows-1, cols-1)] [reset] [hot] [catch] [miss] [plus] [minus]
//! ```
//!
//! Cells are row-major. The paddle occupies `cell(rows-1, paddle_col)`; a
//! falling ball occupies `cell(row, col)` and shares the bit with the paddle
//! when both are in the same bottom-row cell.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{self, Write};
use thiserror::Error;

use crate::rng::{self, roles, StreamRng};

/// Number of status bits appended to each board's cells.
pub const STATUS_BITS: usize = 6;
pub const RESET_BIT: usize = 0;
pub const HOT_BIT: usize = 1;
pub const CATCH_BIT: usize = 2;
pub const MISS_BIT: usize = 3;
pub const PLUS_BIT: usize = 4;
pub const MINUS_BIT: usize = 5;

pub const NUM_ACTIONS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("multi-catch needs at least one board")]
    NoBoards,
    #[error("invalid board config `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("action index {0} out of range (expected 0..3)")]
    BadAction(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Left,
    Stay,
    Right,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Left, Action::Stay, Action::Right];

    pub fn index(self) -> usize {
        match self {
            Action::Left => 0,
            Action::Stay => 1,
            Action::Right => 2,
        }
    }

    pub fn from_index(index: usize) -> Result<Self, EnvError> {
        Action::ALL.get(index).copied().ok_or(EnvError::BadAction(index))
    }

    fn delta(self) -> i64 {
        match self {
            Action::Left => -1,
            Action::Stay => 0,
            Action::Right => 1,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Action::Left => "left",
            Action::Stay => "stay",
            Action::Right => "right",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoardConfig {
    pub num_rows: usize,
    pub num_cols: usize,
    pub p_arrival: f64,
    pub p_reward: f64,
    pub p_hot: f64,
    pub paddle_noise: f64,
    /// Column drift applied to a falling ball each step: -1, 0 or +1.
    pub wind: i8,
}

impl BoardConfig {
    /// Standard board used in an `n`-board multi-catch; `p_hot = min(1, 2/n)`.
    pub fn standard(num_boards: usize) -> Self {
        BoardConfig {
            num_rows: 10,
            num_cols: 5,
            p_arrival: 0.2,
            p_reward: 0.2,
            p_hot: default_p_hot(num_boards),
            paddle_noise: 0.2,
            wind: 0,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.num_rows * self.num_cols
    }

    pub fn num_bits(&self) -> usize {
        self.num_cells() + STATUS_BITS
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let invalid = |field, reason: &str| {
            Err(EnvError::InvalidConfig { field, reason: reason.to_string() })
        };
        if self.num_rows < 2 {
            return invalid("num_rows", "must be at least 2");
        }
        if self.num_cols < 1 {
            return invalid("num_cols", "must be at least 1");
        }
        for (field, p) in [
            ("p_arrival", self.p_arrival),
            ("p_reward", self.p_reward),
            ("p_hot", self.p_hot),
            ("paddle_noise", self.paddle_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(field, &format!("{p} is not a probability in [0, 1]"));
            }
        }
        if !(-1..=1).contains(&self.wind) {
            return invalid("wind", "must be -1, 0 or +1");
        }
        Ok(())
    }
}

pub fn default_p_hot(num_boards: usize) -> f64 {
    (2.0 / num_boards.max(1) as f64).min(1.0)
}

/// Partial board configuration; unset fields keep the standard values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_rows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_cols: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_arrival: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_hot: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paddle_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wind: Option<i8>,
}

impl BoardOverrides {
    pub fn apply(&self, mut config: BoardConfig) -> BoardConfig {
        if let Some(v) = self.num_rows {
            config.num_rows = v;
        }
        if let Some(v) = self.num_cols {
            config.num_cols = v;
        }
        if let Some(v) = self.p_arrival {
            config.p_arrival = v;
        }
        if let Some(v) = self.p_reward {
            config.p_reward = v;
        }
        if let Some(v) = self.p_hot {
            config.p_hot = v;
        }
        if let Some(v) = self.paddle_noise {
            config.paddle_noise = v;
        }
        if let Some(v) = self.wind {
            config.wind = v;
        }
        config
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Reset,
    Falling { row: usize, col: usize },
    Catch,
    Miss,
    PlusHold,
    MinusHold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoardState {
    pub phase: Phase,
    pub paddle_col: usize,
    pub hot: bool,
}

impl BoardState {
    pub fn reset(paddle_col: usize) -> Self {
        BoardState { phase: Phase::Reset, paddle_col, hot: false }
    }

    pub fn is_valid(&self, config: &BoardConfig) -> bool {
        let phase_ok = match self.phase {
            Phase::Falling { row, col } => row < config.num_rows && col < config.num_cols,
            Phase::PlusHold | Phase::MinusHold => self.hot,
            _ => true,
        };
        phase_ok && self.paddle_col < config.num_cols
    }
}

fn shift_clamped(col: usize, delta: i64, num_cols: usize) -> usize {
    (col as i64 + delta).clamp(0, num_cols as i64 - 1) as usize
}

/// One transition of a single board. Returns the next state and the reward
/// emitted on this transition.
///
/// Draw order per call: paddle-noise coin (plus a direction when it fires),
/// then at most one phase draw (arrival + column + hot coin, or exit coin).
pub fn board_step<R: Rng + ?Sized>(
    state: &BoardState,
    config: &BoardConfig,
    action: Action,
    rng: &mut R,
) -> (BoardState, i32) {
    let moved = if rng.gen::<f64>() < config.paddle_noise {
        Action::ALL[rng.gen_range(0..NUM_ACTIONS)]
    } else {
        action
    };
    let paddle_col = shift_clamped(state.paddle_col, moved.delta(), config.num_cols);
    let mut hot = state.hot;
    let mut reward = 0;

    let phase = match state.phase {
        Phase::Reset => {
            if rng.gen::<f64>() < config.p_arrival {
                let col = rng.gen_range(0..config.num_cols);
                if !hot && rng.gen::<f64>() < config.p_hot {
                    hot = true;
                }
                Phase::Falling { row: 0, col }
            } else {
                Phase::Reset
            }
        }
        Phase::Falling { row, col } if row + 1 == config.num_rows => {
            // Decided by the pre-move paddle position.
            if col == state.paddle_col {
                Phase::Catch
            } else {
                Phase::Miss
            }
        }
        Phase::Falling { row, col } => Phase::Falling {
            row: row + 1,
            col: shift_clamped(col, i64::from(config.wind), config.num_cols),
        },
        Phase::Catch if hot => Phase::PlusHold,
        Phase::Miss if hot => Phase::MinusHold,
        Phase::Catch | Phase::Miss => Phase::Reset,
        Phase::PlusHold | Phase::MinusHold => {
            if rng.gen::<f64>() < config.p_reward {
                reward = if state.phase == Phase::PlusHold { 1 } else { -1 };
                hot = false;
                Phase::Reset
            } else {
                state.phase
            }
        }
    };

    (BoardState { phase, paddle_col, hot }, reward)
}

/// Writes the unpermuted observation of one board into `out`
/// (length `config.num_bits()`), overwriting every bit.
pub fn board_observe_into(state: &BoardState, config: &BoardConfig, out: &mut [u8]) {
    debug_assert_eq!(out.len(), config.num_bits());
    out.fill(0);
    let cells = config.num_cells();
    out[(config.num_rows - 1) * config.num_cols + state.paddle_col] = 1;
    let status = match state.phase {
        Phase::Falling { row, col } => {
            out[row * config.num_cols + col] = 1;
            None
        }
        Phase::Reset => Some(RESET_BIT),
        Phase::Catch => Some(CATCH_BIT),
        Phase::Miss => Some(MISS_BIT),
        Phase::PlusHold => Some(PLUS_BIT),
        Phase::MinusHold => Some(MINUS_BIT),
    };
    if let Some(bit) = status {
        out[cells + bit] = 1;
    }
    if state.hot {
        out[cells + HOT_BIT] = 1;
    }
}

pub fn board_observe(state: &BoardState, config: &BoardConfig) -> Vec<u8> {
    let mut out = vec![0; config.num_bits()];
    board_observe_into(state, config, &mut out);
    out
}

/// Fixed bijection on observation indices: `permuted[map[i]] = raw[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        Permutation { map: (0..len).collect() }
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut map: Vec<usize> = (0..len).collect();
        map.shuffle(rng);
        Permutation { map }
    }

    /// Returns `None` unless `map` is a bijection on `0..map.len()`.
    pub fn from_map(map: Vec<usize>) -> Option<Self> {
        let mut seen = vec![false; map.len()];
        for &j in &map {
            if j >= map.len() || std::mem::replace(&mut seen[j], true) {
                return None;
            }
        }
        Some(Permutation { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Position of raw index `i` after permutation.
    pub fn image(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.map.len()];
        for (i, &j) in self.map.iter().enumerate() {
            inv[j] = i;
        }
        Permutation { map: inv }
    }

    pub fn apply_into<T: Copy>(&self, raw: &[T], out: &mut [T]) {
        for (i, &j) in self.map.iter().enumerate() {
            out[j] = raw[i];
        }
    }

    pub fn apply<T: Copy + Default>(&self, raw: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); raw.len()];
        self.apply_into(raw, &mut out);
        out
    }
}

/// Binary observation presented to agents, already permuted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitObservation(Vec<u8>);

impl BitObservation {
    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b != 0 { '1' } else { '0' }).collect()
    }
}

impl From<Vec<u8>> for BitObservation {
    fn from(bits: Vec<u8>) -> Self {
        BitObservation(bits)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Board {
    pub config: BoardConfig,
    pub state: BoardState,
    rng: StreamRng,
}

impl Board {
    fn new(config: BoardConfig, mut rng: StreamRng) -> Self {
        let paddle_col = rng.gen_range(0..config.num_cols);
        Board { config, state: BoardState::reset(paddle_col), rng }
    }
}

/// Location of one board's block inside the unpermuted observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub offset: usize,
    pub num_rows: usize,
    pub num_cols: usize,
}

impl BlockLayout {
    pub fn len(&self) -> usize {
        self.num_rows * self.num_cols + STATUS_BITS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        self.offset + row * self.num_cols + col
    }

    pub fn status(&self, bit: usize) -> usize {
        self.offset + self.num_rows * self.num_cols + bit
    }

    pub fn contains(&self, raw_index: usize) -> bool {
        (self.offset..self.offset + self.len()).contains(&raw_index)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiCatchEnv {
    boards: Vec<Board>,
    permutation: Permutation,
    raw: Vec<u8>,
    observation: BitObservation,
}

impl MultiCatchEnv {
    /// Builds an environment from explicit board configs. Board `i` draws its
    /// dynamics from stream `(seed, board-dynamics, i)`; the permutation comes
    /// from `(seed, permutation, 0)` unless one is supplied.
    pub fn new(
        configs: Vec<BoardConfig>,
        seed: u64,
        permutation: Option<Permutation>,
    ) -> Result<Self, EnvError> {
        if configs.is_empty() {
            return Err(EnvError::NoBoards);
        }
        for c in &configs {
            c.validate()?;
        }
        let m: usize = configs.iter().map(BoardConfig::num_bits).sum();
        let permutation = match permutation {
            Some(p) if p.len() == m => p,
            Some(p) => {
                return Err(EnvError::InvalidConfig {
                    field: "permutation",
                    reason: format!("length {} does not match observation length {m}", p.len()),
                })
            }
            None => Permutation::random(m, &mut rng::stream(seed, roles::PERMUTATION, 0)),
        };
        let boards = configs
            .into_iter()
            .enumerate()
            .map(|(i, c)| Board::new(c, rng::stream(seed, roles::BOARD_DYNAMICS, i as u64)))
            .collect();
        let mut env = MultiCatchEnv {
            boards,
            permutation,
            raw: vec![0; m],
            observation: BitObservation(vec![0; m]),
        };
        env.refresh_observation();
        Ok(env)
    }

    pub fn num_boards(&self) -> usize {
        self.boards.len()
    }

    pub fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    /// Observation length `m`.
    pub fn observation_len(&self) -> usize {
        self.raw.len()
    }

    pub fn boards(&self) -> &[Board] {
        &self.boards
    }

    pub fn permutation(&self) -> &Permutation {
        &self.permutation
    }

    pub fn observation(&self) -> &BitObservation {
        &self.observation
    }

    /// Concatenated board observations before permutation.
    pub fn raw_observation(&self) -> &[u8] {
        &self.raw
    }

    pub fn layout(&self, board: usize) -> BlockLayout {
        let offset = self.boards[..board].iter().map(|b| b.config.num_bits()).sum();
        let c = &self.boards[board].config;
        BlockLayout { offset, num_rows: c.num_rows, num_cols: c.num_cols }
    }

    pub fn layouts(&self) -> Vec<BlockLayout> {
        (0..self.boards.len()).map(|i| self.layout(i)).collect()
    }

    /// Broadcasts `action` to every board and returns the summed reward.
    pub fn step(&mut self, action: Action) -> (i32, &BitObservation) {
        let mut reward = 0;
        for board in &mut self.boards {
            let (next, r) = board_step(&board.state, &board.config, action, &mut board.rng);
            board.state = next;
            reward += r;
        }
        self.refresh_observation();
        (reward, &self.observation)
    }

    fn refresh_observation(&mut self) {
        let mut offset = 0;
        for board in &self.boards {
            let len = board.config.num_bits();
            board_observe_into(&board.state, &board.config, &mut self.raw[offset..offset + len]);
            offset += len;
        }
        self.permutation.apply_into(&self.raw, &mut self.observation.0);
    }
}

/// `n` standard boards with optional field overrides.
pub fn make_multicatch(
    n: usize,
    seed: u64,
    overrides: &BoardOverrides,
) -> Result<MultiCatchEnv, EnvError> {
    if n == 0 {
        return Err(EnvError::NoBoards);
    }
    let config = overrides.apply(BoardConfig::standard(n));
    MultiCatchEnv::new(vec![config; n], seed, None)
}

/// Boards with 5..=10 rows, a constant left or right wind, and
/// `p_arrival`, `p_reward` drawn from `U[0.05, 1]`.
pub fn heterogeneous_configs(n: usize, seed: u64) -> Vec<BoardConfig> {
    let mut rng = rng::stream(seed, roles::BOARD_LAYOUT, 0);
    (0..n)
        .map(|_| {
            let mut c = BoardConfig::standard(n);
            c.num_rows = rng.gen_range(5..=10);
            c.wind = if rng.gen::<bool>() { 1 } else { -1 };
            c.p_arrival = rng.gen_range(0.05..=1.0);
            c.p_reward = rng.gen_range(0.05..=1.0);
            c
        })
        .collect()
}

pub fn make_heterogeneous(n: usize, seed: u64) -> Result<MultiCatchEnv, EnvError> {
    if n == 0 {
        return Err(EnvError::NoBoards);
    }
    MultiCatchEnv::new(heterogeneous_configs(n, seed), seed, None)
}

/// Plain-text environment description (TOML). Keys follow the multi-catch
/// configuration table; `heterogeneous = true` switches to randomized boards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub num_parallel: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub heterogeneous: bool,
    #[serde(flatten)]
    pub overrides: BoardOverrides,
}

impl EnvSpec {
    pub fn standard(num_parallel: usize) -> Self {
        EnvSpec { num_parallel, heterogeneous: false, overrides: BoardOverrides::default() }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.num_parallel == 0 {
            return Err(EnvError::NoBoards);
        }
        if self.heterogeneous && self.overrides != BoardOverrides::default() {
            return Err(EnvError::InvalidConfig {
                field: "heterogeneous",
                reason: "board overrides cannot be combined with heterogeneous boards".into(),
            });
        }
        self.overrides.apply(BoardConfig::standard(self.num_parallel)).validate()
    }

    pub fn build(&self, seed: u64) -> Result<MultiCatchEnv, EnvError> {
        self.validate()?;
        if self.heterogeneous {
            make_heterogeneous(self.num_parallel, seed)
        } else {
            make_multicatch(self.num_parallel, seed, &self.overrides)
        }
    }
}

/// Drives `env` with uniformly random actions and writes one line per step:
/// `t,action,reward,bits`, where `bits` is the permuted observation as a 0/1
/// string. Line `t = 0` is the initial observation with an empty action.
pub fn write_trajectory<W: Write, R: Rng + ?Sized>(
    env: &mut MultiCatchEnv,
    steps: u64,
    policy_rng: &mut R,
    out: &mut W,
) -> io::Result<()> {
    writeln!(out, "0,,0,{}", env.observation().to_bit_string())?;
    for t in 1..=steps {
        let action = Action::ALL[policy_rng.gen_range(0..NUM_ACTIONS)];
        let (reward, obs) = env.step(action);
        writeln!(out, "{t},{},{reward},{}", action.index(), obs.to_bit_string())?;
    }
    Ok(())
}

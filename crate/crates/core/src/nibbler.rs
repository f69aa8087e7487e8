//! The Nibbler agent.
//!
//! Each step:
//!
//! 1. base features `x_b` are the observation bits;
//! 2. every question slot encodes its selected inputs into `d` features;
//! 3. `x_f = [x_b, x_e^1, .., x_e^h]`;
//! 4. an epsilon-greedy action is taken from the linear main Q over `x_f`;
//! 5. the main QV learner is updated from the cached previous step;
//! 6. every slot's deep answer is updated;
//! 7. every slot's input selection is updated (swap, column reinit, TD);
//! 8. the cumulant selection is updated (swap, slot reset, LMS).
//!
//! The first call only caches; updates need a full transition.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gvf::{epsilon_greedy, main_qv_update, GvfQuestion, LinearVQ, QuestionSlot};
use crate::micrograd::Tensor;
use crate::rng::{self, roles, StreamRng};
use crate::selection::{update_answer_selection, update_cumulant_selection, Discovery, SelectionState, SlotReset};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("observation has {found} bits, agent expects {expected}")]
    ObservationLength { expected: usize, found: usize },
    #[error("invalid agent config `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
}

/// Order of the per-step updates. `Standard` follows the listing above;
/// the other variants exist to show the order matters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    #[default]
    Standard,
    /// Answers before the main learner (steps 5 and 6 swapped).
    AnswersBeforeMain,
    /// Input selection before the answers (steps 6 and 7 swapped).
    SelectionBeforeAnswers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NibblerConfig {
    /// Number of constructed GVF questions.
    pub h: usize,
    /// Base features per answer network.
    pub g: usize,
    /// Hidden features per answer network.
    pub d: usize,
    pub kappa: f64,
    /// Step size for the main learner and the deep answers.
    pub alpha: f64,
    /// Step size for the linear support and discovery learners.
    pub alpha_b: f64,
    /// Swap threshold for answer-input selection.
    pub tau_inputs: f64,
    /// Swap threshold for cumulant selection.
    pub tau_cumulants: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub nu: f64,
    #[serde(default)]
    pub slot_reset: SlotReset,
    #[serde(default)]
    pub update_order: UpdateOrder,
}

pub const DEFAULT_KAPPA: f64 = 0.001 * std::f64::consts::SQRT_2;

impl NibblerConfig {
    /// Defaults for `n` boards and `m` base features: `h = 2n`, `g = 82`
    /// (at most `m`), `d = 256`, `alpha = alpha_b = kappa / sqrt(h)`.
    pub fn default_for(n: usize, m: usize) -> Self {
        let h = 2 * n.max(1);
        let alpha = DEFAULT_KAPPA / (h as f64).sqrt();
        NibblerConfig {
            h,
            g: 82.min(m),
            d: 256,
            kappa: DEFAULT_KAPPA,
            alpha,
            alpha_b: alpha,
            tau_inputs: 0.0,
            tau_cumulants: 0.0,
            gamma: 0.99,
            epsilon: 0.1,
            nu: 0.99,
            slot_reset: SlotReset::Full,
            update_order: UpdateOrder::Standard,
        }
    }

    /// Recomputes both step sizes from `kappa` and `h`.
    pub fn rederive_step_sizes(&mut self) {
        self.alpha = self.kappa / (self.h as f64).sqrt();
        self.alpha_b = self.alpha;
    }

    pub fn validate(&self, m: usize) -> Result<(), AgentError> {
        let invalid = |field, reason: String| Err(AgentError::InvalidConfig { field, reason });
        if self.h == 0 || self.h > m {
            return invalid("h", format!("need 1 <= h <= m = {m}, got {}", self.h));
        }
        if self.g == 0 || self.g > m {
            return invalid("g", format!("need 1 <= g <= m = {m}, got {}", self.g));
        }
        if self.d == 0 {
            return invalid("d", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return invalid("gamma", format!("{} not in [0, 1)", self.gamma));
        }
        if !(0.0..1.0).contains(&self.nu) {
            return invalid("nu", format!("{} not in [0, 1)", self.nu));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return invalid("epsilon", format!("{} not in [0, 1]", self.epsilon));
        }
        for (field, v) in [("alpha", self.alpha), ("alpha_b", self.alpha_b)] {
            if !(v.is_finite() && v > 0.0) {
                return invalid(field, format!("{v} is not a positive step size"));
            }
        }
        for (field, v) in [("tau_inputs", self.tau_inputs), ("tau_cumulants", self.tau_cumulants)] {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(field, format!("{v} is not a non-negative threshold"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Previous {
    x_base: Vec<f64>,
    x_full: Vec<f64>,
    action: usize,
}

/// Norms and choices from one step, for golden logs and diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub action: usize,
    pub main_v_norm: f64,
    pub main_q_norms: Vec<f64>,
    pub net_norms: Vec<f64>,
    pub support_norms: Vec<f64>,
    pub discovery_norm: f64,
    pub cumulants: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NibblerAgent {
    config: NibblerConfig,
    m: usize,
    num_actions: usize,
    discovery: Discovery,
    slots: Vec<QuestionSlot>,
    main: LinearVQ,
    previous: Option<Previous>,
    exploration: StreamRng,
    reinit: StreamRng,
    /// Applied to every randomly drawn base-feature index, see
    /// [`NibblerAgent::with_index_map`].
    #[serde(default)]
    index_map: Option<Vec<usize>>,
    /// Inverse of `index_map`: selection ties go to the lowest mapped-from index.
    #[serde(default)]
    tie_rank: Option<Vec<usize>>,
    #[serde(skip)]
    utilities: crate::micrograd::Scratch<Vec<f64>>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl NibblerAgent {
    pub fn new(config: NibblerConfig, m: usize, num_actions: usize, seed: u64) -> Result<Self, AgentError> {
        Self::with_index_map(config, m, num_actions, seed, None)
    }

    /// Like [`NibblerAgent::new`], but every randomly drawn base-feature index
    /// `j` is replaced by `index_map[j]`. Used to route index-dependent
    /// initialization through an observation permutation.
    pub fn with_index_map(
        config: NibblerConfig,
        m: usize,
        num_actions: usize,
        seed: u64,
        index_map: Option<&[usize]>,
    ) -> Result<Self, AgentError> {
        config.validate(m)?;
        if num_actions == 0 {
            return Err(AgentError::InvalidConfig { field: "num_actions", reason: "must be positive".into() });
        }
        if let Some(p) = index_map {
            let mut seen = vec![false; m];
            if p.len() != m || !p.iter().all(|&j| j < m && !std::mem::replace(&mut seen[j], true)) {
                return Err(AgentError::InvalidConfig { field: "index_map", reason: format!("not a permutation of 0..{m}") });
            }
        }
        let map = |j: usize| index_map.map_or(j, |p| p[j]);
        let mut init = rng::stream(seed, roles::AGENT_INIT, 0);
        let cumulant_list: Vec<usize> =
            SelectionState::random(config.h, m, 0.0, &mut init).list().iter().map(|&j| map(j)).collect();
        let cumulants = SelectionState::new(cumulant_list.clone(), m, config.tau_cumulants)
            .expect("mapped indices stay distinct");
        let slots = cumulant_list
            .iter()
            .map(|&c| {
                let list: Vec<usize> =
                    SelectionState::random(config.g, m, 0.0, &mut init).list().iter().map(|&j| map(j)).collect();
                let inputs = SelectionState::new(list, m, config.tau_inputs).expect("mapped indices stay distinct");
                QuestionSlot::new(
                    GvfQuestion { cumulant_index: c, discount: config.gamma },
                    inputs,
                    config.d,
                    num_actions,
                    &mut init,
                )
            })
            .collect();
        let full_dim = m + config.h * config.d;
        Ok(NibblerAgent {
            discovery: Discovery::new(cumulants),
            slots,
            main: LinearVQ::zeros(full_dim, num_actions),
            previous: None,
            exploration: rng::stream(seed, roles::EXPLORATION, 0),
            reinit: rng::stream(seed, roles::AGENT_REINIT, 0),
            utilities: Default::default(),
            index_map: index_map.map(<[usize]>::to_vec),
            tie_rank: index_map.map(|p| {
                let mut inv = vec![0; m];
                for (j, &pj) in p.iter().enumerate() {
                    inv[pj] = j;
                }
                inv
            }),
            config,
            m,
            num_actions,
        })
    }

    pub fn config(&self) -> &NibblerConfig {
        &self.config
    }

    pub fn num_features(&self) -> usize {
        self.m
    }

    pub fn full_dim(&self) -> usize {
        self.m + self.config.h * self.config.d
    }

    pub fn slots(&self) -> &[QuestionSlot] {
        &self.slots
    }

    pub fn main(&self) -> &LinearVQ {
        &self.main
    }

    pub fn discovery(&self) -> &Discovery {
        &self.discovery
    }

    pub fn cumulant_indices(&self) -> &[usize] {
        self.discovery.cumulants.list()
    }

    /// Live parameters: discovery weights, per slot the answer network,
    /// heads and support weights, and the main V and Q weights.
    pub fn param_count(&self) -> usize {
        self.discovery.weights.len()
            + self.slots.iter().map(QuestionSlot::param_count).sum::<usize>()
            + self.main.param_count()
    }

    pub fn is_finite(&self) -> bool {
        self.main.is_finite()
            && self.discovery.weights.iter().all(|w| w.is_finite())
            && self.slots.iter().all(QuestionSlot::is_finite)
    }

    fn features(&mut self, x_base: &[f64]) -> Vec<f64> {
        let d = self.config.d;
        let mut x_full = vec![0.0; self.full_dim()];
        x_full[..self.m].copy_from_slice(x_base);
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let start = self.m + i * d;
            slot.encode_into(x_base, &mut x_full[start..start + d]);
        }
        x_full
    }

    /// Main action values for an observation, without learning.
    pub fn action_values(&mut self, observation: &[u8]) -> Result<Vec<f64>, AgentError> {
        let x_base = self.base_features(observation)?;
        let x_full = self.features(&x_base);
        Ok(self.main.action_values(&x_full))
    }

    fn base_features(&self, observation: &[u8]) -> Result<Vec<f64>, AgentError> {
        if observation.len() != self.m {
            return Err(AgentError::ObservationLength { expected: self.m, found: observation.len() });
        }
        Ok(observation.iter().map(|&b| f64::from(b)).collect())
    }

    /// Consumes `R_{t+1}` and `O_{t+1}`, returns `A_{t+1}`.
    pub fn step(&mut self, reward: f64, observation: &[u8]) -> Result<usize, AgentError> {
        let x_base = self.base_features(observation)?;
        let x_full = self.features(&x_base);
        let q = self.main.action_values(&x_full);
        let action = epsilon_greedy(&q, self.config.epsilon, &mut self.exploration);

        if let Some(prev) = self.previous.take() {
            match self.config.update_order {
                UpdateOrder::Standard => {
                    self.update_main(&prev, &x_full, reward);
                    self.update_answers(&prev, &x_base, Some(&x_full));
                    self.update_input_selection(&prev, &x_base);
                }
                UpdateOrder::AnswersBeforeMain => {
                    self.update_answers(&prev, &x_base, Some(&x_full));
                    self.update_main(&prev, &x_full, reward);
                    self.update_input_selection(&prev, &x_base);
                }
                UpdateOrder::SelectionBeforeAnswers => {
                    self.update_main(&prev, &x_full, reward);
                    self.update_input_selection(&prev, &x_base);
                    self.update_answers(&prev, &x_base, None);
                }
            }
            self.update_cumulants(&prev, reward);
        }

        self.previous = Some(Previous { x_base, x_full, action });
        Ok(action)
    }

    fn update_main(&mut self, prev: &Previous, x_full: &[f64], reward: f64) {
        let c = &self.config;
        main_qv_update(&mut self.main, &prev.x_full, x_full, reward, prev.action, c.gamma, c.alpha, c.nu);
    }

    /// `x_full` carries the current step's encodings when no network has
    /// changed since they were computed.
    fn update_answers(&mut self, prev: &Previous, x_base: &[f64], x_full: Option<&[f64]>) {
        let (alpha, nu, m, d) = (self.config.alpha, self.config.nu, self.m, self.config.d);
        for (i, slot) in self.slots.iter_mut().enumerate() {
            match x_full {
                Some(x) => {
                    let hidden = &x[m + i * d..m + (i + 1) * d];
                    slot.answer_update_cached(&prev.x_base, x_base, hidden, prev.action, alpha, nu)
                }
                None => slot.answer_update(&prev.x_base, x_base, prev.action, alpha, nu),
            };
        }
    }

    fn update_input_selection(&mut self, prev: &Previous, x_base: &[f64]) {
        let alpha_b = self.config.alpha_b;
        for slot in &mut self.slots {
            update_answer_selection(
                slot,
                &prev.x_base,
                x_base,
                alpha_b,
                &mut self.utilities.0,
                self.tie_rank.as_deref(),
                &mut self.reinit,
            );
        }
    }

    fn update_cumulants(&mut self, prev: &Previous, reward: f64) {
        let swap = update_cumulant_selection(
            &mut self.discovery,
            &mut self.slots,
            &prev.x_base,
            reward,
            self.config.alpha_b,
            self.config.slot_reset,
            self.config.g,
            self.tie_rank.as_deref(),
            &mut self.reinit,
        );
        if let (Some(swap), Some(map), SlotReset::Full) = (swap, &self.index_map, self.config.slot_reset) {
            let inputs = &self.slots[swap.pos].inputs;
            let list = inputs.list().iter().map(|&j| map[j]).collect();
            self.slots[swap.pos].inputs =
                SelectionState::new(list, self.m, inputs.tau).expect("index map is a permutation");
        }
    }

    pub fn trace(&self, action: usize) -> StepTrace {
        StepTrace {
            action,
            main_v_norm: l2(&self.main.w_v),
            main_q_norms: self.main.w_q.iter().map(|w| l2(w)).collect(),
            net_norms: self
                .slots
                .iter()
                .map(|s| l2(s.net.materialized(&s.net_momentum).weights()) + l2(s.net.bias()))
                .collect(),
            support_norms: self.slots.iter().map(|s| l2(&s.support)).collect(),
            discovery_norm: l2(&self.discovery.weights),
            cumulants: self.cumulant_indices().to_vec(),
        }
    }

    /// All learned weights in module order: discovery, then per slot the
    /// answer network, V and Q heads and support weights, then the main
    /// V and Q weights.
    pub fn tensors(&self) -> Vec<Tensor> {
        let a = self.num_actions;
        let mut out = vec![Tensor::new("discovery", vec![self.m], self.discovery.weights.clone())];
        for (i, slot) in self.slots.iter().enumerate() {
            out.extend(slot.net.materialized(&slot.net_momentum).tensors(&format!("slot{i}.net")));
            let d = slot.heads.dim();
            out.push(Tensor::new(format!("slot{i}.v"), vec![d], slot.heads.w_v.clone()));
            out.push(Tensor::new(format!("slot{i}.q"), vec![a, d], slot.heads.w_q.concat()));
            out.push(Tensor::new(format!("slot{i}.support"), vec![self.m], slot.support.clone()));
        }
        let full = self.full_dim();
        out.push(Tensor::new("main.v", vec![full], self.main.w_v.clone()));
        out.push(Tensor::new("main.q", vec![a, full], self.main.w_q.concat()));
        out
    }

    /// Draws a uniformly random action from the exploration stream.
    pub fn random_action(&mut self) -> usize {
        self.exploration.gen_range(0..self.num_actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multicatch::{make_multicatch, Action, BoardOverrides};

    #[test]
    fn default_config_values() {
        let c = NibblerConfig::default_for(16, 16 * 56);
        assert_eq!(c.h, 32);
        assert!((c.alpha - 0.001 * 2f64.sqrt() / 32f64.sqrt()).abs() < 1e-18);
        assert!((c.alpha - 2.5e-4).abs() < 1e-12);
        assert_eq!(c.alpha, c.alpha_b);
        let c = NibblerConfig::default_for(2, 112);
        assert_eq!((c.h, c.g, c.d), (4, 82, 256));
        let c = NibblerConfig::default_for(64, 64 * 56);
        assert_eq!((c.h, c.d), (128, 256));
        assert_eq!((c.gamma, c.nu, c.epsilon, c.tau_inputs), (0.99, 0.99, 0.1, 0.0));
        // g never exceeds the feature count.
        assert_eq!(NibblerConfig::default_for(1, 56).g, 56);
    }

    #[test]
    fn rejects_bad_config_and_observation() {
        let mut c = NibblerConfig::default_for(2, 112);
        c.g = 200;
        assert!(matches!(NibblerAgent::new(c, 112, 3, 1), Err(AgentError::InvalidConfig { field: "g", .. })));
        let mut c = NibblerConfig::default_for(2, 112);
        c.d = 4;
        let mut agent = NibblerAgent::new(c, 112, 3, 1).unwrap();
        assert_eq!(
            agent.step(0.0, &[0; 10]).unwrap_err(),
            AgentError::ObservationLength { expected: 112, found: 10 }
        );
    }

    fn small_config() -> NibblerConfig {
        let mut c = NibblerConfig::default_for(2, 112);
        c.d = 16;
        c.alpha = 0.01;
        c.alpha_b = 0.01;
        c
    }

    #[test]
    fn first_step_only_caches() {
        let env = make_multicatch(2, 1, &BoardOverrides::default()).unwrap();
        let mut agent = NibblerAgent::new(small_config(), 112, 3, 7).unwrap();
        let before = agent.clone();
        agent.step(1.0, env.observation().bits()).unwrap();
        assert_eq!(agent.main, before.main);
        assert_eq!(agent.slots, before.slots);
        assert_eq!(agent.discovery, before.discovery);
    }

    #[test]
    fn zero_weights_greedy_is_uniform_tie_break() {
        let env = make_multicatch(2, 1, &BoardOverrides::default()).unwrap();
        let mut c = small_config();
        c.epsilon = 0.0;
        let mut agent = NibblerAgent::new(c, 112, 3, 7).unwrap();
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            // Fresh cache each time so no learning happens.
            agent.previous = None;
            counts[agent.step(0.0, env.observation().bits()).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() < 3.0 * 25.9, "{counts:?}");
        }
    }

    #[test]
    fn parameter_count_matches_complexity_breakdown() {
        let c = NibblerConfig::default_for(2, 112);
        let agent = NibblerAgent::new(c.clone(), 112, 3, 1).unwrap();
        let (m, h, g, d, z) = (112, c.h, c.g, c.d, 3);
        let expected = m + h * (g * d + d + d * (1 + z) + m) + (m + h * d) * (1 + z);
        assert_eq!(agent.param_count(), expected);
    }

    #[test]
    fn deterministic_and_slot_isolated() {
        let run = |seed| {
            let mut env = make_multicatch(2, 3, &BoardOverrides::default()).unwrap();
            let mut agent = NibblerAgent::new(small_config(), 112, 3, seed).unwrap();
            let mut reward = 0.0;
            let mut actions = Vec::new();
            for _ in 0..300 {
                let a = agent.step(reward, env.observation().bits()).unwrap();
                actions.push(a);
                reward = f64::from(env.step(Action::from_index(a).unwrap()).0);
            }
            (actions, agent)
        };
        let (a1, g1) = run(11);
        let (a2, g2) = run(11);
        assert_eq!(a1, a2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn answer_update_touches_only_its_slot() {
        let env = make_multicatch(2, 3, &BoardOverrides::default()).unwrap();
        let mut agent = NibblerAgent::new(small_config(), 112, 3, 5).unwrap();
        let x: Vec<f64> = env.observation().bits().iter().map(|&b| f64::from(b)).collect();
        let mut x_next = x.clone();
        for j in agent.slots[1].inputs.list().iter().take(5) {
            x_next[*j] = 1.0;
        }
        let c1 = agent.slots[1].question.cumulant_index;
        x_next[c1] = 1.0;
        let others: Vec<QuestionSlot> = agent.slots.iter().enumerate().filter(|(i, _)| *i != 1).map(|(_, s)| s.clone()).collect();
        let before = agent.slots[1].clone();
        agent.slots[1].answer_update(&x, &x_next, 0, 0.1, 0.9);
        assert_ne!(agent.slots[1], before);
        let after: Vec<QuestionSlot> = agent.slots.iter().enumerate().filter(|(i, _)| *i != 1).map(|(_, s)| s.clone()).collect();
        assert_eq!(others, after);
    }
}

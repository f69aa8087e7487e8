//! Fully incremental deep Q-learning and QV-learning baselines.
//!
//! One rectifier hidden layer over the raw observation feeds linear action
//! value heads (plus a state-value head for QV). Every step performs a single
//! update from the latest transition only: no replay buffer, no target
//! network.

use serde::{Deserialize, Serialize};

use crate::gvf::{epsilon_greedy, LinearVQ};
use crate::micrograd::{init_dense, Activations, DenseGrads, DenseMomentum, DenseNet, Tensor};
use crate::nibbler::AgentError;
use crate::rng::{self, roles, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    /// Target `r + gamma max_a Q(x', a)`.
    Q,
    /// Target `r + gamma V(x')`, V and Q trained jointly.
    Qv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub hidden_dim: usize,
    pub alpha: f64,
    pub nu: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub variant: BaselineVariant,
}

impl BaselineConfig {
    pub fn new(variant: BaselineVariant) -> Self {
        BaselineConfig { hidden_dim: 256, alpha: 0.001, nu: 0.99, epsilon: 0.1, gamma: 0.99, variant }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let invalid = |field, reason: String| Err(AgentError::InvalidConfig { field, reason });
        if self.hidden_dim == 0 {
            return invalid("hidden_dim", "must be positive".into());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return invalid("alpha", format!("{} is not a positive step size", self.alpha));
        }
        if !(0.0..1.0).contains(&self.nu) {
            return invalid("nu", format!("{} not in [0, 1)", self.nu));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return invalid("gamma", format!("{} not in [0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return invalid("epsilon", format!("{} not in [0, 1]", self.epsilon));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Previous {
    x: Vec<f64>,
    action: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineAgent {
    config: BaselineConfig,
    input_dim: usize,
    trunk: DenseNet,
    trunk_momentum: DenseMomentum,
    /// Q rows are used by both variants; the V row only by QV.
    heads: LinearVQ,
    previous: Option<Previous>,
    exploration: StreamRng,
    #[serde(skip)]
    act: crate::micrograd::Scratch<Activations>,
}

/// Gradients of the squared TD loss with the target held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineGrads {
    pub loss: f64,
    pub v_head: Vec<f64>,
    pub q_head: Vec<f64>,
    pub trunk: DenseGrads,
}

impl BaselineAgent {
    pub fn new(config: BaselineConfig, input_dim: usize, num_actions: usize, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let mut init = rng::stream(seed, roles::AGENT_INIT, 0);
        let (trunk, trunk_momentum) = init_dense(input_dim, config.hidden_dim, &mut init);
        Ok(BaselineAgent {
            heads: LinearVQ::zeros(config.hidden_dim, num_actions),
            trunk,
            trunk_momentum,
            previous: None,
            exploration: rng::stream(seed, roles::EXPLORATION, 0),
            act: Default::default(),
            input_dim,
            config,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    /// The trunk with all pending momentum steps applied.
    pub fn trunk(&self) -> DenseNet {
        self.trunk.materialized(&self.trunk_momentum)
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut DenseNet, &mut LinearVQ) {
        (&mut self.trunk, &mut self.heads)
    }

    pub fn heads(&self) -> &LinearVQ {
        &self.heads
    }

    pub fn param_count(&self) -> usize {
        let heads = match self.config.variant {
            BaselineVariant::Q => self.heads.num_actions() * self.heads.dim(),
            BaselineVariant::Qv => self.heads.param_count(),
        };
        self.trunk.param_count() + heads
    }

    pub fn is_finite(&self) -> bool {
        self.trunk.is_finite() && self.heads.is_finite()
    }

    pub fn action_values(&self, x: &[f64]) -> Vec<f64> {
        self.heads.action_values(&self.trunk.forward_lazy(x, &self.trunk_momentum))
    }

    /// Bootstrapped target for a transition landing in `x_next`.
    pub fn target(&self, reward: f64, x_next: &[f64]) -> f64 {
        let hidden = self.trunk.forward_lazy(x_next, &self.trunk_momentum);
        let bootstrap = match self.config.variant {
            BaselineVariant::Q => self.heads.action_values(&hidden).into_iter().fold(f64::NEG_INFINITY, f64::max),
            BaselineVariant::Qv => self.heads.value(&hidden),
        };
        reward + self.config.gamma * bootstrap
    }

    /// Loss `1/2 (Y - Q(x, a))^2`, plus `1/2 (Y - V(x))^2` for QV, and its
    /// exact gradients.
    pub fn gradients(&self, x: &[f64], action: usize, target: f64) -> BaselineGrads {
        let trunk = self.trunk.materialized(&self.trunk_momentum);
        let act = trunk.forward_activations(x);
        let errors = self.heads.errors(&act.hidden, action, target);
        let use_v = self.config.variant == BaselineVariant::Qv;
        let ev = if use_v { errors.v } else { 0.0 };
        let v_head = act.hidden.iter().map(|h| -ev * h).collect();
        let q_head = act.hidden.iter().map(|h| -errors.q * h).collect();
        let upstream: Vec<f64> = self
            .heads
            .w_v
            .iter()
            .zip(&self.heads.w_q[action])
            .map(|(wv, wq)| -ev * wv - errors.q * wq)
            .collect();
        let trunk = trunk.backward(x, &act, &upstream);
        BaselineGrads { loss: 0.5 * (ev * ev + errors.q * errors.q), v_head, q_head, trunk }
    }

    fn update(&mut self, x: &[f64], action: usize, target: f64) {
        let (alpha, nu) = (self.config.alpha, self.config.nu);
        let mut act = std::mem::take(&mut self.act.0);
        self.trunk.forward_lazy_into(x, &self.trunk_momentum, &mut act);
        let mut errors = self.heads.errors(&act.hidden, action, target);
        if self.config.variant == BaselineVariant::Q {
            errors.v = 0.0;
        }
        let delta: Vec<f64> = self
            .heads
            .w_v
            .iter()
            .zip(&self.heads.w_q[action])
            .zip(&act.pre)
            .map(|((wv, wq), &pre)| if pre > 0.0 { -errors.v * wv - errors.q * wq } else { 0.0 })
            .collect();
        match self.config.variant {
            BaselineVariant::Qv => self.heads.apply_errors(&act.hidden, action, errors, alpha, nu),
            BaselineVariant::Q => crate::micrograd::co_opt_scaled(
                &mut self.heads.w_q[action],
                alpha,
                -errors.q,
                &act.hidden,
                &mut self.heads.momentum_q[action],
                nu,
            ),
        }
        self.trunk.co_opt_step(x, &delta, &mut self.trunk_momentum, alpha, nu);
        self.act.0 = act;
    }

    /// Consumes `R_{t+1}` and `O_{t+1}`, returns `A_{t+1}`.
    pub fn step(&mut self, reward: f64, observation: &[u8]) -> Result<usize, AgentError> {
        if observation.len() != self.input_dim {
            return Err(AgentError::ObservationLength { expected: self.input_dim, found: observation.len() });
        }
        let x: Vec<f64> = observation.iter().map(|&b| f64::from(b)).collect();
        let q = self.action_values(&x);
        let action = epsilon_greedy(&q, self.config.epsilon, &mut self.exploration);
        if let Some(prev) = self.previous.take() {
            let target = self.target(reward, &x);
            self.update(&prev.x, prev.action, target);
        }
        self.previous = Some(Previous { x, action });
        Ok(action)
    }

    /// Trunk weight and bias, then the V head (QV only) and Q heads.
    pub fn tensors(&self) -> Vec<Tensor> {
        let (a, hd) = (self.heads.num_actions(), self.heads.dim());
        let mut out: Vec<Tensor> = self.trunk.materialized(&self.trunk_momentum).tensors("trunk").into();
        if self.config.variant == BaselineVariant::Qv {
            out.push(Tensor::new("v", vec![hd], self.heads.w_v.clone()));
        }
        out.push(Tensor::new("q", vec![a, hd], self.heads.w_q.concat()));
        out
    }

    /// Number of stored transitions; always at most one.
    pub fn stored_transitions(&self) -> usize {
        usize::from(self.previous.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults() {
        let c = BaselineConfig::new(BaselineVariant::Q);
        assert_eq!((c.hidden_dim, c.alpha, c.nu, c.epsilon, c.gamma), (256, 0.001, 0.99, 0.1, 0.99));
    }

    #[test]
    fn zero_reward_stream_keeps_heads_and_trunk() {
        for variant in [BaselineVariant::Q, BaselineVariant::Qv] {
            let mut agent = BaselineAgent::new(BaselineConfig::new(variant), 20, 3, 1).unwrap();
            let before = agent.clone();
            let mut r = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..200 {
                let obs: Vec<u8> = (0..20).map(|_| r.gen_range(0..2)).collect();
                agent.step(0.0, &obs).unwrap();
            }
            assert_eq!(agent.trunk, before.trunk);
            assert_eq!(agent.heads.w_v, before.heads.w_v);
            assert_eq!(agent.heads.w_q, before.heads.w_q);
        }
    }

    #[test]
    fn q_variant_never_touches_v_head() {
        let mut agent = BaselineAgent::new(BaselineConfig::new(BaselineVariant::Q), 4, 3, 1).unwrap();
        for t in 0..100 {
            agent.step(if t % 3 == 0 { 1.0 } else { 0.0 }, &[1, 0, 1, 1]).unwrap();
        }
        assert!(agent.heads.w_v.iter().all(|&w| w == 0.0));
        assert!(agent.heads.w_q.iter().flatten().any(|&w| w != 0.0));
    }

    #[test]
    fn holds_one_transition() {
        let mut agent = BaselineAgent::new(BaselineConfig::new(BaselineVariant::Qv), 3, 3, 1).unwrap();
        for _ in 0..10 {
            agent.step(1.0, &[1, 1, 0]).unwrap();
            assert_eq!(agent.stored_transitions(), 1);
        }
        assert!(agent.step(0.0, &[1]).is_err());
    }

    /// Single-state continuing bandit with rewards (1, 0, 0): the greedy
    /// action must settle on action 0.
    #[test]
    fn bandit_prefers_rewarding_action() {
        for variant in [BaselineVariant::Q, BaselineVariant::Qv] {
            let mut c = BaselineConfig::new(variant);
            c.hidden_dim = 16;
            c.gamma = 0.9;
            let mut agent = BaselineAgent::new(c, 1, 3, 3).unwrap();
            let mut reward = 0.0;
            for _ in 0..20_000 {
                let a = agent.step(reward, &[1]).unwrap();
                reward = if a == 0 { 1.0 } else { 0.0 };
            }
            let q = agent.action_values(&[1.0]);
            assert!(q[0] > q[1] && q[0] > q[2], "{variant:?}: {q:?}");
        }
    }

    /// Q with `gamma = 0` is per-action regression of the immediate reward.
    #[test]
    fn q_with_zero_discount_regresses_reward() {
        let mut c = BaselineConfig::new(BaselineVariant::Q);
        c.gamma = 0.0;
        c.hidden_dim = 8;
        c.alpha = 0.02;
        c.nu = 0.0;
        c.epsilon = 1.0;
        let mut agent = BaselineAgent::new(c, 1, 3, 4).unwrap();
        let means = [0.5, -0.25, 0.0];
        let mut reward = 0.0;
        for _ in 0..30_000 {
            let a = agent.step(reward, &[1]).unwrap();
            reward = means[a];
        }
        let q = agent.action_values(&[1.0]);
        for a in 0..3 {
            assert!((q[a] - means[a]).abs() < 0.02, "{q:?}");
        }
    }
}

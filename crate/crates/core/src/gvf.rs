//! General value functions and the learners that answer them.
//!
//! A GVF question is a cumulant, a discount and a policy (always the
//! behaviour policy here). Answers come in three forms:
//!
//! * linear TD(0) support weights over all base features,
//! * a one-step linear reward model (the `gamma = 0` question on the reward),
//! * deep QV answers: selected inputs -> rectifier layer -> linear V and Q
//!   heads sharing that layer, trained jointly towards `C + gamma * V(x')`.
//!
//! The main control learner is the same QV form, linear over the
//! concatenation of base and constructed features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::micrograd::{co_opt_scaled, init_dense, Activations, DenseGrads, DenseMomentum, DenseNet, MomentumState};
use crate::selection::SelectionState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GvfQuestion {
    /// Base-feature index whose next value is the cumulant.
    pub cumulant_index: usize,
    pub discount: f64,
}

/// Monte Carlo return `G = sum_k (prod_{j<k} gamma_j) C_k` over a finite
/// list of `(cumulant, continuation discount)` pairs.
pub fn discounted_return(steps: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for &(cumulant, gamma) in steps {
        total += weight * cumulant;
        weight *= gamma;
    }
    total
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(w: &mut [f64], scale: f64, x: &[f64]) {
    for (w, &xi) in w.iter_mut().zip(x) {
        if xi != 0.0 {
            *w += scale * xi;
        }
    }
}

/// Linear TD(0): `delta = C + gamma w.x' - w.x`, `w += alpha delta x`.
/// Returns `delta`.
pub fn linear_td0(w: &mut [f64], x_t: &[f64], x_next: &[f64], cumulant: f64, gamma: f64, alpha: f64) -> f64 {
    let delta = cumulant + gamma * dot(w, x_next) - dot(w, x_t);
    axpy(w, alpha * delta, x_t);
    delta
}

/// One-step reward regression (LMS): `w += alpha (r - w.x) x`. Returns the error.
pub fn linear_reward_model_update(w: &mut [f64], x_t: &[f64], reward: f64, alpha: f64) -> f64 {
    let delta = reward - dot(w, x_t);
    axpy(w, alpha * delta, x_t);
    delta
}

/// Linear state-value and per-action action-value estimates, each weight
/// vector with its own momentum state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearVQ {
    pub w_v: Vec<f64>,
    pub w_q: Vec<Vec<f64>>,
    pub momentum_v: MomentumState,
    pub momentum_q: Vec<MomentumState>,
}

/// TD errors of one QV update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QvErrors {
    pub target: f64,
    pub v: f64,
    pub q: f64,
}

impl QvErrors {
    pub fn loss(&self) -> f64 {
        0.5 * (self.v * self.v + self.q * self.q)
    }
}

impl LinearVQ {
    pub fn zeros(dim: usize, num_actions: usize) -> Self {
        LinearVQ {
            w_v: vec![0.0; dim],
            w_q: vec![vec![0.0; dim]; num_actions],
            momentum_v: MomentumState::zeros(dim),
            momentum_q: vec![MomentumState::zeros(dim); num_actions],
        }
    }

    pub fn dim(&self) -> usize {
        self.w_v.len()
    }

    pub fn num_actions(&self) -> usize {
        self.w_q.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        dot(&self.w_v, x)
    }

    pub fn action_value(&self, x: &[f64], action: usize) -> f64 {
        dot(&self.w_q[action], x)
    }

    pub fn action_values(&self, x: &[f64]) -> Vec<f64> {
        self.w_q.iter().map(|w| dot(w, x)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.dim() * (1 + self.num_actions())
    }

    pub fn is_finite(&self) -> bool {
        self.w_v.iter().chain(self.w_q.iter().flatten()).all(|w| w.is_finite())
    }

    pub fn reset(&mut self) {
        self.w_v.fill(0.0);
        self.momentum_v.reset();
        for (w, m) in self.w_q.iter_mut().zip(&mut self.momentum_q) {
            w.fill(0.0);
            m.reset();
        }
    }

    pub fn errors(&self, x_t: &[f64], action: usize, target: f64) -> QvErrors {
        QvErrors {
            target,
            v: target - self.value(x_t),
            q: target - self.action_value(x_t, action),
        }
    }

    /// Co-opt step on `L = 1/2 [(Y - V(x))^2 + (Y - Q(x, a))^2]` for the V
    /// weights and the row of `action` only.
    pub fn apply_errors(&mut self, x_t: &[f64], action: usize, errors: QvErrors, alpha: f64, nu: f64) {
        co_opt_scaled(&mut self.w_v, alpha, -errors.v, x_t, &mut self.momentum_v, nu);
        co_opt_scaled(&mut self.w_q[action], alpha, -errors.q, x_t, &mut self.momentum_q[action], nu);
    }
}

/// QV update of the main learner: `Y = r + gamma V(x')` held fixed, then a
/// co-opt step on the V weights and on `w_q[action]`.
#[allow(clippy::too_many_arguments)]
pub fn main_qv_update(
    main: &mut LinearVQ,
    x_t: &[f64],
    x_next: &[f64],
    reward: f64,
    action: usize,
    gamma: f64,
    alpha: f64,
    nu: f64,
) -> QvErrors {
    let target = reward + gamma * main.value(x_next);
    let errors = main.errors(x_t, action, target);
    main.apply_errors(x_t, action, errors, alpha, nu);
    errors
}

/// Gradients of one answer loss with the target held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerGrads {
    pub loss: f64,
    pub v_head: Vec<f64>,
    pub q_head: Vec<f64>,
    pub net: DenseGrads,
}

/// A constructed GVF question together with everything used to answer it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionSlot {
    pub question: GvfQuestion,
    /// Which `g` base features feed the answer network.
    pub inputs: SelectionState,
    pub net: DenseNet,
    pub net_momentum: DenseMomentum,
    /// V and Q heads over the `d` hidden features.
    pub heads: LinearVQ,
    /// Linear TD(0) weights over all `m` base features; their magnitudes rank
    /// candidate inputs.
    pub support: Vec<f64>,
    #[serde(skip)]
    scratch: crate::micrograd::Scratch<SlotBuffers>,
}

#[derive(Clone, Debug, Default)]
struct SlotBuffers {
    selected: Vec<f64>,
    act: Activations,
    upstream: Vec<f64>,
}

impl QuestionSlot {
    pub fn new<R: Rng + ?Sized>(
        question: GvfQuestion,
        inputs: SelectionState,
        hidden_dim: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Self {
        let (net, net_momentum) = init_dense(inputs.k(), hidden_dim, rng);
        let m = inputs.universe();
        QuestionSlot {
            question,
            inputs,
            net,
            net_momentum,
            heads: LinearVQ::zeros(hidden_dim, num_actions),
            support: vec![0.0; m],
            scratch: Default::default(),
        }
    }

    pub fn cumulant(&self, x_base: &[f64]) -> f64 {
        x_base[self.question.cumulant_index]
    }

    pub fn gather_inputs(&self, x_base: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.inputs.list().iter().map(|&j| x_base[j]));
    }

    /// Constructed features `phi(x_base[K])` written into `out`.
    pub fn encode_into(&mut self, x_base: &[f64], out: &mut [f64]) {
        let mut s = std::mem::take(&mut self.scratch.0);
        self.gather_inputs(x_base, &mut s.selected);
        self.net.forward_lazy_into(&s.selected, &self.net_momentum, &mut s.act);
        out.copy_from_slice(&s.act.hidden);
        self.scratch.0 = s;
    }

    pub fn encode(&self, x_base: &[f64]) -> Vec<f64> {
        let mut selected = Vec::new();
        self.gather_inputs(x_base, &mut selected);
        self.net.forward_lazy(&selected, &self.net_momentum)
    }

    /// Fixed target `C_{t+1} + gamma V(phi(x_{t+1}))`.
    pub fn answer_target(&self, x_base_next: &[f64]) -> f64 {
        let hidden = self.encode(x_base_next);
        self.cumulant(x_base_next) + self.question.discount * self.heads.value(&hidden)
    }

    /// Loss and exact gradients for heads and network at `x_base_t`, with
    /// the target held fixed.
    pub fn answer_gradients(&self, x_base_t: &[f64], action: usize, target: f64) -> AnswerGrads {
        let mut selected = Vec::new();
        self.gather_inputs(x_base_t, &mut selected);
        let net = self.net.materialized(&self.net_momentum);
        let act = net.forward_activations(&selected);
        let errors = self.heads.errors(&act.hidden, action, target);
        let v_head = act.hidden.iter().map(|h| -errors.v * h).collect();
        let q_head = act.hidden.iter().map(|h| -errors.q * h).collect();
        let upstream: Vec<f64> = self
            .heads
            .w_v
            .iter()
            .zip(&self.heads.w_q[action])
            .map(|(wv, wq)| -errors.v * wv - errors.q * wq)
            .collect();
        let net = net.backward(&selected, &act, &upstream);
        AnswerGrads { loss: errors.loss(), v_head, q_head, net }
    }

    /// One QV step on this question's answer. Gradients flow into both heads
    /// and the network; `x^e_t` is recomputed through the current network.
    pub fn answer_update(
        &mut self,
        x_base_t: &[f64],
        x_base_next: &[f64],
        action: usize,
        alpha: f64,
        nu: f64,
    ) -> QvErrors {
        let target = self.answer_target(x_base_next);
        self.answer_update_to(x_base_t, target, action, alpha, nu)
    }

    /// [`QuestionSlot::answer_update`] with `phi(x_{t+1})` already computed by
    /// the current network.
    pub fn answer_update_cached(
        &mut self,
        x_base_t: &[f64],
        x_base_next: &[f64],
        hidden_next: &[f64],
        action: usize,
        alpha: f64,
        nu: f64,
    ) -> QvErrors {
        let target = self.cumulant(x_base_next) + self.question.discount * self.heads.value(hidden_next);
        self.answer_update_to(x_base_t, target, action, alpha, nu)
    }

    fn answer_update_to(&mut self, x_base_t: &[f64], target: f64, action: usize, alpha: f64, nu: f64) -> QvErrors {
        let mut s = std::mem::take(&mut self.scratch.0);
        self.gather_inputs(x_base_t, &mut s.selected);
        self.net.forward_lazy_into(&s.selected, &self.net_momentum, &mut s.act);
        let errors = self.heads.errors(&s.act.hidden, action, target);

        // Gradient w.r.t. the hidden layer uses the heads before their update.
        s.upstream.clear();
        s.upstream.extend(
            self.heads
                .w_v
                .iter()
                .zip(&self.heads.w_q[action])
                .zip(&s.act.pre)
                .map(|((wv, wq), &pre)| if pre > 0.0 { -errors.v * wv - errors.q * wq } else { 0.0 }),
        );
        self.heads.apply_errors(&s.act.hidden, action, errors, alpha, nu);
        self.net.co_opt_step(&s.selected, &s.upstream, &mut self.net_momentum, alpha, nu);
        self.scratch.0 = s;
        errors
    }

    /// Fresh slot state for a new cumulant: new network, zero heads, zero
    /// support weights, and a new random input subset.
    pub fn reset_for<R: Rng + ?Sized>(&mut self, question: GvfQuestion, inputs: SelectionState, rng: &mut R) {
        *self = QuestionSlot::new(question, inputs, self.net.hidden_dim(), self.heads.num_actions(), rng);
    }

    /// Network weights and their momentum only.
    pub fn reset_net<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (net, momentum) = init_dense(self.net.input_dim(), self.net.hidden_dim(), rng);
        self.net = net;
        self.net_momentum = momentum;
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count() + self.heads.param_count() + self.support.len()
    }

    pub fn is_finite(&self) -> bool {
        self.net.is_finite() && self.heads.is_finite() && self.support.iter().all(|w| w.is_finite())
    }
}

/// With probability `epsilon` a uniform action, otherwise the greedy action
/// with exact ties broken uniformly.
pub fn epsilon_greedy<R: Rng + ?Sized>(q_values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    assert!(!q_values.is_empty(), "need at least one action");
    if rng.gen::<f64>() < epsilon {
        return rng.gen_range(0..q_values.len());
    }
    let best = q_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..q_values.len()).filter(|&a| q_values[a] == best).collect();
    match ties.len() {
        0 => rng.gen_range(0..q_values.len()), // all NaN
        1 => ties[0],
        n => ties[rng.gen_range(0..n)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::SelectionState;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn returns() {
        assert_eq!(discounted_return(&[(0.0, 0.9); 50]), 0.0);
        let ones = vec![(1.0, 0.5); 200];
        assert!((discounted_return(&ones) - 2.0).abs() < 1e-12);
        let mut spike = vec![(0.0, 0.99); 10];
        spike[2].0 = 1.0;
        assert!((discounted_return(&spike) - 0.99f64.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn td0_single_step() {
        let mut w = vec![0.0; 3];
        let delta = linear_td0(&mut w, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 1.0, 0.99, 0.1);
        assert_eq!(delta, 1.0);
        assert_eq!(w, vec![0.1, 0.0, 0.0]);

        let mut w = vec![0.4, -0.2];
        linear_td0(&mut w, &[0.0, 0.0], &[1.0, 1.0], 0.0, 0.9, 0.5);
        assert_eq!(w, vec![0.4, -0.2]);
    }

    /// Two-state deterministic cycle with one-hot features: the TD fixed point
    /// is the true value, `v = (I - gamma P)^{-1} c`.
    #[test]
    fn td0_two_state_cycle_fixed_point() {
        let gamma = 0.9;
        let c = [1.0, 0.0]; // cumulant on arriving in state 0
        // From s0 go to s1 (cumulant c[1]); from s1 go to s0 (cumulant c[0]).
        let v0 = (c[1] + gamma * c[0]) / (1.0 - gamma * gamma);
        let v1 = (c[0] + gamma * c[1]) / (1.0 - gamma * gamma);
        let x = [[1.0, 0.0], [0.0, 1.0]];
        let mut w = vec![0.0; 2];
        let mut s = 0;
        for _ in 0..200_000 {
            let next = 1 - s;
            linear_td0(&mut w, &x[s], &x[next], c[next], gamma, 0.01);
            s = next;
        }
        assert!((w[0] - v0).abs() < 1e-3, "{} vs {v0}", w[0]);
        assert!((w[1] - v1).abs() < 1e-3, "{} vs {v1}", w[1]);
    }

    #[test]
    fn reward_model_lms() {
        let mut w = vec![0.0; 4];
        linear_reward_model_update(&mut w, &[1.0, 0.0, 1.0, 0.0], 0.0, 0.1);
        assert_eq!(w, vec![0.0; 4]);
        let x = [0.0, 0.0, 1.0, 0.0];
        for _ in 0..2000 {
            linear_reward_model_update(&mut w, &x, 1.0, 0.01);
        }
        assert!((w[2] - 1.0).abs() < 1e-6);
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn main_qv_zero_reward_no_change() {
        let mut main = LinearVQ::zeros(4, 3);
        main_qv_update(&mut main, &[1.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 0.0], 0.0, 1, 0.99, 0.1, 0.99);
        assert_eq!(main, LinearVQ::zeros(4, 3));
    }

    #[test]
    fn main_qv_first_step_by_hand() {
        let (alpha, nu) = (0.01, 0.99);
        let mut main = LinearVQ::zeros(3, 3);
        let x_t = [1.0, 0.0, 0.0];
        let x_next = [0.0, 1.0, 0.0];
        main_qv_update(&mut main, &x_t, &x_next, 1.0, 2, 0.99, alpha, nu);
        let expected = alpha * (1.0 - nu);
        assert!((main.w_v[0] - expected).abs() < 1e-18);
        assert!((main.w_q[2][0] - expected).abs() < 1e-18);
        assert_eq!(main.w_q[0], vec![0.0; 3]);
        assert_eq!(main.w_q[1], vec![0.0; 3]);
        assert_eq!(main.momentum_q[0].velocity, vec![0.0; 3]);
    }

    #[test]
    fn epsilon_greedy_cases() {
        let mut r = rng(1);
        for _ in 0..1000 {
            assert_eq!(epsilon_greedy(&[0.0, 5.0, 1.0], 0.0, &mut r), 1);
        }
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[epsilon_greedy(&[2.0, 2.0, 0.0], 0.0, &mut r)] += 1;
        }
        assert_eq!(counts[2], 0);
        // Binomial(10k, 0.5): sigma = 50.
        assert!((counts[0] as i64 - 5000).abs() < 150, "{counts:?}");

        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[epsilon_greedy(&[9.0, 0.0, -3.0], 1.0, &mut r)] += 1;
        }
        // Binomial(10k, 1/3): sigma ~ 47.
        for c in counts {
            assert!((c as f64 - 10_000.0 / 3.0).abs() < 3.0 * 47.2, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn greedy_choice_invariant_to_positive_scaling(
            q in prop::collection::vec(-5.0f64..5.0, 1..6),
            scale in 0.01f64..100.0,
            seed in any::<u64>(),
        ) {
            let scaled: Vec<f64> = q.iter().map(|v| v * scale).collect();
            let a = epsilon_greedy(&q, 0.0, &mut rng(seed));
            let b = epsilon_greedy(&scaled, 0.0, &mut rng(seed));
            prop_assert_eq!(a, b);
        }
    }

    fn test_slot(seed: u64, m: usize, g: usize, d: usize) -> QuestionSlot {
        let mut r = rng(seed);
        let inputs = SelectionState::random(g, m, 0.0, &mut r);
        let mut slot = QuestionSlot::new(GvfQuestion { cumulant_index: 0, discount: 0.99 }, inputs, d, 3, &mut r);
        slot.net.bias_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.3..0.3));
        slot.heads.w_v.iter_mut().for_each(|w| *w = r.gen_range(-1.0..1.0));
        for row in &mut slot.heads.w_q {
            row.iter_mut().for_each(|w| *w = r.gen_range(-1.0..1.0));
        }
        slot
    }

    fn random_bits(r: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        (0..m).map(|_| if r.gen::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn answer_update_zero_heads_zero_cumulant_is_noop() {
        let mut r = rng(2);
        let inputs = SelectionState::random(6, 10, 0.0, &mut r);
        let mut slot = QuestionSlot::new(GvfQuestion { cumulant_index: 3, discount: 0.99 }, inputs, 8, 3, &mut r);
        let before = slot.clone();
        let mut x_t = random_bits(&mut r, 10);
        let mut x_next = random_bits(&mut r, 10);
        x_t[3] = 0.0;
        x_next[3] = 0.0;
        slot.answer_update(&x_t, &x_next, 1, 0.1, 0.9);
        // Idle columns only count pending steps; with zero velocity those are no-ops.
        assert!(slot.net_momentum.pending.iter().any(|&k| k > 0));
        slot.net.materialize(&mut slot.net_momentum);
        slot.net_momentum.rate = before.net_momentum.rate;
        assert_eq!(slot, before);
    }

    #[test]
    fn answer_update_matches_gradients_then_co_opt() {
        let mut r = rng(3);
        let slot = test_slot(3, 20, 8, 12);
        let x_t = random_bits(&mut r, 20);
        let x_next = random_bits(&mut r, 20);
        let (alpha, nu) = (0.05, 0.9);

        let mut fused = slot.clone();
        fused.answer_update(&x_t, &x_next, 2, alpha, nu);

        let mut manual = slot.clone();
        let target = slot.answer_target(&x_next);
        let g = slot.answer_gradients(&x_t, 2, target);
        crate::micrograd::co_opt(&mut manual.heads.w_v, alpha, &g.v_head, &mut manual.heads.momentum_v, nu);
        crate::micrograd::co_opt(&mut manual.heads.w_q[2], alpha, &g.q_head, &mut manual.heads.momentum_q[2], nu);
        crate::micrograd::co_opt(manual.net.weights_mut(), alpha, &g.net.weights, &mut manual.net_momentum.weights, nu);
        crate::micrograd::co_opt(manual.net.bias_mut(), alpha, &g.net.bias, &mut manual.net_momentum.bias, nu);

        for (a, b) in fused.net.weights().iter().zip(manual.net.weights()) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()));
        }
        for (a, b) in fused.heads.w_v.iter().zip(&manual.heads.w_v) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()));
        }
        assert_eq!(fused.heads.w_q[0], slot.heads.w_q[0]);
        assert_eq!(fused.heads.w_q[1], slot.heads.w_q[1]);
    }

    #[test]
    fn constant_cumulant_drives_value_up_monotonically() {
        // Frozen input: the same observation every step, cumulant always 1.
        let mut r = rng(4);
        let inputs = SelectionState::random(4, 6, 0.0, &mut r);
        let mut slot = QuestionSlot::new(GvfQuestion { cumulant_index: 0, discount: 0.99 }, inputs, 8, 3, &mut r);
        let x = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let mut last = slot.heads.value(&slot.encode(&x));
        for _ in 0..3000 {
            slot.answer_update(&x, &x, 0, 0.01, 0.0);
            let v = slot.heads.value(&slot.encode(&x));
            assert!(v >= last - 1e-9, "{v} < {last}");
            last = v;
        }
        // Fixed point of v = 1 + 0.99 v.
        assert!((last - 100.0).abs() < 1e-6, "{last}");
    }
}

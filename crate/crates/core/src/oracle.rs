//! Brute-force validators.
//!
//! Each oracle computes a reference answer by a method independent of the
//! code it checks: explicit state enumeration for the environment, a direct
//! linear solve for TD and for the reward model, a full sort for top-k, and
//! central finite differences of independently written losses for gradients.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::gvf::{dot, linear_td0};
use crate::multicatch::{Action, BoardConfig, BoardState, MultiCatchEnv, Phase, NUM_ACTIONS};
use crate::rng::{self, roles, StreamRng};
use crate::selection::SelectionState;

/// One outgoing transition: `(next state index, probability, reward)`.
pub type Edge = (usize, f64, f64);

/// Explicit Markov chain of one board under a fixed action distribution.
#[derive(Clone, Debug)]
pub struct BoardChain {
    pub states: Vec<BoardState>,
    pub edges: Vec<Vec<Edge>>,
}

impl BoardChain {
    /// Enumerates every state reachable from `Reset` under `policy`
    /// (probabilities over Left, Stay, Right). The transition rules are
    /// written out here from the state-machine description, not taken from
    /// the simulator.
    pub fn enumerate(config: &BoardConfig, policy: [f64; NUM_ACTIONS]) -> Self {
        let pn = config.paddle_noise;
        let moves: Vec<(i64, f64)> = (0..NUM_ACTIONS)
            .map(|a| (a as i64 - 1, (1.0 - pn) * policy[a] + pn / NUM_ACTIONS as f64))
            .collect();
        let cols = config.num_cols as i64;
        let clamp = |c: i64| c.clamp(0, cols - 1) as usize;

        let mut index: HashMap<BoardState, usize> = HashMap::new();
        let mut states = Vec::new();
        let mut edges: Vec<Vec<Edge>> = Vec::new();
        for c in 0..config.num_cols {
            let s = BoardState::reset(c);
            index.insert(s, states.len());
            states.push(s);
        }
        // States are expanded in discovery order; `states[pending..]` is the frontier.
        let mut intern = |s: BoardState, states: &mut Vec<BoardState>| -> usize {
            *index.entry(s).or_insert_with(|| {
                states.push(s);
                states.len() - 1
            })
        };

        let mut pending = 0;
        while pending < states.len() {
            let s = states[pending];
            pending += 1;
            // (phase, hot, probability, reward) before the paddle move.
            let mut outcomes: Vec<(Phase, bool, f64, f64)> = Vec::new();
            match s.phase {
                Phase::Reset => {
                    outcomes.push((Phase::Reset, s.hot, 1.0 - config.p_arrival, 0.0));
                    let per_col = config.p_arrival / config.num_cols as f64;
                    for col in 0..config.num_cols {
                        let falling = Phase::Falling { row: 0, col };
                        if s.hot {
                            outcomes.push((falling, true, per_col, 0.0));
                        } else {
                            outcomes.push((falling, true, per_col * config.p_hot, 0.0));
                            outcomes.push((falling, false, per_col * (1.0 - config.p_hot), 0.0));
                        }
                    }
                }
                Phase::Falling { row, col } if row + 1 == config.num_rows => {
                    let phase = if col == s.paddle_col { Phase::Catch } else { Phase::Miss };
                    outcomes.push((phase, s.hot, 1.0, 0.0));
                }
                Phase::Falling { row, col } => {
                    let next = Phase::Falling { row: row + 1, col: clamp(col as i64 + i64::from(config.wind)) };
                    outcomes.push((next, s.hot, 1.0, 0.0));
                }
                Phase::Catch => {
                    outcomes.push((if s.hot { Phase::PlusHold } else { Phase::Reset }, s.hot, 1.0, 0.0));
                }
                Phase::Miss => {
                    outcomes.push((if s.hot { Phase::MinusHold } else { Phase::Reset }, s.hot, 1.0, 0.0));
                }
                Phase::PlusHold | Phase::MinusHold => {
                    let r = if s.phase == Phase::PlusHold { 1.0 } else { -1.0 };
                    outcomes.push((Phase::Reset, false, config.p_reward, r));
                    outcomes.push((s.phase, true, 1.0 - config.p_reward, 0.0));
                }
            }
            let mut out: Vec<Edge> = Vec::new();
            for &(phase, hot, p_phase, r) in &outcomes {
                for &(delta, p_move) in &moves {
                    let p = p_phase * p_move;
                    if p == 0.0 {
                        continue;
                    }
                    let next = BoardState { phase, paddle_col: clamp(s.paddle_col as i64 + delta), hot };
                    let j = intern(next, &mut states);
                    match out.iter_mut().find(|e| e.0 == j && e.2 == r) {
                        Some(e) => e.1 += p,
                        None => out.push((j, p, r)),
                    }
                }
            }
            edges.push(out);
        }
        BoardChain { states, edges }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Expected one-step reward from each state.
    pub fn expected_rewards(&self) -> Vec<f64> {
        self.edges.iter().map(|out| out.iter().map(|&(_, p, r)| p * r).sum()).collect()
    }

    /// Stationary distribution by power iteration from uniform, stopping
    /// when the L1 change drops below `tol`.
    pub fn stationary(&self, tol: f64, max_iters: usize) -> Vec<f64> {
        let n = self.len();
        let mut pi = vec![1.0 / n as f64; n];
        let mut next = vec![0.0; n];
        for _ in 0..max_iters {
            next.fill(0.0);
            for (i, out) in self.edges.iter().enumerate() {
                for &(j, p, _) in out {
                    next[j] += pi[i] * p;
                }
            }
            let change: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
            std::mem::swap(&mut pi, &mut next);
            if change < tol {
                break;
            }
        }
        pi
    }

    pub fn average_reward(&self) -> f64 {
        let pi = self.stationary(1e-14, 1_000_000);
        dot(&pi, &self.expected_rewards())
    }
}

/// Sample mean with a batch-means standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

pub fn batch_means(samples: &[f64], num_batches: usize) -> Estimate {
    assert!(num_batches >= 2 && samples.len() >= num_batches);
    let size = samples.len() / num_batches;
    let means: Vec<f64> =
        samples.chunks_exact(size).take(num_batches).map(|c| c.iter().sum::<f64>() / size as f64).collect();
    let mean = means.iter().sum::<f64>() / num_batches as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (num_batches - 1) as f64;
    Estimate { mean, std_err: (var / num_batches as f64).sqrt() }
}

/// Average reward of a uniformly random policy on one board, simulated
/// through the real environment.
pub fn simulate_random_policy(config: &BoardConfig, steps: usize, num_batches: usize, seed: u64) -> Estimate {
    let mut env = MultiCatchEnv::new(vec![config.clone()], seed, None).expect("valid board config");
    let mut policy = rng::stream(seed, roles::AGENT, 0);
    let rewards: Vec<f64> = (0..steps)
        .map(|_| f64::from(env.step(Action::ALL[policy.gen_range(0..NUM_ACTIONS)]).0))
        .collect();
    batch_means(&rewards, num_batches)
}

#[derive(Clone, Debug, Serialize)]
pub struct EnvOracleReport {
    pub num_states: usize,
    pub exact: f64,
    pub simulated: Estimate,
    /// `|exact - simulated| / std_err`.
    pub z: f64,
}

pub fn env_oracle(config: &BoardConfig, steps: usize, seed: u64) -> EnvOracleReport {
    let chain = BoardChain::enumerate(config, [1.0 / 3.0; 3]);
    let exact = chain.average_reward();
    let simulated = simulate_random_policy(config, steps, 1000, seed);
    EnvOracleReport { num_states: chain.len(), exact, z: (exact - simulated.mean).abs() / simulated.std_err, simulated }
}

/// A small ergodic chain with linear features, for checking TD.
#[derive(Clone, Debug)]
pub struct LinearChain {
    /// Row-stochastic transition matrix.
    pub p: DMatrix<f64>,
    /// One feature row per state.
    pub features: DMatrix<f64>,
    /// Cumulant received on entering each state.
    pub cumulants: DVector<f64>,
    pub gamma: f64,
}

impl LinearChain {
    pub fn random(num_states: usize, num_features: usize, gamma: f64, seed: u64) -> Self {
        let mut r = StreamRng::seed_from_u64(seed);
        let mut p = DMatrix::from_fn(num_states, num_states, |_, _| r.gen_range(0.05..1.0));
        for mut row in p.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        let features = DMatrix::from_fn(num_states, num_features, |_, _| r.gen_range(-1.0..1.0));
        let cumulants = DVector::from_fn(num_states, |_, _| r.gen_range(-1.0..1.0));
        LinearChain { p, features, cumulants, gamma }
    }

    pub fn stationary(&self) -> DVector<f64> {
        let n = self.p.nrows();
        let mut pi = DVector::from_element(n, 1.0 / n as f64);
        for _ in 0..10_000 {
            pi = self.p.transpose() * &pi;
        }
        pi
    }

    /// Solves `Phi^T D (Phi - gamma P Phi) w = Phi^T D P c`.
    pub fn td_fixed_point(&self) -> DVector<f64> {
        let d = DMatrix::from_diagonal(&self.stationary());
        let phi = &self.features;
        let a = phi.transpose() * &d * (phi - self.gamma * &self.p * phi);
        let b = phi.transpose() * &d * &self.p * &self.cumulants;
        a.lu().solve(&b).expect("TD system is nonsingular on an ergodic chain")
    }

    /// On-policy linear TD(0) with a constant step size; returns the average
    /// of the iterates over the second half of the run.
    pub fn run_td(&self, steps: usize, alpha: f64, seed: u64) -> Vec<f64> {
        let mut r = StreamRng::seed_from_u64(seed);
        let n = self.p.nrows();
        let k = self.features.ncols();
        let row = |s: usize| -> Vec<f64> { self.features.row(s).iter().copied().collect() };
        let mut w = vec![0.0; k];
        let mut avg = vec![0.0; k];
        let mut count = 0.0;
        let mut s = 0;
        for t in 0..steps {
            let u: f64 = r.gen();
            let mut next = n - 1;
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.p[(s, j)];
                if u < acc {
                    next = j;
                    break;
                }
            }
            linear_td0(&mut w, &row(s), &row(next), self.cumulants[next], self.gamma, alpha);
            if t >= steps / 2 {
                count += 1.0;
                for (a, wi) in avg.iter_mut().zip(&w) {
                    *a += (wi - *a) / count;
                }
            }
            s = next;
        }
        avg
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TdOracleReport {
    pub fixed_point: Vec<f64>,
    pub averaged: Vec<f64>,
    pub max_abs_err: f64,
}

pub fn td_oracle(steps: usize, seed: u64) -> TdOracleReport {
    let chain = LinearChain::random(5, 3, 0.9, seed);
    let fixed_point: Vec<f64> = chain.td_fixed_point().iter().copied().collect();
    let averaged = chain.run_td(steps, 0.01, seed.wrapping_add(1));
    let max_abs_err = fixed_point.iter().zip(&averaged).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    TdOracleReport { fixed_point, averaged, max_abs_err }
}

/// Indices of the `k` largest utilities, ties to the lower index, sorted.
pub fn full_sort_top_k(utilities: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..utilities.len()).collect();
    order.sort_by(|&a, &b| utilities[b].total_cmp(&utilities[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    top
}

#[derive(Clone, Debug, Serialize)]
pub struct TopKOracleReport {
    pub cases: usize,
    pub converged: usize,
    pub max_calls: usize,
    pub max_changes_per_call: usize,
}

/// Random tie-free utility vectors with `m <= max_m`, `k <= max_k`, random
/// initial selections and `tau = 0`. Each case calls `incremental_top` until
/// it stops changing or `m` calls have been made.
pub fn top_k_oracle(cases: usize, max_m: usize, max_k: usize, seed: u64) -> TopKOracleReport {
    let mut r = StreamRng::seed_from_u64(seed);
    let mut report = TopKOracleReport { cases, converged: 0, max_calls: 0, max_changes_per_call: 0 };
    for _ in 0..cases {
        let m = r.gen_range(1..=max_m);
        let k = r.gen_range(1..=max_k.min(m));
        let utilities: Vec<f64> = (0..m).map(|_| r.gen::<f64>()).collect();
        let mut s = SelectionState::random(k, m, 0.0, &mut r);
        let mut calls = 0;
        while calls < m {
            let before = s.list().to_vec();
            let swap = s.incremental_top(&utilities);
            calls += 1;
            let changed = before.iter().zip(s.list()).filter(|(a, b)| a != b).count();
            report.max_changes_per_call = report.max_changes_per_call.max(changed);
            if swap.is_none() {
                break;
            }
        }
        let mut got = s.list().to_vec();
        got.sort_unstable();
        if got == full_sort_top_k(&utilities, k) {
            report.converged += 1;
        }
        report.max_calls = report.max_calls.max(calls);
    }
    report
}

/// Accumulates `X^T X` and `X^T r` for the one-step reward model and solves
/// for the minimum-norm least-squares weights.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    xtx: DMatrix<f64>,
    xtr: DVector<f64>,
}

impl LeastSquares {
    pub fn new(dim: usize) -> Self {
        LeastSquares { xtx: DMatrix::zeros(dim, dim), xtr: DVector::zeros(dim) }
    }

    /// Adds one `(x, target)` sample; `x` is binary, so only active pairs
    /// are touched.
    pub fn push(&mut self, x: &[f64], target: f64) {
        let active: Vec<usize> = (0..x.len()).filter(|&i| x[i] != 0.0).collect();
        for &i in &active {
            self.xtr[i] += x[i] * target;
            for &j in &active {
                self.xtx[(i, j)] += x[i] * x[j];
            }
        }
    }

    pub fn solve(&self) -> Vec<f64> {
        let pinv = self
            .xtx
            .clone()
            .pseudo_inverse(1e-9 * self.xtx.norm().max(1.0))
            .expect("pseudo-inverse of a symmetric matrix");
        (pinv * &self.xtr).iter().copied().collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DiscoveryOracleReport {
    pub steps: usize,
    /// Permuted indices of the plus and minus bits of every board.
    pub plus_bits: Vec<usize>,
    pub minus_bits: Vec<usize>,
    /// Learned discovery weights at those bits.
    pub plus_weights: Vec<f64>,
    pub minus_weights: Vec<f64>,
    /// Least-squares weights at those bits.
    pub plus_ls: Vec<f64>,
    pub minus_ls: Vec<f64>,
    /// Largest learned `|w|` away from the plus and minus bits.
    pub max_other: f64,
    /// Largest `|w - w_ls|` over all bits.
    pub max_ls_gap: f64,
    /// Selected cumulants (sorted) and the expected set (sorted).
    pub selected: Vec<usize>,
    pub expected: Vec<usize>,
}

/// Runs a Nibbler agent with `epsilon = 1` (a uniform random policy) and
/// `h = 2n` on `n` standard boards, alongside a batch least-squares fit of
/// the one-step reward model.
pub fn discovery_oracle(n: usize, steps: usize, seed: u64) -> DiscoveryOracleReport {
    use crate::multicatch::{make_multicatch, BoardOverrides, MINUS_BIT, PLUS_BIT};
    use crate::nibbler::{NibblerAgent, NibblerConfig};

    let mut env = make_multicatch(n, rng::derive_seed(seed, roles::ENV, 0), &BoardOverrides::default())
        .expect("standard boards are valid");
    let m = env.observation_len();
    let mut config = NibblerConfig::default_for(n, m);
    config.epsilon = 1.0;
    let mut agent = NibblerAgent::new(config, m, NUM_ACTIONS, rng::derive_seed(seed, roles::AGENT, 0))
        .expect("default config is valid");
    let mut ls = LeastSquares::new(m);
    let mut x: Vec<f64> = env.observation().bits().iter().map(|&b| f64::from(b)).collect();
    let mut action = agent.step(0.0, env.observation().bits()).expect("length matches");
    for _ in 0..steps {
        let (r, obs) = env.step(Action::ALL[action]);
        ls.push(&x, f64::from(r));
        x.clear();
        x.extend(obs.bits().iter().map(|&b| f64::from(b)));
        action = agent.step(f64::from(r), obs.bits()).expect("length matches");
    }
    let w = &agent.discovery().weights;
    let w_ls = ls.solve();
    let perm = env.permutation().clone();
    let layouts = env.layouts();
    let plus_bits: Vec<usize> = layouts.iter().map(|l| perm.image(l.status(PLUS_BIT))).collect();
    let minus_bits: Vec<usize> = layouts.iter().map(|l| perm.image(l.status(MINUS_BIT))).collect();
    let mut expected: Vec<usize> = plus_bits.iter().chain(&minus_bits).copied().collect();
    expected.sort_unstable();
    let mut selected = agent.cumulant_indices().to_vec();
    selected.sort_unstable();
    let max_other = (0..m).filter(|j| !expected.contains(j)).map(|j| w[j].abs()).fold(0.0, f64::max);
    DiscoveryOracleReport {
        steps,
        plus_weights: plus_bits.iter().map(|&j| w[j]).collect(),
        minus_weights: minus_bits.iter().map(|&j| w[j]).collect(),
        plus_ls: plus_bits.iter().map(|&j| w_ls[j]).collect(),
        minus_ls: minus_bits.iter().map(|&j| w_ls[j]).collect(),
        max_other,
        max_ls_gap: w.iter().zip(&w_ls).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        plus_bits,
        minus_bits,
        selected,
        expected,
    }
}

/// Relative error `|a - b| / max(|a|, |b|)` (absolute when both vanish).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `params`.
pub fn central_differences(params: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            p[i] = params[i] + eps;
            let up = f(&p);
            p[i] = params[i] - eps;
            let down = f(&p);
            p[i] = params[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// `(loss, instances checked, worst relative error)`.
    pub per_loss: Vec<(String, usize, f64)>,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn squared_td(target: f64, v: Option<f64>, q: f64) -> f64 {
    0.5 * (v.map_or(0.0, |v| (target - v).powi(2)) + (target - q).powi(2))
}

fn relu_forward(weights: &[f64], bias: &[f64], x: &[f64]) -> (Vec<f64>, f64) {
    // Input-major layout: weight of input i into unit u at i * hidden + u.
    let hidden = bias.len();
    let mut pre = bias.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (u, p) in pre.iter_mut().enumerate() {
            *p += weights[i * hidden + u] * xi;
        }
    }
    let margin = pre.iter().fold(f64::INFINITY, |m, p| m.min(p.abs()));
    (pre.iter().map(|p| p.max(0.0)).collect(), margin)
}

/// Checks the analytic gradients of every loss against central differences
/// of an independent implementation: the answer network alone, an answer
/// (network and V/Q heads), the main linear QV learner, and the Q and QV
/// baselines. Instances within `1e-3` of a rectifier kink are redrawn.
pub fn gradient_oracle(per_loss: usize, seed: u64) -> GradCheckReport {
    use crate::baselines::{BaselineAgent, BaselineConfig, BaselineVariant};
    use crate::gvf::{GvfQuestion, LinearVQ, QuestionSlot};
    use crate::micrograd::init_dense;

    const EPS: f64 = 1e-6;
    const KINK: f64 = 1e-3;
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let uniform = |r: &mut rand_chacha::ChaCha8Rng, n: usize, s: f64| -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-s..s)).collect()
    };
    let randomize_heads = |r: &mut rand_chacha::ChaCha8Rng, h: &mut LinearVQ| {
        h.w_v.iter_mut().chain(h.w_q.iter_mut().flatten()).for_each(|w| *w = r.gen_range(-1.0..1.0));
    };

    // Answer network under a random linear readout.
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < per_loss {
        let (input, hidden) = (r.gen_range(1..8), r.gen_range(1..8));
        let (mut net, _) = init_dense(input, hidden, &mut r);
        net.bias_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
        let x = uniform(&mut r, input, 2.0);
        let up = uniform(&mut r, hidden, 1.0);
        let (_, margin) = relu_forward(net.weights(), net.bias(), &x);
        if margin < KINK {
            continue;
        }
        let act = net.forward_activations(&x);
        let g = net.backward(&x, &act, &up);
        let (nw, nb) = (net.weights().len(), net.bias().len());
        let params: Vec<f64> = net.weights().iter().chain(net.bias()).chain(&x).copied().collect();
        let numeric = central_differences(&params, EPS, |p| {
            let (h, _) = relu_forward(&p[..nw], &p[nw..nw + nb], &p[nw + nb..]);
            dot(&h, &up)
        });
        let analytic: Vec<f64> = g.weights.iter().chain(&g.bias).chain(&g.input).copied().collect();
        worst = worst.max(relative_error(&analytic, &numeric));
        done += 1;
    }
    rows.push(("network".to_string(), done, worst));

    // Answer loss: network plus V and Q heads, target fixed.
    let (mut worst, mut done) = (0.0f64, 0);
    while done < per_loss {
        let m = r.gen_range(4..16);
        let g = r.gen_range(1..=m.min(6));
        let d = r.gen_range(1..8);
        let inputs = SelectionState::random(g, m, 0.0, &mut r);
        let question = GvfQuestion { cumulant_index: r.gen_range(0..m), discount: 0.9 };
        let mut slot = QuestionSlot::new(question, inputs, d, NUM_ACTIONS, &mut r);
        slot.net.bias_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
        randomize_heads(&mut r, &mut slot.heads);
        let x = uniform(&mut r, m, 1.5);
        let (action, target) = (r.gen_range(0..NUM_ACTIONS), r.gen_range(-2.0..2.0));
        let selected: Vec<f64> = slot.inputs.list().iter().map(|&j| x[j]).collect();
        let (_, margin) = relu_forward(slot.net.weights(), slot.net.bias(), &selected);
        if margin < KINK {
            continue;
        }
        let grads = slot.answer_gradients(&x, action, target);
        let (nw, nb) = (slot.net.weights().len(), d);
        let params: Vec<f64> = slot
            .net
            .weights()
            .iter()
            .chain(slot.net.bias())
            .chain(&slot.heads.w_v)
            .chain(&slot.heads.w_q[action])
            .copied()
            .collect();
        let numeric = central_differences(&params, EPS, |p| {
            let (h, _) = relu_forward(&p[..nw], &p[nw..nw + nb], &selected);
            let (wv, wq) = p[nw + nb..].split_at(d);
            squared_td(target, Some(dot(wv, &h)), dot(wq, &h))
        });
        let analytic: Vec<f64> = grads
            .net
            .weights
            .iter()
            .chain(&grads.net.bias)
            .chain(&grads.v_head)
            .chain(&grads.q_head)
            .copied()
            .collect();
        worst = worst.max(relative_error(&analytic, &numeric));
        done += 1;
    }
    rows.push(("answer".to_string(), done, worst));

    // Main learner: linear V and Q over the full features.
    let mut worst = 0.0f64;
    for _ in 0..per_loss {
        let dim = r.gen_range(1..20);
        let mut heads = LinearVQ::zeros(dim, NUM_ACTIONS);
        randomize_heads(&mut r, &mut heads);
        let x = uniform(&mut r, dim, 1.0);
        let (action, target) = (r.gen_range(0..NUM_ACTIONS), r.gen_range(-2.0..2.0));
        let e = heads.errors(&x, action, target);
        let analytic: Vec<f64> = x.iter().map(|xi| -e.v * xi).chain(x.iter().map(|xi| -e.q * xi)).collect();
        let params: Vec<f64> = heads.w_v.iter().chain(&heads.w_q[action]).copied().collect();
        let numeric = central_differences(&params, EPS, |p| {
            let (wv, wq) = p.split_at(dim);
            squared_td(target, Some(dot(wv, &x)), dot(wq, &x))
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    rows.push(("main".to_string(), per_loss, worst));

    // Baselines: trunk and heads, target fixed.
    for variant in [BaselineVariant::Q, BaselineVariant::Qv] {
        let (mut worst, mut done) = (0.0f64, 0);
        while done < per_loss {
            let (input, hidden) = (r.gen_range(1..10), r.gen_range(1..8));
            let config = BaselineConfig { hidden_dim: hidden, ..BaselineConfig::new(variant) };
            let mut agent = BaselineAgent::new(config, input, NUM_ACTIONS, r.gen()).expect("valid baseline");
            {
                let (trunk, heads) = agent.parts_mut();
                trunk.bias_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
                randomize_heads(&mut r, heads);
            }
            let x = uniform(&mut r, input, 1.5);
            let (action, target) = (r.gen_range(0..NUM_ACTIONS), r.gen_range(-2.0..2.0));
            let (trunk, heads) = (agent.trunk().clone(), agent.heads().clone());
            if relu_forward(trunk.weights(), trunk.bias(), &x).1 < KINK {
                continue;
            }
            let grads = agent.gradients(&x, action, target);
            let (nw, nb) = (trunk.weights().len(), hidden);
            let params: Vec<f64> =
                trunk.weights().iter().chain(trunk.bias()).chain(&heads.w_v).chain(&heads.w_q[action]).copied().collect();
            let use_v = variant == BaselineVariant::Qv;
            let numeric = central_differences(&params, EPS, |p| {
                let (h, _) = relu_forward(&p[..nw], &p[nw..nw + nb], &x);
                let (wv, wq) = p[nw + nb..].split_at(hidden);
                squared_td(target, use_v.then(|| dot(wv, &h)), dot(wq, &h))
            });
            let analytic: Vec<f64> = grads
                .trunk
                .weights
                .iter()
                .chain(&grads.trunk.bias)
                .chain(&grads.v_head)
                .chain(&grads.q_head)
                .copied()
                .collect();
            worst = worst.max(relative_error(&analytic, &numeric));
            done += 1;
        }
        let name = if variant == BaselineVariant::Qv { "qv" } else { "q" };
        rows.push((name.to_string(), done, worst));
    }

    GradCheckReport {
        instances: rows.iter().map(|r| r.1).sum(),
        max_rel_err: rows.iter().map(|r| r.2).fold(0.0, f64::max),
        per_loss: rows,
    }
}

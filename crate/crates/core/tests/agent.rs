use nibbler::harness::{AlgorithmSpec, NibblerOverrides};
use nibbler::multicatch::*;
use nibbler::nibbler::{NibblerAgent, NibblerConfig, StepTrace, UpdateOrder};
use nibbler::selection::SlotReset;

const M2: usize = 112;

fn small(order: UpdateOrder) -> NibblerConfig {
    let mut c = NibblerConfig::default_for(2, M2);
    c.d = 32;
    c.alpha = 0.01;
    c.alpha_b = 0.01;
    c.update_order = order;
    c
}

fn drive(agent: &mut NibblerAgent, env: &mut MultiCatchEnv, steps: usize) -> Vec<StepTrace> {
    let mut reward = 0.0;
    let mut traces = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = agent.step(reward, env.observation().bits()).unwrap();
        traces.push(agent.trace(a));
        reward = f64::from(env.step(Action::ALL[a]).0);
    }
    traces
}

fn traces_for(order: UpdateOrder, steps: usize) -> Vec<StepTrace> {
    let mut env = make_multicatch(2, 21, &BoardOverrides::default()).unwrap();
    let mut agent = NibblerAgent::new(small(order), M2, NUM_ACTIONS, 22).unwrap();
    drive(&mut agent, &mut env, steps)
}

#[test]
fn answer_and_main_updates_commute_but_selection_order_matters() {
    let standard = traces_for(UpdateOrder::Standard, 3000);
    assert_eq!(standard, traces_for(UpdateOrder::AnswersBeforeMain, 3000));
    assert_ne!(standard, traces_for(UpdateOrder::SelectionBeforeAnswers, 3000));
}

#[test]
fn agent_is_insensitive_to_observation_order() {
    // Agent A sees permuted bits and draws indices through the permutation;
    // agent B sees raw bits. Both must take the same actions.
    let configs = vec![BoardConfig::standard(2); 2];
    let seed = 31;
    let mut env_p = MultiCatchEnv::new(configs.clone(), seed, None).unwrap();
    let mut env_i = MultiCatchEnv::new(configs, seed, Some(Permutation::identity(M2))).unwrap();
    let sigma = env_p.permutation().clone();
    for reset in [SlotReset::Full, SlotReset::NetOnly] {
        let mut c = small(UpdateOrder::Standard);
        c.slot_reset = reset;
        let mut a = NibblerAgent::with_index_map(c.clone(), M2, NUM_ACTIONS, 32, Some(sigma.as_slice())).unwrap();
        let mut b = NibblerAgent::new(c, M2, NUM_ACTIONS, 32).unwrap();
        let ta = drive(&mut a, &mut env_p, 10_000);
        let tb = drive(&mut b, &mut env_i, 10_000);
        let mut swaps = 0;
        for (t, (x, y)) in ta.iter().zip(&tb).enumerate() {
            assert_eq!(x.action, y.action, "t={t}");
            let mapped: Vec<usize> = y.cumulants.iter().map(|&j| sigma.image(j)).collect();
            assert_eq!(x.cumulants, mapped, "t={t}");
            assert!((x.main_v_norm - y.main_v_norm).abs() <= 1e-9 * (1.0 + y.main_v_norm), "t={t}");
            swaps += usize::from(t > 0 && ta[t - 1].cumulants != x.cumulants);
        }
        assert!(swaps > 0, "{reset:?}: no cumulant swaps exercised");
    }
}

#[test]
fn full_exploration_gives_uniform_actions() {
    let mut c = small(UpdateOrder::Standard);
    c.epsilon = 1.0;
    let mut env = make_multicatch(2, 41, &BoardOverrides::default()).unwrap();
    let mut agent = NibblerAgent::new(c, M2, NUM_ACTIONS, 42).unwrap();
    let steps = 30_000;
    let mut counts = [0usize; NUM_ACTIONS];
    for t in drive(&mut agent, &mut env, steps) {
        counts[t.action] += 1;
    }
    let p = 1.0 / NUM_ACTIONS as f64;
    let sd = (steps as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - steps as f64 * p).abs() < 4.0 * sd, "{counts:?}");
    }
}

#[test]
fn default_agent_size_follows_board_count() {
    for n in [1, 2, 4] {
        let env = make_multicatch(n, 1, &BoardOverrides::default()).unwrap();
        let m = env.observation_len();
        assert_eq!(m, 56 * n);
        let spec = AlgorithmSpec::Nibbler(NibblerOverrides::default());
        let agent = nibbler::harness::Agent::build(&spec, n, m, 3).unwrap();
        let c = NibblerConfig::default_for(n, m);
        assert_eq!(c.h, 2 * n);
        let (g, d, h, z) = (c.g, c.d, c.h, NUM_ACTIONS);
        let expected = m + h * (g * d + d + d * (1 + z) + m) + (m + h * d) * (1 + z);
        assert_eq!(agent.param_count(), expected);
        let total: usize = agent.tensors().iter().map(|t| t.data.len()).sum();
        assert_eq!(total, expected);
    }
}

#[test]
fn checkpointed_agent_continues_identically() {
    let mut env = make_multicatch(2, 51, &BoardOverrides::default()).unwrap();
    let mut agent = NibblerAgent::new(small(UpdateOrder::Standard), M2, NUM_ACTIONS, 52).unwrap();
    drive(&mut agent, &mut env, 1000);
    let mut agent2: NibblerAgent = serde_json::from_str(&serde_json::to_string(&agent).unwrap()).unwrap();
    assert_eq!(agent, agent2);
    let mut env2: MultiCatchEnv = serde_json::from_str(&serde_json::to_string(&env).unwrap()).unwrap();
    assert_eq!(drive(&mut agent, &mut env, 500), drive(&mut agent2, &mut env2, 500));
    assert_eq!(agent, agent2);
}

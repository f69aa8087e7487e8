//! Incremental top-k selection and the two selection loops built on it.
//!
//! `incremental_top` swaps at most one index per call: the best unselected
//! feature replaces the worst selected one when it wins by more than `tau`.
//! Utilities are magnitudes of linear weights, recomputed every call.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gvf::{linear_reward_model_update, linear_td0, GvfQuestion, QuestionSlot};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("cannot select {k} of {m} indices")]
    TooMany { k: usize, m: usize },
    #[error("index {0} out of range")]
    OutOfRange(usize),
    #[error("index {0} selected twice")]
    Duplicate(usize),
}

/// Ordered list of `k` selected indices out of `0..m`, with a membership mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    list: Vec<usize>,
    mask: Vec<bool>,
    pub tau: f64,
}

/// Result of a successful swap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Swap {
    /// Position in the list that changed.
    pub pos: usize,
    pub removed: usize,
    pub added: usize,
}

impl SelectionState {
    pub fn new(list: Vec<usize>, m: usize, tau: f64) -> Result<Self, SelectionError> {
        if list.len() > m {
            return Err(SelectionError::TooMany { k: list.len(), m });
        }
        let mut mask = vec![false; m];
        for &j in &list {
            if j >= m {
                return Err(SelectionError::OutOfRange(j));
            }
            if std::mem::replace(&mut mask[j], true) {
                return Err(SelectionError::Duplicate(j));
            }
        }
        Ok(SelectionState { list, mask, tau })
    }

    /// Uniformly random `k`-subset of `0..m`, in random order.
    pub fn random<R: Rng + ?Sized>(k: usize, m: usize, tau: f64, rng: &mut R) -> Self {
        assert!(k <= m, "cannot select {k} of {m}");
        let list = index::sample(rng, m, k).into_vec();
        Self::new(list, m, tau).expect("sampled indices are distinct")
    }

    pub fn list(&self) -> &[usize] {
        &self.list
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn contains(&self, j: usize) -> bool {
        self.mask[j]
    }

    pub fn k(&self) -> usize {
        self.list.len()
    }

    /// Size `m` of the index universe.
    pub fn universe(&self) -> usize {
        self.mask.len()
    }

    /// Mask and list agree and the list has no duplicates.
    pub fn is_consistent(&self) -> bool {
        let ones = self.mask.iter().filter(|&&b| b).count();
        ones == self.list.len() && self.list.iter().all(|&j| j < self.mask.len() && self.mask[j])
    }

    /// One incremental top-k step. Ties in the argmin/argmax go to the lowest
    /// index. Swaps iff `U[low] + tau < U[high]`.
    pub fn incremental_top(&mut self, utilities: &[f64]) -> Option<Swap> {
        self.incremental_top_ranked(utilities, None)
    }

    /// As [`SelectionState::incremental_top`], but ties go to the lowest
    /// `rank[j]` when a rank (a permutation of `0..m`) is given.
    pub fn incremental_top_ranked(&mut self, utilities: &[f64], rank: Option<&[usize]>) -> Option<Swap> {
        assert_eq!(utilities.len(), self.mask.len(), "utility vector length");
        let r = |j: usize| rank.map_or(j, |r| r[j]);
        let mut low: Option<usize> = None;
        let mut high: Option<usize> = None;
        for (j, (&u, &selected)) in utilities.iter().zip(&self.mask).enumerate() {
            if selected {
                if low.map_or(true, |l| u < utilities[l] || (u == utilities[l] && r(j) < r(l))) {
                    low = Some(j);
                }
            } else if high.map_or(true, |h| u > utilities[h] || (u == utilities[h] && r(j) < r(h))) {
                high = Some(j);
            }
        }
        let (low, high) = (low?, high?);
        if !(utilities[low] + self.tau < utilities[high]) {
            return None;
        }
        self.mask[low] = false;
        self.mask[high] = true;
        let pos = self.list.iter().position(|&j| j == low).expect("mask and list agree");
        self.list[pos] = high;
        Some(Swap { pos, removed: low, added: high })
    }
}

fn magnitudes(w: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(w.iter().map(|v| v.abs()));
}

/// Answer-input selection for one question: swap on `|support|`, reinitialize
/// the network column fed by the changed position, then a TD(0) step on the
/// support weights towards the question's cumulant.
pub fn update_answer_selection<R: Rng + ?Sized>(
    slot: &mut QuestionSlot,
    x_base_t: &[f64],
    x_base_next: &[f64],
    alpha_b: f64,
    utilities: &mut Vec<f64>,
    tie_rank: Option<&[usize]>,
    rng: &mut R,
) -> Option<Swap> {
    magnitudes(&slot.support, utilities);
    let swap = slot.inputs.incremental_top_ranked(utilities, tie_rank);
    if let Some(s) = swap {
        slot.net
            .reinit_input_column(&mut slot.net_momentum, s.pos, rng)
            .expect("selection position within network inputs");
    }
    let cumulant = slot.cumulant(x_base_next);
    linear_td0(&mut slot.support, x_base_t, x_base_next, cumulant, slot.question.discount, alpha_b);
    swap
}

/// What to reinitialize in a question slot whose cumulant was replaced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotReset {
    /// Network, heads, support weights and a fresh random input subset.
    #[default]
    Full,
    /// Only the answer network weights and their momentum.
    NetOnly,
}

/// Reward-model state used to pick cumulants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discovery {
    pub weights: Vec<f64>,
    pub cumulants: SelectionState,
    #[serde(skip)]
    utilities: crate::micrograd::Scratch<Vec<f64>>,
}

impl Discovery {
    pub fn new(cumulants: SelectionState) -> Self {
        Discovery { weights: vec![0.0; cumulants.universe()], cumulants, utilities: Default::default() }
    }
}

/// Cumulant selection: swap on `|w_discovery|`; a changed list position
/// gets the new cumulant and a reset slot; then an LMS step of the one-step
/// reward model.
#[allow(clippy::too_many_arguments)]
pub fn update_cumulant_selection<R: Rng + ?Sized>(
    discovery: &mut Discovery,
    slots: &mut [QuestionSlot],
    x_base_t: &[f64],
    reward: f64,
    alpha_b: f64,
    reset: SlotReset,
    inputs_per_answer: usize,
    tie_rank: Option<&[usize]>,
    rng: &mut R,
) -> Option<Swap> {
    let mut utilities = std::mem::take(&mut discovery.utilities.0);
    magnitudes(&discovery.weights, &mut utilities);
    let swap = discovery.cumulants.incremental_top_ranked(&utilities, tie_rank);
    discovery.utilities.0 = utilities;
    if let Some(s) = swap {
        let slot = &mut slots[s.pos];
        let question = GvfQuestion { cumulant_index: s.added, discount: slot.question.discount };
        match reset {
            SlotReset::Full => {
                let m = slot.inputs.universe();
                let inputs = SelectionState::random(inputs_per_answer, m, slot.inputs.tau, rng);
                slot.reset_for(question, inputs, rng);
            }
            SlotReset::NetOnly => {
                slot.question = question;
                slot.reset_net(rng);
            }
        }
    }
    linear_reward_model_update(&mut discovery.weights, x_base_t, reward, alpha_b);
    swap
}

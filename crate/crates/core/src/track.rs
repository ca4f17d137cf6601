//! The Track-MDP: state `(last seen cell, misses since, actions since)`, the
//! safe-sensing constraint, transitions, and the posterior over the next position.

use std::collections::VecDeque;

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::belief::exclude_and_normalize;
use crate::error::{Error, Result};
use crate::grid::{observe, reward, CellId, CellSet, Observation, RewardParams, SensingAction, TargetState};
use crate::kernel::TransitionKernel;

/// A Track-MDP state. For active states the miss counter is `history.len()`.
///
/// History entries are the cell sets of the non-safe actions executed since the last
/// detection; the safe action always detects, so it never enters a history.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TrackState {
    Active {
        last_seen: CellId,
        history: Vec<CellSet>,
    },
    Terminal,
}

impl TrackState {
    pub fn initial(x0: CellId) -> TrackState {
        TrackState::Active {
            last_seen: x0,
            history: Vec::new(),
        }
    }

    /// Miss counter `n`; `None` for the terminal state.
    pub fn n(&self) -> Option<usize> {
        match self {
            TrackState::Active { history, .. } => Some(history.len()),
            TrackState::Terminal => None,
        }
    }

    pub fn last_seen(&self) -> Option<CellId> {
        match self {
            TrackState::Active { last_seen, .. } => Some(*last_seen),
            TrackState::Terminal => None,
        }
    }

    pub fn history(&self) -> &[CellSet] {
        match self {
            TrackState::Active { history, .. } => history,
            TrackState::Terminal => &[],
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, TrackState::Terminal)
    }

    pub fn is_root(&self) -> bool {
        self.n() == Some(0)
    }

    /// True when the safe action is mandatory (`n = t_max + 1`).
    pub fn is_forced(&self, p: &RewardParams) -> bool {
        self.n() == Some(p.t_max + 1)
    }

    /// State after a miss under `a`.
    pub fn after_miss(&self, a: CellSet) -> Result<TrackState> {
        match self {
            TrackState::Active { last_seen, history } => {
                let mut h = Vec::with_capacity(history.len() + 1);
                h.extend_from_slice(history);
                h.push(a);
                Ok(TrackState::Active {
                    last_seen: *last_seen,
                    history: h,
                })
            }
            TrackState::Terminal => Err(Error::TerminalState),
        }
    }

    pub fn to_json(&self) -> StateJson {
        match self {
            TrackState::Active { last_seen, history } => StateJson::Active {
                last_seen: last_seen.label(),
                n: history.len(),
                history: history.iter().map(|h| h.labels()).collect(),
                safe: vec![false; history.len()],
            },
            TrackState::Terminal => StateJson::Terminal { terminal: true },
        }
    }

    pub fn from_json(j: &StateJson) -> Result<TrackState> {
        let cell = |l: usize| {
            CellId::from_label(l).ok_or_else(|| Error::InvalidState(format!("bad cell label {l}")))
        };
        match j {
            StateJson::Terminal { .. } => Ok(TrackState::Terminal),
            StateJson::Active {
                last_seen,
                n,
                history,
                safe,
            } => {
                if *n != history.len() {
                    return Err(Error::InvalidState(format!(
                        "n = {n} but history has {} actions",
                        history.len()
                    )));
                }
                if safe.iter().any(|s| *s) {
                    return Err(Error::InvalidState(
                        "the safe action cannot appear in a history".into(),
                    ));
                }
                let history = history
                    .iter()
                    .map(|h| {
                        h.iter()
                            .map(|&l| cell(l))
                            .collect::<Result<Vec<_>>>()
                            .map(CellSet::from_cells)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TrackState::Active {
                    last_seen: cell(*last_seen)?,
                    history,
                })
            }
        }
    }
}

/// Serialized form of a [`TrackState`], cells as 1-based labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateJson {
    Terminal {
        terminal: bool,
    },
    Active {
        last_seen: usize,
        n: usize,
        history: Vec<Vec<usize>>,
        safe: Vec<bool>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: TrackState,
    pub observation: Observation,
    pub reward: f64,
}

pub fn initial_state(x0: CellId) -> TrackState {
    TrackState::initial(x0)
}

/// Replaces the proposal by the safe action when the miss budget is spent.
pub fn constrain_action(
    s: &TrackState,
    proposed: SensingAction,
    kernel: &TransitionKernel,
    p: &RewardParams,
) -> SensingAction {
    if s.is_forced(p) {
        SensingAction::safe(kernel.grid())
    } else {
        proposed
    }
}

/// One Track-MDP transition given the realized next target state.
pub fn step(
    s: &TrackState,
    a: &SensingAction,
    x_next: TargetState,
    p: &RewardParams,
) -> Result<StepOutcome> {
    let n = s.n().ok_or(Error::TerminalState)?;
    let rew = reward(x_next, a, p);
    let next = match x_next {
        TargetState::Terminal => {
            return Ok(StepOutcome {
                next_state: TrackState::Terminal,
                observation: Observation::Exited,
                reward: rew,
            })
        }
        TargetState::Cell(c) => c,
    };
    if a.contains(next) || n == p.t_max + 1 {
        Ok(StepOutcome {
            next_state: TrackState::initial(next),
            observation: Observation::Seen(next),
            reward: rew,
        })
    } else {
        debug_assert_eq!(observe(x_next, a), Observation::Uninformative);
        Ok(StepOutcome {
            next_state: s.after_miss(a.cells)?,
            observation: Observation::Uninformative,
            reward: rew,
        })
    }
}

/// Distribution of the next target state given a Track-MDP state.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub cells: Vec<f64>,
    pub exit: f64,
}

impl Prediction {
    pub fn support(&self) -> CellSet {
        CellSet::from_cells(
            self.cells
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(i, _)| CellId(i as u16)),
        )
    }

    /// Mass of the cells outside `a`: probability of an uninformative observation.
    pub fn miss_mass(&self, a: CellSet) -> f64 {
        self.cells
            .iter()
            .enumerate()
            .filter(|(i, _)| !a.contains(CellId(*i as u16)))
            .map(|(_, p)| p)
            .sum()
    }

    /// Prediction of the child state reached by a miss under `a`.
    pub fn after_miss(&self, kernel: &TransitionKernel, a: CellSet) -> Result<Prediction> {
        let beta = exclude_and_normalize(&self.cells, a)?;
        let (cells, exit) = kernel.propagate(&beta);
        Ok(Prediction { cells, exit })
    }

    /// Cells whose probability exceeds `threshold`.
    pub fn above(&self, threshold: f64) -> CellSet {
        CellSet::from_cells(
            self.cells
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > threshold)
                .map(|(i, _)| CellId(i as u16)),
        )
    }
}

/// Posterior over the next target position by belief propagation along the history,
/// conditioning each step on a miss and on the absence of an exit signal.
pub fn predicted_distribution(s: &TrackState, kernel: &TransitionKernel) -> Result<Prediction> {
    let (last, history) = match s {
        TrackState::Active { last_seen, history } => (*last_seen, history),
        TrackState::Terminal => return Err(Error::TerminalState),
    };
    let mut beta = vec![0.0; kernel.cells()];
    beta[last.index()] = 1.0;
    for a in history {
        let (cells, _) = kernel.propagate(&beta);
        beta = exclude_and_normalize(&cells, *a)?;
    }
    let (cells, exit) = kernel.propagate(&beta);
    Ok(Prediction { cells, exit })
}

/// Breadth-first closure of the states reachable from every `(b^j, 0, ∅)` under the
/// candidate actions, forced states and the terminal included.
///
/// `action_gen` is called for every non-forced active state with its prediction.
pub fn enumerate_reachable<F>(
    kernel: &TransitionKernel,
    p: &RewardParams,
    mut action_gen: F,
    budget: usize,
) -> Result<Vec<TrackState>>
where
    F: FnMut(&TrackState, &Prediction) -> Result<Vec<SensingAction>>,
{
    let mut seen: FxHashSet<TrackState> = FxHashSet::default();
    let mut order = Vec::new();
    let mut queue: VecDeque<(TrackState, Prediction)> = VecDeque::new();
    let push = |s: TrackState,
                    pred: Option<Prediction>,
                    seen: &mut FxHashSet<TrackState>,
                    order: &mut Vec<TrackState>,
                    queue: &mut VecDeque<(TrackState, Prediction)>|
     -> Result<()> {
        if seen.contains(&s) {
            return Ok(());
        }
        if seen.len() >= budget {
            return Err(Error::BudgetExceeded { budget });
        }
        seen.insert(s.clone());
        order.push(s.clone());
        if let Some(pred) = pred {
            queue.push_back((s, pred));
        }
        Ok(())
    };
    for j in 0..kernel.cells() {
        let s = TrackState::initial(CellId(j as u16));
        let pred = predicted_distribution(&s, kernel)?;
        push(s, Some(pred), &mut seen, &mut order, &mut queue)?;
    }
    let mut exit_possible = false;
    while let Some((s, pred)) = queue.pop_front() {
        if pred.exit > 0.0 {
            exit_possible = true;
        }
        let support = pred.support();
        for c in support.iter() {
            push(TrackState::initial(c), None, &mut seen, &mut order, &mut queue)?;
        }
        if s.is_forced(p) {
            continue;
        }
        for a in action_gen(&s, &pred)? {
            let a = constrain_action(&s, a, kernel, p);
            if a.safe {
                continue;
            }
            if support.difference(a.cells).is_empty() {
                continue;
            }
            let child = s.after_miss(a.cells)?;
            if seen.contains(&child) {
                continue;
            }
            let child_pred = pred.after_miss(kernel, a.cells)?;
            push(child, Some(child_pred), &mut seen, &mut order, &mut queue)?;
        }
    }
    if exit_possible {
        push(TrackState::Terminal, None, &mut seen, &mut order, &mut queue)?;
    }
    Ok(order)
}

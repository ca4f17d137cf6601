//! Tabular Q-learning over Track-MDP states.
//!
//! States are inserted when first visited with their candidate actions and `Q = 0`.
//! Forced states have a single admissible action, so they get no table entry: the value
//! of entering one is the model backup `Σ_x P̄(x)(r + γ max_a Q((x,0,∅), a)) − D`.
//!
//! With `init = upper_bound`, a new entry starts from a one-step model backup in which
//! the continuation is valued by the fully observed relaxation: a forced child is worth
//! `Σ_y P̄'(y)(r + γV̄(y)) − D` and any other child `Σ_y [max(P̄'(y)r − c, 0) + γP̄'(y)V̄(y)]`,
//! with `V̄` the upper-bound table. Unvisited states then act greedily on that prior.
//!
//! With `counterfactual` set, every candidate action of the visited state is updated
//! from the realized target move. The move does not depend on the action, so each
//! update is an unbiased one-step sample for its action.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::belief::qmdp_upper_bound;
use crate::error::Result;
use crate::grid::{CellId, CellSet, RewardParams, SensingAction, TargetState};
use crate::kernel::TransitionKernel;
use crate::solvers::candidates::{candidate_sets, CandidateMode};
use crate::track::{predicted_distribution, step, Prediction, TrackState};

/// Initial value of new Q-table entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QInit {
    #[default]
    Zero,
    UpperBound,
}

fn default_alpha0() -> f64 {
    0.5
}
fn default_alpha_decay() -> f64 {
    1000.0
}
fn default_eps0() -> f64 {
    1.0
}
fn default_eps_decay() -> f64 {
    0.999
}
fn default_eps_min() -> f64 {
    0.05
}
fn default_episodes() -> usize {
    10_000
}
fn default_step_cap() -> usize {
    100_000
}
fn default_candidates() -> CandidateMode {
    CandidateMode::Exact
}

/// Learning-rate and exploration schedule:
/// `α = alpha0 / (1 + visits(s,a) / alpha_decay)`,
/// `ε = max(eps_min, eps0 · eps_decay^episode)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    #[serde(default = "default_alpha_decay")]
    pub alpha_decay: f64,
    #[serde(default = "default_eps0")]
    pub eps0: f64,
    #[serde(default = "default_eps_decay")]
    pub eps_decay: f64,
    #[serde(default = "default_eps_min")]
    pub eps_min: f64,
    /// Episode budget.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Optional budget on environment steps; training stops at whichever comes first.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Per-episode step cap.
    #[serde(default = "default_step_cap")]
    pub step_cap: usize,
    #[serde(default = "default_candidates")]
    pub candidates: CandidateMode,
    #[serde(default)]
    pub counterfactual: bool,
    #[serde(default)]
    pub init: QInit,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            alpha0: default_alpha0(),
            alpha_decay: default_alpha_decay(),
            eps0: default_eps0(),
            eps_decay: default_eps_decay(),
            eps_min: default_eps_min(),
            episodes: default_episodes(),
            max_steps: None,
            step_cap: default_step_cap(),
            candidates: default_candidates(),
            counterfactual: false,
            init: QInit::Zero,
        }
    }
}

impl Schedule {
    pub fn epsilon(&self, episode: usize) -> f64 {
        self.eps_min.max(self.eps0 * self.eps_decay.powi(episode.min(i32::MAX as usize) as i32))
    }

    pub fn alpha(&self, visits: u32) -> f64 {
        self.alpha0 / (1.0 + visits as f64 / self.alpha_decay)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QEntry {
    pub actions: Vec<CellSet>,
    pub q: Vec<f64>,
    pub visits: Vec<u32>,
}

impl QEntry {
    /// Greedy index, first maximum in canonical candidate order.
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for k in 1..self.q.len() {
            if self.q[k] > self.q[best] {
                best = k;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.q[self.greedy()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub entries: FxHashMap<TrackState, QEntry>,
    pub params: RewardParams,
    pub candidates: CandidateMode,
    /// Upper-bound values behind the initial entries, when `init = upper_bound`.
    pub prior: Option<Vec<f64>>,
    pub steps: u64,
    pub episodes: usize,
}

impl QTable {
    pub fn new(params: RewardParams, candidates: CandidateMode) -> QTable {
        QTable {
            entries: FxHashMap::default(),
            params,
            candidates,
            prior: None,
            steps: 0,
            episodes: 0,
        }
    }

    /// Fresh entry for `s`: candidate actions with their initial values.
    pub fn initial_entry(&self, s: &TrackState, kernel: &TransitionKernel) -> Result<QEntry> {
        let pred = predicted_distribution(s, kernel)?;
        let actions = candidate_sets(&pred, kernel.cells(), self.candidates)?;
        let m = actions.len();
        let q = match &self.prior {
            None => vec![0.0; m],
            Some(v) => {
                let child_forced = s.n().is_some_and(|n| n == self.params.t_max);
                actions
                    .iter()
                    .map(|a| prior_q(&pred, *a, child_forced, v, kernel, &self.params))
                    .collect::<Result<_>>()?
            }
        };
        Ok(QEntry {
            actions,
            q,
            visits: vec![0; m],
        })
    }

    pub fn max_q(&self, s: &TrackState) -> f64 {
        self.entries.get(s).map_or(0.0, QEntry::max)
    }

    /// Estimated value of entering `s`.
    fn next_value(&self, s: &TrackState, kernel: &TransitionKernel) -> Result<f64> {
        match s {
            TrackState::Terminal => Ok(0.0),
            _ if s.is_forced(&self.params) => {
                let p = &self.params;
                let pred = predicted_distribution(s, kernel)?;
                let mut v = -p.d;
                for (x, q) in pred.cells.iter().enumerate() {
                    if *q > 0.0 {
                        v += q * (p.r + p.gamma * self.max_q(&TrackState::initial(CellId(x as u16))));
                    }
                }
                Ok(v)
            }
            _ => Ok(self.max_q(s)),
        }
    }

    /// Greedy action at a visited state.
    pub fn greedy_action(&self, s: &TrackState) -> Option<SensingAction> {
        self.entries
            .get(s)
            .map(|e| SensingAction::new(e.actions[e.greedy()]))
    }
}

fn relaxed_value(pred: &Prediction, forced: bool, v: &[f64], p: &RewardParams) -> f64 {
    let mut t = if forced { -p.d } else { 0.0 };
    for (y, q) in pred.cells.iter().enumerate() {
        if *q > 0.0 {
            t += if forced {
                q * (p.r + p.gamma * v[y])
            } else {
                (q * p.r - p.c).max(0.0) + p.gamma * q * v[y]
            };
        }
    }
    t
}

fn prior_q(
    pred: &Prediction,
    a: CellSet,
    child_forced: bool,
    v: &[f64],
    kernel: &TransitionKernel,
    p: &RewardParams,
) -> Result<f64> {
    let mut q = -p.c * a.len() as f64;
    for x in a.iter() {
        q += pred.cells[x.index()] * (p.r + p.gamma * v[x.index()]);
    }
    let miss = pred.miss_mass(a);
    if miss > 0.0 {
        let child = pred.after_miss(kernel, a)?;
        q += p.gamma * miss * relaxed_value(&child, child_forced, v, p);
    }
    Ok(q)
}

/// Trains a Q-table; deterministic given `seed`.
pub fn q_learning(
    kernel: &TransitionKernel,
    p: &RewardParams,
    schedule: &Schedule,
    seed: u64,
) -> Result<QTable> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = QTable::new(*p, schedule.candidates);
    if schedule.init == QInit::UpperBound {
        table.prior = Some(qmdp_upper_bound(kernel, p)?.v_star);
    }
    let nc = kernel.cells();
    let safe = SensingAction::safe(kernel.grid());
    let budget = schedule.max_steps.unwrap_or(u64::MAX);
    let mut targets: Vec<f64> = Vec::new();
    'episodes: for episode in 0..schedule.episodes {
        if table.steps >= budget {
            break;
        }
        let eps = schedule.epsilon(episode);
        let x0 = CellId(rng.random_range(0..nc) as u16);
        let mut x = TargetState::Cell(x0);
        let mut s = TrackState::initial(x0);
        table.episodes += 1;
        for _ in 0..schedule.step_cap {
            if s.is_forced(p) {
                let x_next = kernel.sample_next(x, &mut rng);
                let out = step(&s, &safe, x_next, p)?;
                table.steps += 1;
                x = x_next;
                s = out.next_state;
            } else {
                if !table.entries.contains_key(&s) {
                    let e = table.initial_entry(&s, kernel)?;
                    table.entries.insert(s.clone(), e);
                }
                let entry = &table.entries[&s];
                let m = entry.actions.len();
                let k = if rng.random::<f64>() < eps {
                    rng.random_range(0..m)
                } else {
                    entry.greedy()
                };
                let actions = entry.actions.clone();
                let x_next = kernel.sample_next(x, &mut rng);
                let chosen = step(&s, &SensingAction::new(actions[k]), x_next, p)?;
                targets.clear();
                if schedule.counterfactual {
                    for a in &actions {
                        let out = step(&s, &SensingAction::new(*a), x_next, p)?;
                        targets.push(out.reward + p.gamma * table.next_value(&out.next_state, kernel)?);
                    }
                } else {
                    targets.push(
                        chosen.reward + p.gamma * table.next_value(&chosen.next_state, kernel)?,
                    );
                }
                let entry = table.entries.get_mut(&s).expect("inserted above");
                let updated = if schedule.counterfactual { 0..m } else { k..k + 1 };
                for (t, j) in targets.iter().zip(updated) {
                    let alpha = schedule.alpha(entry.visits[j]);
                    entry.q[j] += alpha * (t - entry.q[j]);
                    entry.visits[j] = entry.visits[j].saturating_add(1);
                }
                table.steps += 1;
                x = x_next;
                s = chosen.next_state;
            }
            if s.is_terminal() {
                break;
            }
            if table.steps >= budget {
                break 'episodes;
            }
        }
    }
    Ok(table)
}

/// Greedy policy of a Q-table. Unvisited states act on the initial entry when the table
/// has a prior and otherwise fall back to the cells whose predicted probability exceeds
/// `c/r`.
#[derive(Debug)]
pub struct GreedyQPolicy<'a> {
    pub table: &'a QTable,
    pub kernel: &'a TransitionKernel,
    fallbacks: AtomicU64,
}

impl<'a> GreedyQPolicy<'a> {
    pub fn new(table: &'a QTable, kernel: &'a TransitionKernel) -> Self {
        GreedyQPolicy {
            table,
            kernel,
            fallbacks: AtomicU64::new(0),
        }
    }

    pub fn action(&self, s: &TrackState) -> Result<SensingAction> {
        if s.is_forced(&self.table.params) {
            return Ok(SensingAction::safe(self.kernel.grid()));
        }
        if let Some(a) = self.table.greedy_action(s) {
            return Ok(a);
        }
        self.fallbacks.fetch_add(1, Ordering::Relaxed);
        if self.table.prior.is_some() {
            let e = self.table.initial_entry(s, self.kernel)?;
            return Ok(SensingAction::new(e.actions[e.greedy()]));
        }
        let pred = predicted_distribution(s, self.kernel)?;
        Ok(SensingAction::new(pred.above(self.table.params.threshold())))
    }

    /// Number of lookups that hit an unvisited state.
    pub fn fallbacks(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }
}

//! Exact optimal policies for enumerable Track-MDPs.
//!
//! Every trajectory returns to a root `(b^j, 0, ∅)` on detection, so under a fixed
//! policy each state value is affine in the root values `V0`. Policy evaluation
//! propagates these affine forms backward through the miss layers and solves the
//! `N² × N²` root system directly; policy improvement is a greedy backup. Forced
//! states (`n = t_max + 1`) are not stored: their value
//! `Σ_x P̄(x)(r + γ V0_x) − D` is linear in the posterior of their parent.

use nalgebra::{DMatrix, DVector};
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::grid::{CellId, CellSet, RewardParams, SensingAction};
use crate::kernel::TransitionKernel;
use crate::solvers::candidates::{candidate_sets, CandidateMode};
use crate::track::{predicted_distribution, Prediction, TrackState};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_BUDGET: usize = 10_000_000;
/// Stored candidate actions summed over states. A pair holds about 32 bytes and can
/// add a child state of a few hundred more; the default stays near 1.5 GB.
pub const DEFAULT_ACTION_BUDGET: usize = 5_000_000;

/// Relative tolerance under which two action values count as tied.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactOptions {
    pub tol: f64,
    pub budget: usize,
    pub action_budget: usize,
    pub mode: CandidateMode,
    pub max_policy_iters: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        ExactOptions {
            tol: DEFAULT_TOL,
            budget: DEFAULT_BUDGET,
            action_budget: DEFAULT_ACTION_BUDGET,
            mode: CandidateMode::Exact,
            max_policy_iters: 500,
        }
    }
}

/// How the miss branch of an action outside the solved policy is valued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Continuation {
    /// As if the target were found where it actually is: `Σ_{x∉a} P̄(x) V0_x`.
    Localized,
    /// The true value of the child state, by recursive Bellman backup.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Child {
    NoMiss,
    State(u32),
    Forced,
}

#[derive(Debug, Clone)]
struct Node {
    support: Vec<(u16, f64)>,
    cands: Vec<CellSet>,
    miss: Vec<f64>,
    child: Vec<Child>,
}

/// Optimal values and actions for every reachable decision state.
#[derive(Debug, Clone)]
pub struct ValueTable {
    kernel: TransitionKernel,
    params: RewardParams,
    mode: CandidateMode,
    states: Vec<TrackState>,
    index: FxHashMap<TrackState, u32>,
    nodes: Vec<Node>,
    values: Vec<f64>,
    choice: Vec<u32>,
    root_values: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn build(
    kernel: &TransitionKernel,
    p: &RewardParams,
    opts: &ExactOptions,
) -> Result<(Vec<TrackState>, FxHashMap<TrackState, u32>, Vec<Node>)> {
    let nc = kernel.cells();
    let mut states: Vec<TrackState> = Vec::new();
    let mut index: FxHashMap<TrackState, u32> = FxHashMap::default();
    let mut nodes: Vec<Node> = Vec::new();
    for j in 0..nc {
        let s = TrackState::initial(CellId(j as u16));
        index.insert(s.clone(), j as u32);
        states.push(s);
    }
    let mut pairs = 0usize;
    let mut i = 0;
    while i < states.len() {
        // recomputed here rather than stored for every queued state
        let s = states[i].clone();
        let pred = predicted_distribution(&s, kernel)?;
        let n = s.n().expect("only active states are queued");
        let support = pred.support();
        let cands = candidate_sets(&pred, nc, opts.mode)?;
        pairs += cands.len();
        if pairs > opts.action_budget {
            return Err(Error::ActionBudgetExceeded {
                budget: opts.action_budget,
            });
        }
        let mut miss = Vec::with_capacity(cands.len());
        let mut child = Vec::with_capacity(cands.len());
        for a in &cands {
            if support.difference(*a).is_empty() {
                miss.push(0.0);
                child.push(Child::NoMiss);
                continue;
            }
            miss.push(pred.miss_mass(*a));
            if n == p.t_max {
                child.push(Child::Forced);
                continue;
            }
            let c = s.after_miss(*a)?;
            let id = match index.get(&c) {
                Some(&id) => id,
                None => {
                    if states.len() >= opts.budget {
                        return Err(Error::BudgetExceeded {
                            budget: opts.budget,
                        });
                    }
                    let id = states.len() as u32;
                    index.insert(c.clone(), id);
                    states.push(c);
                    id
                }
            };
            child.push(Child::State(id));
        }
        nodes.push(Node {
            support: support
                .iter()
                .map(|c| (c.0, pred.cells[c.index()]))
                .collect(),
            cands,
            miss,
            child,
        });
        i += 1;
    }
    Ok((states, index, nodes))
}

/// `w_i = Σ_x P_ix (r + γ V0_x) − D`: value of sensing safely with the target at `i`
/// one step earlier.
fn forced_weights(kernel: &TransitionKernel, p: &RewardParams, v0: &[f64]) -> Vec<f64> {
    let nc = kernel.cells();
    (0..nc)
        .map(|i| {
            let mut acc = 0.0;
            for &(x, q) in kernel.sparse_row(i) {
                if (x as usize) < nc {
                    acc += q * (p.r + p.gamma * v0[x as usize]);
                }
            }
            acc - p.d
        })
        .collect()
}

fn q_values(node: &Node, p: &RewardParams, v0: &[f64], w: &[f64], values: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let forced_total: f64 = node
        .support
        .iter()
        .map(|&(c, q)| q * w[c as usize])
        .sum();
    for (k, a) in node.cands.iter().enumerate() {
        let mut hit = 0.0;
        let mut forced_in = 0.0;
        for &(c, q) in &node.support {
            if a.contains(CellId(c)) {
                hit += q * (p.r + p.gamma * v0[c as usize]);
                forced_in += q * w[c as usize];
            }
        }
        let cont = match node.child[k] {
            Child::NoMiss => 0.0,
            Child::State(j) => p.gamma * node.miss[k] * values[j as usize],
            Child::Forced => p.gamma * (forced_total - forced_in),
        };
        out.push(hit - p.c * a.len() as f64 + cont);
    }
}

/// Index of the first action (canonical order) whose value ties the maximum.
fn argmax_canonical(q: &[f64]) -> (usize, f64) {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOL * max.abs().max(1.0);
    let k = q.iter().position(|v| *v >= max - tol).expect("non-empty candidates");
    (k, max)
}

impl ValueTable {
    fn evaluate(&mut self) -> Result<()> {
        let nc = self.kernel.cells();
        let p = self.params;
        let width = nc + 1;
        let mut forms = vec![0.0; self.nodes.len() * width];
        // forced continuation per cell: (constant, coefficients over V0)
        let forced_const: Vec<f64> = (0..nc)
            .map(|i| {
                let mass: f64 = self
                    .kernel
                    .sparse_row(i)
                    .iter()
                    .filter(|(x, _)| (*x as usize) < nc)
                    .map(|(_, q)| q)
                    .sum();
                p.r * mass - p.d
            })
            .collect();
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            let k = self.choice[i] as usize;
            let a = node.cands[k];
            let (head, tail) = forms.split_at_mut((i + 1) * width);
            let f = &mut head[i * width..];
            f[nc] -= p.c * a.len() as f64;
            for &(c, q) in &node.support {
                if a.contains(CellId(c)) {
                    f[nc] += q * p.r;
                    f[c as usize] += p.gamma * q;
                }
            }
            match node.child[k] {
                Child::NoMiss => {}
                Child::State(j) => {
                    let off = (j as usize - i - 1) * width;
                    let g = &tail[off..off + width];
                    let m = p.gamma * node.miss[k];
                    for (x, y) in f.iter_mut().zip(g) {
                        *x += m * y;
                    }
                }
                Child::Forced => {
                    for &(c, q) in &node.support {
                        if a.contains(CellId(c)) {
                            continue;
                        }
                        let m = p.gamma * q;
                        f[nc] += m * forced_const[c as usize];
                        for &(x, px) in self.kernel.sparse_row(c as usize) {
                            if (x as usize) < nc {
                                f[x as usize] += m * p.gamma * px;
                            }
                        }
                    }
                }
            }
        }
        let mut m = DMatrix::<f64>::identity(nc, nc);
        let mut rhs = DVector::<f64>::zeros(nc);
        for j in 0..nc {
            let f = &forms[j * width..(j + 1) * width];
            rhs[j] = f[nc];
            for x in 0..nc {
                m[(j, x)] -= f[x];
            }
        }
        let v0 = m.lu().solve(&rhs).ok_or_else(|| {
            Error::NonContracting("root system of the policy is singular".into())
        })?;
        if v0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonContracting("non-finite root values".into()));
        }
        self.root_values = v0.iter().copied().collect();
        for i in 0..self.nodes.len() {
            let f = &forms[i * width..(i + 1) * width];
            let mut v = f[nc];
            for x in 0..nc {
                v += f[x] * self.root_values[x];
            }
            self.values[i] = v;
        }
        Ok(())
    }

    /// Greedy backup against the current values; returns the new choices and the
    /// Bellman residual of the current values.
    fn improve(&self) -> (Vec<u32>, f64) {
        let w = forced_weights(&self.kernel, &self.params, &self.root_values);
        let mut q = Vec::new();
        let mut choice = Vec::with_capacity(self.nodes.len());
        let mut residual: f64 = 0.0;
        for (i, node) in self.nodes.iter().enumerate() {
            q_values(node, &self.params, &self.root_values, &w, &self.values, &mut q);
            let (k, max) = argmax_canonical(&q);
            residual = residual.max((max - self.values[i]).abs());
            choice.push(k as u32);
        }
        (choice, residual)
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    pub fn params(&self) -> &RewardParams {
        &self.params
    }

    pub fn mode(&self) -> CandidateMode {
        self.mode
    }

    /// Reachable decision states (`n ≤ t_max`), roots first.
    pub fn states(&self) -> &[TrackState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `V*((b^j, 0, ∅))` per cell.
    pub fn root_values(&self) -> &[f64] {
        &self.root_values
    }

    /// Mean root value over uniformly drawn starts.
    pub fn average_root_value(&self) -> f64 {
        self.root_values.iter().sum::<f64>() / self.root_values.len() as f64
    }

    /// Stored value of a decision state.
    pub fn get(&self, s: &TrackState) -> Option<f64> {
        self.index.get(s).map(|&i| self.values[i as usize])
    }

    /// Optimal action; the safe action for forced states.
    pub fn action(&self, s: &TrackState) -> Option<SensingAction> {
        if s.is_forced(&self.params) {
            return Some(SensingAction::safe(self.kernel.grid()));
        }
        self.index.get(s).map(|&i| {
            let node = &self.nodes[i as usize];
            SensingAction::new(node.cands[self.choice[i as usize] as usize])
        })
    }

    /// Candidate cell sets explored at a stored state.
    pub fn candidates(&self, s: &TrackState) -> Option<&[CellSet]> {
        self.index.get(s).map(|&i| self.nodes[i as usize].cands.as_slice())
    }

    /// `V*(s)` for any active state consistent with the kernel: stored, forced, or by
    /// recursive backup over the candidate sets.
    pub fn state_value(&self, s: &TrackState) -> Result<f64> {
        if s.is_terminal() {
            return Ok(0.0);
        }
        if let Some(v) = self.get(s) {
            return Ok(v);
        }
        let pred = predicted_distribution(s, &self.kernel)?;
        if s.is_forced(&self.params) {
            return Ok(self.q_from_prediction(s, &pred, &SensingAction::safe(self.kernel.grid()), Continuation::Exact)?);
        }
        let mut best = f64::NEG_INFINITY;
        for a in candidate_sets(&pred, self.kernel.cells(), self.mode)? {
            let q = self.q_from_prediction(s, &pred, &SensingAction::new(a), Continuation::Exact)?;
            best = best.max(q);
        }
        Ok(best)
    }

    /// One-step backup `Q(s, a)` from the solved values, for any admissible action.
    pub fn q_value(&self, s: &TrackState, a: &SensingAction, cont: Continuation) -> Result<f64> {
        let pred = predicted_distribution(s, &self.kernel)?;
        self.q_from_prediction(s, &pred, a, cont)
    }

    fn q_from_prediction(
        &self,
        s: &TrackState,
        pred: &Prediction,
        a: &SensingAction,
        cont: Continuation,
    ) -> Result<f64> {
        let p = &self.params;
        if s.is_forced(p) && !a.safe {
            return Err(Error::InvalidState(
                "only the safe action is admissible after t_max + 1 misses".into(),
            ));
        }
        let v0 = &self.root_values;
        let mut hit = 0.0;
        let mut miss = 0.0;
        let mut localized = 0.0;
        for (i, &q) in pred.cells.iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            if a.safe || a.contains(CellId(i as u16)) {
                hit += q * (p.r + p.gamma * v0[i]);
            } else {
                miss += q;
                localized += q * v0[i];
            }
        }
        let mut value = hit - p.action_cost(a);
        if miss > 0.0 {
            value += p.gamma
                * match cont {
                    Continuation::Localized => localized,
                    Continuation::Exact => miss * self.state_value(&s.after_miss(a.cells)?)?,
                };
        }
        Ok(value)
    }
}

/// Solves the Track-MDP exactly over the reachable decision states.
pub fn exact_value_iteration(
    kernel: &TransitionKernel,
    p: &RewardParams,
    opts: &ExactOptions,
) -> Result<ValueTable> {
    p.validate()?;
    if p.gamma >= 1.0 {
        kernel.check_exits()?;
    }
    let (states, index, nodes) = build(kernel, p, opts)?;
    let n = states.len();
    let mut table = ValueTable {
        kernel: kernel.clone(),
        params: *p,
        mode: opts.mode,
        states,
        index,
        nodes,
        values: vec![0.0; n],
        choice: vec![0; n],
        root_values: vec![0.0; kernel.cells()],
        residual: f64::INFINITY,
        iterations: 0,
    };
    // start from the greedy policy against zero values
    let (choice, _) = table.improve();
    table.choice = choice;
    loop {
        table.evaluate()?;
        table.iterations += 1;
        let (choice, residual) = table.improve();
        table.residual = residual;
        if choice == table.choice {
            break;
        }
        table.choice = choice;
        if table.iterations >= opts.max_policy_iters {
            break;
        }
    }
    if !(table.residual <= opts.tol) {
        return Err(Error::NoConvergence {
            residual: table.residual,
            iterations: table.iterations,
        });
    }
    Ok(table)
}

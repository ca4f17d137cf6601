//! Belief filtering over grid cells, beliefs reconstructed from Track-MDP states,
//! the Q_MDP threshold policy and its full-observability upper bound.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellId, CellSet, Observation, RewardParams, SensingAction};
use crate::kernel::TransitionKernel;
use crate::track::TrackState;

/// Probability vector over cells together with the miss counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub probs: Vec<f64>,
    pub n: usize,
}

impl Belief {
    pub fn point(cells: usize, c: CellId) -> Belief {
        let mut probs = vec![0.0; cells];
        probs[c.index()] = 1.0;
        Belief { probs, n: 0 }
    }

    pub fn mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Cell part of `βP`.
    pub fn predicted(&self, kernel: &TransitionKernel) -> Vec<f64> {
        kernel.propagate(&self.probs).0
    }
}

/// Zeroes the cells of `a` and rescales the rest by their total mass.
pub(crate) fn exclude_and_normalize(alpha: &[f64], a: CellSet) -> Result<Vec<f64>> {
    let mut out = alpha.to_vec();
    for c in a.iter() {
        if c.index() < out.len() {
            out[c.index()] = 0.0;
        }
    }
    let rest: f64 = out.iter().sum();
    if rest <= 0.0 {
        return Err(Error::ImpossibleMiss {
            mass: alpha.iter().sum(),
        });
    }
    for v in &mut out {
        *v /= rest;
    }
    Ok(out)
}

/// `[α]_ā`: the distribution conditioned on the target not being in `a`.
pub fn renormalize_excluding(alpha: &[f64], a: &SensingAction) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Ok(alpha.to_vec());
    }
    exclude_and_normalize(alpha, a.cells)
}

/// Belief recursion. Returns `None` when the exit signal ends the episode.
pub fn belief_update(
    v: &Belief,
    a: &SensingAction,
    obs: Observation,
    kernel: &TransitionKernel,
) -> Result<Option<Belief>> {
    match obs {
        Observation::Exited => Ok(None),
        Observation::Seen(c) => Ok(Some(Belief::point(kernel.cells(), c))),
        Observation::Uninformative => {
            let (cells, _) = kernel.propagate(&v.probs);
            Ok(Some(Belief {
                probs: exclude_and_normalize(&cells, a.cells)?,
                n: v.n + 1,
            }))
        }
    }
}

/// Replays a Track-MDP state's history as a sequence of misses.
pub fn belief_from_track_state(s: &TrackState, kernel: &TransitionKernel) -> Result<Belief> {
    let (last, history) = match s {
        TrackState::Active { last_seen, history } => (*last_seen, history),
        TrackState::Terminal => return Err(Error::TerminalState),
    };
    let mut v = Belief::point(kernel.cells(), last);
    for a in history {
        v = belief_update(&v, &SensingAction::new(*a), Observation::Uninformative, kernel)?
            .expect("a miss keeps the episode alive");
    }
    Ok(v)
}

/// Cells whose predicted probability reaches the threshold `c/r`.
pub fn threshold_set(predicted: &[f64], p: &RewardParams) -> CellSet {
    let t = p.threshold();
    CellSet::from_cells(
        predicted
            .iter()
            .enumerate()
            .filter(|(_, q)| **q >= t)
            .map(|(i, _)| CellId(i as u16)),
    )
}

/// Q_MDP action: the safe action once forced, otherwise every cell with
/// `[βP]_j ≥ c/r`.
pub fn qmdp_action(v: &Belief, kernel: &TransitionKernel, p: &RewardParams) -> SensingAction {
    if v.n == p.t_max + 1 {
        return SensingAction::safe(kernel.grid());
    }
    SensingAction::new(threshold_set(&v.predicted(kernel), p))
}

pub const UPPER_BOUND_VERSION: u32 = 1;

/// Values of the fully observed relaxation, one per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBoundTable {
    pub version: u32,
    pub n: usize,
    pub v_star: Vec<f64>,
    /// `‖V − g − γP̃V‖∞` of the fixed-point solution.
    #[serde(skip)]
    pub residual: f64,
    /// Largest gap between the fixed-point solution and a dense LU solve.
    #[serde(skip)]
    pub dense_gap: f64,
    #[serde(skip)]
    pub iterations: usize,
}

impl UpperBoundTable {
    pub fn evaluate(&self, v: &Belief, kernel: &TransitionKernel, p: &RewardParams) -> f64 {
        let pred = v.predicted(kernel);
        let t = p.threshold();
        let mut now = 0.0;
        let mut later = 0.0;
        for (i, q) in pred.iter().enumerate() {
            if *q >= t {
                now += q * p.r - p.c;
            }
            later += q * self.v_star[i];
        }
        now + p.gamma * later
    }

    /// Average over uniformly drawn start cells.
    pub fn mean(&self) -> f64 {
        self.v_star.iter().sum::<f64>() / self.v_star.len() as f64
    }
}

pub const UPPER_BOUND_MAX_ITERS: usize = 10_000_000;

/// Solves `V = g + γP̃V` with `g_j = Σ_i max(P_ji·r − c, 0)` by fixed-point iteration
/// and cross-checks against a dense solve.
pub fn qmdp_upper_bound(kernel: &TransitionKernel, p: &RewardParams) -> Result<UpperBoundTable> {
    if p.gamma >= 1.0 {
        kernel.check_exits()?;
    }
    let nc = kernel.cells();
    let g: Vec<f64> = (0..nc)
        .map(|j| {
            (0..nc)
                .map(|i| (kernel.prob(j, i) * p.r - p.c).max(0.0))
                .sum()
        })
        .collect();
    let apply = |v: &[f64]| -> Vec<f64> {
        (0..nc)
            .map(|j| {
                let mut acc = 0.0;
                for &(i, q) in kernel.sparse_row(j) {
                    if (i as usize) < nc {
                        acc += q * v[i as usize];
                    }
                }
                g[j] + p.gamma * acc
            })
            .collect()
    };
    let mut v = g.clone();
    let mut iterations = 0;
    loop {
        let next = apply(&v);
        iterations += 1;
        let diff = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = next.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        v = next;
        if diff <= 1e-15 * scale {
            break;
        }
        if iterations >= UPPER_BOUND_MAX_ITERS || !diff.is_finite() {
            return Err(Error::NoConvergence {
                residual: diff,
                iterations,
            });
        }
    }
    let residual = apply(&v)
        .iter()
        .zip(&v)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut m = DMatrix::<f64>::identity(nc, nc);
    for j in 0..nc {
        for i in 0..nc {
            m[(j, i)] -= p.gamma * kernel.prob(j, i);
        }
    }
    let dense = m
        .lu()
        .solve(&DVector::from_vec(g.clone()))
        .ok_or_else(|| Error::NonContracting("I − γP̃ is singular".into()))?;
    let dense_gap = v
        .iter()
        .zip(dense.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    Ok(UpperBoundTable {
        version: UPPER_BOUND_VERSION,
        n: kernel.grid().n,
        v_star: v,
        residual,
        dense_gap,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn uniform_2x2() -> TransitionKernel {
        let g = Grid::new(2).unwrap();
        TransitionKernel::from_cell_rows(g, vec![vec![0.25, 0.25, 0.25, 0.25, 0.0]; 4]).unwrap()
    }

    fn b(l: usize) -> CellId {
        CellId::from_label(l).unwrap()
    }

    fn act(labels: &[usize]) -> SensingAction {
        SensingAction::new(CellSet::from_cells(labels.iter().map(|&l| b(l))))
    }

    #[test]
    fn renormalize_worked_example() {
        let out = renormalize_excluding(&[0.2, 0.3, 0.4, 0.1], &act(&[1])).unwrap();
        let want = [0.0, 0.375, 0.5, 0.125];
        for (o, w) in out.iter().zip(want) {
            assert!((o - w).abs() < 1e-15);
        }
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let same = renormalize_excluding(&[0.2, 0.3, 0.4, 0.1], &SensingAction::empty()).unwrap();
        assert_eq!(same, vec![0.2, 0.3, 0.4, 0.1]);
        assert!(renormalize_excluding(&[1.0, 0.0], &act(&[1])).is_err());
    }

    #[test]
    fn static_target_gains_counter_only() {
        let g = Grid::new(2).unwrap();
        let mut rows = vec![vec![0.0; 5]; 4];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = 1.0;
        }
        let k = TransitionKernel::from_cell_rows(g, rows).unwrap();
        let v = Belief::point(4, b(1));
        let next = belief_update(&v, &SensingAction::empty(), Observation::Uninformative, &k)
            .unwrap()
            .unwrap();
        assert_eq!(next.probs, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(next.n, 1);
    }

    #[test]
    fn miss_on_uniform_kernel() {
        let k = uniform_2x2();
        let v = Belief::point(4, b(1));
        let next = belief_update(&v, &act(&[2]), Observation::Uninformative, &k)
            .unwrap()
            .unwrap();
        let third = 1.0 / 3.0;
        for (o, w) in next.probs.iter().zip([third, 0.0, third, third]) {
            assert!((o - w).abs() < 1e-15);
        }
        assert_eq!(next.n, 1);
        let s = TrackState::Active {
            last_seen: b(1),
            history: vec![act(&[2]).cells],
        };
        assert_eq!(belief_from_track_state(&s, &k).unwrap(), next);
    }

    #[test]
    fn detection_resets() {
        let k = uniform_2x2();
        let v = Belief {
            probs: vec![0.1, 0.2, 0.3, 0.4],
            n: 2,
        };
        let next = belief_update(&v, &act(&[3]), Observation::Seen(b(3)), &k)
            .unwrap()
            .unwrap();
        assert_eq!(next, Belief::point(4, b(3)));
        assert!(belief_update(&v, &act(&[3]), Observation::Exited, &k)
            .unwrap()
            .is_none());
    }

    #[test]
    fn root_state_maps_to_point_mass() {
        let k = uniform_2x2();
        for j in 1..=4 {
            let v = belief_from_track_state(&TrackState::initial(b(j)), &k).unwrap();
            assert_eq!(v, Belief::point(4, b(j)));
        }
    }

    #[test]
    fn qmdp_threshold() {
        let g = Grid::new(2).unwrap();
        let mut rows = vec![vec![0.25, 0.25, 0.25, 0.25, 0.0]; 4];
        rows[0] = vec![0.5, 0.3, 0.1, 0.1, 0.0];
        let k = TransitionKernel::from_cell_rows(g, rows).unwrap();
        let p = RewardParams::new(1.0, 0.2, 0.8, 1, 1.0).unwrap();
        let v = Belief::point(4, b(1));
        assert_eq!(qmdp_action(&v, &k, &p), act(&[1, 2]));
        let forced = Belief { n: 2, ..v.clone() };
        assert!(qmdp_action(&forced, &k, &p).safe);
        let high = RewardParams::new(1.0, 0.6, 2.4, 1, 1.0).unwrap();
        assert!(qmdp_action(&v, &k, &high).is_empty());
    }

    #[test]
    fn single_cell_bound() {
        let g = Grid::new(1).unwrap();
        let k = TransitionKernel::from_cell_rows(g, vec![vec![0.9, 0.1]]).unwrap();
        let p = RewardParams::new(1.0, 0.2, 0.2, 3, 1.0).unwrap();
        let ub = qmdp_upper_bound(&k, &p).unwrap();
        assert!((ub.v_star[0] - 7.0).abs() <= 1e-10);
        assert!(ub.residual <= 1e-10);
        assert!(ub.dense_gap <= 1e-10);
        let v = Belief::point(1, CellId(0));
        assert!((ub.evaluate(&v, &k, &p) - ub.v_star[0]).abs() < 1e-12);
    }

    #[test]
    fn dormant_bound_is_zero() {
        let g = Grid::new(2).unwrap();
        let k = TransitionKernel::from_cell_rows(g, vec![vec![0.2; 5]; 4]).unwrap();
        let p = RewardParams::new(1.0, 0.3, 1.2, 1, 1.0).unwrap();
        let ub = qmdp_upper_bound(&k, &p).unwrap();
        assert!(ub.v_star.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bound_requires_exit_when_undiscounted() {
        let k = uniform_2x2();
        let p = RewardParams::new(1.0, 0.2, 0.8, 1, 1.0).unwrap();
        assert!(matches!(
            qmdp_upper_bound(&k, &p),
            Err(Error::NonContracting(_))
        ));
        let disc = RewardParams::new(1.0, 0.2, 0.8, 1, 0.9).unwrap();
        let ub = qmdp_upper_bound(&k, &disc).unwrap();
        // every row is uniform: g = 4·0.05, V = g/(1 − 0.9)
        for v in &ub.v_star {
            assert!((v - 2.0).abs() < 1e-10);
        }
    }
}

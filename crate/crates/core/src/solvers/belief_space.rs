//! Value iteration directly over the finite set of reachable beliefs.
//!
//! Beliefs are generated with the belief recursion under every subset of the
//! predicted support and deduplicated by value, so distinct action histories that
//! induce the same belief share one entry. Layers are swept from the last miss layer
//! back to the roots (Gauss-Seidel). In the last layer the next action is followed by
//! the safe action on a miss, which makes the best action separable per cell.

use rustc_hash::FxHashMap;

use crate::belief::{belief_update, Belief};
use crate::error::{Error, Result};
use crate::grid::{CellId, CellSet, Observation, RewardParams, SensingAction};
use crate::kernel::TransitionKernel;
use crate::solvers::candidates::powerset;

const KEY_SCALE: f64 = 1e12;

#[derive(Debug, Clone)]
struct BeliefNode {
    n: usize,
    // cell part of βP, nonzero entries
    pred: Vec<(usize, f64)>,
    // for layers below t_max: (action, miss mass, child)
    actions: Vec<(CellSet, f64, Option<usize>)>,
}

#[derive(Debug, Clone)]
pub struct BeliefSolution {
    pub root_values: Vec<f64>,
    pub beliefs: usize,
    pub sweeps: usize,
    pub last_change: f64,
}

fn key(b: &Belief) -> (usize, Vec<i64>) {
    (
        b.n,
        b.probs.iter().map(|p| (p * KEY_SCALE).round() as i64).collect(),
    )
}

/// Optimal values at the point-mass beliefs `(e_j, 0)`.
pub fn belief_value_iteration(
    kernel: &TransitionKernel,
    p: &RewardParams,
    tol: f64,
    max_sweeps: usize,
) -> Result<BeliefSolution> {
    let nc = kernel.cells();
    let mut nodes: Vec<BeliefNode> = Vec::new();
    let mut beliefs: Vec<Belief> = Vec::new();
    let mut index: FxHashMap<(usize, Vec<i64>), usize> = FxHashMap::default();
    for j in 0..nc {
        let b = Belief::point(nc, CellId(j as u16));
        index.insert(key(&b), j);
        beliefs.push(b);
    }
    let mut i = 0;
    while i < beliefs.len() {
        let b = beliefs[i].clone();
        let pred_full = b.predicted(kernel);
        let pred: Vec<(usize, f64)> = pred_full
            .iter()
            .enumerate()
            .filter(|(_, q)| **q > 0.0)
            .map(|(j, q)| (j, *q))
            .collect();
        let support = CellSet::from_cells(pred.iter().map(|(j, _)| CellId(*j as u16)));
        let mut actions = Vec::new();
        if b.n < p.t_max {
            for a in powerset(support)? {
                let miss: f64 = pred
                    .iter()
                    .filter(|(j, _)| !a.contains(CellId(*j as u16)))
                    .map(|(_, q)| q)
                    .sum();
                if support.difference(a).is_empty() {
                    actions.push((a, 0.0, None));
                    continue;
                }
                let child = belief_update(&b, &SensingAction::new(a), Observation::Uninformative, kernel)?
                    .expect("a miss keeps the episode alive");
                let k = key(&child);
                let id = match index.get(&k) {
                    Some(&id) => id,
                    None => {
                        let id = beliefs.len();
                        index.insert(k, id);
                        beliefs.push(child);
                        id
                    }
                };
                actions.push((a, miss, Some(id)));
            }
        }
        nodes.push(BeliefNode {
            n: b.n,
            pred,
            actions,
        });
        i += 1;
    }

    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(nodes[i].n));

    let mut values = vec![0.0; nodes.len()];
    let mut v0 = vec![0.0; nc];
    let mut sweeps = 0;
    let mut last_change;
    let mut w = vec![0.0; nc];
    loop {
        for (x, wx) in w.iter_mut().enumerate() {
            *wx = kernel
                .sparse_row(x)
                .iter()
                .filter(|(y, _)| (*y as usize) < nc)
                .map(|&(y, q)| q * (p.r + p.gamma * v0[y as usize]))
                .sum::<f64>()
                - p.d;
        }
        for &i in &order {
            let node = &nodes[i];
            let v = if node.n == p.t_max {
                // safe action follows any miss: each cell is sensed iff that beats
                // leaving it to the safe action
                let mut base = 0.0;
                let mut gain = 0.0;
                for &(j, q) in &node.pred {
                    let sensed = q * (p.r + p.gamma * v0[j]) - p.c;
                    let skipped = p.gamma * q * w[j];
                    base += skipped;
                    gain += (sensed - skipped).max(0.0);
                }
                base + gain
            } else {
                let mut best = f64::NEG_INFINITY;
                for &(a, miss, child) in &node.actions {
                    let mut q = -p.c * a.len() as f64;
                    for &(j, pj) in &node.pred {
                        if a.contains(CellId(j as u16)) {
                            q += pj * (p.r + p.gamma * v0[j]);
                        }
                    }
                    if let Some(c) = child {
                        q += p.gamma * miss * values[c];
                    }
                    best = best.max(q);
                }
                best
            };
            values[i] = v;
        }
        last_change = (0..nc)
            .map(|j| (values[j] - v0[j]).abs())
            .fold(0.0, f64::max);
        v0.copy_from_slice(&values[..nc]);
        sweeps += 1;
        if last_change <= tol {
            break;
        }
        if sweeps >= max_sweeps || !last_change.is_finite() {
            return Err(Error::NoConvergence {
                residual: last_change,
                iterations: sweeps,
            });
        }
    }
    Ok(BeliefSolution {
        root_values: v0,
        beliefs: nodes.len(),
        sweeps,
        last_change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn single_cell() {
        let g = Grid::new(1).unwrap();
        let k = TransitionKernel::from_cell_rows(g, vec![vec![0.9, 0.1]]).unwrap();
        let p = RewardParams::new(1.0, 0.2, 0.2, 2, 1.0).unwrap();
        let s = belief_value_iteration(&k, &p, 1e-13, 100_000).unwrap();
        assert!((s.root_values[0] - 7.0).abs() < 1e-10);
    }
}

//! Position estimates after an uninformative observation.
//!
//! The Q-difference estimator scores each unsensed cell `x` by
//! `(Q(s, ã) − Q(s, ã_x) + c) / r`, where `ã` senses every cell and `ã_x` every cell
//! but `x`. The posterior estimator takes the argmax of the predicted distribution.

use crate::error::{Error, Result};
use crate::grid::{CellId, SensingAction};
use crate::kernel::TransitionKernel;
use crate::solvers::exact::{Continuation, ValueTable};
use crate::track::{predicted_distribution, TrackState};

/// Posterior probabilities closer than this count as tied.
pub const POSTERIOR_TIE_TOL: f64 = 1e-12;
/// Q-difference scores closer than this count as tied; they carry the rounding of two
/// value backups.
pub const RATIO_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub cell: CellId,
    pub posterior_mass: f64,
}

/// First cell (smallest index) whose score is within `tol` of the best.
fn argmax_smallest(scores: &[(CellId, f64)], tol: f64) -> Option<(CellId, f64)> {
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    scores.iter().copied().find(|(_, v)| *v >= best - tol)
}

fn check_active(s: &TrackState, a_star: &SensingAction, table_forced: bool) -> Result<()> {
    if s.is_terminal() {
        return Err(Error::TerminalState);
    }
    if a_star.safe || table_forced {
        return Err(Error::EstimateNotNeeded);
    }
    Ok(())
}

/// Argmax of the predicted distribution over the cells outside `a_star`.
pub fn map_from_posterior(
    s: &TrackState,
    a_star: &SensingAction,
    kernel: &TransitionKernel,
) -> Result<Estimate> {
    check_active(s, a_star, false)?;
    let pred = predicted_distribution(s, kernel)?;
    let scores: Vec<(CellId, f64)> = (0..kernel.cells())
        .map(|i| CellId(i as u16))
        .filter(|c| !a_star.contains(*c))
        .map(|c| (c, pred.cells[c.index()]))
        .collect();
    let (cell, posterior_mass) = argmax_smallest(&scores, POSTERIOR_TIE_TOL)
        .ok_or_else(|| Error::InvalidState("the action senses every cell".into()))?;
    Ok(Estimate {
        cell,
        posterior_mass,
    })
}

/// `(Q(s, ã) − Q(s, ã_x) + c) / r` from the solved table.
pub fn q_ratio(table: &ValueTable, s: &TrackState, x: CellId, cont: Continuation) -> Result<f64> {
    let grid = table.kernel().grid();
    let all = SensingAction::new(grid.all());
    let mut but_x = all;
    but_x.cells.remove(x);
    let p = table.params();
    let q_all = table.q_value(s, &all, cont)?;
    let q_x = table.q_value(s, &but_x, cont)?;
    Ok((q_all - q_x + p.c) / p.r)
}

/// Q-difference MAP estimate over the cells outside `a_star`.
pub fn map_from_q(
    table: &ValueTable,
    s: &TrackState,
    a_star: &SensingAction,
    cont: Continuation,
) -> Result<Estimate> {
    check_active(s, a_star, s.is_forced(table.params()))?;
    let kernel = table.kernel();
    let mut scores = Vec::new();
    for i in 0..kernel.cells() {
        let c = CellId(i as u16);
        if !a_star.contains(c) {
            scores.push((c, q_ratio(table, s, c, cont)?));
        }
    }
    let (cell, _) = argmax_smallest(&scores, RATIO_TIE_TOL)
        .ok_or_else(|| Error::InvalidState("the action senses every cell".into()))?;
    let pred = predicted_distribution(s, kernel)?;
    Ok(Estimate {
        cell,
        posterior_mass: pred.cells[cell.index()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellSet, Grid, RewardParams};
    use crate::solvers::exact::{exact_value_iteration, ExactOptions};

    fn b(l: usize) -> CellId {
        CellId::from_label(l).unwrap()
    }

    fn act(labels: &[usize]) -> SensingAction {
        SensingAction::new(CellSet::from_cells(labels.iter().map(|&l| b(l))))
    }

    #[test]
    fn uniform_posterior_tie_breaks_to_smallest() {
        let g = Grid::new(2).unwrap();
        let k = TransitionKernel::from_cell_rows(g, vec![vec![0.25, 0.25, 0.25, 0.25, 0.0]; 4]).unwrap();
        let s = TrackState::initial(b(1));
        let e = map_from_posterior(&s, &act(&[1, 2]), &k).unwrap();
        assert_eq!(e.cell, b(3));
        assert_eq!(e.posterior_mass, 0.25);
    }

    #[test]
    fn unique_support() {
        let g = Grid::new(2).unwrap();
        let rows = vec![
            vec![0.0, 0.9, 0.0, 0.0, 0.1],
            vec![0.0, 0.0, 0.9, 0.0, 0.1],
            vec![0.0, 0.0, 0.0, 0.9, 0.1],
            vec![0.9, 0.0, 0.0, 0.0, 0.1],
        ];
        let k = TransitionKernel::from_cell_rows(g, rows).unwrap();
        let p = RewardParams::new(1.0, 0.2, 0.8, 1, 1.0).unwrap();
        let t = exact_value_iteration(&k, &p, &ExactOptions::default()).unwrap();
        let s = TrackState::initial(b(1));
        let a = SensingAction::empty();
        assert_eq!(map_from_posterior(&s, &a, &k).unwrap().cell, b(2));
        let e = map_from_q(&t, &s, &a, Continuation::Localized).unwrap();
        assert_eq!(e.cell, b(2));
        assert!((e.posterior_mass - 0.9).abs() < 1e-15);
    }

    #[test]
    fn localized_ratio_is_the_posterior() {
        let g = Grid::new(2).unwrap();
        let rows = vec![
            vec![0.1, 0.5, 0.2, 0.1, 0.1],
            vec![0.3, 0.1, 0.1, 0.4, 0.1],
            vec![0.2, 0.2, 0.2, 0.3, 0.1],
            vec![0.1, 0.1, 0.6, 0.1, 0.1],
        ];
        let k = TransitionKernel::from_cell_rows(g, rows).unwrap();
        let p = RewardParams::new(1.0, 0.25, 1.0, 1, 1.0).unwrap();
        let t = exact_value_iteration(&k, &p, &ExactOptions::default()).unwrap();
        for s in t.states() {
            let pred = predicted_distribution(s, &k).unwrap();
            for i in 0..4 {
                let x = CellId(i);
                let r = q_ratio(&t, s, x, Continuation::Localized).unwrap();
                assert!((r - pred.cells[i as usize]).abs() < 1e-12);
                // the true continuation shifts the score by γ·P̄(x)·(V0_x − V(child))/r
                let exact = q_ratio(&t, s, x, Continuation::Exact).unwrap();
                let mut but_x = SensingAction::new(g.all());
                but_x.cells.remove(x);
                let child = s.after_miss(but_x.cells).unwrap();
                let shift = if pred.cells[i as usize] > 0.0 {
                    pred.cells[i as usize] * (t.root_values()[i as usize] - t.state_value(&child).unwrap())
                } else {
                    0.0
                };
                assert!((exact - (pred.cells[i as usize] + shift)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn scaling_rewards_keeps_the_estimate() {
        let g = Grid::new(2).unwrap();
        let rows = vec![
            vec![0.1, 0.3, 0.3, 0.2, 0.1],
            vec![0.3, 0.1, 0.1, 0.4, 0.1],
            vec![0.2, 0.2, 0.2, 0.3, 0.1],
            vec![0.1, 0.1, 0.6, 0.1, 0.1],
        ];
        let k = TransitionKernel::from_cell_rows(g, rows).unwrap();
        let p = RewardParams::new(1.0, 0.25, 1.0, 1, 1.0).unwrap();
        let scaled = RewardParams::new(3.0, 0.75, 3.0, 1, 1.0).unwrap();
        let t = exact_value_iteration(&k, &p, &ExactOptions::default()).unwrap();
        let ts = exact_value_iteration(&k, &scaled, &ExactOptions::default()).unwrap();
        for s in t.states() {
            let a = t.action(s).unwrap();
            if a.len() == 4 {
                continue;
            }
            assert_eq!(
                map_from_q(&t, s, &a, Continuation::Localized).unwrap().cell,
                map_from_q(&ts, s, &a, Continuation::Localized).unwrap().cell
            );
        }
    }

    #[test]
    fn forced_state_needs_no_estimate() {
        let g = Grid::new(1).unwrap();
        let k = TransitionKernel::from_cell_rows(g, vec![vec![0.9, 0.1]]).unwrap();
        let p = RewardParams::new(1.0, 0.2, 0.2, 0, 1.0).unwrap();
        let t = exact_value_iteration(&k, &p, &ExactOptions::default()).unwrap();
        let s = TrackState::initial(CellId(0)).after_miss(CellSet::EMPTY).unwrap();
        assert!(matches!(
            map_from_q(&t, &s, &SensingAction::empty(), Continuation::Localized),
            Err(Error::EstimateNotNeeded)
        ));
    }
}

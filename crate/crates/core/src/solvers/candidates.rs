//! Candidate action sets per Track-MDP state.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellId, CellSet, RewardParams, SensingAction};
use crate::kernel::TransitionKernel;
use crate::track::{Prediction, TrackState};

/// Largest support enumerated exhaustively.
pub const EXACT_SUPPORT_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    /// Every subset of the posterior support.
    Exact,
    /// Subsets of the `K` most likely cells, each with and without the rest of the
    /// support as one block.
    TopK(usize),
    /// Every subset of the whole grid, support or not.
    Full,
    /// Level sets `{x : P̄(x) ≥ θ}` of the posterior, from empty to the whole support.
    Nested,
}

/// Submask orders for `k` positions: by popcount, then lexicographic on the sorted
/// position lists. Mapping positions to increasing cell indices preserves the order.
fn canonical_submasks(k: usize) -> &'static [u32] {
    static CACHE: [OnceLock<Vec<u32>>; EXACT_SUPPORT_LIMIT + 1] =
        [const { OnceLock::new() }; EXACT_SUPPORT_LIMIT + 1];
    CACHE[k].get_or_init(|| {
        let mut masks: Vec<u32> = (0..1u32 << k).collect();
        masks.sort_by(|a, b| {
            a.count_ones()
                .cmp(&b.count_ones())
                .then_with(|| BitIter(*a).cmp(BitIter(*b)))
        });
        masks
    })
}

struct BitIter(u32);

impl Iterator for BitIter {
    type Item = u32;
    fn next(&mut self) -> Option<u32> {
        if self.0 == 0 {
            return None;
        }
        let i = self.0.trailing_zeros();
        self.0 &= self.0 - 1;
        Some(i)
    }
}

/// All subsets of `cells`, in canonical order.
pub fn powerset(cells: CellSet) -> Result<Vec<CellSet>> {
    let list: Vec<CellId> = cells.iter().collect();
    if list.len() > EXACT_SUPPORT_LIMIT {
        return Err(Error::SupportTooLarge {
            size: list.len(),
            limit: EXACT_SUPPORT_LIMIT,
        });
    }
    Ok(canonical_submasks(list.len())
        .iter()
        .map(|&m| CellSet::from_cells(BitIter(m).map(|b| list[b as usize])))
        .collect())
}

/// Candidate cell sets for a non-forced state with posterior `pred`.
pub fn candidate_sets(pred: &Prediction, n_cells: usize, mode: CandidateMode) -> Result<Vec<CellSet>> {
    let support = pred.support();
    match mode {
        CandidateMode::Exact => powerset(support),
        CandidateMode::Full => powerset(CellSet::full(n_cells)),
        CandidateMode::Nested => {
            let mut ranked: Vec<CellId> = support.iter().collect();
            ranked.sort_by(|a, b| {
                pred.cells[b.index()]
                    .total_cmp(&pred.cells[a.index()])
                    .then(a.cmp(b))
            });
            let mut out = vec![CellSet::EMPTY];
            let mut acc = CellSet::EMPTY;
            for (i, c) in ranked.iter().enumerate() {
                acc.insert(*c);
                // cells of equal probability enter together
                let last_of_level = ranked
                    .get(i + 1)
                    .is_none_or(|d| pred.cells[d.index()] != pred.cells[c.index()]);
                if last_of_level {
                    out.push(acc);
                }
            }
            Ok(out)
        }
        CandidateMode::TopK(k) => {
            let mut ranked: Vec<CellId> = support.iter().collect();
            ranked.sort_by(|a, b| {
                pred.cells[b.index()]
                    .total_cmp(&pred.cells[a.index()])
                    .then(a.cmp(b))
            });
            let k = k.min(ranked.len()).min(EXACT_SUPPORT_LIMIT);
            let top = CellSet::from_cells(ranked[..k].iter().copied());
            let rest = support.difference(top);
            let mut out = Vec::new();
            for s in powerset(top)? {
                out.push(s);
                if !rest.is_empty() {
                    out.push(s.union(rest));
                }
            }
            out.sort_by(|a, b| a.canonical_cmp(b));
            out.dedup();
            Ok(out)
        }
    }
}

/// Candidate actions: the safe action alone for forced states, otherwise the
/// candidate cell sets of `mode`.
pub fn candidate_actions(
    s: &TrackState,
    pred: &Prediction,
    kernel: &TransitionKernel,
    p: &RewardParams,
    mode: CandidateMode,
) -> Result<Vec<SensingAction>> {
    if s.is_terminal() {
        return Err(Error::TerminalState);
    }
    if s.is_forced(p) {
        return Ok(vec![SensingAction::safe(kernel.grid())]);
    }
    Ok(candidate_sets(pred, kernel.cells(), mode)?
        .into_iter()
        .map(SensingAction::new)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::track::predicted_distribution;

    fn set(labels: &[usize]) -> CellSet {
        CellSet::from_cells(labels.iter().map(|&l| CellId::from_label(l).unwrap()))
    }

    fn pred(cells: Vec<f64>) -> Prediction {
        let exit = 1.0 - cells.iter().sum::<f64>();
        Prediction { cells, exit }
    }

    #[test]
    fn powerset_of_two_cell_support() {
        let p = pred(vec![0.6, 0.3, 0.0, 0.0]);
        let c = candidate_sets(&p, 4, CandidateMode::Exact).unwrap();
        assert_eq!(c, vec![set(&[]), set(&[1]), set(&[2]), set(&[1, 2])]);
    }

    #[test]
    fn canonical_order_holds() {
        let c = powerset(set(&[2, 5, 7, 9])).unwrap();
        assert_eq!(c.len(), 16);
        for w in c.windows(2) {
            assert_eq!(w[0].canonical_cmp(&w[1]), std::cmp::Ordering::Less);
        }
    }

    #[test]
    fn experiment_kernel_root_has_sixteen() {
        use rand::SeedableRng;
        let spec = crate::kernel::GeneratorSpec {
            n: 6,
            z: 4,
            p_exit: 0.01,
            p_hot: 0.15,
        };
        let k = crate::kernel::make_experiment_kernel(
            &spec,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let p = RewardParams::experiment(k.grid(), 0.2, 2).unwrap();
        let s = TrackState::initial(k.grid().cell(2, 2));
        let pr = predicted_distribution(&s, &k).unwrap();
        let c = candidate_actions(&s, &pr, &k, &p, CandidateMode::Exact).unwrap();
        assert_eq!(c.len(), 16);
    }

    #[test]
    fn topk_of_full_support_is_exact() {
        let p = pred(vec![0.1, 0.3, 0.2, 0.15, 0.0, 0.05]);
        let exact = candidate_sets(&p, 6, CandidateMode::Exact).unwrap();
        assert_eq!(candidate_sets(&p, 6, CandidateMode::TopK(5)).unwrap(), exact);
        assert_eq!(candidate_sets(&p, 6, CandidateMode::TopK(9)).unwrap(), exact);
    }

    #[test]
    fn topk_blocks_the_rest() {
        let p = pred(vec![0.1, 0.3, 0.2, 0.15, 0.0, 0.05]);
        let c = candidate_sets(&p, 6, CandidateMode::TopK(1)).unwrap();
        assert_eq!(
            c,
            vec![set(&[]), set(&[2]), set(&[1, 3, 4, 6]), set(&[1, 2, 3, 4, 6])]
        );
    }

    #[test]
    fn nested_level_sets() {
        let p = pred(vec![0.1, 0.3, 0.1, 0.15, 0.0, 0.3]);
        let c = candidate_sets(&p, 6, CandidateMode::Nested).unwrap();
        assert_eq!(
            c,
            vec![set(&[]), set(&[2, 6]), set(&[2, 4, 6]), set(&[1, 2, 3, 4, 6])]
        );
        let t = 0.15;
        assert!(c.contains(&p.above(t - 1e-9)));
    }

    #[test]
    fn forced_state_gets_safe_action() {
        let g = Grid::new(2).unwrap();
        let k = TransitionKernel::from_cell_rows(g, vec![vec![0.2; 5]; 4]).unwrap();
        let p = RewardParams::new(1.0, 0.2, 0.8, 0, 1.0).unwrap();
        let s = TrackState::initial(CellId(0)).after_miss(CellSet::EMPTY).unwrap();
        let pr = predicted_distribution(&s, &k).unwrap();
        let c = candidate_actions(&s, &pr, &k, &p, CandidateMode::Exact).unwrap();
        assert_eq!(c, vec![SensingAction::safe(g)]);
    }

    #[test]
    fn support_guard() {
        let p = pred(vec![1.0 / 21.0; 21]);
        assert!(matches!(
            candidate_sets(&p, 21, CandidateMode::Exact),
            Err(Error::SupportTooLarge { size: 21, .. })
        ));
    }
}

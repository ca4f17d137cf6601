//! Sensing grid, target states, sensing actions, observations and the per-step reward.
//!
//! Cells are stored 0-based (`CellId(0)` is the top-left cell) and labelled 1-based
//! (`b^1 .. b^{N²}`, row-major) whenever they cross a serialization boundary.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported number of cells (the bitset width).
pub const MAX_CELLS: usize = 128;

/// A grid cell, 0-based row-major index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId(pub u16);

impl CellId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// 1-based label, `b^label`.
    pub fn label(self) -> usize {
        self.0 as usize + 1
    }

    pub fn from_label(label: usize) -> Option<CellId> {
        if label == 0 || label > MAX_CELLS {
            None
        } else {
            Some(CellId((label - 1) as u16))
        }
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.label())
    }
}

/// Side length and cell count of an N×N grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Grid> {
        if n == 0 || n * n > MAX_CELLS {
            return Err(Error::InvalidParams(format!(
                "grid side {n} unsupported (need 1 <= N and N² <= {MAX_CELLS})"
            )));
        }
        Ok(Grid { n })
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    pub fn cell(&self, row: usize, col: usize) -> CellId {
        CellId((row * self.n + col) as u16)
    }

    pub fn row_col(&self, c: CellId) -> (usize, usize) {
        (c.index() / self.n, c.index() % self.n)
    }

    /// In-grid cells of the 3×3 block centred on `c`, including `c`, in index order.
    pub fn neighborhood(&self, c: CellId) -> Vec<CellId> {
        let (r, col) = self.row_col(c);
        let mut out = Vec::with_capacity(9);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let rr = r as i64 + dr;
                let cc = col as i64 + dc;
                if rr >= 0 && cc >= 0 && (rr as usize) < self.n && (cc as usize) < self.n {
                    out.push(self.cell(rr as usize, cc as usize));
                }
            }
        }
        out
    }

    pub fn all(&self) -> CellSet {
        CellSet::full(self.cells())
    }
}

/// Set of cells as a bitset over at most [`MAX_CELLS`] positions.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct CellSet(pub u128);

impl CellSet {
    pub const EMPTY: CellSet = CellSet(0);

    pub fn full(cells: usize) -> CellSet {
        if cells >= 128 {
            CellSet(u128::MAX)
        } else {
            CellSet((1u128 << cells) - 1)
        }
    }

    pub fn from_cells<I: IntoIterator<Item = CellId>>(cells: I) -> CellSet {
        let mut s = CellSet::EMPTY;
        for c in cells {
            s.insert(c);
        }
        s
    }

    pub fn contains(self, c: CellId) -> bool {
        self.0 >> c.0 & 1 == 1
    }

    pub fn insert(&mut self, c: CellId) {
        self.0 |= 1u128 << c.0;
    }

    pub fn remove(&mut self, c: CellId) {
        self.0 &= !(1u128 << c.0);
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, o: CellSet) -> CellSet {
        CellSet(self.0 | o.0)
    }

    pub fn intersection(self, o: CellSet) -> CellSet {
        CellSet(self.0 & o.0)
    }

    pub fn difference(self, o: CellSet) -> CellSet {
        CellSet(self.0 & !o.0)
    }

    pub fn is_subset(self, o: CellSet) -> bool {
        self.0 & !o.0 == 0
    }

    /// Cells in increasing index order.
    pub fn iter(self) -> CellIter {
        CellIter(self.0)
    }

    pub fn labels(self) -> Vec<usize> {
        self.iter().map(CellId::label).collect()
    }

    /// Canonical order used for argmax tie-breaking: smaller sets first, then
    /// lexicographic comparison of the sorted cell lists.
    pub fn canonical_cmp(&self, other: &CellSet) -> std::cmp::Ordering {
        self.len()
            .cmp(&other.len())
            .then_with(|| self.iter().cmp(other.iter()))
    }
}

impl fmt::Debug for CellSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(|c| c.label())).finish()
    }
}

pub struct CellIter(u128);

impl Iterator for CellIter {
    type Item = CellId;

    fn next(&mut self) -> Option<CellId> {
        if self.0 == 0 {
            return None;
        }
        let i = self.0.trailing_zeros();
        self.0 &= self.0 - 1;
        Some(CellId(i as u16))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.0.count_ones() as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for CellIter {}

/// Hidden target state: a grid cell or the absorbing terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetState {
    Cell(CellId),
    Terminal,
}

/// Subset of cells to switch on. The safe action senses every cell and pays `D`
/// instead of the per-sensor cost.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SensingAction {
    pub cells: CellSet,
    pub safe: bool,
}

impl SensingAction {
    pub fn new(cells: CellSet) -> SensingAction {
        SensingAction { cells, safe: false }
    }

    pub fn empty() -> SensingAction {
        SensingAction::new(CellSet::EMPTY)
    }

    pub fn safe(grid: Grid) -> SensingAction {
        SensingAction {
            cells: grid.all(),
            safe: true,
        }
    }

    pub fn contains(&self, c: CellId) -> bool {
        self.cells.contains(c)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

impl fmt::Debug for SensingAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.safe {
            write!(f, "safe")
        } else {
            write!(f, "{:?}", self.cells)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Observation {
    Seen(CellId),
    Uninformative,
    Exited,
}

pub fn observe(x: TargetState, a: &SensingAction) -> Observation {
    match x {
        TargetState::Terminal => Observation::Exited,
        TargetState::Cell(c) if a.contains(c) => Observation::Seen(c),
        TargetState::Cell(_) => Observation::Uninformative,
    }
}

/// Reward constants and the safe-sensing horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub r: f64,
    pub c: f64,
    pub d: f64,
    pub t_max: usize,
    pub gamma: f64,
}

impl RewardParams {
    pub fn new(r: f64, c: f64, d: f64, t_max: usize, gamma: f64) -> Result<RewardParams> {
        let p = RewardParams {
            r,
            c,
            d,
            t_max,
            gamma,
        };
        p.validate()?;
        Ok(p)
    }

    /// `r = 1`, `D = N²c`, `γ = 1`.
    pub fn experiment(grid: Grid, c: f64, t_max: usize) -> Result<RewardParams> {
        RewardParams::new(1.0, c, grid.cells() as f64 * c, t_max, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.r.is_finite() && self.r > 0.0) {
            return bad(format!("r must be positive, got {}", self.r));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return bad(format!("c must be positive, got {}", self.c));
        }
        if !(self.d.is_finite() && self.d > 0.0) {
            return bad(format!("D must be positive, got {}", self.d));
        }
        if self.c / self.r >= 1.0 {
            return bad(format!("c/r must be below 1, got {}", self.c / self.r));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.t_max > 64 {
            return bad(format!("t_max {} is unreasonably large", self.t_max));
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        self.c / self.r
    }

    /// Cost of executing `a`: `D` for the safe action, `c·|a|` otherwise.
    pub fn action_cost(&self, a: &SensingAction) -> f64 {
        if a.safe {
            self.d
        } else {
            self.c * a.len() as f64
        }
    }
}

/// Reward for the step that moved the target to `x` while `a` was active.
///
/// The sensing cost is paid for every executed action, also on the step where the
/// target leaves the grid; only the detection reward needs the target in the grid.
pub fn reward(x: TargetState, a: &SensingAction, p: &RewardParams) -> f64 {
    let hit = match x {
        TargetState::Cell(c) if a.contains(c) => p.r,
        _ => 0.0,
    };
    hit - p.action_cost(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(labels: &[usize]) -> SensingAction {
        SensingAction::new(CellSet::from_cells(
            labels.iter().map(|&l| CellId::from_label(l).unwrap()),
        ))
    }

    fn cell(label: usize) -> TargetState {
        TargetState::Cell(CellId::from_label(label).unwrap())
    }

    #[test]
    fn observe_hit_and_miss() {
        let b13 = CellId::from_label(13).unwrap();
        assert_eq!(observe(cell(13), &set(&[13, 5, 4])), Observation::Seen(b13));
        assert_eq!(observe(cell(13), &set(&[5, 4])), Observation::Uninformative);
        assert_eq!(
            observe(TargetState::Terminal, &SensingAction::empty()),
            Observation::Exited
        );
    }

    #[test]
    fn reward_cases() {
        let p = RewardParams::new(1.0, 0.2, 5.0, 2, 1.0).unwrap();
        assert!((reward(cell(5), &set(&[5, 6, 7]), &p) - 0.4).abs() < 1e-15);
        let safe = SensingAction::safe(Grid::new(2).unwrap());
        assert_eq!(reward(cell(2), &safe, &p), 1.0 - 5.0);
        // cost still charged on the exit step
        assert!((reward(TargetState::Terminal, &set(&[1, 2]), &p) + 0.4).abs() < 1e-15);
        assert_eq!(reward(TargetState::Terminal, &SensingAction::empty(), &p), 0.0);
    }

    #[test]
    fn params_validation() {
        assert!(RewardParams::new(1.0, 1.0, 1.0, 1, 1.0).is_err());
        assert!(RewardParams::new(1.0, 0.2, 0.0, 1, 1.0).is_err());
        assert!(RewardParams::new(1.0, 0.2, 1.0, 1, 0.0).is_err());
        assert!(RewardParams::new(1.0, 0.2, 1.0, 1, 0.9).is_ok());
    }

    #[test]
    fn neighborhood_clips_at_border() {
        let g = Grid::new(3).unwrap();
        assert_eq!(g.neighborhood(CellId(0)).len(), 4);
        assert_eq!(g.neighborhood(CellId(1)).len(), 6);
        assert_eq!(g.neighborhood(CellId(4)).len(), 9);
    }

    #[test]
    fn canonical_order() {
        let a = set(&[1, 3]).cells;
        let b = set(&[2]).cells;
        let c = set(&[1, 2]).cells;
        assert_eq!(a.canonical_cmp(&b), std::cmp::Ordering::Greater);
        assert_eq!(c.canonical_cmp(&a), std::cmp::Ordering::Less);
    }

    #[test]
    fn labels_are_one_based() {
        assert_eq!(CellId(0).label(), 1);
        assert_eq!(CellId::from_label(1), Some(CellId(0)));
        assert_eq!(CellId::from_label(0), None);
        assert_eq!(set(&[4, 2]).cells.labels(), vec![2, 4]);
    }
}

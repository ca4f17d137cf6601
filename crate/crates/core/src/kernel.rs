//! Row-stochastic target motion kernel over the N² cells plus the absorbing terminal.
//!
//! Row and column `N²` is the terminal. Rows are validated at construction and never
//! renormalized: a row that misses 1 by more than [`ROW_SUM_TOL`] is an error.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{CellId, Grid, TargetState};

pub const ROW_SUM_TOL: f64 = 1e-12;
pub const KERNEL_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TransitionKernel {
    grid: Grid,
    dense: Vec<Vec<f64>>,
    // nonzero entries per row, column index N² = terminal
    sparse: Vec<Vec<(u16, f64)>>,
}

impl TransitionKernel {
    /// Builds a kernel from `N²+1` dense rows (terminal last).
    pub fn from_rows(grid: Grid, rows: Vec<Vec<f64>>) -> Result<TransitionKernel> {
        let m = grid.cells() + 1;
        if rows.len() != m {
            return Err(Error::InvalidKernel(format!(
                "expected {m} rows, got {}",
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidKernel(format!(
                    "row {i} has {} entries, expected {m}",
                    row.len()
                )));
            }
            if let Some((j, v)) = row
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite() || **v < 0.0)
            {
                return Err(Error::InvalidKernel(format!(
                    "entry ({i}, {j}) = {v} is not a probability"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidKernel(format!(
                    "row {i} sums to {sum:.17}, off by {:.3e}",
                    sum - 1.0
                )));
            }
        }
        let term = &rows[m - 1];
        if term[m - 1] != 1.0 {
            return Err(Error::InvalidKernel(
                "terminal row must be the terminal unit vector".into(),
            ));
        }
        let sparse = rows
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, v)| **v > 0.0)
                    .map(|(j, v)| (j as u16, *v))
                    .collect()
            })
            .collect();
        Ok(TransitionKernel {
            grid,
            dense: rows,
            sparse,
        })
    }

    /// Builds a kernel from `N²` cell rows; the terminal row is appended.
    pub fn from_cell_rows(grid: Grid, mut rows: Vec<Vec<f64>>) -> Result<TransitionKernel> {
        let m = grid.cells() + 1;
        let mut term = vec![0.0; m];
        term[m - 1] = 1.0;
        rows.push(term);
        TransitionKernel::from_rows(grid, rows)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    pub fn terminal_index(&self) -> usize {
        self.grid.cells()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.dense[from][to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.dense[from]
    }

    /// Nonzero entries of a row as `(column, probability)`.
    pub fn sparse_row(&self, from: usize) -> &[(u16, f64)] {
        &self.sparse[from]
    }

    pub fn exit_prob(&self, from: CellId) -> f64 {
        self.dense[from.index()][self.terminal_index()]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.dense
    }

    /// `βP` for a distribution over cells: returns the cell part and the exit mass.
    pub fn propagate(&self, beta: &[f64]) -> (Vec<f64>, f64) {
        let nc = self.cells();
        let mut out = vec![0.0; nc];
        let mut exit = 0.0;
        for (i, &b) in beta.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            for &(j, p) in &self.sparse[i] {
                let j = j as usize;
                if j == nc {
                    exit += b * p;
                } else {
                    out[j] += b * p;
                }
            }
        }
        (out, exit)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, x: TargetState, rng: &mut R) -> TargetState {
        let i = match x {
            TargetState::Terminal => return TargetState::Terminal,
            TargetState::Cell(c) => c.index(),
        };
        let row = &self.sparse[i];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = row[row.len() - 1].0;
        for &(j, p) in row {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        if pick as usize == self.terminal_index() {
            TargetState::Terminal
        } else {
            TargetState::Cell(CellId(pick))
        }
    }

    /// Cells from which the terminal is unreachable; empty when every trajectory exits
    /// with probability one.
    pub fn non_exiting_cells(&self) -> Vec<CellId> {
        let nc = self.cells();
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); nc + 1];
        for i in 0..nc {
            for &(j, _) in &self.sparse[i] {
                reverse[j as usize].push(i);
            }
        }
        let mut seen = vec![false; nc + 1];
        seen[nc] = true;
        let mut queue = VecDeque::from([nc]);
        while let Some(j) = queue.pop_front() {
            for &i in &reverse[j] {
                if !seen[i] {
                    seen[i] = true;
                    queue.push_back(i);
                }
            }
        }
        (0..nc)
            .filter(|&i| !seen[i])
            .map(|i| CellId(i as u16))
            .collect()
    }

    /// Undiscounted problems need every trajectory to exit eventually.
    pub fn check_exits(&self) -> Result<()> {
        let stuck = self.non_exiting_cells();
        if stuck.is_empty() {
            Ok(())
        } else {
            Err(Error::NonContracting(format!(
                "terminal unreachable from {} cell(s), first {}",
                stuck.len(),
                stuck[0]
            )))
        }
    }

    /// Number of nonzero entries (terminal included) for each cell row.
    pub fn support_sizes(&self) -> Vec<usize> {
        (0..self.cells()).map(|i| self.sparse[i].len()).collect()
    }

    /// JSON with every real written to 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        write!(s, "{{\"version\":{KERNEL_VERSION},\"n\":{},\"rows\":[", self.grid.n).unwrap();
        for (i, row) in self.dense.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str("\n[");
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{v:.16e}").unwrap();
            }
            s.push(']');
        }
        s.push_str("\n]}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<TransitionKernel> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct KernelFile {
            version: u32,
            n: usize,
            rows: Vec<Vec<f64>>,
        }
        let f: KernelFile = serde_json::from_str(text)?;
        if f.version != KERNEL_VERSION {
            return Err(Error::InvalidKernel(format!(
                "unsupported kernel version {}",
                f.version
            )));
        }
        TransitionKernel::from_rows(Grid::new(f.n)?, f.rows)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Settings of the randomized neighborhood kernel generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub n: usize,
    pub z: usize,
    pub p_exit: f64,
    pub p_hot: f64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGenerator(m));
        if !(1..=9).contains(&self.z) {
            return bad(format!("z must lie in [1, 9], got {}", self.z));
        }
        if !(0.0..=1.0).contains(&self.p_exit) {
            return bad(format!("p_exit must lie in [0, 1], got {}", self.p_exit));
        }
        if !(self.p_hot >= 0.0 && self.p_hot.is_finite()) {
            return bad(format!("p_hot must be non-negative, got {}", self.p_hot));
        }
        if self.p_hot + self.p_exit >= 1.0 {
            return bad(format!(
                "p_hot + p_exit must be below 1, got {}",
                self.p_hot + self.p_exit
            ));
        }
        Ok(())
    }
}

/// Random neighborhood kernel: each cell moves to `z` distinct cells of its 3×3 block,
/// one of them (chosen uniformly) with `p_hot`, the rest sharing
/// `(1 − p_hot − p_exit)/(z − 1)`, and exits with `p_exit`.
///
/// Off-grid neighbors are dropped before sampling. When fewer than `z` in-grid cells
/// remain, all of them are used at the same per-destination probabilities and the
/// missing share goes to the terminal (the target leaves over the border).
pub fn make_experiment_kernel<R: Rng + ?Sized>(
    spec: &GeneratorSpec,
    rng: &mut R,
) -> Result<TransitionKernel> {
    spec.validate()?;
    let grid = Grid::new(spec.n)?;
    let nc = grid.cells();
    let mut rows = Vec::with_capacity(nc);
    for i in 0..nc {
        let mut row = vec![0.0; nc + 1];
        let hood = grid.neighborhood(CellId(i as u16));
        if spec.z == 1 {
            let d = hood[rng.random_range(0..hood.len())];
            row[d.index()] = 1.0 - spec.p_exit;
            row[nc] = spec.p_exit;
        } else {
            let k = spec.z.min(hood.len());
            let dests: Vec<CellId> = sample(rng, hood.len(), k)
                .into_iter()
                .map(|j| hood[j])
                .collect();
            let hot = rng.random_range(0..k);
            let share = (1.0 - spec.p_hot - spec.p_exit) / (spec.z - 1) as f64;
            let missing = spec.z - k;
            let mut exit = spec.p_exit;
            for (j, d) in dests.iter().enumerate() {
                row[d.index()] = if j == hot { spec.p_hot } else { share };
            }
            // a short neighborhood loses its missing shares over the border
            if missing > 0 {
                exit += missing as f64 * share;
            }
            row[nc] = exit;
        }
        rows.push(row);
    }
    TransitionKernel::from_cell_rows(grid, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_by_two_half() -> TransitionKernel {
        let g = Grid::new(2).unwrap();
        let rows = vec![
            vec![0.0, 0.5, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 1.0],
        ];
        TransitionKernel::from_cell_rows(g, rows).unwrap()
    }

    #[test]
    fn terminal_absorbs() {
        let k = two_by_two_half();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(
                k.sample_next(TargetState::Terminal, &mut rng),
                TargetState::Terminal
            );
        }
    }

    #[test]
    fn deterministic_row() {
        let k = two_by_two_half();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b2 = TargetState::Cell(CellId(1));
        for _ in 0..100 {
            assert_eq!(
                k.sample_next(b2, &mut rng),
                TargetState::Cell(CellId(3))
            );
        }
    }

    #[test]
    fn empirical_frequencies() {
        let k = two_by_two_half();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 5];
        let draws = 100_000;
        for _ in 0..draws {
            match k.sample_next(TargetState::Cell(CellId(0)), &mut rng) {
                TargetState::Cell(c) => counts[c.index()] += 1,
                TargetState::Terminal => counts[4] += 1,
            }
        }
        assert_eq!(counts[0] + counts[3] + counts[4], 0);
        for c in [1, 2] {
            let f = counts[c] as f64 / draws as f64;
            assert!((f - 0.5).abs() < 0.01, "frequency {f}");
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let k = two_by_two_half();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = TargetState::Cell(CellId(0));
            let mut out = Vec::new();
            for _ in 0..50 {
                x = k.sample_next(x, &mut rng);
                out.push(x);
                if x == TargetState::Terminal {
                    x = TargetState::Cell(CellId(0));
                }
            }
            out
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn rejects_bad_rows() {
        let g = Grid::new(2).unwrap();
        let mut rows = vec![vec![0.25, 0.25, 0.25, 0.25, 0.0]; 4];
        rows[2][0] = 0.24;
        assert!(matches!(
            TransitionKernel::from_cell_rows(g, rows),
            Err(Error::InvalidKernel(_))
        ));
        let rows = vec![vec![0.5, 0.5, 0.5, -0.5, 0.0]; 4];
        assert!(TransitionKernel::from_cell_rows(g, rows).is_err());
        let mut rows = vec![vec![0.25, 0.25, 0.25, 0.25, 0.0]; 5];
        rows[4] = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        assert!(TransitionKernel::from_rows(g, rows).is_err());
    }

    #[test]
    fn interior_row_of_ten_by_ten() {
        let spec = GeneratorSpec {
            n: 10,
            z: 4,
            p_exit: 0.005,
            p_hot: 0.15,
        };
        let k = make_experiment_kernel(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let g = k.grid();
        for r in 1..9 {
            for c in 1..9 {
                let i = g.cell(r, c).index();
                let row = k.sparse_row(i);
                assert_eq!(row.len(), 5);
                let mut cells: Vec<f64> = row
                    .iter()
                    .filter(|(j, _)| (*j as usize) < 100)
                    .map(|(_, p)| *p)
                    .collect();
                cells.sort_by(f64::total_cmp);
                assert_eq!(cells[0], 0.15);
                for p in &cells[1..] {
                    assert!((p - 0.845 / 3.0).abs() < 1e-15);
                }
                assert_eq!(k.prob(i, 100), 0.005);
            }
        }
    }

    #[test]
    fn degenerate_and_rejected_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = GeneratorSpec {
            n: 3,
            z: 1,
            p_exit: 0.1,
            p_hot: 0.15,
        };
        let k = make_experiment_kernel(&one, &mut rng).unwrap();
        for i in 0..9 {
            let row = k.sparse_row(i);
            assert_eq!(row.len(), 2);
            assert_eq!(row[0].1, 0.9);
        }
        let big = GeneratorSpec { z: 10, ..one };
        assert!(make_experiment_kernel(&big, &mut rng).is_err());
        let heavy = GeneratorSpec {
            z: 3,
            p_hot: 0.5,
            p_exit: 0.5,
            ..one
        };
        assert!(make_experiment_kernel(&heavy, &mut rng).is_err());
    }

    #[test]
    fn border_shortfall_exits() {
        let spec = GeneratorSpec {
            n: 3,
            z: 5,
            p_exit: 0.05,
            p_hot: 0.15,
        };
        let k = make_experiment_kernel(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // corner: 4 in-grid neighbors, one share of 0.2 leaves the grid
        assert!((k.exit_prob(CellId(0)) - 0.25).abs() < 1e-15);
        assert_eq!(k.sparse_row(0).len(), 5);
        assert!((k.exit_prob(CellId(4)) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let spec = GeneratorSpec {
            n: 4,
            z: 3,
            p_exit: 0.05,
            p_hot: 0.15,
        };
        let k = make_experiment_kernel(&spec, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let back = TransitionKernel::from_json(&k.to_json()).unwrap();
        for (a, b) in k.rows().iter().zip(back.rows()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(k.fingerprint(), back.fingerprint());
    }

    #[test]
    fn exit_reachability() {
        let g = Grid::new(2).unwrap();
        let mut rows = vec![vec![0.25, 0.25, 0.25, 0.25, 0.0]; 4];
        let k = TransitionKernel::from_cell_rows(g, rows.clone()).unwrap();
        assert_eq!(k.non_exiting_cells().len(), 4);
        rows[3] = vec![0.0, 0.0, 0.0, 0.5, 0.5];
        let k = TransitionKernel::from_cell_rows(g, rows).unwrap();
        assert!(k.check_exits().is_ok());
    }
}

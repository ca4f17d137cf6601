//! Property suites over the bundled fixtures, with a machine-readable report.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{belief_from_track_state, belief_update, qmdp_action, qmdp_upper_bound, Belief};
use crate::error::{Error, Result};
use crate::estimator::{map_from_posterior, map_from_q, q_ratio};
use crate::eval::{aihtr, run_episode, EpisodeLog, EpisodeOptions, FactoredPolicy, QmdpPolicy};
use crate::fixtures::{self, Fixture, FixtureLevel};
use crate::grid::{reward, CellId, CellSet, Grid, RewardParams, SensingAction, TargetState};
use crate::kernel::{TransitionKernel, ROW_SUM_TOL};
use crate::seeds::episode_seed;
use crate::solvers::actor_critic::{actor_critic_factored, gradient_check, AcHyper, FeatureKind};
use crate::solvers::belief_space::belief_value_iteration;
use crate::solvers::candidates::CandidateMode;
use crate::solvers::exact::{exact_value_iteration, Continuation, ExactOptions, ValueTable};
use crate::track::{constrain_action, predicted_distribution, step, TrackState};

pub const TRACK_PROPERTY_TOL: f64 = 1e-12;
pub const RATIO_TOL: f64 = 1e-8;
pub const VALUE_EQUIVALENCE_TOL: f64 = 1e-8;
pub const PRUNING_TOL: f64 = 1e-10;
pub const RESIDUAL_TOL: f64 = 1e-10;
pub const BELIEF_TOL: f64 = 1e-10;
pub const MASS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Fast,
    Full,
}

/// One property on one instance. `margin` is the distance to failure: the slack
/// below a tolerance, or minus the violation count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub property: String,
    pub instance: String,
    pub passed: bool,
    pub margin: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `observed ≤ tol`.
    pub fn bound(property: &str, instance: &str, observed: f64, tol: f64) -> Check {
        Check {
            property: property.into(),
            instance: instance.into(),
            passed: observed <= tol,
            margin: tol - observed,
            detail: format!("observed {observed:.3e}, tolerance {tol:.1e}"),
        }
    }

    /// Passes when `value ≥ floor`.
    pub fn at_least(property: &str, instance: &str, value: f64, floor: f64) -> Check {
        Check {
            property: property.into(),
            instance: instance.into(),
            passed: value >= floor,
            margin: value - floor,
            detail: format!("value {value:.6}, floor {floor:.6}"),
        }
    }

    /// Passes when no violations were found.
    pub fn count(property: &str, instance: &str, violations: usize, checked: usize) -> Check {
        Check {
            property: property.into(),
            instance: instance.into(),
            passed: violations == 0,
            margin: -(violations as f64),
            detail: format!("{violations} violations in {checked} checks"),
        }
    }

    fn failed(property: &str, instance: &str, err: &Error) -> Check {
        Check {
            property: property.into(),
            instance: instance.into(),
            passed: false,
            margin: f64::MIN,
            detail: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub level: Level,
    pub seed: u64,
    pub passed: bool,
    pub elapsed_s: f64,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Counted violations over a set of checked items.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tally {
    pub checked: usize,
    pub violations: usize,
}

/// Cells with predicted probability above `c/r + tol` that the optimal action leaves
/// off, over every stored decision state.
pub fn track_property(table: &ValueTable) -> Result<Tally> {
    let p = table.params();
    let mut t = Tally::default();
    for s in table.states() {
        let pred = predicted_distribution(s, table.kernel())?;
        let a = table.action(s).ok_or(Error::UnknownState)?;
        for (i, q) in pred.cells.iter().enumerate() {
            if *q > p.threshold() + TRACK_PROPERTY_TOL {
                t.checked += 1;
                if !a.contains(CellId(i as u16)) {
                    t.violations += 1;
                }
            }
        }
    }
    Ok(t)
}

/// Estimator agreement at every stored state whose optimal action can miss:
/// disagreeing cells, and the largest `|ratio − P̄(x)|` over the unsensed cells.
pub fn estimator_agreement(table: &ValueTable) -> Result<(Tally, f64)> {
    let kernel = table.kernel();
    let mut t = Tally::default();
    let mut worst: f64 = 0.0;
    for s in table.states() {
        let a = table.action(s).ok_or(Error::UnknownState)?;
        let pred = predicted_distribution(s, kernel)?;
        if pred.support().difference(a.cells).is_empty() {
            continue;
        }
        t.checked += 1;
        let q = map_from_q(table, s, &a, Continuation::Localized)?;
        let b = map_from_posterior(s, &a, kernel)?;
        if q.cell != b.cell {
            t.violations += 1;
        }
        for i in 0..kernel.cells() {
            let x = CellId(i as u16);
            if !a.contains(x) {
                let r = q_ratio(table, s, x, Continuation::Localized)?;
                worst = worst.max((r - pred.cells[i]).abs());
            }
        }
    }
    Ok((t, worst))
}

/// Largest gap between exact values over the full powerset and over support subsets,
/// at every state either solve reaches.
pub fn pruning_gap(kernel: &TransitionKernel, p: &RewardParams) -> Result<f64> {
    let support = exact_value_iteration(kernel, p, &ExactOptions::default())?;
    let full = exact_value_iteration(
        kernel,
        p,
        &ExactOptions {
            mode: CandidateMode::Full,
            ..ExactOptions::default()
        },
    )?;
    let mut gap: f64 = 0.0;
    for s in support.states() {
        gap = gap.max((support.state_value(s)? - full.state_value(s)?).abs());
    }
    for s in full.states() {
        gap = gap.max((support.state_value(s)? - full.state_value(s)?).abs());
    }
    Ok(gap)
}

/// Largest root-value gap between the Track-MDP solve and belief-space value iteration.
pub fn value_equivalence_gap(table: &ValueTable) -> Result<f64> {
    let b = belief_value_iteration(table.kernel(), table.params(), 1e-13, 1_000_000)?;
    Ok(table
        .root_values()
        .iter()
        .zip(&b.root_values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BeliefConsistency {
    pub updates: usize,
    /// Largest componentwise gap between the filtered and the recovered belief.
    pub max_gap: f64,
    /// Largest `|Σβ − 1|` of a filtered belief.
    pub max_mass_error: f64,
    pub action_mismatches: usize,
}

/// Runs the Q_MDP controller while filtering the belief step by step, and compares it
/// with the belief recovered from the Track-MDP state at every step.
pub fn belief_consistency(
    kernel: &TransitionKernel,
    p: &RewardParams,
    episodes: usize,
    seed: u64,
    step_cap: usize,
) -> Result<BeliefConsistency> {
    let nc = kernel.cells();
    let mut out = BeliefConsistency::default();
    for e in 0..episodes {
        let x0 = CellId((e % nc) as u16);
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, e % nc, e / nc));
        let mut s = TrackState::initial(x0);
        let mut x = TargetState::Cell(x0);
        let mut v = Belief::point(nc, x0);
        for _ in 0..step_cap {
            let recovered = belief_from_track_state(&s, kernel)?;
            let gap = v
                .probs
                .iter()
                .zip(&recovered.probs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            out.max_gap = out.max_gap.max(gap);
            out.max_mass_error = out.max_mass_error.max((v.mass() - 1.0).abs());
            let a = qmdp_action(&v, kernel, p);
            if a != qmdp_action(&recovered, kernel, p) || v.n != recovered.n {
                out.action_mismatches += 1;
            }
            let a = constrain_action(&s, a, kernel, p);
            let x_next = kernel.sample_next(x, &mut rng);
            let o = step(&s, &a, x_next, p)?;
            match belief_update(&v, &a, o.observation, kernel)? {
                Some(next) => {
                    out.updates += 1;
                    v = next;
                }
                None => break,
            }
            x = x_next;
            s = o.next_state;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogAudit {
    pub steps: usize,
    /// Steps whose stored reward differs from `reward(x, a)` in any bit.
    pub reward_mismatches: usize,
    /// Episodes whose stored total differs from the running sum of step rewards.
    pub total_mismatches: usize,
    pub longest_miss_run: usize,
}

/// Recomputes every step reward from the logged target cell and action.
pub fn audit_logs(logs: &[EpisodeLog], grid: Grid, p: &RewardParams) -> Result<LogAudit> {
    let mut a = LogAudit::default();
    for log in logs {
        let mut total = 0.0;
        for st in &log.steps {
            let x = match st.x {
                Some(l) => TargetState::Cell(
                    CellId::from_label(l).ok_or_else(|| Error::InvalidState(format!("bad label {l}")))?,
                ),
                None => TargetState::Terminal,
            };
            let act = if st.safe {
                SensingAction::safe(grid)
            } else {
                SensingAction::new(CellSet::from_cells(st.action.iter().filter_map(|&l| CellId::from_label(l))))
            };
            if reward(x, &act, p).to_bits() != st.reward.to_bits() {
                a.reward_mismatches += 1;
            }
            total += st.reward;
            a.steps += 1;
        }
        if total.to_bits() != log.total_reward.to_bits() {
            a.total_mismatches += 1;
        }
        a.longest_miss_run = a.longest_miss_run.max(log.longest_miss_run);
    }
    Ok(a)
}

fn push<F: FnOnce() -> Result<Vec<Check>>>(checks: &mut Vec<Check>, property: &str, instance: &str, f: F) {
    match f() {
        Ok(c) => checks.extend(c),
        Err(e) => checks.push(Check::failed(property, instance, &e)),
    }
}

fn fixture_checks(f: &Fixture, level: Level, seed: u64) -> Vec<Check> {
    let name = f.name.as_str();
    let (k, p) = (&f.kernel, &f.params);
    let mut checks = Vec::new();
    let row_dev = k
        .rows()
        .iter()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    checks.push(Check::bound("kernel_row_sums", name, row_dev, ROW_SUM_TOL));

    let table = match exact_value_iteration(k, p, &ExactOptions::default()) {
        Ok(t) => t,
        Err(e) => {
            checks.push(Check::failed("exact_solve", name, &e));
            return checks;
        }
    };
    checks.push(Check::bound("bellman_residual", name, table.residual, RESIDUAL_TOL));
    push(&mut checks, "track_property", name, || {
        let t = track_property(&table)?;
        Ok(vec![Check::count("track_property", name, t.violations, t.checked)])
    });
    push(&mut checks, "map_estimator", name, || {
        let (t, worst) = estimator_agreement(&table)?;
        Ok(vec![
            Check::count("map_estimator_cell", name, t.violations, t.checked),
            Check::bound("map_estimator_ratio", name, worst, RATIO_TOL),
        ])
    });
    push(&mut checks, "value_equivalence", name, || {
        Ok(vec![Check::bound(
            "value_equivalence",
            name,
            value_equivalence_gap(&table)?,
            VALUE_EQUIVALENCE_TOL,
        )])
    });
    if k.cells() <= 4 && p.t_max <= 1 {
        push(&mut checks, "action_pruning", name, || {
            Ok(vec![Check::bound("action_pruning", name, pruning_gap(k, p)?, PRUNING_TOL)])
        });
    }
    push(&mut checks, "upper_bound", name, || {
        let ub = qmdp_upper_bound(k, p)?;
        Ok(vec![
            Check::at_least("upper_bound_dominance", name, ub.mean(), table.average_root_value() - 1e-9),
            Check::bound("upper_bound_residual", name, ub.residual.max(ub.dense_gap), RESIDUAL_TOL),
        ])
    });
    if f.kernel_name == "1x1" {
        checks.push(Check::bound(
            "single_cell_closed_form",
            name,
            (table.root_values()[0] - 7.0).abs(),
            1e-10,
        ));
    }
    let episodes = if level == Level::Full { 200 } else { 40 };
    push(&mut checks, "belief_consistency", name, || {
        let b = belief_consistency(k, p, episodes, seed, 10_000)?;
        Ok(vec![
            Check::bound("belief_consistency", name, b.max_gap, BELIEF_TOL),
            Check::bound("belief_normalization", name, b.max_mass_error, MASS_TOL),
            Check::count("belief_action_agreement", name, b.action_mismatches, b.updates),
        ])
    });
    push(&mut checks, "episode_logs", name, || {
        let opts = EpisodeOptions::default();
        let mut logs = Vec::new();
        for j in 0..k.cells() {
            for i in 0..episodes / 4 + 1 {
                logs.push(run_episode(&table, k, p, CellId(j as u16), episode_seed(seed, j, i), &opts)?);
            }
        }
        let a = audit_logs(&logs, k.grid(), p)?;
        Ok(vec![
            Check::count("reward_equivalence", name, a.reward_mismatches, a.steps),
            Check::count("reward_accounting", name, a.total_mismatches, logs.len()),
            Check::count(
                "safe_sensing",
                name,
                usize::from(a.longest_miss_run > p.t_max + 1),
                logs.len(),
            ),
        ])
    });
    for (prop, kind) in [
        ("gradient_check_tabular", FeatureKind::Tabular),
        ("gradient_check_posterior", FeatureKind::Posterior),
    ] {
        push(&mut checks, prop, name, || {
            let h = AcHyper {
                features: kind,
                ..AcHyper::default()
            };
            let err = gradient_check(k, p, &h, 20, seed)?;
            Ok(vec![Check::bound(prop, name, err, crate::solvers::actor_critic::GRADIENT_CHECK_TOL)])
        });
    }
    let mc = if level == Level::Full { 1000 } else { 100 };
    push(&mut checks, "empirical_value", name, || {
        let e = aihtr(&table, k, p, mc, seed, 100_000)?;
        let gap = (e.aihtr - table.average_root_value()).abs();
        Ok(vec![Check::bound("empirical_value", name, gap, 3.0 * e.stderr)])
    });
    checks
}

/// Larger-grid checks: the optimal policy must not lose to Q_MDP or to a trained
/// factored policy beyond Monte-Carlo error, and the upper bound must cover it.
fn trend_checks(f: &Fixture, seed: u64) -> Vec<Check> {
    let name = f.name.as_str();
    let (k, p) = (&f.kernel, &f.params);
    let mut checks = Vec::new();
    push(&mut checks, "trend", name, || {
        let table = exact_value_iteration(k, p, &ExactOptions::default())?;
        let v = table.average_root_value();
        let q = aihtr(&QmdpPolicy { kernel: k, params: *p }, k, p, 400, seed, 100_000)?;
        let h = AcHyper {
            features: FeatureKind::Posterior,
            actor_lr: 0.001,
            critic_lr: 0.05,
            episodes: 2000,
            ..AcHyper::default()
        };
        let params = actor_critic_factored(k, p, &h, seed)?;
        let ac = aihtr(
            &FactoredPolicy {
                params: &params,
                kernel: k,
                reward: *p,
            },
            k,
            p,
            400,
            seed,
            100_000,
        )?;
        let ub = qmdp_upper_bound(k, p)?.mean();
        Ok(vec![
            Check::at_least("trend_exact_vs_qmdp", name, v, q.aihtr - 3.0 * q.stderr),
            Check::at_least("trend_exact_vs_learned", name, v, ac.aihtr - 3.0 * ac.stderr),
            Check::at_least("trend_upper_bound_vs_learned", name, ub, ac.aihtr - 3.0 * ac.stderr),
        ])
    });
    checks
}

/// Runs the suites of `level` on the bundled fixtures.
pub fn run(level: Level, seed: u64) -> Result<Report> {
    let t0 = Instant::now();
    let fl = match level {
        Level::Fast => FixtureLevel::Fast,
        Level::Full => FixtureLevel::Full,
    };
    let mut checks = Vec::new();
    for f in fixtures::up_to(fl)? {
        checks.extend(fixture_checks(&f, level, seed));
        if f.level == FixtureLevel::Full {
            checks.extend(trend_checks(&f, seed));
        }
    }
    Ok(Report {
        level,
        seed,
        passed: checks.iter().all(|c| c.passed),
        elapsed_s: t0.elapsed().as_secs_f64(),
        checks,
    })
}

/// Row-stochasticity of an external kernel file, as a report entry.
pub fn kernel_file_check(instance: &str, text: &str) -> Check {
    match TransitionKernel::from_json(text) {
        Ok(_) => Check::count("kernel_validation", instance, 0, 1),
        Err(e) => Check::failed("kernel_validation", instance, &e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbed_kernel_fails_validation() {
        let text = fixtures::kernel_text("2x2_z2").unwrap();
        assert!(kernel_file_check("ok", text).passed);
        let mut k: serde_json::Value = serde_json::from_str(text).unwrap();
        let row = k["rows"][0].as_array_mut().unwrap();
        let v = row[0].as_f64().unwrap();
        row[0] = serde_json::json!(v - 0.01);
        let c = kernel_file_check("bad", &k.to_string());
        assert!(!c.passed);
        assert!(c.detail.contains("invalid kernel"), "{}", c.detail);
    }

    #[test]
    fn single_cell_suite_passes() {
        let f = fixtures::by_name("1x1").unwrap();
        let checks = fixture_checks(&f, Level::Fast, 1);
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(checks.iter().any(|c| c.property == "single_cell_closed_form"));
    }
}

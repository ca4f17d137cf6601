//! The (z, c) comparison sweep: learned Track-MDP policy against Q_MDP and the upper
//! bound on generated kernels.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::threshold_set;
use crate::config::SweepConfig;
use crate::error::{Error, Result};
use crate::eval::{compare, CompareOptions, ConfigRun, FactoredPolicy, MetricsRow, QMDP_ID, UPPER_BOUND_ID};
use crate::grid::{RewardParams, SensingAction};
use crate::kernel::{make_experiment_kernel, TransitionKernel};
use crate::solvers::actor_critic::{actor_critic_factored, FactoredPolicyParams};
use crate::track::enumerate_reachable;

pub const LEARNED_ID: &str = "track_mdp";
pub const REACHABLE_BUDGET: usize = 1_000_000;

/// Decision states reachable under the Q_MDP threshold rule, and how many of them
/// sense at least one cell. Forced states are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdCensus {
    pub reachable: usize,
    pub nonempty: usize,
}

/// Walks the states reachable under the Q_MDP threshold rule.
pub fn qmdp_threshold_census(kernel: &TransitionKernel, p: &RewardParams) -> Result<ThresholdCensus> {
    let mut nonempty = 0;
    let states = enumerate_reachable(
        kernel,
        p,
        |_, pred| {
            let a = threshold_set(&pred.cells, p);
            if !a.is_empty() {
                nonempty += 1;
            }
            Ok(vec![SensingAction::new(a)])
        },
        REACHABLE_BUDGET,
    )?;
    Ok(ThresholdCensus {
        reachable: states
            .iter()
            .filter(|s| !s.is_terminal() && !s.is_forced(p))
            .count(),
        nonempty,
    })
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub z: usize,
    pub c: f64,
    pub learned: MetricsRow,
    pub qmdp: MetricsRow,
    pub upper_bound: MetricsRow,
    pub census: ThresholdCensus,
    pub params: FactoredPolicyParams,
    pub reward: RewardParams,
    pub kernel_fingerprint: String,
}

impl SweepPoint {
    pub fn reward_win(&self) -> bool {
        self.learned.aihtr >= self.qmdp.aihtr
    }

    pub fn accuracy_win(&self) -> bool {
        match (self.learned.hamming_accuracy, self.qmdp.hamming_accuracy) {
            (Some(a), Some(b)) => a > b,
            _ => false,
        }
    }
}

/// One line of the accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub z: usize,
    pub c: f64,
    pub qmdp: Option<f64>,
    pub track_mdp: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.points
            .iter()
            .flat_map(|p| [p.qmdp.clone(), p.learned.clone(), p.upper_bound.clone()])
            .collect()
    }

    pub fn rows_for(&self, z: usize) -> Vec<MetricsRow> {
        self.points
            .iter()
            .filter(|p| p.z == z)
            .flat_map(|p| [p.qmdp.clone(), p.learned.clone(), p.upper_bound.clone()])
            .collect()
    }

    pub fn accuracy_table(&self) -> Vec<AccuracyRow> {
        self.points
            .iter()
            .map(|p| AccuracyRow {
                z: p.z,
                c: p.c,
                qmdp: p.qmdp.hamming_accuracy,
                track_mdp: p.learned.hamming_accuracy,
            })
            .collect()
    }

    pub fn reward_wins(&self) -> usize {
        self.points.iter().filter(|p| p.reward_win()).count()
    }

    pub fn accuracy_wins(&self) -> usize {
        self.points.iter().filter(|p| p.accuracy_win()).count()
    }

    pub fn point(&self, z: usize, c: f64) -> Option<&SweepPoint> {
        self.points
            .iter()
            .find(|p| p.z == z && (p.c - c).abs() < 1e-12)
    }
}

pub fn write_accuracy_csv<W: Write>(rows: &[AccuracyRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Trains and evaluates every (z, c) point. `progress` receives one line per point.
pub fn run_sweep<F: FnMut(&SweepPoint)>(
    cfg: &SweepConfig,
    episodes_per_start: usize,
    mut progress: F,
) -> Result<SweepResult> {
    let opts = CompareOptions {
        episodes_per_start,
        base_seed: cfg.eval.base_seed,
        step_cap: cfg.eval.step_cap.0,
    };
    let mut points = Vec::new();
    for z in &cfg.z_values {
        let z = z.0;
        let kernel = make_experiment_kernel(
            &cfg.generator(z),
            &mut ChaCha8Rng::seed_from_u64(cfg.kernel_seed),
        )?;
        for c in &cfg.c_values {
            let p = cfg.reward_params(c.0)?;
            let params = actor_critic_factored(&kernel, &p, &cfg.hyper, cfg.seed)?;
            let policy = FactoredPolicy {
                params: &params,
                kernel: &kernel,
                reward: p,
            };
            let run = ConfigRun {
                z: Some(z),
                kernel: &kernel,
                params: p,
                policies: vec![(LEARNED_ID.to_string(), &policy)],
            };
            let rows = compare(&[run], &[LEARNED_ID], &opts)?;
            let pick = |id: &str| {
                rows.iter()
                    .find(|r| r.policy_id == id)
                    .cloned()
                    .ok_or_else(|| Error::MissingPolicy(id.to_string()))
            };
            let point = SweepPoint {
                z,
                c: c.0,
                learned: pick(LEARNED_ID)?,
                qmdp: pick(QMDP_ID)?,
                upper_bound: pick(UPPER_BOUND_ID)?,
                census: qmdp_threshold_census(&kernel, &p)?,
                reward: p,
                kernel_fingerprint: kernel.fingerprint(),
                params,
            };
            progress(&point);
            points.push(point);
        }
    }
    Ok(SweepResult { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Count, Neighbours, Positive};
    use crate::kernel::GeneratorSpec;

    #[test]
    fn census_is_empty_when_every_entry_is_below_threshold() {
        let spec = GeneratorSpec {
            n: 4,
            z: 5,
            p_exit: 0.005,
            p_hot: 0.15,
        };
        let k = make_experiment_kernel(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = RewardParams::new(1.0, 0.22, 16.0 * 0.22, 3, 1.0).unwrap();
        let c = qmdp_threshold_census(&k, &p).unwrap();
        assert_eq!(c.reachable, 16 * 4);
        assert_eq!(c.nonempty, 0);
        let p = RewardParams::new(1.0, 0.16, 16.0 * 0.16, 3, 1.0).unwrap();
        assert!(qmdp_threshold_census(&k, &p).unwrap().nonempty > 0);
    }

    #[test]
    fn small_sweep_runs() {
        let mut cfg = SweepConfig::default();
        cfg.n = crate::config::GridSide(3);
        cfg.z_values = vec![Neighbours(3)];
        cfg.c_values = vec![Positive(0.2)];
        cfg.hyper.episodes = 20;
        cfg.hyper.check_points = 5;
        cfg.eval.episodes_per_start = Count(2);
        let mut seen = 0;
        let res = run_sweep(&cfg, 2, |_| seen += 1).unwrap();
        assert_eq!(seen, 1);
        assert_eq!(res.rows().len(), 3);
        let ub = &res.points[0].upper_bound;
        assert_eq!(ub.policy_id, UPPER_BOUND_ID);
        assert_eq!(res.accuracy_table().len(), 1);
    }
}

//! Episode simulation, AIHTR and Hamming accuracy, and policy comparison tables.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{belief_from_track_state, qmdp_action, qmdp_upper_bound};
use crate::error::{Error, Result};
use crate::estimator::{map_from_posterior, map_from_q};
use crate::grid::{CellId, Grid, Observation, RewardParams, SensingAction, TargetState};
use crate::kernel::TransitionKernel;
use crate::seeds::episode_seed;
use crate::solvers::actor_critic::FactoredPolicyParams;
use crate::solvers::exact::{Continuation, ValueTable};
use crate::solvers::qlearning::GreedyQPolicy;
use crate::track::{constrain_action, step, TrackState};

pub const DEFAULT_EPISODES_PER_START: usize = 1000;
pub const DEFAULT_STEP_CAP: usize = 100_000;

/// A map from Track-MDP states to sensing actions. The harness applies the safe
/// action at forced states whatever the policy proposes.
pub trait Policy: Sync {
    fn action(&self, s: &TrackState) -> Result<SensingAction>;
}

impl Policy for ValueTable {
    fn action(&self, s: &TrackState) -> Result<SensingAction> {
        ValueTable::action(self, s).ok_or(Error::UnknownState)
    }
}

impl Policy for GreedyQPolicy<'_> {
    fn action(&self, s: &TrackState) -> Result<SensingAction> {
        GreedyQPolicy::action(self, s)
    }
}

/// Threshold rule on the belief recovered from the state.
#[derive(Debug, Clone, Copy)]
pub struct QmdpPolicy<'a> {
    pub kernel: &'a TransitionKernel,
    pub params: RewardParams,
}

impl Policy for QmdpPolicy<'_> {
    fn action(&self, s: &TrackState) -> Result<SensingAction> {
        let v = belief_from_track_state(s, self.kernel)?;
        Ok(qmdp_action(&v, self.kernel, &self.params))
    }
}

/// Greedy action of a trained factored policy: every cell with probability ≥ 1/2.
#[derive(Debug, Clone, Copy)]
pub struct FactoredPolicy<'a> {
    pub params: &'a FactoredPolicyParams,
    pub kernel: &'a TransitionKernel,
    pub reward: RewardParams,
}

impl Policy for FactoredPolicy<'_> {
    fn action(&self, s: &TrackState) -> Result<SensingAction> {
        self.params.greedy_action(s, self.kernel, &self.reward)
    }
}

/// Senses every cell at every step.
#[derive(Debug, Clone, Copy)]
pub struct FullGrid(pub Grid);

impl Policy for FullGrid {
    fn action(&self, _: &TrackState) -> Result<SensingAction> {
        Ok(SensingAction::new(self.0.all()))
    }
}

/// Senses nothing until the safe action is forced.
#[derive(Debug, Clone, Copy)]
pub struct NeverSense;

impl Policy for NeverSense {
    fn action(&self, _: &TrackState) -> Result<SensingAction> {
        Ok(SensingAction::empty())
    }
}

/// Which position estimate to attach to miss steps.
#[derive(Debug, Clone, Copy, Default)]
pub enum EstimateSource<'a> {
    #[default]
    None,
    Posterior,
    QDifference(&'a ValueTable),
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeOptions<'a> {
    pub step_cap: usize,
    /// Keep the per-step records; summaries only when false.
    pub record_steps: bool,
    pub estimates: EstimateSource<'a>,
}

impl Default for EpisodeOptions<'_> {
    fn default() -> Self {
        EpisodeOptions {
            step_cap: DEFAULT_STEP_CAP,
            record_steps: true,
            estimates: EstimateSource::None,
        }
    }
}

/// One step of an episode; cells are 1-based labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    /// Hidden target cell after the move, `None` once it has exited.
    pub x: Option<usize>,
    pub action: Vec<usize>,
    pub safe: bool,
    pub observation: String,
    pub reward: f64,
    pub estimate: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub seed: u64,
    pub start_cell: CellId,
    pub steps: Vec<StepRecord>,
    pub total_reward: f64,
    pub detected_steps: usize,
    /// Steps taken, the exit step included.
    pub length: usize,
    /// Steps that ended with the target in the grid.
    pub in_grid_steps: usize,
    pub capped: bool,
    /// Longest run of consecutive misses.
    pub longest_miss_run: usize,
}

fn observation_name(o: Observation) -> &'static str {
    match o {
        Observation::Seen(_) => "seen",
        Observation::Uninformative => "miss",
        Observation::Exited => "exited",
    }
}

/// Simulates one episode from `x0`, deterministic given `seed`.
pub fn run_episode(
    policy: &dyn Policy,
    kernel: &TransitionKernel,
    p: &RewardParams,
    x0: CellId,
    seed: u64,
    opts: &EpisodeOptions,
) -> Result<EpisodeLog> {
    if x0.index() >= kernel.cells() {
        return Err(Error::InvalidState(format!("start cell {} outside the grid", x0.label())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = EpisodeLog {
        seed,
        start_cell: x0,
        steps: Vec::new(),
        total_reward: 0.0,
        detected_steps: 0,
        length: 0,
        in_grid_steps: 0,
        capped: false,
        longest_miss_run: 0,
    };
    let mut s = TrackState::initial(x0);
    let mut x = TargetState::Cell(x0);
    let mut misses = 0;
    loop {
        if log.length == opts.step_cap {
            log.capped = true;
            break;
        }
        let a = constrain_action(&s, policy.action(&s)?, kernel, p);
        let x_next = kernel.sample_next(x, &mut rng);
        let out = step(&s, &a, x_next, p)?;
        log.length += 1;
        log.total_reward += out.reward;
        match out.observation {
            Observation::Seen(_) => {
                log.detected_steps += 1;
                log.in_grid_steps += 1;
                misses = 0;
            }
            Observation::Uninformative => {
                log.in_grid_steps += 1;
                misses += 1;
                log.longest_miss_run = log.longest_miss_run.max(misses);
            }
            Observation::Exited => {}
        }
        if opts.record_steps {
            let estimate = if out.observation == Observation::Uninformative {
                match opts.estimates {
                    EstimateSource::None => None,
                    EstimateSource::Posterior => Some(map_from_posterior(&s, &a, kernel)?.cell.label()),
                    EstimateSource::QDifference(t) => {
                        Some(map_from_q(t, &s, &a, Continuation::Localized)?.cell.label())
                    }
                }
            } else {
                None
            };
            log.steps.push(StepRecord {
                k: log.length,
                x: match x_next {
                    TargetState::Cell(c) => Some(c.label()),
                    TargetState::Terminal => None,
                },
                action: a.cells.labels(),
                safe: a.safe,
                observation: observation_name(out.observation).to_string(),
                reward: out.reward,
                estimate,
            });
        }
        x = x_next;
        s = out.next_state;
        if s.is_terminal() {
            break;
        }
    }
    Ok(log)
}

/// Writes one JSON object per step, tagged with the episode seed and start cell.
pub fn write_episode_jsonl<W: Write>(log: &EpisodeLog, mut w: W) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        seed: u64,
        start: usize,
        #[serde(flatten)]
        step: &'a StepRecord,
    }
    for st in &log.steps {
        serde_json::to_writer(
            &mut w,
            &Line {
                seed: log.seed,
                start: log.start_cell.label(),
                step: st,
            },
        )?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Detected steps over in-grid steps; the exit step is not counted.
pub fn hamming_accuracy(logs: &[EpisodeLog]) -> Result<f64> {
    let steps: usize = logs.iter().map(|l| l.in_grid_steps).sum();
    if steps == 0 {
        return Err(Error::EmptyInput("no in-grid steps in the logs".into()));
    }
    let seen: usize = logs.iter().map(|l| l.detected_steps).sum();
    Ok(seen as f64 / steps as f64)
}

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn value(&self) -> f64 {
        self.s + self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub aihtr: f64,
    /// Standard error of `aihtr`; `f64::MAX` when it cannot be estimated.
    pub stderr: f64,
    /// `None` when no episode had an in-grid step.
    pub hamming_accuracy: Option<f64>,
    pub mean_episode_length: f64,
    pub episodes: usize,
    pub capped_episodes: usize,
    pub per_start: Vec<f64>,
}

/// Monte-Carlo AIHTR: per-start mean total reward averaged over all starting cells.
/// Episode `(j, i)` uses `episode_seed(base_seed, j, i)`, so two policies evaluated
/// with the same base seed see the same target paths.
pub fn aihtr(
    policy: &dyn Policy,
    kernel: &TransitionKernel,
    p: &RewardParams,
    episodes_per_start: usize,
    base_seed: u64,
    step_cap: usize,
) -> Result<Evaluation> {
    if episodes_per_start == 0 {
        return Err(Error::InvalidParams("episodes_per_start must be at least 1".into()));
    }
    let nc = kernel.cells();
    let opts = EpisodeOptions {
        step_cap,
        record_steps: false,
        estimates: EstimateSource::None,
    };
    let summaries: Vec<(f64, usize, usize, usize, bool)> = (0..nc * episodes_per_start)
        .into_par_iter()
        .map(|e| {
            let (j, i) = (e / episodes_per_start, e % episodes_per_start);
            let log = run_episode(policy, kernel, p, CellId(j as u16), episode_seed(base_seed, j, i), &opts)?;
            Ok((log.total_reward, log.detected_steps, log.in_grid_steps, log.length, log.capped))
        })
        .collect::<Result<_>>()?;

    let n = episodes_per_start as f64;
    let mut per_start = Vec::with_capacity(nc);
    let mut var_sum = Sum::default();
    let mut all = Sum::default();
    let mut all_sq = Sum::default();
    for chunk in summaries.chunks(episodes_per_start) {
        let mut s = Sum::default();
        for e in chunk {
            s.add(e.0);
            all.add(e.0);
        }
        let mean = s.value() / n;
        let mut sq = Sum::default();
        for e in chunk {
            sq.add((e.0 - mean).powi(2));
            all_sq.add(e.0 * e.0);
        }
        if episodes_per_start > 1 {
            var_sum.add(sq.value() / (n - 1.0) / n);
        }
        per_start.push(mean);
    }
    let total = summaries.len() as f64;
    let mut m = Sum::default();
    per_start.iter().for_each(|v| m.add(*v));
    let aihtr = m.value() / nc as f64;
    let ncf = nc as f64;
    let stderr = if episodes_per_start > 1 {
        var_sum.value().sqrt() / ncf
    } else if summaries.len() >= 2 {
        // one episode per start: pooled variance over all episodes, which also
        // absorbs the spread between starts
        let mean = all.value() / total;
        let pooled = ((all_sq.value() - total * mean * mean) / (total - 1.0)).max(0.0);
        (pooled / ncf).sqrt()
    } else {
        f64::MAX
    };
    let seen: usize = summaries.iter().map(|e| e.1).sum();
    let in_grid: usize = summaries.iter().map(|e| e.2).sum();
    let length: usize = summaries.iter().map(|e| e.3).sum();
    Ok(Evaluation {
        aihtr,
        stderr,
        hamming_accuracy: (in_grid > 0).then(|| seen as f64 / in_grid as f64),
        mean_episode_length: length as f64 / total,
        episodes: summaries.len(),
        capped_episodes: summaries.iter().filter(|e| e.4).count(),
        per_start,
    })
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub policy_id: String,
    pub n: usize,
    pub z: Option<usize>,
    pub c: f64,
    pub r: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub t_max: usize,
    pub gamma: f64,
    pub episodes: usize,
    pub aihtr: f64,
    pub aihtr_stderr: f64,
    pub hamming_accuracy: Option<f64>,
    pub mean_episode_length: Option<f64>,
    pub seed: u64,
}

impl MetricsRow {
    fn base(id: &str, grid: Grid, z: Option<usize>, p: &RewardParams, seed: u64) -> MetricsRow {
        MetricsRow {
            policy_id: id.to_string(),
            n: grid.n,
            z,
            c: p.c,
            r: p.r,
            d: p.d,
            t_max: p.t_max,
            gamma: p.gamma,
            episodes: 0,
            aihtr: 0.0,
            aihtr_stderr: 0.0,
            hamming_accuracy: None,
            mean_episode_length: None,
            seed,
        }
    }

    pub fn from_evaluation(
        id: &str,
        grid: Grid,
        z: Option<usize>,
        p: &RewardParams,
        seed: u64,
        e: &Evaluation,
    ) -> MetricsRow {
        MetricsRow {
            episodes: e.episodes,
            aihtr: e.aihtr,
            aihtr_stderr: e.stderr,
            hamming_accuracy: e.hamming_accuracy,
            mean_episode_length: Some(e.mean_episode_length),
            ..MetricsRow::base(id, grid, z, p, seed)
        }
    }
}

pub const QMDP_ID: &str = "qmdp";
pub const UPPER_BOUND_ID: &str = "upper_bound";

/// One (z, c) configuration and the policies to evaluate on it.
pub struct ConfigRun<'a> {
    pub z: Option<usize>,
    pub kernel: &'a TransitionKernel,
    pub params: RewardParams,
    pub policies: Vec<(String, &'a dyn Policy)>,
}

#[derive(Debug, Clone, Copy)]
pub struct CompareOptions {
    pub episodes_per_start: usize,
    pub base_seed: u64,
    pub step_cap: usize,
}

/// Evaluates every policy of every configuration, adding the Q_MDP row (when not
/// supplied) and the upper-bound row. Each configuration must supply all of
/// `required` policy ids.
pub fn compare(runs: &[ConfigRun], required: &[&str], opts: &CompareOptions) -> Result<Vec<MetricsRow>> {
    for run in runs {
        for id in required {
            if !run.policies.iter().any(|(p, _)| p == id) {
                let z = run.z.map_or("-".to_string(), |z| z.to_string());
                return Err(Error::MissingPolicy(format!(
                    "no '{id}' policy for z={z}, c={}",
                    run.params.c
                )));
            }
        }
    }
    let mut rows = Vec::new();
    for run in runs {
        let grid = run.kernel.grid();
        let qmdp = QmdpPolicy {
            kernel: run.kernel,
            params: run.params,
        };
        let mut policies: Vec<(&str, &dyn Policy)> =
            run.policies.iter().map(|(id, p)| (id.as_str(), *p)).collect();
        if !policies.iter().any(|(id, _)| *id == QMDP_ID) {
            policies.insert(0, (QMDP_ID, &qmdp));
        }
        for (id, policy) in policies {
            let e = aihtr(
                policy,
                run.kernel,
                &run.params,
                opts.episodes_per_start,
                opts.base_seed,
                opts.step_cap,
            )?;
            rows.push(MetricsRow::from_evaluation(id, grid, run.z, &run.params, opts.base_seed, &e));
        }
        let ub = qmdp_upper_bound(run.kernel, &run.params)?;
        rows.push(MetricsRow {
            aihtr: ub.mean(),
            ..MetricsRow::base(UPPER_BOUND_ID, grid, run.z, &run.params, opts.base_seed)
        });
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_cell() -> (TransitionKernel, RewardParams) {
        let g = Grid::new(1).unwrap();
        let k = TransitionKernel::from_cell_rows(g, vec![vec![0.9, 0.1]]).unwrap();
        (k, RewardParams::new(1.0, 0.2, 0.2, 2, 1.0).unwrap())
    }

    #[test]
    fn immediate_exit() {
        let g = Grid::new(2).unwrap();
        let k = TransitionKernel::from_cell_rows(g, vec![vec![0.0, 0.0, 0.0, 0.0, 1.0]; 4]).unwrap();
        let p = RewardParams::experiment(g, 0.2, 1).unwrap();
        let log = run_episode(&NeverSense, &k, &p, CellId(2), 5, &EpisodeOptions::default()).unwrap();
        assert_eq!(log.length, 1);
        assert_eq!(log.in_grid_steps, 0);
        assert_eq!(log.total_reward, 0.0);
        assert_eq!(log.steps[0].observation, "exited");
    }

    #[test]
    fn same_seed_same_log() {
        let (k, p) = single_cell();
        let o = EpisodeOptions::default();
        let a = run_episode(&FullGrid(k.grid()), &k, &p, CellId(0), 99, &o).unwrap();
        let b = run_episode(&FullGrid(k.grid()), &k, &p, CellId(0), 99, &o).unwrap();
        assert_eq!(a, b);
        let total: f64 = a.steps.iter().map(|s| s.reward).sum();
        assert_eq!(total, a.total_reward);
    }

    #[test]
    fn step_cap_is_flagged() {
        let g = Grid::new(1).unwrap();
        let k = TransitionKernel::from_cell_rows(g, vec![vec![0.999, 0.001]]).unwrap();
        let p = RewardParams::new(1.0, 0.2, 0.2, 0, 1.0).unwrap();
        let o = EpisodeOptions {
            step_cap: 3,
            ..EpisodeOptions::default()
        };
        let log = run_episode(&NeverSense, &k, &p, CellId(0), 1, &o).unwrap();
        assert!(log.capped);
        assert_eq!(log.length, 3);
    }

    #[test]
    fn hamming_of_empty_logs_is_an_error() {
        assert!(matches!(hamming_accuracy(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn single_episode_stderr_is_large_but_finite() {
        let (k, p) = single_cell();
        let e = aihtr(&FullGrid(k.grid()), &k, &p, 1, 3, DEFAULT_STEP_CAP).unwrap();
        assert_eq!(e.stderr, f64::MAX);
        assert!(!e.stderr.is_nan());
    }

    #[test]
    fn csv_round_trip() {
        let p = RewardParams::experiment(Grid::new(3).unwrap(), 0.2, 2).unwrap();
        let mut row = MetricsRow::base("exact", Grid::new(3).unwrap(), Some(2), &p, 7);
        row.aihtr = 1.0 / 3.0;
        row.aihtr_stderr = 0.1 + 0.2;
        row.hamming_accuracy = Some(0.9);
        let ub = MetricsRow::base(UPPER_BOUND_ID, Grid::new(3).unwrap(), None, &p, 7);
        let rows = vec![row, ub];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "policy_id,n,z,c,r,D,t_max,gamma,episodes,aihtr,aihtr_stderr,hamming_accuracy,mean_episode_length,seed\n"
        ));
        assert_eq!(read_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn missing_policy() {
        let (k, p) = single_cell();
        let runs = vec![ConfigRun {
            z: None,
            kernel: &k,
            params: p,
            policies: vec![],
        }];
        let o = CompareOptions {
            episodes_per_start: 2,
            base_seed: 0,
            step_cap: 100,
        };
        assert!(matches!(compare(&runs, &["exact"], &o), Err(Error::MissingPolicy(_))));
    }
}

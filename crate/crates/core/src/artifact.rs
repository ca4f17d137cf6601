//! Policy artifacts: trained or solved policies with their provenance.

use std::path::Path;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{FactoredPolicy, Policy};
use crate::grid::{CellId, CellSet, Grid, RewardParams, SensingAction};
use crate::kernel::TransitionKernel;
use crate::solvers::actor_critic::FactoredPolicyParams;
use crate::solvers::candidates::CandidateMode;
use crate::solvers::exact::ValueTable;
use crate::solvers::qlearning::{GreedyQPolicy, QEntry, QTable};
use crate::track::{StateJson, TrackState};

pub const ARTIFACT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    ValueTable,
    QTable,
    Factored,
}

impl ArtifactKind {
    /// Policy id used in metrics tables.
    pub fn policy_id(self) -> &'static str {
        match self {
            ArtifactKind::ValueTable => "exact",
            ArtifactKind::QTable => "q_learning",
            ArtifactKind::Factored => "actor_critic",
        }
    }
}

/// Where an artifact came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    /// Solver settings, stored verbatim.
    pub schedule: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub version: u32,
    pub kind: ArtifactKind,
    pub tool_version: String,
    pub config_hash: String,
    pub kernel_fingerprint: String,
    pub reward: RewardParams,
    pub seed: u64,
    pub schedule: serde_json::Value,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableEntry {
    state: StateJson,
    action: Vec<usize>,
    value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValueTablePayload {
    candidates: CandidateMode,
    residual: f64,
    iterations: usize,
    root_values: Vec<f64>,
    entries: Vec<TableEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QEntryJson {
    state: StateJson,
    actions: Vec<Vec<usize>>,
    q: Vec<f64>,
    visits: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QTablePayload {
    candidates: CandidateMode,
    steps: u64,
    episodes: usize,
    prior: Option<Vec<f64>>,
    entries: Vec<QEntryJson>,
}

/// Sort key giving artifacts a canonical entry order.
fn state_key(s: &TrackState) -> (usize, usize, Vec<u128>) {
    (
        s.n().unwrap_or(usize::MAX),
        s.last_seen().map_or(0, CellId::index),
        s.history().iter().map(|h| h.0).collect(),
    )
}

fn cells_from_labels(labels: &[usize], grid: Grid) -> Result<CellSet> {
    labels
        .iter()
        .map(|&l| {
            CellId::from_label(l)
                .filter(|c| c.index() < grid.cells())
                .ok_or_else(|| Error::InvalidState(format!("cell label {l} is off the grid")))
        })
        .collect::<Result<Vec<_>>>()
        .map(CellSet::from_cells)
}

impl Artifact {
    fn new(
        kind: ArtifactKind,
        kernel: &TransitionKernel,
        reward: RewardParams,
        prov: Provenance,
        payload: serde_json::Value,
    ) -> Artifact {
        Artifact {
            version: ARTIFACT_VERSION,
            kind,
            tool_version: TOOL_VERSION.to_string(),
            config_hash: prov.config_hash,
            kernel_fingerprint: kernel.fingerprint(),
            reward,
            seed: prov.seed,
            schedule: prov.schedule,
            payload,
        }
    }

    pub fn from_value_table(table: &ValueTable, prov: Provenance) -> Result<Artifact> {
        let mut states: Vec<&TrackState> = table.states().iter().collect();
        states.sort_by_key(|s| state_key(s));
        let entries = states
            .into_iter()
            .map(|s| {
                let a = table.action(s).ok_or(Error::UnknownState)?;
                Ok(TableEntry {
                    state: s.to_json(),
                    action: a.cells.labels(),
                    value: table.get(s).ok_or(Error::UnknownState)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let payload = ValueTablePayload {
            candidates: table.mode(),
            residual: table.residual,
            iterations: table.iterations,
            root_values: table.root_values().to_vec(),
            entries,
        };
        Ok(Artifact::new(
            ArtifactKind::ValueTable,
            table.kernel(),
            *table.params(),
            prov,
            serde_json::to_value(payload)?,
        ))
    }

    pub fn from_q_table(table: &QTable, kernel: &TransitionKernel, prov: Provenance) -> Result<Artifact> {
        let mut states: Vec<&TrackState> = table.entries.keys().collect();
        states.sort_by_key(|s| state_key(s));
        let entries = states
            .into_iter()
            .map(|s| {
                let e = &table.entries[s];
                QEntryJson {
                    state: s.to_json(),
                    actions: e.actions.iter().map(|a| a.labels()).collect(),
                    q: e.q.clone(),
                    visits: e.visits.clone(),
                }
            })
            .collect();
        let payload = QTablePayload {
            candidates: table.candidates,
            steps: table.steps,
            episodes: table.episodes,
            prior: table.prior.clone(),
            entries,
        };
        Ok(Artifact::new(
            ArtifactKind::QTable,
            kernel,
            table.params,
            prov,
            serde_json::to_value(payload)?,
        ))
    }

    pub fn from_factored(
        params: &FactoredPolicyParams,
        kernel: &TransitionKernel,
        reward: RewardParams,
        prov: Provenance,
    ) -> Result<Artifact> {
        Ok(Artifact::new(
            ArtifactKind::Factored,
            kernel,
            reward,
            prov,
            serde_json::to_value(params)?,
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Artifact> {
        let a: Artifact = serde_json::from_str(text)?;
        if a.version != ARTIFACT_VERSION {
            return Err(Error::Config(format!(
                "unsupported artifact version {}",
                a.version
            )));
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Artifact> {
        Artifact::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fails unless the artifact was produced on `kernel`.
    pub fn check_kernel(&self, kernel: &TransitionKernel) -> Result<()> {
        let fp = kernel.fingerprint();
        if fp != self.kernel_fingerprint {
            return Err(Error::FingerprintMismatch(format!(
                "artifact was built on kernel {} but the kernel given has fingerprint {}",
                short(&self.kernel_fingerprint),
                short(&fp)
            )));
        }
        Ok(())
    }

    /// Fails unless the artifact was produced under `reward`.
    pub fn check_reward(&self, reward: &RewardParams) -> Result<()> {
        if self.reward != *reward {
            return Err(Error::FingerprintMismatch(format!(
                "artifact reward parameters {:?} differ from the configured {:?}",
                self.reward, reward
            )));
        }
        Ok(())
    }

    /// Rebuilds the stored policy after checking the kernel fingerprint.
    pub fn into_policy(self, kernel: &TransitionKernel) -> Result<StoredPolicy> {
        self.check_kernel(kernel)?;
        let grid = kernel.grid();
        let reward = self.reward;
        match self.kind {
            ArtifactKind::ValueTable => {
                let p: ValueTablePayload = serde_json::from_value(self.payload)?;
                let mut actions = FxHashMap::default();
                for e in p.entries {
                    let s = TrackState::from_json(&e.state)?;
                    actions.insert(s, SensingAction::new(cells_from_labels(&e.action, grid)?));
                }
                Ok(StoredPolicy::Table {
                    grid,
                    reward,
                    actions,
                })
            }
            ArtifactKind::QTable => {
                let p: QTablePayload = serde_json::from_value(self.payload)?;
                let mut table = QTable::new(reward, p.candidates);
                table.prior = p.prior;
                table.steps = p.steps;
                table.episodes = p.episodes;
                for e in p.entries {
                    if e.actions.len() != e.q.len() || e.q.len() != e.visits.len() {
                        return Err(Error::Config("q-table entry lengths differ".into()));
                    }
                    let actions = e
                        .actions
                        .iter()
                        .map(|a| cells_from_labels(a, grid))
                        .collect::<Result<Vec<_>>>()?;
                    table.entries.insert(
                        TrackState::from_json(&e.state)?,
                        QEntry {
                            actions,
                            q: e.q,
                            visits: e.visits,
                        },
                    );
                }
                Ok(StoredPolicy::Q {
                    table,
                    kernel: kernel.clone(),
                })
            }
            ArtifactKind::Factored => {
                let params: FactoredPolicyParams = serde_json::from_value(self.payload)?;
                if params.features.cells() != kernel.cells() {
                    return Err(Error::FingerprintMismatch(format!(
                        "factored policy has {} cells, kernel has {}",
                        params.features.cells(),
                        kernel.cells()
                    )));
                }
                Ok(StoredPolicy::Factored {
                    params,
                    kernel: kernel.clone(),
                    reward,
                })
            }
        }
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

/// A policy rebuilt from an artifact.
#[derive(Debug)]
pub enum StoredPolicy {
    Table {
        grid: Grid,
        reward: RewardParams,
        actions: FxHashMap<TrackState, SensingAction>,
    },
    Q {
        table: QTable,
        kernel: TransitionKernel,
    },
    Factored {
        params: FactoredPolicyParams,
        kernel: TransitionKernel,
        reward: RewardParams,
    },
}

impl Policy for StoredPolicy {
    fn action(&self, s: &TrackState) -> Result<SensingAction> {
        match self {
            StoredPolicy::Table {
                grid,
                reward,
                actions,
            } => {
                if s.is_forced(reward) {
                    return Ok(SensingAction::safe(*grid));
                }
                actions.get(s).copied().ok_or(Error::UnknownState)
            }
            StoredPolicy::Q { table, kernel } => GreedyQPolicy::new(table, kernel).action(s),
            StoredPolicy::Factored {
                params,
                kernel,
                reward,
            } => FactoredPolicy {
                params,
                kernel,
                reward: *reward,
            }
            .action(s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::actor_critic::{actor_critic_factored, AcHyper};
    use crate::solvers::exact::{exact_value_iteration, ExactOptions};
    use crate::solvers::qlearning::{q_learning, Schedule};
    use crate::track::enumerate_reachable;

    fn kernel() -> TransitionKernel {
        let g = Grid::new(2).unwrap();
        let rows = vec![
            vec![0.1, 0.5, 0.2, 0.1, 0.1],
            vec![0.3, 0.1, 0.1, 0.4, 0.1],
            vec![0.2, 0.2, 0.2, 0.3, 0.1],
            vec![0.1, 0.1, 0.6, 0.1, 0.1],
        ];
        TransitionKernel::from_cell_rows(g, rows).unwrap()
    }

    fn prov() -> Provenance {
        Provenance {
            config_hash: "00".into(),
            seed: 3,
            schedule: serde_json::json!({}),
        }
    }

    fn params() -> RewardParams {
        RewardParams::new(1.0, 0.25, 1.0, 1, 1.0).unwrap()
    }

    #[test]
    fn value_table_round_trip_keeps_actions() {
        let k = kernel();
        let t = exact_value_iteration(&k, &params(), &ExactOptions::default()).unwrap();
        let a = Artifact::from_value_table(&t, prov()).unwrap();
        let back = Artifact::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
        let pol = back.into_policy(&k).unwrap();
        for s in t.states() {
            assert_eq!(pol.action(s).unwrap(), t.action(s).unwrap());
        }
    }

    #[test]
    fn q_table_round_trip_keeps_greedy_actions() {
        let k = kernel();
        let sched = Schedule {
            episodes: 200,
            ..Schedule::default()
        };
        let t = q_learning(&k, &params(), &sched, 5).unwrap();
        let a = Artifact::from_q_table(&t, &k, prov()).unwrap();
        let text = a.to_json().unwrap();
        assert_eq!(text, Artifact::from_q_table(&t, &k, prov()).unwrap().to_json().unwrap());
        let pol = Artifact::from_json(&text).unwrap().into_policy(&k).unwrap();
        let direct = GreedyQPolicy::new(&t, &k);
        let states = enumerate_reachable(
            &k,
            &params(),
            |_, pred| Ok(vec![SensingAction::new(pred.above(0.25))]),
            1000,
        )
        .unwrap();
        for s in states.iter().filter(|s| !s.is_terminal()) {
            assert_eq!(pol.action(s).unwrap(), direct.action(s).unwrap());
        }
    }

    #[test]
    fn factored_round_trip_is_exact() {
        let k = kernel();
        let h = AcHyper {
            episodes: 50,
            ..AcHyper::default()
        };
        let pp = actor_critic_factored(&k, &params(), &h, 1).unwrap();
        let a = Artifact::from_factored(&pp, &k, params(), prov()).unwrap();
        let back = Artifact::from_json(&a.to_json().unwrap()).unwrap();
        let restored: FactoredPolicyParams = serde_json::from_value(back.payload).unwrap();
        assert_eq!(restored, pp);
    }

    #[test]
    fn mismatched_kernel_is_refused() {
        let k = kernel();
        let t = exact_value_iteration(&k, &params(), &ExactOptions::default()).unwrap();
        let a = Artifact::from_value_table(&t, prov()).unwrap();
        let mut rows: Vec<Vec<f64>> = k.rows().to_vec();
        rows[0].swap(0, 1);
        let other = TransitionKernel::from_rows(k.grid(), rows).unwrap();
        assert!(matches!(a.into_policy(&other), Err(Error::FingerprintMismatch(_))));
    }
}

//! Linear advantage actor-critic with a factored Bernoulli policy, one sensor per cell.
//!
//! Cell `i` is switched on with probability `σ(z_i(s))`; the critic is linear,
//! `V(s) = w · φ(s)`, and both are trained from the one-step TD error. Two feature
//! maps are available:
//!
//! * `Tabular`: per-cell weights on a one-hot of `(last_seen, n)` plus one indicator
//!   per cell that appears in some action of the history. Critic on the same features.
//! * `Posterior`: weights shared by all cells, `z_i = θ_n + κ·P̄(i|s)` with a fixed
//!   slope `κ` and one learned offset per miss count, so the greedy action senses the
//!   cells whose posterior reaches `−θ_n/κ`. Training starts from `θ_n = −κc/r`,
//!   the Q_MDP threshold. The critic uses, per miss count, a bias, the relaxed value
//!   `Σ_y [max(P̄(y)r − c, 0) + γP̄(y)V̄(y)]` of the upper-bound table and the
//!   in-grid mass `Σ_y P̄(y)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::qmdp_upper_bound;
use crate::error::{Error, Result};
use crate::grid::{CellId, CellSet, Observation, RewardParams, SensingAction, TargetState};
use crate::kernel::TransitionKernel;
use crate::track::{predicted_distribution, step, Prediction, TrackState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    #[default]
    Tabular,
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    Tabular {
        cells: usize,
        t_max: usize,
    },
    Posterior {
        cells: usize,
        t_max: usize,
        slope: f64,
        /// Upper-bound values `V̄`, one per cell.
        bound: Vec<f64>,
    },
}

/// A state as seen by the actor and the critic.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// Miss count, capped at `t_max + 1`; `None` at the terminal state.
    pub n: Option<usize>,
    /// Active one-hot features (tabular map).
    pub active: Vec<usize>,
    /// Posterior over the next cell (posterior map).
    pub pred: Vec<f64>,
    /// Sparse critic features.
    pub critic: Vec<(usize, f64)>,
}

impl FeatureMap {
    pub fn cells(&self) -> usize {
        match self {
            FeatureMap::Tabular { cells, .. } | FeatureMap::Posterior { cells, .. } => *cells,
        }
    }

    pub fn t_max(&self) -> usize {
        match self {
            FeatureMap::Tabular { t_max, .. } | FeatureMap::Posterior { t_max, .. } => *t_max,
        }
    }

    /// State features of the tabular map: `cells·(t_max+2)` one-hot slots plus `cells`
    /// history indicators.
    pub fn tabular_dim(&self) -> usize {
        self.cells() * (self.t_max() + 2) + self.cells()
    }

    pub fn actor_dim(&self) -> usize {
        match self {
            FeatureMap::Tabular { cells, .. } => cells * self.tabular_dim(),
            FeatureMap::Posterior { t_max, .. } => t_max + 1,
        }
    }

    pub fn critic_dim(&self) -> usize {
        match self {
            FeatureMap::Tabular { .. } => self.tabular_dim(),
            FeatureMap::Posterior { t_max, .. } => 3 * (t_max + 2),
        }
    }

    /// Indices of the tabular features equal to 1.
    pub fn active(&self, s: &TrackState) -> Vec<usize> {
        let (cells, t_max) = (self.cells(), self.t_max());
        match s {
            TrackState::Terminal => Vec::new(),
            TrackState::Active { last_seen, history } => {
                let n = history.len().min(t_max + 1);
                let mut f = vec![last_seen.index() * (t_max + 2) + n];
                let seen = history.iter().fold(CellSet::EMPTY, |u, h| u.union(*h));
                let base = cells * (t_max + 2);
                f.extend(seen.iter().map(|c| base + c.index()));
                f
            }
        }
    }

    /// Posterior features from a known prediction of the active state `s`.
    fn encode_posterior(&self, s: &TrackState, pred: &Prediction, p: &RewardParams) -> Encoded {
        let (t_max, bound) = match self {
            FeatureMap::Posterior { t_max, bound, .. } => (*t_max, bound),
            FeatureMap::Tabular { .. } => unreachable!("called on the posterior map only"),
        };
        let n = s.n().map(|n| n.min(t_max + 1));
        let critic = match n {
            None => Vec::new(),
            Some(n) => {
                let mut relaxed = 0.0;
                let mut mass = 0.0;
                for (y, q) in pred.cells.iter().enumerate() {
                    relaxed += (q * p.r - p.c).max(0.0) + p.gamma * q * bound[y];
                    mass += q;
                }
                vec![(3 * n, 1.0), (3 * n + 1, relaxed), (3 * n + 2, mass)]
            }
        };
        Encoded {
            n,
            active: Vec::new(),
            pred: pred.cells.clone(),
            critic,
        }
    }

    pub fn encode(&self, s: &TrackState, kernel: &TransitionKernel, p: &RewardParams) -> Result<Encoded> {
        match self {
            FeatureMap::Tabular { t_max, .. } => {
                let active = self.active(s);
                Ok(Encoded {
                    n: s.n().map(|n| n.min(t_max + 1)),
                    critic: active.iter().map(|&f| (f, 1.0)).collect(),
                    active,
                    pred: Vec::new(),
                })
            }
            FeatureMap::Posterior { .. } => {
                if s.is_terminal() {
                    return Ok(Encoded {
                        n: None,
                        active: Vec::new(),
                        pred: Vec::new(),
                        critic: Vec::new(),
                    });
                }
                Ok(self.encode_posterior(s, &predicted_distribution(s, kernel)?, p))
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredPolicyParams {
    pub features: FeatureMap,
    /// Actor weights; row-major `cells × tabular_dim` for the tabular map, one offset
    /// per miss count for the posterior map.
    pub weights: Vec<f64>,
    pub critic: Vec<f64>,
}

impl FactoredPolicyParams {
    pub fn zeros(features: FeatureMap) -> Self {
        FactoredPolicyParams {
            weights: vec![0.0; features.actor_dim()],
            critic: vec![0.0; features.critic_dim()],
            features,
        }
    }

    pub fn logits(&self, e: &Encoded) -> Vec<f64> {
        match &self.features {
            FeatureMap::Tabular { cells, .. } => {
                let d = self.features.tabular_dim();
                (0..*cells)
                    .map(|i| e.active.iter().map(|&f| self.weights[i * d + f]).sum())
                    .collect()
            }
            FeatureMap::Posterior { slope, t_max, .. } => {
                let offset = self.weights[e.n.unwrap_or(0).min(*t_max)];
                e.pred.iter().map(|q| offset + slope * q).collect()
            }
        }
    }

    /// Per-cell activation probabilities.
    pub fn probs(&self, e: &Encoded) -> Vec<f64> {
        self.logits(e).into_iter().map(sigmoid).collect()
    }

    pub fn value(&self, e: &Encoded) -> f64 {
        e.critic.iter().map(|&(f, x)| self.critic[f] * x).sum()
    }

    pub fn log_prob(&self, e: &Encoded, a: CellSet) -> f64 {
        self.logits(e)
            .iter()
            .enumerate()
            .map(|(i, &zi)| {
                if a.contains(CellId(i as u16)) {
                    -softplus(-zi)
                } else {
                    -softplus(zi)
                }
            })
            .sum()
    }

    /// `∂ log π(a|s) / ∂weights`, dense and laid out like `weights`. Each cell
    /// contributes `(a_i − σ(z_i)) ∂z_i/∂weights`.
    pub fn score_gradient(&self, e: &Encoded, a: CellSet) -> Vec<f64> {
        let z = self.logits(e);
        let mut g = vec![0.0; self.weights.len()];
        for (i, &zi) in z.iter().enumerate() {
            // 1 − σ(z) written as σ(−z) keeps its digits when σ(z) is close to 1
            let coef = if a.contains(CellId(i as u16)) {
                sigmoid(-zi)
            } else {
                -sigmoid(zi)
            };
            match &self.features {
                FeatureMap::Tabular { .. } => {
                    let d = self.features.tabular_dim();
                    for &f in &e.active {
                        g[i * d + f] += coef;
                    }
                }
                FeatureMap::Posterior { t_max, .. } => g[e.n.unwrap_or(0).min(*t_max)] += coef,
            }
        }
        g
    }

    /// Cells with activation probability at least 1/2; the safe action when forced.
    pub fn greedy_action(
        &self,
        s: &TrackState,
        kernel: &TransitionKernel,
        p: &RewardParams,
    ) -> Result<SensingAction> {
        if s.is_terminal() {
            return Err(Error::TerminalState);
        }
        if s.is_forced(p) {
            return Ok(SensingAction::safe(kernel.grid()));
        }
        let e = self.features.encode(s, kernel, p)?;
        Ok(SensingAction::new(CellSet::from_cells(
            self.logits(&e)
                .iter()
                .enumerate()
                .filter(|(_, z)| **z >= 0.0)
                .map(|(i, _)| CellId(i as u16)),
        )))
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, e: &Encoded, rng: &mut R) -> CellSet {
        CellSet::from_cells(
            self.probs(e)
                .iter()
                .enumerate()
                .filter(|(_, q)| rng.random::<f64>() < **q)
                .map(|(i, _)| CellId(i as u16)),
        )
    }
}

fn default_actor_lr() -> f64 {
    0.05
}
fn default_critic_lr() -> f64 {
    0.1
}
fn default_ac_episodes() -> usize {
    20_000
}
fn default_ac_step_cap() -> usize {
    100_000
}
fn default_check_points() -> usize {
    100
}
fn default_slope() -> f64 {
    30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcHyper {
    #[serde(default)]
    pub features: FeatureKind,
    /// Actor step. The tabular map divides it by the number of active features.
    #[serde(default = "default_actor_lr")]
    pub actor_lr: f64,
    /// Normalized critic step: `w += lr·δ·φ/‖φ‖²`.
    #[serde(default = "default_critic_lr")]
    pub critic_lr: f64,
    #[serde(default = "default_ac_episodes")]
    pub episodes: usize,
    #[serde(default = "default_ac_step_cap")]
    pub step_cap: usize,
    /// Random points for the finite-difference check run before training.
    #[serde(default = "default_check_points")]
    pub check_points: usize,
    /// Logit slope `κ` of the posterior map.
    #[serde(default = "default_slope")]
    pub slope: f64,
}

impl Default for AcHyper {
    fn default() -> Self {
        AcHyper {
            features: FeatureKind::Tabular,
            actor_lr: default_actor_lr(),
            critic_lr: default_critic_lr(),
            episodes: default_ac_episodes(),
            step_cap: default_ac_step_cap(),
            check_points: default_check_points(),
            slope: default_slope(),
        }
    }
}

pub const GRADIENT_CHECK_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Initial parameters: zeros for the tabular map, the Q_MDP threshold for the
/// posterior map.
pub fn initial_params(
    kernel: &TransitionKernel,
    p: &RewardParams,
    hyper: &AcHyper,
) -> Result<FactoredPolicyParams> {
    let cells = kernel.cells();
    match hyper.features {
        FeatureKind::Tabular => Ok(FactoredPolicyParams::zeros(FeatureMap::Tabular {
            cells,
            t_max: p.t_max,
        })),
        FeatureKind::Posterior => {
            if !(hyper.slope.is_finite() && hyper.slope > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "slope must be positive, got {}",
                    hyper.slope
                )));
            }
            let bound = qmdp_upper_bound(kernel, p)?.v_star;
            let mut params = FactoredPolicyParams::zeros(FeatureMap::Posterior {
                cells,
                t_max: p.t_max,
                slope: hyper.slope,
                bound,
            });
            params.weights.fill(-hyper.slope * p.threshold());
            Ok(params)
        }
    }
}

/// Largest relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` between the analytic score
/// gradient and central finite differences with step [`FD_STEP`], over `points` random
/// (weights, state, action) triples on the given kernel's grid.
pub fn gradient_check(
    kernel: &TransitionKernel,
    p: &RewardParams,
    hyper: &AcHyper,
    points: usize,
    seed: u64,
) -> Result<f64> {
    let nc = kernel.cells();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut params = initial_params(kernel, p, hyper)?;
    let tabular = matches!(params.features, FeatureMap::Tabular { .. });
    for _ in 0..points {
        for w in &mut params.weights {
            *w = rng.random_range(-2.0..2.0);
        }
        let last = CellId(rng.random_range(0..nc) as u16);
        let n = rng.random_range(0..=p.t_max);
        let history = (0..n)
            .map(|_| CellSet(rng.random::<u128>()).intersection(CellSet::full(nc)))
            .collect();
        let s = TrackState::Active {
            last_seen: last,
            history,
        };
        let e = match params.features.encode(&s, kernel, p) {
            Ok(e) => e,
            // a random history can rule out every cell
            Err(Error::ImpossibleMiss { .. }) => continue,
            Err(err) => return Err(err),
        };
        let a = CellSet(rng.random::<u128>()).intersection(CellSet::full(nc));
        let g = params.score_gradient(&e, a);
        let (mut diff, mut norm_g, mut norm_fd) = (0.0f64, 0.0f64, 0.0f64);
        for idx in 0..params.weights.len() {
            if tabular && !e.active.contains(&(idx % params.features.tabular_dim())) {
                continue;
            }
            let orig = params.weights[idx];
            params.weights[idx] = orig + FD_STEP;
            let up = params.log_prob(&e, a);
            params.weights[idx] = orig - FD_STEP;
            let down = params.log_prob(&e, a);
            params.weights[idx] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            if !g[idx].is_finite() || !fd.is_finite() {
                return Err(Error::NonFiniteGradient(format!(
                    "weight {idx}: analytic {} finite difference {fd}",
                    g[idx]
                )));
            }
            diff += (g[idx] - fd).powi(2);
            norm_g += g[idx] * g[idx];
            norm_fd += fd * fd;
        }
        let scale = norm_g.sqrt().max(norm_fd.sqrt()).max(1e-12);
        worst = worst.max(diff.sqrt() / scale);
    }
    Ok(worst)
}

/// Trains the factored policy; deterministic given `seed`.
pub fn actor_critic_factored(
    kernel: &TransitionKernel,
    p: &RewardParams,
    hyper: &AcHyper,
    seed: u64,
) -> Result<FactoredPolicyParams> {
    p.validate()?;
    if hyper.check_points > 0 {
        let err = gradient_check(kernel, p, hyper, hyper.check_points, seed ^ 0x5eed)?;
        if err > GRADIENT_CHECK_TOL {
            return Err(Error::NonFiniteGradient(format!(
                "score gradient disagrees with finite differences (relative error {err:.3e})"
            )));
        }
    }
    let nc = kernel.cells();
    let mut params = initial_params(kernel, p, hyper)?;
    let posterior = matches!(params.features, FeatureMap::Posterior { .. });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let safe = SensingAction::safe(kernel.grid());
    for _ in 0..hyper.episodes {
        let x0 = CellId(rng.random_range(0..nc) as u16);
        let mut x = TargetState::Cell(x0);
        let mut s = TrackState::initial(x0);
        let mut pred = predicted_distribution(&s, kernel)?;
        let mut enc = params.features.encode(&s, kernel, p)?;
        for _ in 0..hyper.step_cap {
            let forced = s.is_forced(p);
            let a = if forced {
                safe
            } else {
                SensingAction::new(params.sample_action(&enc, &mut rng))
            };
            let x_next = kernel.sample_next(x, &mut rng);
            let out = step(&s, &a, x_next, p)?;
            let next_enc = if !posterior || out.next_state.is_terminal() {
                params.features.encode(&out.next_state, kernel, p)?
            } else {
                pred = if out.observation == Observation::Uninformative {
                    pred.after_miss(kernel, a.cells)?
                } else {
                    predicted_distribution(&out.next_state, kernel)?
                };
                params.features.encode_posterior(&out.next_state, &pred, p)
            };
            let v = params.value(&enc);
            let v_next = params.value(&next_enc);
            let delta = out.reward + p.gamma * v_next - v;
            if !delta.is_finite() {
                return Err(Error::NonFiniteGradient(format!(
                    "TD error {delta} at state {s:?}"
                )));
            }
            let norm: f64 = enc.critic.iter().map(|(_, x)| x * x).sum();
            if norm > 0.0 {
                for &(f, xf) in &enc.critic {
                    params.critic[f] += hyper.critic_lr * delta * xf / norm;
                }
            }
            if !forced {
                let lr = if posterior {
                    hyper.actor_lr
                } else {
                    hyper.actor_lr / enc.active.len() as f64
                };
                let g = params.score_gradient(&enc, a.cells);
                for (w, gi) in params.weights.iter_mut().zip(&g) {
                    *w += lr * delta * gi;
                }
            }
            x = x_next;
            s = out.next_state;
            enc = next_enc;
            if s.is_terminal() {
                break;
            }
        }
    }
    if params.weights.iter().chain(&params.critic).any(|w| !w.is_finite()) {
        return Err(Error::NonFiniteGradient("weights diverged".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn fixture() -> (TransitionKernel, RewardParams) {
        let g = Grid::new(3).unwrap();
        let k = TransitionKernel::from_cell_rows(g, vec![vec![0.1; 10]; 9]).unwrap();
        (k, RewardParams::new(1.0, 0.2, 1.8, 2, 1.0).unwrap())
    }

    fn tabular_encoding(fm: &FeatureMap, s: &TrackState) -> Encoded {
        Encoded {
            n: s.n(),
            active: fm.active(s),
            pred: Vec::new(),
            critic: Vec::new(),
        }
    }

    #[test]
    fn zero_weights_activate_half() {
        let fm = FeatureMap::Tabular { cells: 4, t_max: 1 };
        let params = FactoredPolicyParams::zeros(fm.clone());
        let e = tabular_encoding(&fm, &TrackState::initial(CellId(2)));
        assert!(params.probs(&e).iter().all(|q| *q == 0.5));
    }

    #[test]
    fn tabular_features() {
        let fm = FeatureMap::Tabular { cells: 4, t_max: 1 };
        assert_eq!(fm.tabular_dim(), 16);
        let s = TrackState::initial(CellId(1))
            .after_miss(CellSet::from_cells([CellId(0), CellId(3)]))
            .unwrap();
        assert_eq!(fm.active(&s), vec![4, 12, 15]);
    }

    #[test]
    fn analytic_score_matches_finite_differences() {
        let (k, p) = fixture();
        for features in [FeatureKind::Tabular, FeatureKind::Posterior] {
            let hyper = AcHyper {
                features,
                ..AcHyper::default()
            };
            let err = gradient_check(&k, &p, &hyper, 100, 4).unwrap();
            assert!(err <= GRADIENT_CHECK_TOL, "{features:?}: relative error {err}");
        }
    }

    #[test]
    fn log_prob_is_normalized() {
        let fm = FeatureMap::Tabular { cells: 3, t_max: 0 };
        let mut params = FactoredPolicyParams::zeros(fm.clone());
        for (i, w) in params.weights.iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin();
        }
        let e = tabular_encoding(&fm, &TrackState::initial(CellId(1)));
        let total: f64 = (0..8u128).map(|m| params.log_prob(&e, CellSet(m)).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_map_starts_at_the_threshold_rule() {
        let g = Grid::new(2).unwrap();
        let rows = vec![
            vec![0.5, 0.3, 0.1, 0.0, 0.1],
            vec![0.1, 0.1, 0.6, 0.1, 0.1],
            vec![0.25, 0.25, 0.25, 0.15, 0.1],
            vec![0.0, 0.0, 0.1, 0.8, 0.1],
        ];
        let k = TransitionKernel::from_cell_rows(g, rows).unwrap();
        let p = RewardParams::new(1.0, 0.25, 1.0, 1, 1.0).unwrap();
        let hyper = AcHyper {
            features: FeatureKind::Posterior,
            ..AcHyper::default()
        };
        let params = initial_params(&k, &p, &hyper).unwrap();
        for j in 0..4 {
            let s = TrackState::initial(CellId(j));
            let pred = predicted_distribution(&s, &k).unwrap();
            let a = params.greedy_action(&s, &k, &p).unwrap();
            let expected = CellSet::from_cells(
                (0..4).filter(|&i| pred.cells[i] >= 0.25).map(|i| CellId(i as u16)),
            );
            assert_eq!(a.cells, expected);
        }
    }
}

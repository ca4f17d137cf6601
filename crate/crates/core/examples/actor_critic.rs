//! Trains the factored actor-critic on a generated 6x6 kernel and compares the greedy
//! policy with Q_MDP on common random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trackmdp::config::sweep_hyper;
use trackmdp::eval::{aihtr, FactoredPolicy, QmdpPolicy};
use trackmdp::grid::RewardParams;
use trackmdp::kernel::{make_experiment_kernel, GeneratorSpec};
use trackmdp::solvers::actor_critic::{actor_critic_factored, gradient_check, AcHyper, FeatureKind};

fn main() -> trackmdp::error::Result<()> {
    let spec = GeneratorSpec {
        n: 6,
        z: 4,
        p_exit: 0.01,
        p_hot: 0.15,
    };
    let k = make_experiment_kernel(&spec, &mut ChaCha8Rng::seed_from_u64(2))?;
    let p = RewardParams::experiment(k.grid(), 0.18, 3)?;
    for kind in [FeatureKind::Tabular, FeatureKind::Posterior] {
        let h = AcHyper {
            features: kind,
            ..AcHyper::default()
        };
        println!("{kind:?} score gradient vs finite differences: {:.1e}", gradient_check(&k, &p, &h, 50, 1)?);
    }

    let hyper = AcHyper {
        episodes: 2000,
        ..sweep_hyper()
    };
    let params = actor_critic_factored(&k, &p, &hyper, 7)?;
    let learned = FactoredPolicy {
        params: &params,
        kernel: &k,
        reward: p,
    };
    let qmdp = QmdpPolicy { kernel: &k, params: p };
    for (name, e) in [
        ("actor-critic", aihtr(&learned, &k, &p, 200, 1, 100_000)?),
        ("q_mdp", aihtr(&qmdp, &k, &p, 200, 1, 100_000)?),
    ] {
        println!(
            "{name:<12} AIHTR {:>8.3} ± {:.3}  accuracy {:.4}",
            e.aihtr,
            e.stderr,
            e.hamming_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

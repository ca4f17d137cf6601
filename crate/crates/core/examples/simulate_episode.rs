//! Simulates one Q_MDP-controlled episode on a bundled 3x3 instance and prints its
//! steps as JSON lines, with the posterior MAP estimate on every miss.
//!
//! cargo run --example simulate_episode -- [start cell label] [seed]

use trackmdp::eval::{run_episode, write_episode_jsonl, EpisodeOptions, EstimateSource, QmdpPolicy};
use trackmdp::fixtures;
use trackmdp::grid::CellId;

fn main() -> trackmdp::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let start = args.next().and_then(|a| a.parse().ok()).unwrap_or(5);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let f = fixtures::by_name("3x3_a")?;
    let x0 = CellId::from_label(start).filter(|c| c.index() < f.kernel.cells()).unwrap_or(CellId(4));
    let policy = QmdpPolicy {
        kernel: &f.kernel,
        params: f.params,
    };
    let opts = EpisodeOptions {
        estimates: EstimateSource::Posterior,
        ..EpisodeOptions::default()
    };
    let log = run_episode(&policy, &f.kernel, &f.params, x0, seed, &opts)?;
    write_episode_jsonl(&log, std::io::stdout().lock())?;
    eprintln!(
        "{} steps, total reward {:.3}, detected {}/{} in-grid steps",
        log.length, log.total_reward, log.detected_steps, log.in_grid_steps
    );
    Ok(())
}

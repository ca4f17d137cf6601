//! Solves a bundled 3x3 instance exactly, saves the policy artifact, reloads it and
//! checks its Monte-Carlo value against the solved one.

use trackmdp::artifact::{Artifact, Provenance};
use trackmdp::eval::aihtr;
use trackmdp::fixtures;
use trackmdp::solvers::exact::{exact_value_iteration, ExactOptions};
use trackmdp::track::TrackState;
use trackmdp::grid::CellId;

fn main() -> trackmdp::error::Result<()> {
    let f = fixtures::by_name("3x3_b")?;
    let (k, p) = (&f.kernel, &f.params);
    let table = exact_value_iteration(k, p, &ExactOptions::default())?;
    println!(
        "{} decision states, {} policy iterations, residual {:.1e}",
        table.len(),
        table.iterations,
        table.residual
    );
    println!("average root value {:.6}", table.average_root_value());
    let root = TrackState::initial(CellId(0));
    println!("action at the root of cell 1: {:?}", table.action(&root));

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("policy_exact.json");
    let prov = Provenance {
        config_hash: String::new(),
        seed: 0,
        schedule: serde_json::Value::Null,
    };
    Artifact::from_value_table(&table, prov)?.save(&path)?;
    let policy = Artifact::load(&path)?.into_policy(k)?;
    let e = aihtr(&policy, k, p, 2000, 1, 100_000)?;
    println!("reloaded policy: AIHTR {:.4} ± {:.4}", e.aihtr, e.stderr);
    Ok(())
}

//! Trains tabular Q-learning on a bundled 3x3 instance at a few step budgets and
//! compares the greedy policy with the exact optimum.

use trackmdp::eval::aihtr;
use trackmdp::fixtures;
use trackmdp::solvers::exact::{exact_value_iteration, ExactOptions};
use trackmdp::solvers::qlearning::{q_learning, GreedyQPolicy, Schedule};

fn main() -> trackmdp::error::Result<()> {
    let f = fixtures::by_name("3x3_a")?;
    let (k, p) = (&f.kernel, &f.params);
    let optimum = exact_value_iteration(k, p, &ExactOptions::default())?.average_root_value();
    println!("exact average value {optimum:.4}");
    for steps in [20_000u64, 200_000, 2_000_000] {
        let schedule = Schedule {
            max_steps: Some(steps),
            episodes: usize::MAX,
            ..Schedule::default()
        };
        let table = q_learning(k, p, &schedule, 7)?;
        let policy = GreedyQPolicy::new(&table, k);
        let e = aihtr(&policy, k, p, 1000, 1, 100_000)?;
        println!(
            "{steps:>9} steps, {:>5} states: greedy AIHTR {:.4} ± {:.4} ({:+.1}%)",
            table.entries.len(),
            e.aihtr,
            e.stderr,
            100.0 * (e.aihtr - optimum) / optimum
        );
    }
    Ok(())
}

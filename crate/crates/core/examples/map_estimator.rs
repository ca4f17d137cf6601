//! Compares the two position estimates on a miss: the posterior argmax and the one
//! read off differences of optimal Q-values.

use trackmdp::estimator::{map_from_posterior, map_from_q, q_ratio};
use trackmdp::fixtures;
use trackmdp::grid::CellId;
use trackmdp::solvers::exact::{exact_value_iteration, Continuation, ExactOptions};
use trackmdp::track::predicted_distribution;

fn main() -> trackmdp::error::Result<()> {
    let f = fixtures::by_name("3x3_irregular")?;
    let (k, p) = (&f.kernel, &f.params);
    let table = exact_value_iteration(k, p, &ExactOptions::default())?;
    let mut shown = 0;
    for s in table.states() {
        let a = table.action(s).expect("stored state");
        let pred = predicted_distribution(s, k)?;
        if pred.support().difference(a.cells).is_empty() || shown == 4 {
            continue;
        }
        shown += 1;
        let post = map_from_posterior(s, &a, k)?;
        let q = map_from_q(&table, s, &a, Continuation::Localized)?;
        println!("state {:?}, optimal action {:?}", s.to_json(), a.cells.labels());
        for i in (0..k.cells()).filter(|&i| !a.contains(CellId(i as u16)) && pred.cells[i] > 0.0) {
            let r = q_ratio(&table, s, CellId(i as u16), Continuation::Localized)?;
            println!("  cell {}: posterior {:.6}, Q ratio {r:.6}", i + 1, pred.cells[i]);
        }
        println!("  MAP by posterior {}, by Q {}", post.cell.label(), q.cell.label());
    }
    Ok(())
}

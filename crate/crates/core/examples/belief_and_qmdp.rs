//! Filters a belief through a run of misses, shows the Q_MDP threshold action at each
//! step and the full-observability upper bound.

use trackmdp::belief::{belief_from_track_state, belief_update, qmdp_action, qmdp_upper_bound, Belief};
use trackmdp::fixtures;
use trackmdp::grid::{CellId, Observation};
use trackmdp::track::TrackState;

fn main() -> trackmdp::error::Result<()> {
    let f = fixtures::by_name("3x3_irregular")?;
    let (k, p) = (&f.kernel, &f.params);
    let x0 = CellId(4);
    let mut v = Belief::point(k.cells(), x0);
    let mut s = TrackState::initial(x0);
    println!("threshold c/r = {:.3}", p.threshold());
    for _ in 0..=p.t_max {
        let a = qmdp_action(&v, k, p);
        let pred: Vec<String> = v.predicted(k).iter().map(|q| format!("{q:.3}")).collect();
        println!("n={} predicted [{}] -> sense {:?}", v.n, pred.join(" "), a.cells.labels());
        // assume the target was not in the sensed cells
        v = belief_update(&v, &a, Observation::Uninformative, k)?.expect("still in the grid");
        s = s.after_miss(a.cells)?;
        let rec = belief_from_track_state(&s, k)?;
        let gap = v.probs.iter().zip(&rec.probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("     after the miss: mass {:.12}, gap to the replayed state {gap:.1e}", v.mass());
    }
    println!("next action is forced: {}", s.is_forced(p));

    let ub = qmdp_upper_bound(k, p)?;
    println!(
        "upper bound: mean {:.4}, residual {:.1e}, dense-solve gap {:.1e}",
        ub.mean(),
        ub.residual,
        ub.dense_gap
    );
    Ok(())
}

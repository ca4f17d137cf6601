//! A reduced (z, c) comparison on a 5x5 grid: learned factored policy, Q_MDP and the
//! upper bound. `trackmdp reproduce` runs the 10x10 version.

use trackmdp::config::{GridSide, Neighbours, Positive, SweepConfig};
use trackmdp::sweep::run_sweep;

fn main() -> trackmdp::error::Result<()> {
    let mut cfg = SweepConfig::default();
    cfg.n = GridSide(5);
    cfg.z_values = vec![Neighbours(3), Neighbours(5)];
    cfg.c_values = vec![Positive(0.18), Positive(0.22)];
    cfg.hyper.episodes = 1000;
    println!("{:>2} {:>5} {:>10} {:>10} {:>10} {:>8} {:>8}", "z", "c", "learned", "qmdp", "upper", "acc_l", "acc_q");
    let res = run_sweep(&cfg, 100, |pt| {
        println!(
            "{:>2} {:>5.2} {:>10.3} {:>10.3} {:>10.3} {:>8.4} {:>8.4}",
            pt.z,
            pt.c,
            pt.learned.aihtr,
            pt.qmdp.aihtr,
            pt.upper_bound.aihtr,
            pt.learned.hamming_accuracy.unwrap_or(f64::NAN),
            pt.qmdp.hamming_accuracy.unwrap_or(f64::NAN)
        );
    })?;
    println!(
        "reward wins {}/{}, accuracy wins {}/{}",
        res.reward_wins(),
        res.points.len(),
        res.accuracy_wins(),
        res.points.len()
    );
    for pt in &res.points {
        println!(
            "z={} c={:.2}: q_mdp senses at {} of {} reachable states",
            pt.z, pt.c, pt.census.nonempty, pt.census.reachable
        );
    }
    Ok(())
}

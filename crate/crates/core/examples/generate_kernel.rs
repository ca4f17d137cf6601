//! Generates a 10x10 experiment kernel and prints its shape.
//!
//! cargo run --example generate_kernel -- [z] [seed]

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trackmdp::kernel::{make_experiment_kernel, GeneratorSpec, TransitionKernel};

fn main() -> trackmdp::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let z = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);
    let spec = GeneratorSpec {
        n: 10,
        z,
        p_exit: 0.005,
        p_hot: 0.15,
    };
    let k = make_experiment_kernel(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;

    let mut hist = BTreeMap::new();
    for s in k.support_sizes() {
        *hist.entry(s).or_insert(0) += 1;
    }
    println!("10x10 kernel, z={z}, seed={seed}, fingerprint {}", k.fingerprint());
    for (size, rows) in hist {
        println!("  {rows:>3} rows with {size} nonzero entries (terminal included)");
    }
    let centre = k.grid().cell(5, 5);
    let row: Vec<String> = k
        .sparse_row(centre.index())
        .iter()
        .map(|(j, p)| format!("{}:{p:.4}", if *j as usize == k.cells() { "T".to_string() } else { (j + 1).to_string() }))
        .collect();
    println!("row of cell {}: {}", centre.label(), row.join(" "));

    let back = TransitionKernel::from_json(&k.to_json())?;
    println!("JSON round trip bit-exact: {}", back.rows() == k.rows());
    Ok(())
}

//! Finite-difference check of the whole network on an 8x8 input, over a
//! range of seeds.
//!
//! cargo run --release --example gradient_check -- [seeds]

use rescrnet::gradcheck::{check_network, NETWORK_CHECK_SIZE};

fn main() -> rescrnet::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(20, |a| a.parse().expect("seed count"));
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let r = check_network(seed, NETWORK_CHECK_SIZE)?;
        println!(
            "seed {seed:>2}: {} parameters, max rel err {:.3e} (analytic {:.6e}, numeric {:.6e})",
            r.checked, r.max_rel_error, r.analytic_at_worst, r.numeric_at_worst
        );
        worst = worst.max(r.max_rel_error as f64);
    }
    println!("max over seeds: {worst:.3e}");
    Ok(())
}

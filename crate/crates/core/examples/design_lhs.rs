//! Maximin Latin hypercube over the simulator's input box, plus standardization.
//!
//! cargo run --release --example design_lhs

use tprs_emu::design::{maximin_lhs, min_pairwise_distance, monte_carlo_sample, standardize};
use tprs_emu::sim::SpillConfig;

fn main() -> tprs_emu::Result<()> {
    let ranges = SpillConfig::default().scenario_ranges(2)?;
    for iterations in [1, 10, 100] {
        let x = maximin_lhs(20, &ranges, iterations, 7)?;
        let u = ranges.to_unit(&x)?;
        println!("{iterations:>3} candidates: min distance {:.4}", min_pairwise_distance(&u));
    }
    let mc = monte_carlo_sample(20, &ranges, 7)?;
    println!("monte carlo:    min distance {:.4}", min_pairwise_distance(&ranges.to_unit(&mc)?));

    let x = maximin_lhs(5, &ranges, 50, 1)?;
    println!("\nfirst rows (mass, diffusion):\n{x}");
    let (z, params) = standardize(&x, false)?;
    println!("column means {:?}\nstandardized:\n{z}", params.mean);
    Ok(())
}

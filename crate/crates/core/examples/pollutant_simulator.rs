//! Two-spill pollutant concentration on the default location/time lattice.
//!
//! cargo run --release --example pollutant_simulator

use nalgebra::DMatrix;
use tprs_emu::sim::{default_grid, generate_dataset, pollutant_concentration, SpillConfig};

fn main() -> tprs_emu::Result<()> {
    let cfg = SpillConfig::default();
    let x = [10.0, 0.07, 10.0, 0.07];
    println!("concentration at the spill site over time:");
    for t in [1.0, 10.0, 30.0, 31.0, 45.0, 60.0] {
        let here = pollutant_concentration(&x, &[0.0, t], &cfg)?;
        let second = pollutant_concentration(&x, &[cfg.l, t], &cfg)?;
        println!("  t={t:>5}: s=0 {here:8.4}  s=L {second:8.4}");
    }

    let grid = default_grid(20)?;
    let design = DMatrix::from_row_slice(3, 4, &[8.0, 0.03, 12.0, 0.1, 10.0, 0.07, 10.0, 0.07, 12.0, 0.1, 8.0, 0.03]);
    let data = generate_dataset(&design, 4, &grid, &cfg)?;
    for i in 0..data.n_runs() {
        let row = data.responses.row(i);
        println!("run {i}: max {:.3} mean {:.4}", row.max(), row.mean());
    }
    Ok(())
}

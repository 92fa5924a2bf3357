//! Full comparison pipeline: designs, simulation, validation search, test metrics.
//!
//! cargo run --release --example compare_emulators -- [scenario] [out_dir]

use tprs_emu::emulators::EmulatorKind;
use tprs_emu::harness::{run_compare, BasisCache, ExperimentConfig};

fn main() -> tprs_emu::Result<()> {
    let mut args = std::env::args().skip(1);
    let scenario = args.next().unwrap_or_else(|| "art4".into());
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("compare_example").display().to_string());
    let cfg = ExperimentConfig {
        scenario,
        emulators: vec![EmulatorKind::Stprs, EmulatorKind::Sgp],
        output_dir: Some(out.clone().into()),
        ..Default::default()
    };
    let report = run_compare(&cfg, &BasisCache::default())?;
    for r in &report.results {
        let s = &r.summary;
        println!(
            "{:>5} [{}]: RMSE median {:.4} (q1 {:.4}, q3 {:.4}) mean {:.4}, coverage {:.3}, {:.1}s",
            r.kind.name(),
            r.selected.label(),
            s.median,
            s.q1,
            s.q3,
            s.mean,
            r.coverage,
            r.seconds
        );
    }
    println!("tables written to {out}");
    Ok(())
}

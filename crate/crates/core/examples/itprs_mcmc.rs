//! Independent-coefficient TPRS emulator fitted by Metropolis sampling.
//!
//! cargo run --release --example itprs_mcmc

use tprs_emu::basis::tprs_basis;
use tprs_emu::emulators::{fit_independent, EmulatorKind, PredictOptions};
use tprs_emu::harness::{build_datasets, coverage, ExperimentConfig};
use tprs_emu::mcmc::{ChainConfig, McmcConfig, PriorConfig};

fn main() -> tprs_emu::Result<()> {
    let cfg = ExperimentConfig { scenario: "art2".into(), n_train: 30, grid_size: 20, lhs_iterations: 20, ..Default::default() };
    let data = build_datasets(&cfg)?;
    let basis = tprs_basis(&data.train.grid, 2, 2)?;
    let mcmc = McmcConfig { chain: ChainConfig { n_iter: 2000, burn_in: 500, seed: 1, ..Default::default() }, ..Default::default() };
    let (model, run) = fit_independent(&data.train, &basis, EmulatorKind::Itprs, &PriorConfig::independent_default(), &mcmc)?;
    for (name, rate) in run.samples.block_names.iter().zip(&run.samples.acceptance) {
        println!("{name:>10}: acceptance {rate:.2}");
    }
    println!("max refresh drift {:.1e}, fallbacks {}", run.max_refresh_drift, run.fallbacks);
    println!("posterior mean tau {:?}", run.samples.mean_tau());

    let preds = model.predict_batch(&data.test.inputs, &PredictOptions { n_samples: 200, ..Default::default() })?;
    let truth = model.common().standardized_truth(&data.test)?;
    println!("+/-3 sd coverage on test runs: {:.3}", coverage(&preds, &truth, 3.0, false)?);
    Ok(())
}

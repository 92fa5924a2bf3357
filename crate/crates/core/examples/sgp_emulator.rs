//! Separable space-input GP trained on a sub-grid and predicted on the full grid.
//!
//! cargo run --release --example sgp_emulator

use tprs_emu::emulators::{estimate_sigma2, PredictOptions, SgpTrainer, SGP_DEFAULT_CAP};
use tprs_emu::harness::{build_datasets, ExperimentConfig};
use tprs_emu::linalg::{CorrelationParams, SpatialCorrelationParams};
use tprs_emu::mcmc::PriorConfig;
use tprs_emu::emulators::EmulatorModel;

fn main() -> tprs_emu::Result<()> {
    let cfg = ExperimentConfig { scenario: "art2".into(), grid_size: 30, lhs_iterations: 20, ..Default::default() };
    let data = build_datasets(&cfg)?;
    let sub = data.train.grid.nested_lattice_indices(&[10, 10])?;
    let trainer = SgpTrainer::new(&data.train, Some(&sub), &PriorConfig::plug_in_default(), SGP_DEFAULT_CAP)?;
    for nu in [0.1, 0.3, 0.5, 0.7] {
        let model = EmulatorModel::Sgp(trainer.fit(&CorrelationParams::with_default_nugget(vec![0.5, 0.5])?, &SpatialCorrelationParams::new(vec![nu, nu])?)?);
        let mut m = model.clone();
        let mse = estimate_sigma2(&mut m, &data.validation)?;
        println!("nu={nu}: validation RMSE {:.4}", mse.sqrt());
    }
    let mut model = EmulatorModel::Sgp(trainer.fit(&CorrelationParams::with_default_nugget(vec![0.5, 0.5])?, &SpatialCorrelationParams::new(vec![0.3, 0.3])?)?);
    estimate_sigma2(&mut model, &data.validation)?;
    let x: Vec<f64> = data.test.inputs.row(0).iter().copied().collect();
    let pred = model.predict(&x, &PredictOptions::default())?;
    println!("trained on {} of {} locations; predicted {} locations, max sd {:.4}", sub.len(), data.train.grid_len(), pred.mean.len(), pred.sd.max());
    Ok(())
}

//! Separable TPRS emulator on the 4-input scenario: fit, estimate σ², predict, save.
//!
//! cargo run --release --example stprs_emulator

use tprs_emu::basis::tprs_basis;
use tprs_emu::emulators::{estimate_sigma2, fit_stprs, EmulatorModel, PredictOptions};
use tprs_emu::harness::{build_datasets, holdout_rmse, ExperimentConfig};
use tprs_emu::linalg::{CorrelationParams, SpatialCorrelationParams};
use tprs_emu::mcmc::PriorConfig;

fn main() -> tprs_emu::Result<()> {
    let cfg = ExperimentConfig { grid_size: 25, lhs_iterations: 20, ..Default::default() };
    let data = build_datasets(&cfg)?;
    let priors = PriorConfig::plug_in_default();
    let nu = SpatialCorrelationParams::new(vec![0.05, 0.05])?;
    let theta = CorrelationParams::with_default_nugget(vec![0.7; 4])?;
    for m in [7, 17, 37] {
        let basis = tprs_basis(&data.train.grid, m, 2)?;
        let model = fit_stprs(&data.train, &basis, &theta, &nu, &priors)?;
        println!("p={:>2}: validation RMSE {:.4}", basis.len(), holdout_rmse(&model, &data.validation)?);
    }

    let basis = tprs_basis(&data.train.grid, 37, 2)?;
    let mut model = fit_stprs(&data.train, &basis, &theta, &nu, &priors)?;
    let s2 = estimate_sigma2(&mut model, &data.validation)?;
    if let EmulatorModel::Stprs(m) = &model {
        println!("tau_hat {:.4}, sigma2 {s2:.2e}", m.tau_hat);
    }
    let x = data.test.inputs.row(0).iter().copied().collect::<Vec<_>>();
    let pred = model.predict(&x, &PredictOptions::default())?;
    let truth = data.test.responses.row(0);
    let j = pred.mean.imax();
    println!("test run 0, peak location {j}: predicted {:.3} +/- {:.3}, truth {:.3}", pred.mean[j], pred.sd[j], truth[j]);

    let path = std::env::temp_dir().join("stprs_example.json");
    model.save(&path)?;
    let back = EmulatorModel::load(&path)?;
    assert_eq!(back.predict(&x, &PredictOptions::default())?.mean, pred.mean);
    println!("saved to {}", path.display());
    Ok(())
}

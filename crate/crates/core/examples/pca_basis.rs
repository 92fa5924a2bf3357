//! Principal component basis of simulator output and its truncation error.
//!
//! cargo run --release --example pca_basis

use tprs_emu::basis::{pca_basis, reconstruct};
use tprs_emu::harness::{build_datasets, ExperimentConfig};
use tprs_emu::emulators::ModelCommon;

fn main() -> tprs_emu::Result<()> {
    let cfg = ExperimentConfig { scenario: "art2".into(), n_train: 40, grid_size: 30, lhs_iterations: 20, ..Default::default() };
    let data = build_datasets(&cfg)?.train;
    let (_, z) = ModelCommon::from_data(&data)?;
    let y = z.transpose();
    for p in [1, 2, 3, 5, 8, 13] {
        let (basis, coeffs) = pca_basis(&y, p)?;
        let mut sse = 0.0;
        for i in 0..y.ncols() {
            let fit = reconstruct(&basis, &coeffs.column(i).into_owned())?;
            sse += (fit - y.column(i)).norm_squared();
        }
        let norms: Vec<String> = (0..p.min(4)).map(|k| format!("{:.2}", basis.vectors.column(k).norm())).collect();
        println!("p={p:>2}: truncation RMSE {:.4}, leading norms [{}]", (sse / y.len() as f64).sqrt(), norms.join(", "));
    }
    Ok(())
}

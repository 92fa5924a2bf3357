//! Thin-plate regression spline basis on a 2-d lattice and its V scale matrix.
//!
//! cargo run --release --example tprs_basis

use tprs_emu::basis::{tprs_scale_matrix, OutputGrid, Projector, TprsEigensystem};
use tprs_emu::linalg::SpatialCorrelationParams;
use nalgebra::DVector;

fn main() -> tprs_emu::Result<()> {
    let grid = OutputGrid::lattice(&[15, 15], &[(0.0, 3.0), (0.0, 60.0)])?;
    let eig = TprsEigensystem::new(&grid, 2)?;
    let s = grid.unit_locations();
    let field = DVector::from_fn(grid.len(), |j, _| (4.0 * s[(j, 0)]).sin() * (-2.0 * s[(j, 1)]).exp());
    for m in [2, 5, 10, 20, 40] {
        let basis = eig.basis(m)?;
        let aux = basis.tprs.as_ref().expect("tprs basis");
        let constraint = (aux.t.transpose() * &aux.u * &aux.z).amax();
        let proj = Projector::new(&basis)?;
        let fit = &basis.vectors * proj.project(&field)?;
        println!(
            "m={m:>2} p={:>2}: |T'UZ| {constraint:.1e}, RMSE {:.2e}",
            basis.len(),
            ((fit - &field).norm_squared() / field.len() as f64).sqrt()
        );
    }
    let basis = eig.basis(5)?;
    let v = tprs_scale_matrix(&basis, &grid, &SpatialCorrelationParams::new(vec![0.05, 0.05])?)?;
    println!("\nV diagonal for p=8: {:.3}", v.diagonal().transpose());
    Ok(())
}

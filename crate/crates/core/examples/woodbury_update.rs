//! Rank-revealing block update of a cached inverse versus dense re-inversion.
//!
//! cargo run --release --example woodbury_update

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tprs_emu::linalg::{correlation_matrix, BlockUpdate, CorrelationParams};

fn main() -> tprs_emu::Result<()> {
    let (n, p) = (60, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>());
    let block = |theta: f64| correlation_matrix(&x, &CorrelationParams::new(vec![theta; 3], 1e-6).unwrap()).unwrap();

    let mut d = DMatrix::identity(n * p, n * p) * 0.5;
    for k in 0..p {
        let mut v = d.view_mut((k * n, k * n), (n, n));
        v += block(0.5);
    }
    let mut inv = d.clone().try_inverse().expect("invertible");

    let t = Instant::now();
    for step in 0..20 {
        let k = step % p;
        let theta = rng.random_range(0.2..0.8);
        let old = d.view((k * n, k * n), (n, n)).into_owned();
        let delta = block(theta) + DMatrix::identity(n, n) * 0.5 - old;
        let upd = BlockUpdate::prepare(&inv, &delta, k)?;
        upd.apply(&mut inv);
        let mut v = d.view_mut((k * n, k * n), (n, n));
        v += &delta;
    }
    let fast = t.elapsed();
    let t = Instant::now();
    let dense = d.clone().try_inverse().expect("invertible");
    let one_dense = t.elapsed();
    println!("block update: {:?} each; dense inverse: {one_dense:?}", fast / 20);
    println!("max |updated - dense| = {:.2e}", (inv - dense).amax());
    Ok(())
}

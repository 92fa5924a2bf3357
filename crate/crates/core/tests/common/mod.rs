//! Property suites shared by `properties.rs` and `acceptance.rs`.
//!
//! Each suite runs 1000 randomized cases from a fixed seed and returns the
//! first failure as a message.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tprs_emu::basis::{pca_basis, reconstruct, tprs_basis, tprs_eta, BasisKind, BasisSet, OutputGrid, Projector};
use tprs_emu::design::{maximin_lhs_unit, standardize, InputRanges};
use tprs_emu::emulators::{fit_sgp, fit_stprs, EmulatorModel, PredictOptions, StprsTrainer};
use tprs_emu::linalg::{
    correlation_matrix, kronecker_product, sqexp_correlation, woodbury_block_update, CorrelationParams,
    SpatialCorrelationParams,
};
use tprs_emu::mcmc::{
    itprs_log_posterior, metropolis_chain, run_itprs_chain, ChainConfig, ChainState, FnTarget, ItprsProblem, McmcConfig,
    PriorConfig, UpdateMode,
};
use tprs_emu::sim::{pollutant_concentration, SimDataset, SpillConfig};

pub const CASES: u32 = 1000;

pub fn runner(seed: u8) -> TestRunner {
    let cfg = Config { cases: CASES, failure_persistence: None, max_global_rejects: 100_000, ..Config::default() };
    TestRunner::new_with_rng(cfg, TestRng::from_seed(RngAlgorithm::ChaCha, &[seed; 32]))
}

fn run<S: Strategy>(seed: u8, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner(seed).run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

/// Smooth toy field on a small lattice with inputs from a maximin design.
pub fn toy_dataset(n: usize, d: usize, side: usize, seed: u64) -> SimDataset {
    let grid = OutputGrid::lattice(&[side, side], &[(0.0, 1.0), (0.0, 1.0)]).unwrap();
    let x = maximin_lhs_unit(n, d, 3, seed).unwrap();
    let s = grid.unit_locations();
    let y = DMatrix::from_fn(n, grid.len(), |i, j| {
        let xs: f64 = x.row(i).iter().enumerate().map(|(k, v)| v * (k + 1) as f64).sum();
        (2.0 * xs + 3.0 * s[(j, 0)]).sin() * (1.0 + x[(i, 0)] * s[(j, 1)]) + 0.2 * (4.0 * s[(j, 1)] * x[(i, d - 1)]).cos()
    });
    SimDataset::new(x, grid, y, InputRanges::unit(d)).unwrap()
}

pub fn sqexp_symmetry() -> Result<(), String> {
    let strat = (1usize..5).prop_flat_map(|d| {
        (
            prop::collection::vec(-1.0f64..2.0, d),
            prop::collection::vec(-1.0f64..2.0, d),
            prop::collection::vec(0.001f64..0.999, d),
            0.0f64..1e-2,
        )
    });
    run(1, strat, |(x, y, theta, nugget)| {
        let p = CorrelationParams::new(theta, nugget).unwrap();
        let a = sqexp_correlation(&x, &y, &p).unwrap();
        let b = sqexp_correlation(&y, &x, &p).unwrap();
        ensure(a == b, || format!("{a} != {b}"))
    })
}

pub fn correlation_cholesky() -> Result<(), String> {
    let strat = (2usize..=200, 1usize..=4, any::<u64>(), 0.001f64..0.999, 1e-12f64..1e-6);
    run(2, strat, |(n, d, seed, theta, nugget)| {
        let x = maximin_lhs_unit(n, d, 2, seed).unwrap();
        let w = correlation_matrix(&x, &CorrelationParams::new(vec![theta; d], nugget).unwrap()).unwrap();
        ensure(w.cholesky().is_some(), || format!("n={n} d={d} theta={theta} nugget={nugget:e}"))
    })
}

pub fn woodbury_composition() -> Result<(), String> {
    let strat = (1usize..=10, 1usize..=10, 0usize..=100, any::<u64>()).prop_filter("np <= 100", |(n, p, _, _)| n * p <= 100);
    run(3, strat, |(n, p, k, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let block = |rng: &mut ChaCha8Rng| {
            let th = vec![rng.random_range(0.05..0.9), rng.random_range(0.05..0.9)];
            let tau = rng.random_range(0.5..2.0);
            correlation_matrix(&inputs, &CorrelationParams::new(th, 1e-3).unwrap()).unwrap() * tau
        };
        let b = random_matrix(&mut rng, p + 3, p);
        let g_inv = (b.transpose() * &b).try_inverse().unwrap();
        let s2 = rng.random_range(0.2..1.0);
        let mut d = DMatrix::zeros(n * p, n * p);
        let mut blocks = Vec::new();
        for a in 0..p {
            for c in 0..p {
                for i in 0..n {
                    d[(a * n + i, c * n + i)] = s2 * g_inv[(a, c)];
                }
            }
            let w = block(&mut rng);
            let mut v = d.view_mut((a * n, a * n), (n, n));
            v += &w;
            blocks.push(w);
        }
        let mut inv = d.clone().try_inverse().unwrap();
        for _ in 0..k {
            let j = rng.random_range(0..p);
            let w = block(&mut rng);
            let delta = &w - &blocks[j];
            inv = woodbury_block_update(&inv, &delta, j).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let mut v = d.view_mut((j * n, j * n), (n, n));
            v += &delta;
            blocks[j] = w;
        }
        let dense = d.try_inverse().unwrap();
        let err = (&inv - &dense).amax();
        ensure(err < 1e-8, || format!("n={n} p={p} k={k} err={err:e}"))
    })
}

pub fn kronecker_identities() -> Result<(), String> {
    let strat = (1usize..5, 1usize..5, 1usize..5, 1usize..5, 1usize..5, 1usize..5, any::<u64>());
    run(4, strat, |(ar, ac, br, bc, cc, dc, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, ar, ac);
        let b = random_matrix(&mut rng, br, bc);
        let c = random_matrix(&mut rng, ac, cc);
        let dm = random_matrix(&mut rng, bc, dc);
        let t = kronecker_product(&a, &b).transpose();
        ensure(t == kronecker_product(&a.transpose(), &b.transpose()), || "transpose identity".into())?;
        let lhs = kronecker_product(&a, &b) * kronecker_product(&c, &dm);
        let rhs = kronecker_product(&(&a * &c), &(&b * &dm));
        let err = (lhs - rhs).amax();
        ensure(err < 1e-13, || format!("mixed product err {err:e}"))
    })
}

pub fn tprs_constraint() -> Result<(), String> {
    let strat = (1usize..=2, 6usize..=30, any::<u64>(), 0.0f64..1.0);
    run(5, strat, |(q, r, seed, frac)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locs = DMatrix::from_fn(r, q, |_, _| rng.random::<f64>());
        let grid = OutputGrid::new(locs, None, None).unwrap();
        let c = if q == 1 { 2 } else { 3 };
        let m = 1 + ((r - c - 1) as f64 * frac) as usize;
        let basis = tprs_basis(&grid, m, 2).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let aux = basis.tprs.as_ref().unwrap();
        let v = (aux.t.transpose() * &aux.u * &aux.z).amax();
        ensure(v < 1e-10, || format!("q={q} r={r} m={m}: {v:e}"))
    })
}

pub fn pca_ordering() -> Result<(), String> {
    let strat = (2usize..20, 2usize..15, any::<u64>());
    run(6, strat, |(r, n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random_matrix(&mut rng, r, n);
        let (basis, _) = pca_basis(&y, r.min(n)).unwrap();
        let norms: Vec<f64> = (0..basis.len()).map(|k| basis.vectors.column(k).norm()).collect();
        ensure(norms.windows(2).all(|w| w[0] >= w[1] - 1e-12), || format!("{norms:?}"))
    })
}

pub fn projection_idempotent() -> Result<(), String> {
    let strat = (3usize..30, 1usize..10, any::<u64>()).prop_filter("p <= r", |(r, p, _)| p <= r);
    run(7, strat, |(r, p, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = BasisSet { kind: BasisKind::Pc, vectors: random_matrix(&mut rng, r, p), m: p, tprs: None };
        let y = DVector::from_fn(r, |_, _| rng.random::<f64>() * 10.0 - 5.0);
        let proj = Projector::new(&basis).unwrap();
        let once = reconstruct(&basis, &proj.project(&y).unwrap()).unwrap();
        let twice = reconstruct(&basis, &proj.project(&once).unwrap()).unwrap();
        let err = (&once - &twice).amax();
        ensure(err < 1e-8, || format!("r={r} p={p} err={err:e}"))
    })
}

pub fn eta_continuity() -> Result<(), String> {
    let strat = (1usize..=4, 1usize..=4, 1e-14f64..1e-8).prop_filter("2l > q", |(l, q, _)| 2 * l > *q);
    run(8, strat, |(l, q, t)| {
        let at0 = tprs_eta(0.0, l, q).unwrap();
        let near = tprs_eta(t, l, q).unwrap();
        ensure(at0 == 0.0 && near.abs() < 1e-6, || format!("l={l} q={q} eta({t:e})={near:e}"))
    })
}

pub fn lhs_strata() -> Result<(), String> {
    let strat = (2usize..50, 1usize..6, any::<u64>());
    run(9, strat, |(n, d, seed)| {
        let x = maximin_lhs_unit(n, d, 2, seed).unwrap();
        for j in 0..d {
            let mut strata: Vec<usize> = x.column(j).iter().map(|v| (v * n as f64).floor() as usize).collect();
            strata.sort_unstable();
            ensure(strata == (0..n).collect::<Vec<_>>(), || format!("n={n} d={d} column {j}"))?;
        }
        Ok(())
    })
}

pub fn standardize_moments() -> Result<(), String> {
    let strat = (2usize..20, 1usize..10, any::<u64>());
    run(10, strat, |(n, r, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<f64> = (0..r).map(|_| rng.random_range(-10.0..10.0)).collect();
        let scales: Vec<f64> = (0..r).map(|_| rng.random_range(0.1..10.0)).collect();
        let y = DMatrix::from_fn(n, r, |_, j| centers[j] + scales[j] * (rng.random::<f64>() - 0.5));
        let (z, params) = standardize(&y, false).unwrap();
        for j in (0..r).filter(|&j| !params.degenerate[j]) {
            let c = z.column(j);
            let m = c.sum() / n as f64;
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
            ensure(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-10, || format!("column {j}: mean {m:e} sd {sd}"))?;
        }
        Ok(())
    })
}

pub fn chain_determinism() -> Result<(), String> {
    let strat = (any::<u64>(), -2.0f64..2.0, 0.05f64..3.0, 1usize..200);
    run(11, strat, |(seed, init, scale, k)| {
        let cfg = ChainConfig { n_iter: k, burn_in: 0, seed, adapt: true, adapt_every: 50 };
        let go = || {
            let mut t = FnTarget::new(2, |z: &[f64]| -0.5 * (z[0] * z[0] + 4.0 * z[1] * z[1]));
            metropolis_chain(&mut t, &[init, -init], &[scale, scale], &cfg).unwrap()
        };
        let (a, b) = (go(), go());
        ensure(a.trace == b.trace && a.decisions == b.decisions, || format!("seed {seed}"))
    })
}

fn toy_problem(n: usize, p: usize, seed: u64) -> ItprsProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
    let b = random_matrix(&mut rng, p + 4, p);
    let beta = DVector::from_fn(n * p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    ItprsProblem::new(beta, b.transpose() * &b, inputs, 0.5, p + 4, PriorConfig::independent_default()).unwrap()
}

pub fn refresh_drift() -> Result<(), String> {
    let strat = (3usize..=6, 2usize..=3, any::<u64>());
    run(12, strat, |(n, p, seed)| {
        let problem = toy_problem(n, p, seed);
        let cfg = McmcConfig {
            chain: ChainConfig { n_iter: 120, burn_in: 20, seed, ..Default::default() },
            mode: UpdateMode::Woodbury,
            refresh_every: 10,
            ..Default::default()
        };
        let run = run_itprs_chain(&problem, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        ensure(run.max_refresh_drift < 1e-8, || format!("n={n} p={p} drift {:e}", run.max_refresh_drift))
    })
}

pub fn itprs_single_coefficient() -> Result<(), String> {
    let strat = (2usize..=6, 1usize..=10, any::<u64>(), 0.1f64..5.0, 0.1f64..3.0, 0.05f64..0.95);
    run(13, strat, |(n, r, seed, s2inv, tau, theta)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let g = rng.random_range(0.5..3.0);
        let beta = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let problem = ItprsProblem::new(beta.clone(), DMatrix::from_element(1, 1, g), inputs.clone(), 0.3, r, PriorConfig::independent_default()).unwrap();
        let state = ChainState { sigma2_inv: s2inv, tau: vec![tau], theta: DMatrix::from_element(1, 1, theta), nugget: 1e-6 };
        let lhs = itprs_log_posterior(&state, &problem) - problem.log_prior(&state, false);
        // single-output GP on the coefficient series with white noise σ²/g
        let w = correlation_matrix(&inputs, &CorrelationParams::new(vec![theta], 1e-6).unwrap()).unwrap();
        let cov = w * tau + DMatrix::identity(n, n) * (1.0 / (s2inv * g));
        let chol = cov.cholesky().unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let rhs = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + beta.dot(&chol.solve(&beta)));
        ensure((lhs - rhs).abs() < 1e-8, || format!("{lhs} vs {rhs}"))
    })
}

pub fn plug_in_variance_nonnegative() -> Result<(), String> {
    let data = toy_dataset(12, 2, 5, 3);
    let basis = tprs_basis(&data.grid, 6, 2).unwrap();
    let theta = CorrelationParams::new(vec![0.4, 0.6], 1e-6).unwrap();
    let nu = SpatialCorrelationParams::new(vec![0.2, 0.3]).unwrap();
    let pr = PriorConfig::plug_in_default();
    let models = [
        fit_stprs(&data, &basis, &theta, &nu, &pr).unwrap(),
        fit_sgp(&data, &theta, &nu, &pr, Some(&[0, 2, 4, 10, 12, 14, 20, 22, 24])).unwrap(),
    ];
    let strat = (-0.5f64..1.5, -0.5f64..1.5);
    run(14, strat, |(a, b)| {
        for m in &models {
            let p = m.predict(&[a, b], &PredictOptions::default()).unwrap();
            ensure(p.model_sd.iter().chain(p.sd.iter()).all(|v| v.is_finite() && *v >= 0.0), || format!("{} at ({a}, {b})", m.kind()))?;
        }
        Ok(())
    })
}

pub fn stprs_training_degenerate() -> Result<(), String> {
    let strat = (4usize..=9, 1usize..=3, any::<u64>(), 0.05f64..0.6, 1usize..=6);
    run(15, strat, |(n, d, seed, theta, m)| {
        let data = toy_dataset(n, d, 4, seed);
        let basis = tprs_basis(&data.grid, m, 2).unwrap();
        let nu = SpatialCorrelationParams::new(vec![0.2, 0.2]).unwrap();
        let trainer = StprsTrainer::new(&data, &basis, &nu, &PriorConfig::plug_in_default()).unwrap();
        let model = trainer.fit(&CorrelationParams::new(vec![theta; d], 0.0).unwrap()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let i = (seed % n as u64) as usize;
        let u: Vec<f64> = model.common.inputs.row(i).iter().copied().collect();
        let (mean, cov) = model.coefficient_moments(&u).unwrap();
        let err = (mean - trainer.coefficients().row(i).transpose()).amax();
        let var = cov.diagonal().amax();
        ensure(var < 1e-8 * model.tau_hat && err < 1e-6, || format!("n={n} d={d} theta={theta}: var {var:e} err {err:e}"))
    })
}

pub fn sgp_separability() -> Result<(), String> {
    let data = toy_dataset(10, 2, 6, 4);
    let theta = CorrelationParams::new(vec![0.3, 0.5], 1e-6).unwrap();
    let nu = SpatialCorrelationParams::new(vec![0.3, 0.4]).unwrap();
    let sub: Vec<usize> = (0..36).step_by(3).collect();
    let EmulatorModel::Sgp(model) = fit_sgp(&data, &theta, &nu, &PriorConfig::plug_in_default(), Some(&sub)).unwrap() else {
        unreachable!()
    };
    let strat = (0.0f64..1.0, 0.0f64..1.0, 0usize..36);
    run(16, strat, |(a, b, j)| {
        let u = DMatrix::from_row_slice(1, 2, &[a, b]);
        let (all, _) = model.predict_unit(&u).unwrap();
        let (one, _) = model.predict_locations(&u, &[j]).unwrap();
        let err = (all[(j, 0)] - one[(0, 0)]).abs();
        ensure(err < 1e-10, || format!("location {j}: {err:e}"))
    })
}

pub fn simulator_mass_linearity() -> Result<(), String> {
    let cfg = SpillConfig::default();
    let strat = (7.0f64..13.0, 0.02f64..0.12, 7.0f64..13.0, 0.02f64..0.12, -1.0f64..4.0, 0.01f64..61.0);
    run(17, strat, |(x1, x2, x3, x4, s1, s2)| {
        let c = pollutant_concentration(&[x1, x2, x3, x4], &[s1, s2], &cfg).unwrap();
        ensure(c >= 0.0 && c.is_finite(), || format!("negative {c}"))?;
        let bigger = pollutant_concentration(&[x1 * 1.5, x2, x3, x4], &[s1, s2], &cfg).unwrap();
        ensure(bigger >= c, || "not increasing in x1".into())?;
        if s2 <= cfg.t_spill {
            let doubled = pollutant_concentration(&[2.0 * x1, x2, x3, x4], &[s1, s2], &cfg).unwrap();
            ensure((doubled - 2.0 * c).abs() <= 1e-12 * c, || format!("doubling x1: {doubled} vs {}", 2.0 * c))?;
        }
        Ok(())
    })
}

pub fn simulator_onset_continuity() -> Result<(), String> {
    let cfg = SpillConfig::default();
    let strat = (7.0f64..13.0, 0.02f64..0.12, 7.0f64..13.0, 0.02f64..0.12, prop::bool::ANY);
    run(18, strat, |(x1, x2, x3, x4, above)| {
        let s1 = if above { cfg.l + 0.5 } else { cfg.l - 0.5 };
        let s = [s1, cfg.t_spill + 1e-6];
        let with = pollutant_concentration(&[x1, x2, x3, x4], &s, &cfg).unwrap();
        let first_only = SpillConfig { t_spill: f64::MAX, ..cfg.clone() };
        let first = pollutant_concentration(&[x1, x2, x3, x4], &s, &first_only).unwrap();
        let jump = with - first;
        ensure(jump.abs() < 1e-10, || format!("second spill contributes {jump:e} at s1={s1}"))
    })
}

/// Every property suite with a display name.
pub fn suites() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("sqexp correlation is symmetric", sqexp_symmetry),
        ("correlation matrices with nugget >= 1e-12 factor (n <= 200)", correlation_cholesky),
        ("composed block updates match dense inverse (np <= 100, k <= 100)", woodbury_composition),
        ("Kronecker transpose and mixed-product identities", kronecker_identities),
        ("TPRS bases satisfy T'UZ = 0", tprs_constraint),
        ("PC basis norms are non-increasing", pca_ordering),
        ("project then reconstruct is idempotent", projection_idempotent),
        ("thin-plate eta is continuous at 0", eta_continuity),
        ("LHS columns are permutations of strata", lhs_strata),
        ("standardized columns have mean 0 and sd 1", standardize_moments),
        ("chain is a deterministic function of seed, init and scales", chain_determinism),
        ("cached inverse matches fresh inverse at refresh", refresh_drift),
        ("single-coefficient iTPRS density equals single-output GP", itprs_single_coefficient),
        ("sTPRS and sGP predictive sd is non-negative", plug_in_variance_nonnegative),
        ("sTPRS degenerates at training inputs (nugget 0)", stprs_training_degenerate),
        ("sGP joint prediction equals per-location prediction", sgp_separability),
        ("concentration is non-negative and linear in the first mass", simulator_mass_linearity),
        ("second spill switches on continuously away from L", simulator_onset_continuity),
    ]
}

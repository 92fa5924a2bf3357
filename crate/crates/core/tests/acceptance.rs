//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use tprs_emu::basis::{tprs_basis, OutputGrid};
use tprs_emu::emulators::{fit_sgp, fit_stprs, EmulatorKind, EmulatorModel};
use tprs_emu::harness::{build_datasets, run_compare_on, BasisCache, CompareReport, ExperimentConfig};
use tprs_emu::linalg::{kronecker_product, CorrelationParams, KroneckerSolver, SpatialCorrelationParams};
use tprs_emu::mcmc::{run_itprs_chain, ChainConfig, ItprsProblem, McmcConfig, PriorConfig, UpdateMode};
use tprs_emu::sim::default_grid;

const SEEDS: u64 = 10;

struct Outcome {
    failed: usize,
}

impl Outcome {
    fn record(&mut self, name: &str, pass: bool, detail: impl AsRef<str>, started: Instant) {
        if !pass {
            self.failed += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {} [{:.1}s]", detail.as_ref(), started.elapsed().as_secs_f64());
    }
}

fn random_spd(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k + 2, k, |_, _| rng.random::<f64>() - 0.5);
    a.transpose() * a + DMatrix::identity(k, k) * 0.1
}

fn compare(cfg: &ExperimentConfig, cache: &BasisCache) -> CompareReport {
    let data = build_datasets(cfg).expect("data sets");
    run_compare_on(cfg, &data, cache).expect("compare")
}

fn mean_rmse(report: &CompareReport, kind: EmulatorKind) -> f64 {
    report.result(kind).expect("emulator result").summary.mean
}

fn woodbury_vs_dense() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, p) = (10, 4);
    let inputs = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
    let b = DMatrix::from_fn(p + 6, p, |_, _| rng.random::<f64>() - 0.5);
    let beta = DVector::from_fn(n * p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let problem = ItprsProblem::new(beta, b.transpose() * &b, inputs, 0.8, p + 6, PriorConfig::independent_default())
        .map_err(|e| e.to_string())?;
    let run = |mode| {
        let cfg = McmcConfig {
            chain: ChainConfig { n_iter: 500, burn_in: 100, seed: 5, ..Default::default() },
            mode,
            ..Default::default()
        };
        run_itprs_chain(&problem, &cfg).map_err(|e| e.to_string())
    };
    let (dense, wood) = (run(UpdateMode::Dense)?, run(UpdateMode::Woodbury)?);
    let same = dense.output.decisions == wood.output.decisions;
    let diff = (&dense.output.trace - &wood.output.trace).amax();
    if same {
        Ok(format!("500 sweeps, identical decisions, max trace difference {diff:.1e}"))
    } else {
        Err("accept/reject decisions differ".into())
    }
}

fn kronecker_vs_dense() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for n in 1..=10 {
        for p in 1..=10 {
            let (a, b) = (random_spd(&mut rng, n), random_spd(&mut rng, p));
            let v = DVector::from_fn(n * p, |_, _| rng.random::<f64>() - 0.5);
            let solver = KroneckerSolver::new(a.clone().cholesky().unwrap(), b.clone().cholesky().unwrap());
            let fast = solver.solve(&v).map_err(|e| e.to_string())?;
            let dense = kronecker_product(&a, &b).lu().solve(&v).unwrap();
            worst = worst.max((fast - dense).amax());
        }
    }
    if worst < 1e-8 {
        Ok(format!("all n, p <= 10, max error {worst:.1e}"))
    } else {
        Err(format!("max error {worst:.1e}"))
    }
}

fn tau_monte_carlo() -> Result<String, String> {
    let data = common::toy_dataset(15, 2, 6, 21);
    let basis = tprs_basis(&data.grid, 5, 2).map_err(|e| e.to_string())?;
    let theta = CorrelationParams::new(vec![0.3, 0.6], 1e-6).unwrap();
    let nu = SpatialCorrelationParams::new(vec![0.05, 0.05]).unwrap();
    let EmulatorModel::Stprs(m) = fit_stprs(&data, &basis, &theta, &nu, &PriorConfig::plug_in_default()).map_err(|e| e.to_string())? else {
        unreachable!()
    };
    // τ⁻¹ ~ Gamma(shape, rate); rand_distr takes a scale
    let gamma = Gamma::new(m.tau_shape, 1.0 / m.tau_rate).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let draws = 100_000;
    let mc = (0..draws).map(|_| 1.0 / gamma.sample(&mut rng)).sum::<f64>() / draws as f64;
    let rel = (mc - m.tau_hat).abs() / m.tau_hat;
    let msg = format!("closed form {:.5}, Monte Carlo {mc:.5}, relative gap {:.3}%", m.tau_hat, 100.0 * rel);
    if rel < 0.01 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn tprs_constraints(cache: &BasisCache) -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut check = |basis: &tprs_emu::basis::BasisSet| {
        let aux = basis.tprs.as_ref().unwrap();
        worst = worst.max((aux.t.transpose() * &aux.u * &aux.z).amax());
        count += 1;
    };
    let grid = default_grid(50).map_err(|e| e.to_string())?;
    let eig = cache.eigensystem(&grid, 2).map_err(|e| e.to_string())?;
    for p in [5usize, 10, 20, 40, 80, 160] {
        check(&eig.basis(p - eig.poly_cols()).map_err(|e| e.to_string())?);
    }
    for side in [4usize, 7, 10] {
        let g = OutputGrid::lattice(&[side, side], &[(0.0, 3.0), (0.0, 60.0)]).unwrap();
        for m in 1..=side * side - 3 {
            check(&tprs_basis(&g, m, 2).map_err(|e| e.to_string())?);
        }
    }
    let line = OutputGrid::lattice(&[30], &[(0.0, 1.0)]).unwrap();
    for m in 1..=28 {
        check(&tprs_basis(&line, m, 2).map_err(|e| e.to_string())?);
    }
    if worst < 1e-10 {
        Ok(format!("{count} bases, max |T'UZ| {worst:.1e}"))
    } else {
        Err(format!("max |T'UZ| {worst:.1e} over {count} bases"))
    }
}

fn interpolation() -> Result<String, String> {
    let data = common::toy_dataset(12, 2, 5, 31);
    let theta = CorrelationParams::new(vec![0.2, 0.3], 0.0).unwrap();
    let nu = SpatialCorrelationParams::new(vec![0.01, 0.01]).unwrap();
    let pr = PriorConfig { nugget: 0.0, ..PriorConfig::plug_in_default() };
    let sgp = fit_sgp(&data, &theta, &nu, &pr, None).map_err(|e| e.to_string())?;
    let truth = sgp.common().standardized_truth(&data).map_err(|e| e.to_string())?;
    let pred = sgp.predict_means(&data.inputs).map_err(|e| e.to_string())?;
    let err_gp = (pred - &truth).amax();

    let basis = tprs_basis(&data.grid, 8, 2).map_err(|e| e.to_string())?;
    let stprs = fit_stprs(&data, &basis, &theta, &nu, &pr).map_err(|e| e.to_string())?;
    let fitted = stprs.predict_means(&data.inputs).map_err(|e| e.to_string())?;
    // at training inputs sTPRS returns each run's basis projection
    let bt = basis.vectors.transpose();
    let proj = (&basis.vectors * (&bt * &basis.vectors).try_inverse().unwrap() * &bt * truth.transpose()).transpose();
    let err_tprs = (fitted - proj).amax();
    let msg = format!("sGP {err_gp:.1e}, sTPRS {err_tprs:.1e}");
    if err_gp < 1e-6 && err_tprs < 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let mut out = Outcome { failed: 0 };
    let cache = BasisCache::default();

    let t = Instant::now();
    out.record(
        "udm-reference",
        true,
        "not reproducible (proprietary data); reference only: median RMSE PC-GP 3.70, iTPRS upper quartile 2.28, \
         sTPRS 1.85 (lower quartile 1.07), sGP quartiles 0.19/0.61; coverage 83%, 28%, 98%, 100%",
        t,
    );

    let t = Instant::now();
    let oracles: Vec<(&str, Result<String, String>)> = vec![
        ("woodbury chain = dense chain", woodbury_vs_dense()),
        ("kronecker solve = dense solve", kronecker_vs_dense()),
        ("tau posterior mean vs 1e5 draws", tau_monte_carlo()),
        ("TPRS constraint on every basis", tprs_constraints(&cache)),
        ("interpolation at training inputs", interpolation()),
    ];
    let all = oracles.iter().all(|(_, r)| r.is_ok());
    let detail: Vec<String> = oracles
        .iter()
        .map(|(n, r)| match r {
            Ok(m) => format!("{n} ok ({m})"),
            Err(m) => format!("{n} FAILED ({m})"),
        })
        .collect();
    out.record("oracle-suite", all, detail.join("; "), t);

    let t = Instant::now();
    let failures: Vec<String> = common::suites()
        .into_iter()
        .filter_map(|(name, f)| f().err().map(|e| format!("{name}: {e}")))
        .collect();
    let n = common::suites().len();
    let detail = if failures.is_empty() {
        format!("{n} suites x {} cases", common::CASES)
    } else {
        failures.join("; ")
    };
    out.record("property-suites", failures.is_empty(), detail, t);

    let t = Instant::now();
    let mut wins = 0;
    let mut gains = Vec::new();
    for seed in 1..=SEEDS {
        let cfg = ExperimentConfig { scenario: "art4".into(), seed, ..Default::default() };
        let report = compare(&cfg, &cache);
        let (s, g) = (mean_rmse(&report, EmulatorKind::Stprs), mean_rmse(&report, EmulatorKind::Sgp));
        wins += usize::from(s < g);
        gains.push(1.0 - s / g);
        println!("  art4 seed {seed}: sTPRS {s:.4} sGP {g:.4}");
    }
    let gain = gains.iter().sum::<f64>() / gains.len() as f64;
    let ok = wins >= 7 && (gain - 0.07).abs() <= 0.15;
    out.record(
        "art4-stprs-beats-sgp",
        ok,
        format!("sTPRS wins {wins}/{SEEDS} (need >= 7); mean RMSE reduction {:.1}% (need 7% +/- 15pp)", 100.0 * gain),
        t,
    );

    let t = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for d in 1..=3 {
        let mut wins = 0;
        let mut gains = Vec::new();
        for seed in 1..=SEEDS {
            let cfg = ExperimentConfig { scenario: format!("art{d}"), seed, ..Default::default() };
            let report = compare(&cfg, &cache);
            let (s, g) = (mean_rmse(&report, EmulatorKind::Stprs), mean_rmse(&report, EmulatorKind::Sgp));
            wins += usize::from(g < s);
            gains.push(1.0 - g / s);
            println!("  art{d} seed {seed}: sTPRS {s:.4} sGP {g:.4}");
        }
        ok &= wins >= 6;
        let gain = gains.iter().sum::<f64>() / gains.len() as f64;
        parts.push(format!("art{d} sGP wins {wins}/{SEEDS} (mean reduction {:.1}%)", 100.0 * gain));
    }
    out.record("art1-3-sgp-beats-stprs", ok, format!("{} (need >= 6 each)", parts.join(", ")), t);

    let t = Instant::now();
    let cfg = ExperimentConfig {
        scenario: "art4".into(),
        emulators: vec![EmulatorKind::Itprs, EmulatorKind::Stprs],
        ..Default::default()
    };
    let report = compare(&cfg, &cache);
    let cov_i = report.result(EmulatorKind::Itprs).unwrap().coverage;
    let cov_s = report.result(EmulatorKind::Stprs).unwrap().coverage;
    let ok = cov_i <= cov_s - 0.20 && cov_s >= 0.90;
    out.record(
        "coverage-ordering",
        ok,
        format!(
            "iTPRS {:.1}%, sTPRS {:.1}% of +/-3 sd intervals (need iTPRS <= sTPRS - 20pp and sTPRS >= 90%)",
            100.0 * cov_i,
            100.0 * cov_s
        ),
        t,
    );

    println!("{} criteria failed", out.failed);
    if out.failed > 0 {
        std::process::exit(1);
    }
}

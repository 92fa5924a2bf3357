//! Command-line front end. Every subcommand takes `--seed` and `--config`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::basis::TprsEigensystem;
use crate::design::{maximin_lhs, monte_carlo_sample, read_design_csv, write_design_csv, InputRanges};
use crate::emulators::{
    estimate_sigma2, fit_independent, EmulatorKind, EmulatorModel, PredictOptions, SgpTrainer, StprsTrainer, SGP_DEFAULT_CAP,
};
use crate::error::{input_err, EmuError, Result};
use crate::harness::{self, BasisCache, Datasets, ExperimentConfig};
use crate::linalg::{CorrelationParams, SpatialCorrelationParams};
use crate::mcmc::{write_trace_csv, ChainConfig, McmcConfig};
use crate::sim::{default_grid, generate_dataset, load_dataset_dir, read_grid_csv, write_dataset_dir, SpillConfig};

#[derive(Debug, Parser)]
#[command(name = "tprs-emu", version, about = "Gaussian-process emulators for spatial simulator output")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Base random seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DesignMethod {
    Lhs,
    Mc,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a maximin Latin hypercube or Monte Carlo design as CSV.
    Design {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, value_enum, default_value = "lhs")]
        method: DesignMethod,
        /// Candidate designs for the maximin search.
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        /// Sample the unit cube instead of the simulator input ranges.
        #[arg(long)]
        unit: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in simulator on a design, or check an external data set.
    Simulate {
        #[arg(long, required_unless_present = "check")]
        design: Option<PathBuf>,
        #[arg(long, required_unless_present = "check")]
        out: Option<PathBuf>,
        /// Points per axis of the output lattice.
        #[arg(long, default_value_t = 50)]
        grid_size: usize,
        /// Load a data directory and report its shape.
        #[arg(long, conflicts_with_all = ["design", "out"])]
        check: Option<PathBuf>,
    },
    /// Fit one emulator and save it as JSON.
    Fit(FitArgs),
    /// Predict with a saved model; writes `run_id,loc_id,mean,sd`.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Query inputs in design CSV format.
        #[arg(long)]
        inputs: PathBuf,
        /// Grid the predictions are requested on; must match the training grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n_samples: usize,
        /// Report the standardized modeling scale instead of the original scale.
        #[arg(long)]
        model_scale: bool,
    },
    /// Hyper-parameter search on validation runs; writes the score table.
    Validate {
        #[arg(long)]
        emulator: EmulatorKind,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        validation: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the selected emulators and write RMSE, coverage and prediction tables.
    Compare {
        #[arg(long)]
        scenario: Option<String>,
        /// Comma-separated emulator kinds.
        #[arg(long, value_delimiter = ',')]
        emulators: Option<Vec<EmulatorKind>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        original_scale: bool,
        /// Estimate the plug-in error variance on the test runs.
        #[arg(long)]
        sigma2_from_test: bool,
    },
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub emulator: EmulatorKind,
    /// Training data directory (`inputs.csv`, `grid.csv`, `outputs.csv`).
    #[arg(long)]
    pub train: PathBuf,
    /// Validation directory: hyper-parameters not given are searched, and sigma2 is estimated here.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Total basis size.
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub theta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub nu: Option<Vec<f64>>,
    #[arg(long)]
    pub mcmc_iter: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Write the MCMC trace (sampled emulators only).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub log1p: bool,
}

fn load_config(global: &GlobalOpts) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Parse arguments and run; clap usage errors exit the process with status 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = if cli.global.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={} message={msg}", e.kind());
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    harness::with_thread_cap(move || dispatch(cli.command, cfg))?
}

fn dispatch(command: Command, mut cfg: ExperimentConfig) -> Result<()> {
    match command {
        Command::Design { n, d, method, iterations, unit, out } => {
            let ranges = if unit { InputRanges::unit(d) } else { SpillConfig::default().scenario_ranges(d)? };
            let design = match method {
                DesignMethod::Lhs => maximin_lhs(n, &ranges, iterations, cfg.seed)?,
                DesignMethod::Mc => monte_carlo_sample(n, &ranges, cfg.seed)?,
            };
            write_design_csv(&out, &design)
        }
        Command::Simulate { check: Some(dir), .. } => {
            let data = load_dataset_dir(&dir, None)?;
            println!("runs={} inputs={} locations={} grid_dim={}", data.n_runs(), data.input_dim(), data.grid_len(), data.grid.dim());
            Ok(())
        }
        Command::Simulate { design, out, grid_size, .. } => {
            let (_, x) = read_design_csv(design.as_ref().expect("required by clap"))?;
            let grid = default_grid(grid_size)?;
            let data = generate_dataset(&x, x.ncols(), &grid, &SpillConfig::default())?;
            write_dataset_dir(out.as_ref().expect("required by clap"), &data)
        }
        Command::Fit(args) => fit(args, &cfg),
        Command::Predict { model, inputs, grid, out, n_samples, model_scale } => {
            let model = EmulatorModel::load(&model)?;
            if let Some(g) = grid {
                model.common().check_grid(&read_grid_csv(&g)?)?;
            }
            let (_, x) = read_design_csv(&inputs)?;
            if x.ncols() != model.common().input_dim() {
                return input_err(format!("inputs have {} columns, model expects {}", x.ncols(), model.common().input_dim()));
            }
            let opts = PredictOptions { n_samples, keep_samples: false, seed: cfg.seed };
            let preds = model.predict_batch(&x, &opts)?;
            let (mean, sd) = harness::stack_predictions(&preds, !model_scale);
            write_long(&out, &mean, &sd)
        }
        Command::Validate { emulator, train, validation, out } => {
            let data = load_pair(&train, &validation, cfg.log1p)?;
            let sel = harness::select_emulator(emulator, &data, &cfg, &BasisCache::default())?;
            sel.search.write_csv(&out)?;
            println!("{}", sel.search.best_candidate().label());
            Ok(())
        }
        Command::Compare { scenario, emulators, out, original_scale, sigma2_from_test } => {
            if let Some(s) = scenario {
                cfg.scenario = s;
            }
            if let Some(e) = emulators {
                cfg.emulators = e;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            cfg.original_scale |= original_scale;
            cfg.sigma2_from_test |= sigma2_from_test;
            if cfg.output_dir.is_none() {
                cfg.output_dir = Some(PathBuf::from("compare-out"));
            }
            let report = harness::run_compare(&cfg, &BasisCache::default())?;
            for r in &report.results {
                println!(
                    "{} selected=[{}] mean_rmse={:.6} median_rmse={:.6} coverage={:.4}",
                    r.kind,
                    r.selected.label(),
                    r.summary.mean,
                    r.summary.median,
                    r.coverage
                );
            }
            Ok(())
        }
    }
}

fn load_pair(train: &Path, validation: &Path, log1p: bool) -> Result<Datasets> {
    let train = load_dataset_dir(train, None)?.with_log1p(log1p);
    let validation = load_dataset_dir(validation, Some(train.ranges.clone()))?.with_log1p(log1p);
    Ok(Datasets { test: validation.clone(), validation, train })
}

fn write_long(path: &Path, mean: &DMatrix<f64>, sd: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run_id", "loc_id", "mean", "sd"])?;
    for i in 0..mean.nrows() {
        for j in 0..mean.ncols() {
            w.write_record([i.to_string(), j.to_string(), format!("{:.12e}", mean[(i, j)]), format!("{:.12e}", sd[(i, j)])])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn fit(args: FitArgs, cfg: &ExperimentConfig) -> Result<()> {
    if args.trace.is_some() && !args.emulator.is_sampled() {
        return Err(EmuError::Input("--trace applies to sampled emulators only".into()));
    }
    let mut cfg = cfg.clone();
    cfg.log1p |= args.log1p;
    if let Some(n) = args.mcmc_iter {
        cfg.mcmc_iter = n;
    }
    if let Some(b) = args.burn_in {
        cfg.mcmc_burn_in = b;
    }
    // fixed sizes narrow the search to one value
    if let Some(p) = args.p {
        cfg.stprs_p = vec![p];
        cfg.itprs_p = vec![p];
        cfg.pcgp_p = vec![p];
    }
    let train = load_dataset_dir(&args.train, None)?.with_log1p(cfg.log1p);
    let validation = match &args.validation {
        Some(v) => Some(load_dataset_dir(v, Some(train.ranges.clone()))?.with_log1p(cfg.log1p)),
        None => None,
    };
    let d = train.input_dim();
    let q = train.grid.dim();
    let theta = args.theta.clone().unwrap_or_else(|| vec![cfg.theta_start; d]);
    let theta = CorrelationParams::new(theta, cfg.priors_plug_in.nugget)?;
    let search = validation.is_some() && args.theta.is_none() && !args.emulator.is_sampled();
    let mut model = if let (true, Some(v)) = (search, &validation) {
        let data = Datasets { train: train.clone(), validation: v.clone(), test: v.clone() };
        harness::select_emulator(args.emulator, &data, &cfg, &BasisCache::default())?.model
    } else {
        match args.emulator {
            EmulatorKind::Stprs => {
                let eig = TprsEigensystem::new(&train.grid, cfg.tprs_order)?;
                let p = args.p.unwrap_or(cfg.stprs_p[0]);
                if p <= eig.poly_cols() {
                    return input_err(format!("p must exceed {}", eig.poly_cols()));
                }
                let nu = SpatialCorrelationParams::new(args.nu.clone().unwrap_or_else(|| cfg.stprs_nu.clone()))?;
                EmulatorModel::Stprs(StprsTrainer::new(&train, &eig.basis(p - eig.poly_cols())?, &nu, &cfg.priors_plug_in)?.fit(&theta)?)
            }
            EmulatorKind::Sgp => {
                let nu = SpatialCorrelationParams::new(args.nu.clone().unwrap_or_else(|| vec![cfg.nu_start; q]))?;
                EmulatorModel::Sgp(SgpTrainer::new(&train, None, &cfg.priors_plug_in, SGP_DEFAULT_CAP)?.fit(&theta, &nu)?)
            }
            kind => {
                let p = args.p.unwrap_or(if kind == EmulatorKind::Pcgp { cfg.pcgp_p[0] } else { cfg.itprs_p[0] });
                let basis = if kind == EmulatorKind::Pcgp {
                    let (_, z) = crate::emulators::ModelCommon::from_data(&train)?;
                    crate::basis::pca_basis(&z.transpose(), p)?.0
                } else {
                    let eig = TprsEigensystem::new(&train.grid, cfg.tprs_order)?;
                    if p <= eig.poly_cols() {
                        return input_err(format!("p must exceed {}", eig.poly_cols()));
                    }
                    eig.basis(p - eig.poly_cols())?
                };
                let mcmc = McmcConfig {
                    chain: ChainConfig { n_iter: cfg.mcmc_iter, burn_in: cfg.mcmc_burn_in, seed: cfg.seed, ..Default::default() },
                    ..Default::default()
                };
                let (model, run) = fit_independent(&train, &basis, kind, &cfg.priors_independent, &mcmc)?;
                if let Some(path) = &args.trace {
                    write_trace_csv(path, &run.output, &run.coordinate_names, &run.blocks)?;
                }
                model
            }
        }
    };
    if let (false, Some(v)) = (args.emulator.is_sampled(), &validation) {
        if !search {
            estimate_sigma2(&mut model, v)?;
        }
    }
    model.save(&args.out)
}

//! Emulators with an independent GP per basis coefficient (PC-GP and iTPRS).
//!
//! Hyper-parameters come from [`run_itprs_chain`]; predictions mix the
//! conditional Gaussian of the coefficients over evenly spaced posterior draws.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EmulatorKind, EmulatorModel, ModelCommon, PredictOptions, PredictiveDistribution};
use crate::basis::{pca_basis, BasisKind, BasisSet, Projector};
use crate::error::{input_err, EmuError, Result};
use crate::linalg::cross_correlation;
use crate::mcmc::{run_itprs_chain, ChainState, ItprsProblem, ItprsRun, McmcConfig, PosteriorSamples, PriorConfig};
use crate::sim::SimDataset;

/// Draws handled sequentially by one task; fixes the summation order.
const DRAW_BATCH: usize = 8;

/// Chain summary kept with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub n_iter: usize,
    pub burn_in: usize,
    pub acceptance: Vec<f64>,
    pub block_names: Vec<String>,
    pub max_refresh_drift: f64,
    pub fallbacks: usize,
    pub warnings: Vec<String>,
}

/// Fitted PC-GP or iTPRS emulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndependentModel {
    pub common: ModelCommon,
    pub basis: BasisSet,
    /// Basis-major least-squares coefficients (`k*n + i`: run `i`, vector `k`).
    pub beta_hat: DVector<f64>,
    pub gram: DMatrix<f64>,
    pub rss: f64,
    pub priors: PriorConfig,
    pub samples: PosteriorSamples,
    pub diagnostics: ChainDiagnostics,
}

/// Per-query accumulator over posterior draws at the coefficient level.
#[derive(Clone)]
struct Moments {
    sum_m: Vec<DVector<f64>>,
    sum_mm: Vec<DMatrix<f64>>,
    sum_s: Vec<DMatrix<f64>>,
    sum_sigma2: f64,
    count: usize,
    samples: Vec<Vec<DVector<f64>>>,
}

impl Moments {
    fn new(n_query: usize, p: usize) -> Self {
        Self {
            sum_m: vec![DVector::zeros(p); n_query],
            sum_mm: vec![DMatrix::zeros(p, p); n_query],
            sum_s: vec![DMatrix::zeros(p, p); n_query],
            sum_sigma2: 0.0,
            count: 0,
            samples: vec![Vec::new(); n_query],
        }
    }

    fn merge(&mut self, other: Moments) {
        for t in 0..self.sum_m.len() {
            self.sum_m[t] += &other.sum_m[t];
            self.sum_mm[t] += &other.sum_mm[t];
            self.sum_s[t] += &other.sum_s[t];
        }
        self.sum_sigma2 += other.sum_sigma2;
        self.count += other.count;
        for (a, b) in self.samples.iter_mut().zip(other.samples) {
            a.extend(b);
        }
    }
}

impl IndependentModel {
    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    /// Posterior mean of `σ²`.
    pub fn mean_sigma2(&self) -> f64 {
        let d = &self.samples.draws;
        d.iter().map(|s| 1.0 / s.sigma2_inv).sum::<f64>() / d.len() as f64
    }

    /// Indices of the draws used for prediction, evenly spaced through the chain.
    pub fn draw_indices(&self, n_samples: usize) -> Vec<usize> {
        let len = self.samples.len();
        let ns = n_samples.clamp(1, len);
        (0..ns).map(|i| i * len / ns).collect()
    }

    fn problem(&self) -> Result<ItprsProblem> {
        ItprsProblem::new(
            self.beta_hat.clone(),
            self.gram.clone(),
            self.common.inputs.clone(),
            self.rss,
            self.common.grid.len(),
            self.priors.clone(),
        )
    }

    /// Coefficient mean (`p`) and covariance (`p x p`) at each unit-cube query under one draw.
    fn conditional(&self, problem: &ItprsProblem, state: &ChainState, u: &DMatrix<f64>) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        let (n, p, m) = (self.common.n_runs(), self.n_basis(), u.nrows());
        let d = problem.assemble(state)?;
        let chol = d
            .cholesky()
            .ok_or_else(|| EmuError::Numerical("coefficient covariance D is not positive definite".into()))?;
        let alpha = chol.solve(&self.beta_hat);
        // C*: column t*p + k holds τ_k w*_k(x_t) in row block k.
        let mut cstar = DMatrix::zeros(n * p, p * m);
        let mut means = vec![DVector::zeros(p); m];
        for k in 0..p {
            let mut corr = state.correlation(k)?;
            corr = crate::linalg::CorrelationParams::new(corr.theta().to_vec(), 0.0)?;
            let w = cross_correlation(&self.common.inputs, u, &corr)? * state.tau[k];
            let ak = alpha.rows(k * n, n);
            for t in 0..m {
                means[t][k] = w.column(t).dot(&ak);
                cstar.view_mut((k * n, t * p + k), (n, 1)).copy_from(&w.column(t));
            }
        }
        let g = chol
            .l()
            .solve_lower_triangular(&cstar)
            .ok_or_else(|| EmuError::Numerical("triangular solve failed".into()))?;
        Ok((0..m)
            .map(|t| {
                let gt = g.columns(t * p, p);
                let mut s = -(gt.tr_mul(&gt));
                for k in 0..p {
                    s[(k, k)] += state.tau[k];
                }
                (std::mem::take(&mut means[t]), s)
            })
            .collect())
    }

    /// Predictive distributions at unit-cube inputs (`m x d`).
    pub fn predict_unit(&self, u: &DMatrix<f64>, opts: &PredictOptions) -> Result<Vec<PredictiveDistribution>> {
        if opts.n_samples == 0 {
            return Err(EmuError::Parameter("n_samples must be positive".into()));
        }
        if self.samples.is_empty() {
            return Err(EmuError::State("model holds no posterior draws".into()));
        }
        let (p, m, r) = (self.n_basis(), u.nrows(), self.common.grid.len());
        let problem = self.problem()?;
        let idx = self.draw_indices(opts.n_samples);
        let basis = &self.basis.vectors;
        let batches: Vec<Result<Moments>> = idx
            .par_chunks(DRAW_BATCH)
            .enumerate()
            .map(|(b, chunk)| {
                let mut acc = Moments::new(m, p);
                for (off, &di) in chunk.iter().enumerate() {
                    let state = &self.samples.draws[di];
                    let cond = self.conditional(&problem, state, u)?;
                    let sigma2 = 1.0 / state.sigma2_inv;
                    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                    rng.set_stream((b * DRAW_BATCH + off) as u64);
                    for (t, (mean, s)) in cond.into_iter().enumerate() {
                        if opts.keep_samples {
                            let beta = &mean + psd_sqrt(&s) * DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                            let eps = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
                            acc.samples[t].push(basis * beta + eps * sigma2.sqrt());
                        }
                        acc.sum_mm[t] += &mean * mean.transpose();
                        acc.sum_m[t] += mean;
                        acc.sum_s[t] += s;
                    }
                    acc.sum_sigma2 += sigma2;
                    acc.count += 1;
                }
                Ok(acc)
            })
            .collect();
        let mut total = Moments::new(m, p);
        for b in batches {
            total.merge(b?);
        }
        let params = &self.common.standardization;
        let c = total.count as f64;
        Ok((0..m)
            .map(|t| {
                if opts.keep_samples {
                    let rows = &total.samples[t];
                    let s = DMatrix::from_fn(rows.len(), r, |i, j| rows[i][j]);
                    return PredictiveDistribution::from_samples(params, s);
                }
                let mean = &total.sum_m[t] / c;
                let cov = &total.sum_s[t] / c + &total.sum_mm[t] / c - &mean * mean.transpose();
                let bc = basis * &cov;
                let var = DVector::from_fn(r, |j, _| bc.row(j).dot(&basis.row(j)) + total.sum_sigma2 / c);
                PredictiveDistribution::from_moments(params, basis * mean, var)
            })
            .collect())
    }
}

/// Symmetric square root of a covariance with negative eigenvalues clamped.
fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = s.clone();
    crate::linalg::symmetrize(&mut s);
    let e = SymmetricEigen::new(s);
    let root = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// Fit an independent-coefficient emulator on a given basis; also returns the raw chain.
pub fn fit_independent(
    data: &SimDataset,
    basis: &BasisSet,
    kind: EmulatorKind,
    priors: &PriorConfig,
    mcmc: &McmcConfig,
) -> Result<(EmulatorModel, ItprsRun)> {
    if !kind.is_sampled() {
        return input_err(format!("{kind} is not an independent-coefficient emulator"));
    }
    if basis.grid_len() != data.grid_len() {
        return input_err(format!("basis has {} locations, data has {}", basis.grid_len(), data.grid_len()));
    }
    let (common, z) = ModelCommon::from_data(data)?;
    let zt = z.transpose();
    let coef = Projector::new(basis)?.project_columns(&zt)?;
    let rss = (&zt - &basis.vectors * &coef).norm_squared();
    let beta_hat = DVector::from_column_slice(coef.transpose().as_slice());
    let gram = basis.gram();
    let problem = ItprsProblem::new(beta_hat.clone(), gram.clone(), common.inputs.clone(), rss, data.grid_len(), priors.clone())?;
    let run = run_itprs_chain(&problem, mcmc)?;
    for w in &run.output.warnings {
        log::warn!("{kind}: {w}");
    }
    let mut stored = basis.clone();
    stored.tprs = None;
    let diagnostics = ChainDiagnostics {
        n_iter: mcmc.chain.n_iter,
        burn_in: mcmc.chain.burn_in,
        acceptance: run.samples.acceptance.clone(),
        block_names: run.samples.block_names.clone(),
        max_refresh_drift: run.max_refresh_drift,
        fallbacks: run.fallbacks,
        warnings: run.output.warnings.clone(),
    };
    let model = IndependentModel { common, basis: stored, beta_hat, gram, rss, priors: priors.clone(), samples: run.samples.clone(), diagnostics };
    let model = match kind {
        EmulatorKind::Pcgp => EmulatorModel::Pcgp(model),
        _ => EmulatorModel::Itprs(model),
    };
    Ok((model, run))
}

/// iTPRS: independent GPs on TPRS coefficients.
pub fn fit_itprs(data: &SimDataset, basis: &BasisSet, priors: &PriorConfig, mcmc: &McmcConfig) -> Result<EmulatorModel> {
    if basis.kind != BasisKind::Tprs {
        return input_err("iTPRS needs a TPRS basis");
    }
    Ok(fit_independent(data, basis, EmulatorKind::Itprs, priors, mcmc)?.0)
}

/// PC-GP: independent GPs on the leading `p` principal components.
pub fn fit_pcgp(data: &SimDataset, p: usize, priors: &PriorConfig, mcmc: &McmcConfig) -> Result<EmulatorModel> {
    let (_, z) = ModelCommon::from_data(data)?;
    let (basis, _) = pca_basis(&z.transpose(), p)?;
    Ok(fit_independent(data, &basis, EmulatorKind::Pcgp, priors, mcmc)?.0)
}

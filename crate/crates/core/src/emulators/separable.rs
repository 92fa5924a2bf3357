//! Plug-in emulators with separable covariance: sTPRS (`τ W ⊗ V` on TPRS
//! coefficients) and sGP (`τ W_x ⊗ W_s` directly on the responses).
//!
//! Both use the conditional Gaussian `m = C*ᵀ C⁻¹ β`, `S = C** - C*ᵀ C⁻¹ C*`.
//! With `C = W ⊗ V`, `C* = w* ⊗ V` and `C** = V` this reduces to mean
//! `(w*ᵀ W⁻¹ ⊗ I) β` and covariance `(1 - w*ᵀ W⁻¹ w*) V`. `τ` is replaced by its
//! posterior mean under `τ⁻¹ | β ~ Gamma((a + N) / 2, rate (b + βᵀ C⁻¹ β) / 2)`.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::{EmulatorModel, ModelCommon};
use crate::basis::{tprs_scale_matrix, BasisKind, BasisSet, Projector};
use crate::error::{input_err, EmuError, Result};
use crate::linalg::{cholesky, correlation_matrix, cross_correlation, CorrelationParams, KroneckerSolver, SpatialCorrelationParams};
use crate::mcmc::PriorConfig;
use crate::sim::SimDataset;

/// Largest `n · r_train` the sGP will train on.
pub const SGP_DEFAULT_CAP: usize = 20_000;

/// Posterior of `τ⁻¹` given `N` coefficients with quadratic form `q`: `(shape, rate, E[τ])`.
pub(crate) fn tau_posterior(a_tau: f64, b_tau: f64, count: usize, q: f64) -> Result<(f64, f64, f64)> {
    let shape = (a_tau + count as f64) / 2.0;
    let rate = (b_tau + q) / 2.0;
    if shape <= 1.0 {
        return Err(EmuError::Parameter(format!("posterior mean of tau needs a_tau + N > 2, got {}", 2.0 * shape)));
    }
    Ok((shape, rate, rate / (shape - 1.0)))
}

fn without_nugget(theta: &CorrelationParams) -> CorrelationParams {
    CorrelationParams::new(theta.theta().to_vec(), 0.0).expect("theta already validated")
}

fn quad_diag(chol: &Cholesky<f64, Dyn>, cols: &DMatrix<f64>) -> DVector<f64> {
    let l_inv = chol.l().solve_lower_triangular(cols).expect("Cholesky factor is non-singular");
    DVector::from_fn(cols.ncols(), |j, _| l_inv.column(j).norm_squared())
}

/// Precomputation shared by every sTPRS fit on one data set, basis and `ν`.
pub struct StprsTrainer {
    common: ModelCommon,
    basis: BasisSet,
    nu: SpatialCorrelationParams,
    coefficients: DMatrix<f64>,
    scale_matrix: DMatrix<f64>,
    v_chol: Cholesky<f64, Dyn>,
    basis_var: DVector<f64>,
    priors: PriorConfig,
}

impl StprsTrainer {
    pub fn new(data: &SimDataset, basis: &BasisSet, nu: &SpatialCorrelationParams, priors: &PriorConfig) -> Result<Self> {
        priors.validate()?;
        if basis.kind != BasisKind::Tprs || basis.tprs.is_none() {
            return input_err("sTPRS needs a TPRS basis");
        }
        if basis.grid_len() != data.grid_len() {
            return input_err(format!("basis has {} locations, data has {}", basis.grid_len(), data.grid_len()));
        }
        let (common, z) = ModelCommon::from_data(data)?;
        let coefficients = Projector::new(basis)?.project_columns(&z.transpose())?.transpose();
        let scale_matrix = tprs_scale_matrix(basis, &data.grid, nu)?;
        let v_chol = cholesky(scale_matrix.clone(), "scale matrix V")?;
        let bv = &basis.vectors * &scale_matrix;
        let basis_var = DVector::from_fn(basis.grid_len(), |j, _| bv.row(j).dot(&basis.vectors.row(j)));
        let mut stored = basis.clone();
        stored.tprs = None;
        Ok(Self { common, basis: stored, nu: nu.clone(), coefficients, scale_matrix, v_chol, basis_var, priors: priors.clone() })
    }

    /// Least-squares coefficients of the standardized training runs, `n x p`.
    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn fit(&self, theta: &CorrelationParams) -> Result<StprsModel> {
        if theta.dim() != self.common.input_dim() {
            return input_err(format!("theta has {} components, inputs have {}", theta.dim(), self.common.input_dim()));
        }
        let w_chol = cholesky(correlation_matrix(&self.common.inputs, theta)?, "input correlation W")?;
        let solver = KroneckerSolver::new(self.v_chol.clone(), w_chol.clone());
        let v = DVector::from_column_slice(self.coefficients.as_slice());
        let q = solver.quadratic_form(&v)?;
        let (tau_shape, tau_rate, tau_hat) = tau_posterior(self.priors.a_tau, self.priors.b_tau, v.len(), q)?;
        let model = StprsModel {
            common: self.common.clone(),
            basis: self.basis.clone(),
            theta: theta.clone(),
            nu: self.nu.clone(),
            coefficients: self.coefficients.clone(),
            scale_matrix: self.scale_matrix.clone(),
            basis_var: self.basis_var.clone(),
            tau_shape,
            tau_rate,
            tau_hat,
            sigma2: 0.0,
            cache: OnceLock::new(),
        };
        let alpha = w_chol.solve(&self.coefficients);
        let _ = model.cache.set(StprsCache { w_chol, alpha });
        Ok(model)
    }
}

#[derive(Debug, Clone)]
struct StprsCache {
    w_chol: Cholesky<f64, Dyn>,
    /// `W⁻¹ β`, `n x p`.
    alpha: DMatrix<f64>,
}

/// Fitted sTPRS emulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StprsModel {
    pub common: ModelCommon,
    pub basis: BasisSet,
    pub theta: CorrelationParams,
    pub nu: SpatialCorrelationParams,
    /// Training coefficients, `n x p` (column `k` is coefficient `k` across runs).
    pub coefficients: DMatrix<f64>,
    pub scale_matrix: DMatrix<f64>,
    /// `diag(B V Bᵀ)`.
    pub basis_var: DVector<f64>,
    pub tau_shape: f64,
    pub tau_rate: f64,
    pub tau_hat: f64,
    /// Error variance on the modeling scale; zero until estimated.
    pub sigma2: f64,
    #[serde(skip)]
    cache: OnceLock<StprsCache>,
}

impl StprsModel {
    fn cache(&self) -> Result<&StprsCache> {
        if let Some(c) = self.cache.get() {
            return Ok(c);
        }
        let w_chol = cholesky(correlation_matrix(&self.common.inputs, &self.theta)?, "input correlation W")?;
        let alpha = w_chol.solve(&self.coefficients);
        let _ = self.cache.set(StprsCache { w_chol, alpha });
        Ok(self.cache.get().expect("cache just set"))
    }

    /// `1 - w*ᵀ W⁻¹ w*` for each column of `wstar`, clamped at zero.
    fn shrink(&self, wstar: &DMatrix<f64>) -> Result<DVector<f64>> {
        let q = quad_diag(&self.cache()?.w_chol, wstar);
        Ok(q.map(|v| (1.0 - v).max(0.0)))
    }

    /// Coefficient mean (`p`) and covariance (`p x p`) at a unit-cube input.
    pub fn coefficient_moments(&self, u: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let pt = DMatrix::from_row_slice(1, u.len(), u);
        let wstar = cross_correlation(&self.common.inputs, &pt, &self.theta)?;
        let mean = self.cache()?.alpha.tr_mul(&wstar).column(0).into_owned();
        let s = self.shrink(&wstar)?[0];
        Ok((mean, &self.scale_matrix * (self.tau_hat * s)))
    }

    /// Modeling-scale means and variances (`r x m`) at unit-cube inputs (`m x d`).
    pub fn predict_unit(&self, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let wstar = cross_correlation(&self.common.inputs, u, &without_nugget(&self.theta))?;
        let coef = self.cache()?.alpha.tr_mul(&wstar);
        let means = &self.basis.vectors * coef;
        let s = self.shrink(&wstar)?;
        let vars = DMatrix::from_fn(means.nrows(), u.nrows(), |j, t| self.tau_hat * s[t] * self.basis_var[j] + self.sigma2);
        Ok((means, vars))
    }
}

pub fn fit_stprs(
    data: &SimDataset,
    basis: &BasisSet,
    theta: &CorrelationParams,
    nu: &SpatialCorrelationParams,
    priors: &PriorConfig,
) -> Result<EmulatorModel> {
    Ok(EmulatorModel::Stprs(StprsTrainer::new(data, basis, nu, priors)?.fit(theta)?))
}

/// Precomputation shared by every sGP fit on one data set and training sub-grid.
pub struct SgpTrainer {
    common: ModelCommon,
    sub_indices: Vec<usize>,
    responses: DMatrix<f64>,
    sub_unit: DMatrix<f64>,
    full_unit: DMatrix<f64>,
    priors: PriorConfig,
}

impl SgpTrainer {
    pub fn new(data: &SimDataset, subgrid: Option<&[usize]>, priors: &PriorConfig, cap: usize) -> Result<Self> {
        priors.validate()?;
        let r = data.grid_len();
        let sub: Vec<usize> = match subgrid {
            Some(s) => s.to_vec(),
            None => (0..r).collect(),
        };
        if sub.is_empty() {
            return input_err("sGP training sub-grid is empty");
        }
        let mut seen = vec![false; r];
        for &i in &sub {
            if i >= r || seen[i] {
                return input_err(format!("sub-grid index {i} is out of range or repeated"));
            }
            seen[i] = true;
        }
        let cells = data.n_runs() * sub.len();
        if cells > cap {
            return Err(EmuError::Resource(format!(
                "sGP training on {} runs x {} locations = {cells} cells exceeds the cap of {cap}; train on a sub-grid",
                data.n_runs(),
                sub.len()
            )));
        }
        let (common, z) = ModelCommon::from_data(data)?;
        let full_unit = data.grid.unit_locations();
        let sub_unit = full_unit.select_rows(&sub);
        Ok(Self { common, responses: z.select_columns(&sub), sub_indices: sub, sub_unit, full_unit, priors: priors.clone() })
    }

    pub fn fit(&self, theta: &CorrelationParams, nu: &SpatialCorrelationParams) -> Result<SgpModel> {
        if theta.dim() != self.common.input_dim() {
            return input_err(format!("theta has {} components, inputs have {}", theta.dim(), self.common.input_dim()));
        }
        let model = SgpModel {
            common: self.common.clone(),
            theta: theta.clone(),
            nu: nu.clone(),
            sub_indices: self.sub_indices.clone(),
            train_responses: self.responses.clone(),
            tau_shape: 0.0,
            tau_rate: 0.0,
            tau_hat: 0.0,
            sigma2: 0.0,
            cache: OnceLock::new(),
        };
        let cache = model.build_cache(&self.sub_unit, &self.full_unit)?;
        let v = DVector::from_column_slice(self.responses.as_slice());
        let q = v.dot(&DVector::from_column_slice(cache.weights_raw.as_slice()));
        let (tau_shape, tau_rate, tau_hat) = tau_posterior(self.priors.a_tau, self.priors.b_tau, v.len(), q)?;
        let model = SgpModel { tau_shape, tau_rate, tau_hat, ..model };
        let _ = model.cache.set(cache);
        Ok(model)
    }
}

#[derive(Debug, Clone)]
struct SgpCache {
    wx_chol: Cholesky<f64, Dyn>,
    /// `W_x⁻¹ Y W_s⁻¹`, `n x r_train`.
    weights_raw: DMatrix<f64>,
    /// Spatial cross-correlations, `r_train x r`.
    cross_s: DMatrix<f64>,
    /// `w_s*ᵀ W_s⁻¹ w_s*` per output location.
    spatial_quad: DVector<f64>,
}

/// Fitted sGP emulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgpModel {
    pub common: ModelCommon,
    pub theta: CorrelationParams,
    pub nu: SpatialCorrelationParams,
    /// Grid indices of the training locations.
    pub sub_indices: Vec<usize>,
    /// Standardized training responses at those locations, `n x r_train`.
    pub train_responses: DMatrix<f64>,
    pub tau_shape: f64,
    pub tau_rate: f64,
    pub tau_hat: f64,
    pub sigma2: f64,
    #[serde(skip)]
    cache: OnceLock<SgpCache>,
}

impl SgpModel {
    fn build_cache(&self, sub_unit: &DMatrix<f64>, full_unit: &DMatrix<f64>) -> Result<SgpCache> {
        let wx_chol = cholesky(correlation_matrix(&self.common.inputs, &self.theta)?, "input correlation W_x")?;
        let spatial = CorrelationParams::new(self.nu.nu().to_vec(), self.theta.nugget())?;
        let ws_chol = cholesky(correlation_matrix(sub_unit, &spatial)?, "spatial correlation W_s")?;
        let cross_s = cross_correlation(sub_unit, full_unit, &self.nu.as_correlation())?;
        let spatial_quad = quad_diag(&ws_chol, &cross_s);
        let solver = KroneckerSolver::new(ws_chol, wx_chol.clone());
        let weights_raw = solver.solve_matrix(&self.train_responses);
        Ok(SgpCache { wx_chol, weights_raw, cross_s, spatial_quad })
    }

    fn cache(&self) -> Result<&SgpCache> {
        if let Some(c) = self.cache.get() {
            return Ok(c);
        }
        let full_unit = self.common.grid.unit_locations();
        let sub_unit = full_unit.select_rows(&self.sub_indices);
        let c = self.build_cache(&sub_unit, &full_unit)?;
        let _ = self.cache.set(c);
        Ok(self.cache.get().expect("cache just set"))
    }

    /// Modeling-scale means and variances (`r x m`) at unit-cube inputs (`m x d`).
    pub fn predict_unit(&self, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let c = self.cache()?;
        let wstar = cross_correlation(&self.common.inputs, u, &without_nugget(&self.theta))?;
        let at_train = c.weights_raw.tr_mul(&wstar);
        let means = c.cross_s.tr_mul(&at_train);
        let a = quad_diag(&c.wx_chol, &wstar);
        let vars = DMatrix::from_fn(means.nrows(), u.nrows(), |j, t| {
            self.tau_hat * (1.0 - a[t] * c.spatial_quad[j]).max(0.0) + self.sigma2
        });
        Ok((means, vars))
    }

    /// As [`SgpModel::predict_unit`] but only at the listed grid locations (rows follow `locations`).
    pub fn predict_locations(&self, u: &DMatrix<f64>, locations: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let c = self.cache()?;
        if let Some(&j) = locations.iter().find(|&&j| j >= c.cross_s.ncols()) {
            return input_err(format!("location {j} is outside the grid"));
        }
        let wstar = cross_correlation(&self.common.inputs, u, &without_nugget(&self.theta))?;
        let a = quad_diag(&c.wx_chol, &wstar);
        let at_train = c.weights_raw.tr_mul(&wstar);
        let mut means = DMatrix::zeros(locations.len(), u.nrows());
        let mut vars = DMatrix::zeros(locations.len(), u.nrows());
        for (row, &j) in locations.iter().enumerate() {
            let ws = c.cross_s.column(j);
            for t in 0..u.nrows() {
                means[(row, t)] = ws.dot(&at_train.column(t));
                vars[(row, t)] = self.tau_hat * (1.0 - a[t] * c.spatial_quad[j]).max(0.0) + self.sigma2;
            }
        }
        Ok((means, vars))
    }
}

pub fn fit_sgp(
    data: &SimDataset,
    theta: &CorrelationParams,
    nu: &SpatialCorrelationParams,
    priors: &PriorConfig,
    subgrid: Option<&[usize]>,
) -> Result<EmulatorModel> {
    Ok(EmulatorModel::Sgp(SgpTrainer::new(data, subgrid, priors, SGP_DEFAULT_CAP)?.fit(theta, nu)?))
}

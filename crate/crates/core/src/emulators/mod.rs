//! The four emulators and their predictive distributions.
//!
//! | kind    | basis | coefficient covariance          | hyper-parameters       |
//! |---------|-------|---------------------------------|------------------------|
//! | `pcgp`  | PC    | independent per coefficient     | sampled (MCMC)         |
//! | `itprs` | TPRS  | independent per coefficient     | sampled (MCMC)         |
//! | `stprs` | TPRS  | separable `τ W ⊗ V`             | plug-in                |
//! | `sgp`   | none  | separable over inputs x space   | plug-in                |
//!
//! All models work on the standardized scale; predictions are reported on both
//! the standardized ("model") scale and the original response scale.

mod independent;
mod separable;

pub use independent::{fit_independent, fit_itprs, fit_pcgp, IndependentModel};
pub use separable::{fit_sgp, fit_stprs, SgpModel, SgpTrainer, StprsModel, StprsTrainer, SGP_DEFAULT_CAP};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::OutputGrid;
use crate::design::{standardize, InputRanges, StandardizationParams};
use crate::error::{input_err, EmuError, Result};
use crate::sim::SimDataset;

/// Version written into model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmulatorKind {
    Pcgp,
    Itprs,
    Stprs,
    Sgp,
}

impl EmulatorKind {
    pub const ALL: [EmulatorKind; 4] = [EmulatorKind::Pcgp, EmulatorKind::Itprs, EmulatorKind::Stprs, EmulatorKind::Sgp];

    pub fn name(self) -> &'static str {
        match self {
            EmulatorKind::Pcgp => "pcgp",
            EmulatorKind::Itprs => "itprs",
            EmulatorKind::Stprs => "stprs",
            EmulatorKind::Sgp => "sgp",
        }
    }

    /// True for the emulators whose hyper-parameters are sampled.
    pub fn is_sampled(self) -> bool {
        matches!(self, EmulatorKind::Pcgp | EmulatorKind::Itprs)
    }
}

impl fmt::Display for EmulatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmulatorKind {
    type Err = EmuError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pcgp" | "pc-gp" => Ok(EmulatorKind::Pcgp),
            "itprs" | "itprs-gp" => Ok(EmulatorKind::Itprs),
            "stprs" | "stprs-gp" => Ok(EmulatorKind::Stprs),
            "sgp" => Ok(EmulatorKind::Sgp),
            other => input_err(format!("unknown emulator '{other}' (expected pcgp, itprs, stprs or sgp)")),
        }
    }
}

/// Training-set facts every emulator keeps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCommon {
    pub ranges: InputRanges,
    /// `n x d` training inputs on the unit cube.
    pub inputs: DMatrix<f64>,
    pub standardization: StandardizationParams,
    pub grid: OutputGrid,
}

impl ModelCommon {
    /// Standardize a training set; returns the common block and the `n x r` standardized responses.
    pub fn from_data(data: &SimDataset) -> Result<(Self, DMatrix<f64>)> {
        let (z, mut standardization) = standardize(&data.responses, data.log1p)?;
        standardization.input_ranges = Some(data.ranges.clone());
        let common = Self {
            ranges: data.ranges.clone(),
            inputs: data.unit_inputs(),
            standardization,
            grid: data.grid.clone(),
        };
        Ok((common, z))
    }

    pub fn n_runs(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Map physical query points onto the unit cube, warning on extrapolation.
    pub fn unit_points(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let u = self.ranges.to_unit(x)?;
        if u.iter().any(|v| !v.is_finite()) {
            return input_err("query inputs contain non-finite values");
        }
        if u.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
            log::warn!("query input outside the training box: extrapolating");
        }
        Ok(u)
    }

    /// Standardized truth for a holdout set on the same grid.
    pub fn standardized_truth(&self, holdout: &SimDataset) -> Result<DMatrix<f64>> {
        self.check_grid(&holdout.grid)?;
        if holdout.input_dim() != self.input_dim() {
            return input_err(format!("holdout has {} inputs, model has {}", holdout.input_dim(), self.input_dim()));
        }
        self.standardization.apply(&holdout.responses)
    }

    pub fn check_grid(&self, grid: &OutputGrid) -> Result<()> {
        if grid.len() != self.grid.len() || grid.dim() != self.grid.dim() {
            return input_err(format!(
                "grid has {} locations in {} dimensions, model was trained on {} in {}",
                grid.len(),
                grid.dim(),
                self.grid.len(),
                self.grid.dim()
            ));
        }
        let diff = (grid.locations() - self.grid.locations()).amax();
        let scale = self.grid.locations().amax().max(1.0);
        if diff > 1e-9 * scale {
            return input_err("grid locations differ from the training grid");
        }
        Ok(())
    }
}

/// Predictive summary at one input over every output location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    /// Original response scale.
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
    /// Standardized modeling scale.
    pub model_mean: DVector<f64>,
    pub model_sd: DVector<f64>,
    /// Raw draws on the modeling scale (`n_samples x r`), when requested.
    pub samples: Option<DMatrix<f64>>,
}

/// Multiplier used for the interval endpoints when `log(y + 1)` is undone.
const ENDPOINT_K: f64 = 3.0;

impl PredictiveDistribution {
    /// Summaries from modeling-scale moments (no samples).
    pub fn from_moments(params: &StandardizationParams, model_mean: DVector<f64>, model_var: DVector<f64>) -> Self {
        let r = model_mean.len();
        let mut model_sd = DVector::zeros(r);
        for j in 0..r {
            let v = model_var[j];
            if v < -1e-10 {
                log::warn!("negative predictive variance {v:.3e} at location {j}; clamped to 0");
            }
            model_sd[j] = v.max(0.0).sqrt();
        }
        let (mean, sd) = original_scale(params, &model_mean, &model_sd);
        Self { mean, sd, model_mean, model_sd, samples: None }
    }

    /// Summaries taken from modeling-scale draws (`n_samples x r`).
    pub fn from_samples(params: &StandardizationParams, samples: DMatrix<f64>) -> Self {
        let (ns, r) = samples.shape();
        let stats = |col: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = col.collect();
            let m = v.iter().sum::<f64>() / ns as f64;
            let var = if ns > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (ns as f64 - 1.0) } else { 0.0 };
            (m, var.sqrt())
        };
        let mut model_mean = DVector::zeros(r);
        let mut model_sd = DVector::zeros(r);
        let mut mean = DVector::zeros(r);
        let mut sd = DVector::zeros(r);
        for j in 0..r {
            let (m, s) = stats(&mut samples.column(j).iter().copied());
            model_mean[j] = m;
            model_sd[j] = s;
            let (m, s) = stats(&mut samples.column(j).iter().map(|&z| params.invert_value(j, z)));
            mean[j] = m;
            sd[j] = s;
        }
        Self { mean, sd, model_mean, model_sd, samples: Some(samples) }
    }
}

fn original_scale(params: &StandardizationParams, m: &DVector<f64>, s: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let r = m.len();
    let mut mean = DVector::zeros(r);
    let mut sd = DVector::zeros(r);
    for j in 0..r {
        if params.degenerate[j] {
            mean[j] = params.invert_value(j, 0.0);
        } else if params.log1p {
            let lo = params.invert_value(j, m[j] - ENDPOINT_K * s[j]);
            let hi = params.invert_value(j, m[j] + ENDPOINT_K * s[j]);
            mean[j] = 0.5 * (lo + hi);
            sd[j] = (hi - lo) / (2.0 * ENDPOINT_K);
        } else {
            mean[j] = params.invert_value(j, m[j]);
            sd[j] = s[j] * params.sd[j];
        }
    }
    (mean, sd)
}

/// Prediction controls for the sampled emulators; ignored by the plug-in ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Posterior draws (evenly spaced through the chain) used per prediction.
    pub n_samples: usize,
    /// Return raw predictive draws; summaries are then sample statistics.
    pub keep_samples: bool,
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { n_samples: 500, keep_samples: false, seed: 0 }
    }
}

/// A fitted emulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmulatorModel {
    Pcgp(IndependentModel),
    Itprs(IndependentModel),
    Stprs(StprsModel),
    Sgp(SgpModel),
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: EmulatorModel,
}

impl EmulatorModel {
    pub fn kind(&self) -> EmulatorKind {
        match self {
            EmulatorModel::Pcgp(_) => EmulatorKind::Pcgp,
            EmulatorModel::Itprs(_) => EmulatorKind::Itprs,
            EmulatorModel::Stprs(_) => EmulatorKind::Stprs,
            EmulatorModel::Sgp(_) => EmulatorKind::Sgp,
        }
    }

    pub fn common(&self) -> &ModelCommon {
        match self {
            EmulatorModel::Pcgp(m) | EmulatorModel::Itprs(m) => &m.common,
            EmulatorModel::Stprs(m) => &m.common,
            EmulatorModel::Sgp(m) => &m.common,
        }
    }

    pub fn grid(&self) -> &OutputGrid {
        &self.common().grid
    }

    /// Posterior-mean predictions on the modeling scale, `m x r`, for physical inputs `x` (`m x d`).
    pub fn predict_means(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let u = self.common().unit_points(x)?;
        match self {
            EmulatorModel::Stprs(m) => Ok(m.predict_unit(&u)?.0.transpose()),
            EmulatorModel::Sgp(m) => Ok(m.predict_unit(&u)?.0.transpose()),
            EmulatorModel::Pcgp(m) | EmulatorModel::Itprs(m) => {
                let preds = m.predict_unit(&u, &PredictOptions::default())?;
                let r = self.grid().len();
                Ok(DMatrix::from_fn(preds.len(), r, |i, j| preds[i].model_mean[j]))
            }
        }
    }

    pub fn predict_batch(&self, x: &DMatrix<f64>, opts: &PredictOptions) -> Result<Vec<PredictiveDistribution>> {
        let common = self.common();
        let u = common.unit_points(x)?;
        let moments = match self {
            EmulatorModel::Stprs(m) => m.predict_unit(&u)?,
            EmulatorModel::Sgp(m) => m.predict_unit(&u)?,
            EmulatorModel::Pcgp(m) | EmulatorModel::Itprs(m) => return m.predict_unit(&u, opts),
        };
        let (means, vars) = moments;
        Ok((0..u.nrows())
            .map(|i| {
                PredictiveDistribution::from_moments(
                    &common.standardization,
                    means.column(i).into_owned(),
                    vars.column(i).into_owned(),
                )
            })
            .collect())
    }

    pub fn predict(&self, x: &[f64], opts: &PredictOptions) -> Result<PredictiveDistribution> {
        let m = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.predict_batch(&m, opts)?.remove(0))
    }

    /// Error variance on the modeling scale used by predictions.
    pub fn sigma2(&self) -> f64 {
        match self {
            EmulatorModel::Stprs(m) => m.sigma2,
            EmulatorModel::Sgp(m) => m.sigma2,
            EmulatorModel::Pcgp(m) | EmulatorModel::Itprs(m) => m.mean_sigma2(),
        }
    }

    pub fn set_sigma2(&mut self, sigma2: f64) -> Result<()> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(EmuError::Parameter(format!("sigma2 must be >= 0, got {sigma2}")));
        }
        match self {
            EmulatorModel::Stprs(m) => m.sigma2 = sigma2,
            EmulatorModel::Sgp(m) => m.sigma2 = sigma2,
            EmulatorModel::Pcgp(_) | EmulatorModel::Itprs(_) => {
                return Err(EmuError::State("error variance of a sampled emulator comes from its chain".into()))
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile { format_version: MODEL_FORMAT_VERSION, model: self.clone() })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return input_err(format!(
                "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            ));
        }
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Mean squared residual of posterior-mean predictions on a holdout set (modeling scale).
pub fn holdout_mse(model: &EmulatorModel, holdout: &SimDataset) -> Result<f64> {
    if holdout.n_runs() == 0 {
        return input_err("holdout set is empty");
    }
    let truth = model.common().standardized_truth(holdout)?;
    let pred = model.predict_means(&holdout.inputs)?;
    let mut acc = 0.0;
    for (a, b) in pred.iter().zip(truth.iter()) {
        acc += (a - b).powi(2);
    }
    Ok(acc / truth.len() as f64)
}

/// Estimate the error variance of a plug-in emulator from a holdout set and store it.
pub fn estimate_sigma2(model: &mut EmulatorModel, holdout: &SimDataset) -> Result<f64> {
    let s2 = holdout_mse(model, holdout)?;
    model.set_sigma2(s2)?;
    Ok(s2)
}

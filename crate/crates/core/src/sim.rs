//! Two-spill pollutant channel simulator and CSV ingestion of external runs.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::OutputGrid;
use crate::design::InputRanges;
use crate::error::{input_err, EmuError, Result};

/// Geometry of the second spill plus the input box of the four simulator inputs
/// `(mass1, diffusion1, mass2, diffusion2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpillConfig {
    /// Location of the second spill.
    pub l: f64,
    /// Time of the second spill.
    pub t_spill: f64,
    pub ranges: [(f64, f64); 4],
}

impl Default for SpillConfig {
    fn default() -> Self {
        Self { l: 1.505, t_spill: 30.1525, ranges: [(7.0, 13.0), (0.02, 0.12), (7.0, 13.0), (0.02, 0.12)] }
    }
}

impl SpillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_spill > 0.0) || !self.l.is_finite() {
            return input_err(format!("spill time must be > 0, got {}", self.t_spill));
        }
        for (j, &(lo, hi)) in self.ranges.iter().enumerate() {
            if !(lo < hi) {
                return input_err(format!("range of x{} must satisfy low < high", j + 1));
            }
            if (j == 1 || j == 3) && lo <= 0.0 {
                return input_err(format!("diffusion range of x{} must be positive", j + 1));
            }
        }
        Ok(())
    }

    /// Input box of the first `d` inputs, which vary in scenario `d`.
    pub fn scenario_ranges(&self, d: usize) -> Result<InputRanges> {
        if !(1..=4).contains(&d) {
            return input_err(format!("scenario must be 1..4, got {d}"));
        }
        InputRanges::new(self.ranges[..d].to_vec())
    }

    /// Full input vector: the first `active.len()` inputs from `active`, the rest at range midpoints.
    pub fn full_input(&self, active: &[f64]) -> Result<[f64; 4]> {
        if active.is_empty() || active.len() > 4 {
            return input_err(format!("expected 1..4 active inputs, got {}", active.len()));
        }
        let mut x = [0.0; 4];
        for (j, v) in x.iter_mut().enumerate() {
            *v = active.get(j).copied().unwrap_or(0.5 * (self.ranges[j].0 + self.ranges[j].1));
        }
        Ok(x)
    }
}

fn gaussian_term(mass: f64, diff: f64, ds: f64, dt: f64) -> f64 {
    mass / (4.0 * std::f64::consts::PI * diff * dt).sqrt() * (-(ds * ds) / (4.0 * diff * dt)).exp()
}

/// Concentration at location `s[0]`, time `s[1]` for inputs `x`.
pub fn pollutant_concentration(x: &[f64; 4], s: &[f64; 2], config: &SpillConfig) -> Result<f64> {
    let (s1, s2) = (s[0], s[1]);
    if !(s2 > 0.0) {
        return input_err(format!("time must be > 0, got {s2}"));
    }
    if !(x[1] > 0.0) || !(x[3] > 0.0) {
        return input_err("diffusion rates must be > 0");
    }
    let mut c = gaussian_term(x[0], x[1], s1, s2);
    if s2 > config.t_spill {
        c += gaussian_term(x[2], x[3], s1 - config.l, s2 - config.t_spill);
    }
    Ok(c)
}

/// `n` runs over a shared output grid. Responses are on the raw simulator scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDataset {
    /// `n x d` physical inputs.
    pub inputs: DMatrix<f64>,
    pub grid: OutputGrid,
    /// `n x r` responses.
    pub responses: DMatrix<f64>,
    /// Box used to map the inputs onto the unit cube.
    pub ranges: InputRanges,
    /// Model `log(y + 1)` instead of `y`.
    #[serde(default)]
    pub log1p: bool,
}

impl SimDataset {
    pub fn new(inputs: DMatrix<f64>, grid: OutputGrid, responses: DMatrix<f64>, ranges: InputRanges) -> Result<Self> {
        if inputs.nrows() != responses.nrows() {
            return input_err(format!("{} input rows but {} response rows", inputs.nrows(), responses.nrows()));
        }
        if responses.ncols() != grid.len() {
            return input_err(format!("{} response columns but {} grid locations", responses.ncols(), grid.len()));
        }
        if inputs.ncols() != ranges.dim() {
            return input_err(format!("inputs have {} columns, ranges have {}", inputs.ncols(), ranges.dim()));
        }
        if responses.iter().chain(inputs.iter()).any(|v| !v.is_finite()) {
            return input_err("dataset contains non-finite values");
        }
        Ok(Self { inputs, grid, responses, ranges, log1p: false })
    }

    pub fn with_log1p(mut self, log1p: bool) -> Self {
        self.log1p = log1p;
        self
    }

    pub fn n_runs(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn grid_len(&self) -> usize {
        self.grid.len()
    }

    /// Inputs mapped onto the unit cube.
    pub fn unit_inputs(&self) -> DMatrix<f64> {
        self.ranges.to_unit(&self.inputs).expect("dimensions checked at construction")
    }

    /// Same runs restricted to a subset of output locations.
    pub fn restrict_grid(&self, indices: &[usize]) -> Result<Self> {
        let grid = self.grid.subset(indices)?;
        let responses = self.responses.select_columns(indices);
        Ok(Self { inputs: self.inputs.clone(), grid, responses, ranges: self.ranges.clone(), log1p: self.log1p })
    }
}

/// Default `m x m` lattice over location `[0, 3]` and time `(0, 60.5]`.
pub fn default_grid(m: usize) -> Result<OutputGrid> {
    OutputGrid::lattice(&[m, m], &[(0.0, 3.0), (0.0, 60.5)])
}

/// Run the simulator for every design row (first `scenario_d` inputs) at every grid location.
pub fn generate_dataset(design: &DMatrix<f64>, scenario_d: usize, grid: &OutputGrid, config: &SpillConfig) -> Result<SimDataset> {
    config.validate()?;
    let ranges = config.scenario_ranges(scenario_d)?;
    if design.ncols() != scenario_d {
        return input_err(format!("scenario {scenario_d} needs {scenario_d} design columns, got {}", design.ncols()));
    }
    if grid.dim() != 2 {
        return input_err(format!("pollutant simulator needs a 2-d grid, got {}", grid.dim()));
    }
    let (n, r) = (design.nrows(), grid.len());
    let mut y = DMatrix::zeros(n, r);
    for i in 0..n {
        let active: Vec<f64> = design.row(i).iter().copied().collect();
        let x = config.full_input(&active)?;
        let locs = grid.locations();
        for j in 0..r {
            y[(i, j)] = pollutant_concentration(&x, &[locs[(j, 0)], locs[(j, 1)]], config)?;
        }
    }
    SimDataset::new(design.clone(), grid.clone(), y, ranges)
}

fn parse_f64(field: &str, ctx: &Path) -> Result<f64> {
    field.trim().parse().map_err(|_| EmuError::Input(format!("{}: bad number '{field}'", ctx.display())))
}

fn read_id_table(path: &Path, id_col: &str, prefix: &str) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some(id_col) || headers.len() < 2 {
        return input_err(format!("{}: expected header {id_col},{prefix}1,...", path.display()));
    }
    let d = headers.len() - 1;
    let mut ids = Vec::new();
    let mut vals = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != d + 1 {
            return input_err(format!("{}: row has {} fields, expected {}", path.display(), rec.len(), d + 1));
        }
        ids.push(rec[0].trim().to_string());
        for k in 1..=d {
            vals.push(parse_f64(&rec[k], path)?);
        }
    }
    if ids.is_empty() {
        return input_err(format!("{}: no rows", path.display()));
    }
    Ok((ids.clone(), DMatrix::from_row_slice(ids.len(), d, &vals)))
}

fn index_ids(ids: &[String], path: &Path) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return input_err(format!("{}: duplicate id '{id}'", path.display()));
        }
    }
    Ok(map)
}

/// Load an external dataset from `inputs.csv`, `grid.csv` and `outputs.csv` in `dir`.
///
/// Every (run, location) pair must appear exactly once in `outputs.csv`. When
/// `ranges` is `None` the input box is the observed per-column min/max.
pub fn load_dataset_dir(dir: &Path, ranges: Option<InputRanges>) -> Result<SimDataset> {
    load_dataset(&dir.join("inputs.csv"), &dir.join("grid.csv"), &dir.join("outputs.csv"), ranges)
}

pub fn load_dataset(inputs_path: &Path, grid_path: &Path, outputs_path: &Path, ranges: Option<InputRanges>) -> Result<SimDataset> {
    let (run_ids, inputs) = read_id_table(inputs_path, "run_id", "x")?;
    let (loc_ids, locs) = read_id_table(grid_path, "loc_id", "s")?;
    let runs = index_ids(&run_ids, inputs_path)?;
    let loc_index = index_ids(&loc_ids, grid_path)?;
    let (n, r) = (run_ids.len(), loc_ids.len());

    let mut y = DMatrix::from_element(n, r, f64::NAN);
    let mut rdr = csv::Reader::from_path(outputs_path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["run_id", "loc_id", "y"] {
        return input_err(format!("{}: expected header run_id,loc_id,y", outputs_path.display()));
    }
    for rec in rdr.records() {
        let rec = rec?;
        let i = *runs
            .get(rec[0].trim())
            .ok_or_else(|| EmuError::Input(format!("{}: unknown run_id '{}'", outputs_path.display(), &rec[0])))?;
        let j = *loc_index
            .get(rec[1].trim())
            .ok_or_else(|| EmuError::Input(format!("{}: unknown loc_id '{}'", outputs_path.display(), &rec[1])))?;
        if !y[(i, j)].is_nan() {
            return input_err(format!("{}: duplicate cell ({}, {})", outputs_path.display(), &rec[0], &rec[1]));
        }
        y[(i, j)] = parse_f64(&rec[2], outputs_path)?;
    }
    let missing = y.iter().filter(|v| v.is_nan()).count();
    if missing > 0 {
        return input_err(format!("{}: {missing} of {} (run, location) cells missing", outputs_path.display(), n * r));
    }

    let ranges = match ranges {
        Some(r) => r,
        None => {
            let bounds = (0..inputs.ncols())
                .map(|k| {
                    let c = inputs.column(k);
                    let (lo, hi) = (c.min(), c.max());
                    if hi > lo {
                        (lo, hi)
                    } else {
                        (lo - 0.5, lo + 0.5)
                    }
                })
                .collect();
            InputRanges::new(bounds)?
        }
    };
    SimDataset::new(inputs, OutputGrid::new(locs, None, None)?, y, ranges)
}

/// Read a `loc_id,s1,...,sq` grid file.
pub fn read_grid_csv(path: &Path) -> Result<OutputGrid> {
    let (ids, locs) = read_id_table(path, "loc_id", "s")?;
    index_ids(&ids, path)?;
    OutputGrid::new(locs, None, None)
}

/// Write `inputs.csv`, `grid.csv` and `outputs.csv` (long format) into `dir`.
pub fn write_dataset_dir(dir: &Path, data: &SimDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::design::write_design_csv(&dir.join("inputs.csv"), &data.inputs)?;

    let mut g = csv::Writer::from_path(dir.join("grid.csv"))?;
    let mut header = vec!["loc_id".to_string()];
    header.extend((1..=data.grid.dim()).map(|k| format!("s{k}")));
    g.write_record(&header)?;
    for j in 0..data.grid.len() {
        let mut rec = vec![j.to_string()];
        rec.extend(data.grid.location(j).iter().map(|v| v.to_string()));
        g.write_record(&rec)?;
    }
    g.flush()?;

    let mut o = csv::Writer::from_path(dir.join("outputs.csv"))?;
    o.write_record(["run_id", "loc_id", "y"])?;
    for i in 0..data.n_runs() {
        for j in 0..data.grid_len() {
            o.write_record([i.to_string(), j.to_string(), data.responses[(i, j)].to_string()])?;
        }
    }
    o.flush()?;
    Ok(())
}

//! Experimental designs over the input box and per-location standardization of responses.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, EmuError, Result};

/// Physical `(low, high)` limits of each input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRanges {
    bounds: Vec<(f64, f64)>,
}

impl InputRanges {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return input_err("input ranges need at least one dimension");
        }
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return input_err(format!("input range {j} must satisfy low < high, got ({lo}, {hi})"));
            }
        }
        Ok(Self { bounds })
    }

    pub fn unit(d: usize) -> Self {
        Self { bounds: vec![(0.0, 1.0); d] }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn midpoint(&self, j: usize) -> f64 {
        0.5 * (self.bounds[j].0 + self.bounds[j].1)
    }

    /// Map physical points (rows) onto `[0, 1]^d`.
    pub fn to_unit(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return input_err(format!("points have {} columns, ranges have {}", x.ncols(), self.dim()));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let (lo, hi) = self.bounds[j];
            (x[(i, j)] - lo) / (hi - lo)
        }))
    }

    pub fn point_to_unit(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return input_err(format!("point has {} coordinates, ranges have {}", x.len(), self.dim()));
        }
        Ok(x.iter().zip(&self.bounds).map(|(v, (lo, hi))| (v - lo) / (hi - lo)).collect())
    }

    pub fn from_unit(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| {
            let (lo, hi) = self.bounds[j];
            lo + u[(i, j)] * (hi - lo)
        })
    }
}

fn min_pairwise_sq(points: &DMatrix<f64>) -> f64 {
    let n = points.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in 0..i {
            let d = sq_dist(points, i, j);
            if d < best {
                best = d;
            }
        }
    }
    best
}

#[inline]
fn sq_dist(points: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..points.ncols()).map(|k| (points[(i, k)] - points[(j, k)]).powi(2)).sum()
}

/// Smallest Euclidean distance between two distinct rows.
pub fn min_pairwise_distance(points: &DMatrix<f64>) -> f64 {
    min_pairwise_sq(points).sqrt()
}

fn random_lhs(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, d);
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..d {
        perm.shuffle(rng);
        for i in 0..n {
            out[(i, k)] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    out
}

/// Greedy refinement: swap one coordinate between a member of the closest pair
/// and a random other point, keeping swaps that enlarge the minimum distance.
/// Swapping within a column preserves the Latin hypercube property.
fn refine_swaps(points: &mut DMatrix<f64>, attempts: usize, rng: &mut ChaCha8Rng) {
    let n = points.nrows();
    let d = points.ncols();
    if n < 3 {
        return;
    }
    let mut current = min_pairwise_sq(points);
    for _ in 0..attempts {
        let (mut ci, mut cj, mut best) = (0, 1, f64::INFINITY);
        for i in 0..n {
            for j in 0..i {
                let v = sq_dist(points, i, j);
                if v < best {
                    best = v;
                    ci = i;
                    cj = j;
                }
            }
        }
        let i = if rng.random::<bool>() { ci } else { cj };
        let mut l = rng.random_range(0..n - 1);
        if l >= i {
            l += 1;
        }
        let k = rng.random_range(0..d);
        points.swap((i, k), (l, k));
        let next = min_pairwise_sq(points);
        if next > current {
            current = next;
        } else {
            points.swap((i, k), (l, k));
        }
    }
}

/// Maximin Latin hypercube design of `n` points over `ranges`.
///
/// Each of the `iterations` candidates is a random Latin hypercube refined by
/// greedy coordinate swaps, drawn from its own ChaCha stream of `seed`; the
/// candidate with the largest minimum pairwise distance (on the unit box) wins,
/// ties going to the earlier candidate. Adding iterations never lowers the
/// achieved minimum distance.
pub fn maximin_lhs(n: usize, ranges: &InputRanges, iterations: usize, seed: u64) -> Result<DMatrix<f64>> {
    Ok(ranges.from_unit(&maximin_lhs_unit(n, ranges.dim(), iterations, seed)?))
}

pub fn maximin_lhs_unit(n: usize, d: usize, iterations: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n < 2 {
        return input_err(format!("maximin LHS needs n >= 2, got {n}"));
    }
    if iterations == 0 {
        return input_err("maximin LHS needs at least one iteration");
    }
    if d == 0 {
        return input_err("maximin LHS needs d >= 1");
    }
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for it in 0..iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(it as u64);
        let mut cand = random_lhs(n, d, &mut rng);
        refine_swaps(&mut cand, 10 * n, &mut rng);
        let score = min_pairwise_sq(&cand);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, cand));
        }
    }
    Ok(best.map(|(_, c)| c).unwrap())
}

/// `n` i.i.d. uniform points over the box.
pub fn monte_carlo_sample(n: usize, ranges: &InputRanges, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return input_err("Monte Carlo sample needs n >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ranges.dim();
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let (lo, hi) = ranges.bounds()[j];
            out[(i, j)] = lo + rng.random::<f64>() * (hi - lo);
        }
    }
    Ok(out)
}

/// Locations whose spread is below this fraction of their mean magnitude are
/// treated as constant (their variation is at the rounding level).
pub const DEGENERATE_RELATIVE_SD: f64 = 1e-9;

/// Per-location centering and scaling, optionally after `log(y + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Constant locations: standardized to zero and restored as `mean`.
    pub degenerate: Vec<bool>,
    pub log1p: bool,
    /// Affine map of the inputs onto the unit box.
    pub input_ranges: Option<InputRanges>,
}

impl StandardizationParams {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    fn forward_value(&self, v: f64) -> Result<f64> {
        if self.log1p {
            if v < -1.0 {
                return input_err(format!("log(y + 1) undefined for y = {v}"));
            }
            Ok(v.ln_1p())
        } else {
            Ok(v)
        }
    }

    /// Standardize new responses (`n x r`) with these parameters.
    pub fn apply(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.ncols() != self.len() {
            return input_err(format!("responses have {} locations, expected {}", y.ncols(), self.len()));
        }
        let mut out = DMatrix::zeros(y.nrows(), y.ncols());
        for j in 0..y.ncols() {
            for i in 0..y.nrows() {
                let t = self.forward_value(y[(i, j)])?;
                out[(i, j)] = if self.degenerate[j] { 0.0 } else { (t - self.mean[j]) / self.sd[j] };
            }
        }
        Ok(out)
    }

    /// Location `j` back on the transformed (pre-scaling) scale; `log(y+1)` still applied.
    pub fn unscale_value(&self, j: usize, z: f64) -> f64 {
        if self.degenerate[j] {
            self.mean[j]
        } else {
            self.mean[j] + z * self.sd[j]
        }
    }

    /// Location `j` back on the original response scale.
    pub fn invert_value(&self, j: usize, z: f64) -> f64 {
        let t = self.unscale_value(j, z);
        if self.log1p {
            t.exp_m1()
        } else {
            t
        }
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.len() {
            return input_err(format!("values have {} locations, expected {}", z.ncols(), self.len()));
        }
        Ok(DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| self.invert_value(j, z[(i, j)])))
    }
}

/// Standardize each output location (column) to mean 0 and sample SD 1 (`n - 1` divisor).
pub fn standardize(responses: &DMatrix<f64>, log1p: bool) -> Result<(DMatrix<f64>, StandardizationParams)> {
    let (n, r) = responses.shape();
    if n < 2 {
        return input_err(format!("standardization needs at least 2 runs, got {n}"));
    }
    if responses.iter().any(|v| !v.is_finite()) {
        return input_err("responses contain non-finite values");
    }
    let mut transformed = responses.clone();
    if log1p {
        for v in transformed.iter_mut() {
            if *v < -1.0 {
                return input_err(format!("log(y + 1) undefined for y = {v}"));
            }
            *v = v.ln_1p();
        }
    }
    let mut mean = vec![0.0; r];
    let mut sd = vec![0.0; r];
    let mut degenerate = vec![false; r];
    let mut out = DMatrix::zeros(n, r);
    for j in 0..r {
        let col = transformed.column(j);
        let m = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let s = var.sqrt();
        mean[j] = m;
        if !(s > DEGENERATE_RELATIVE_SD * m.abs()) || s == 0.0 {
            degenerate[j] = true;
            sd[j] = 1.0;
            continue;
        }
        sd[j] = s;
        for i in 0..n {
            out[(i, j)] = (transformed[(i, j)] - m) / s;
        }
    }
    Ok((out, StandardizationParams { mean, sd, degenerate, log1p, input_ranges: None }))
}

/// Write a design as CSV with header `run_id,x1,...,xd`.
pub fn write_design_csv(path: &Path, design: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["run_id".to_string()];
    header.extend((1..=design.ncols()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for i in 0..design.nrows() {
        let mut rec = vec![i.to_string()];
        rec.extend(design.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a design written by [`write_design_csv`]; rows are returned in `run_id` order.
pub fn read_design_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("run_id") || headers.len() < 2 {
        return input_err(format!("{}: expected header run_id,x1,...", path.display()));
    }
    let d = headers.len() - 1;
    let mut ids = Vec::new();
    let mut vals = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != d + 1 {
            return input_err(format!("{}: row has {} fields, expected {}", path.display(), rec.len(), d + 1));
        }
        ids.push(rec[0].to_string());
        for k in 1..=d {
            let v: f64 = rec[k]
                .trim()
                .parse()
                .map_err(|_| EmuError::Input(format!("{}: bad number '{}'", path.display(), &rec[k])))?;
            vals.push(v);
        }
    }
    Ok((ids.clone(), DMatrix::from_row_slice(ids.len(), d, &vals)))
}

//! Block-wise random-walk Metropolis for the independent-coefficient emulators.
//!
//! The coefficient estimates `β̂` (basis-major, length `n·p`) have marginal
//! covariance `D = σ² (G⁻¹ ⊗ I_n) + blockdiag(τ_k W_k)`, `G` the basis Gram
//! matrix. Proposals for `τ_k` or `θ_k` change one diagonal block of `D`, so
//! the cached inverse is advanced with [`BlockUpdate`]; `σ⁻²` (and the shared
//! nugget) proposals refactor `D` from scratch.

use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{input_err, EmuError, Result};
use crate::linalg::{chol_log_det, correlation_matrix, BlockUpdate, CorrelationParams, DEFAULT_NUGGET};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    /// Shape `a`, scale `b`.
    Gamma,
    Beta,
}

/// Normalized log density; `-inf` outside the support.
pub fn prior_log_density(kind: PriorKind, value: f64, a: f64, b: f64) -> f64 {
    if !(a > 0.0 && b > 0.0) || !value.is_finite() {
        return f64::NEG_INFINITY;
    }
    match kind {
        PriorKind::Gamma => {
            if value <= 0.0 {
                return f64::NEG_INFINITY;
            }
            (a - 1.0) * value.ln() - value / b - ln_gamma(a) - a * b.ln()
        }
        PriorKind::Beta => {
            if value <= 0.0 || value >= 1.0 {
                return f64::NEG_INFINITY;
            }
            (a - 1.0) * value.ln() + (b - 1.0) * (1.0 - value).ln() - ln_beta(a, b)
        }
    }
}

/// Prior hyper-parameters. `tau` priors are on the precision `τ⁻¹` (shape, scale);
/// `sigma` priors are on the error precision `σ⁻²`; `theta` priors are Beta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub a_tau: f64,
    pub b_tau: f64,
    pub a_theta: f64,
    pub b_theta: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub nugget: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::independent_default()
    }
}

impl PriorConfig {
    /// Settings for the sampled (PC / iTPRS) emulators.
    pub fn independent_default() -> Self {
        Self { a_tau: 5.0, b_tau: 0.2, a_theta: 1.0, b_theta: 0.1, a_sigma: 2.0, b_sigma: 0.01, nugget: DEFAULT_NUGGET }
    }

    /// Settings for the plug-in (separable) emulators, which only use `a_tau`, `b_tau` and the nugget.
    pub fn plug_in_default() -> Self {
        Self { a_tau: 1.0, b_tau: 1.0, ..Self::independent_default() }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("a_tau", self.a_tau),
            ("b_tau", self.b_tau),
            ("a_theta", self.a_theta),
            ("b_theta", self.b_theta),
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
        ];
        for (name, v) in named {
            if !(v > 0.0) || !v.is_finite() {
                return Err(EmuError::Parameter(format!("prior parameter {name} must be > 0, got {v}")));
            }
        }
        if !(self.nugget >= 0.0) || !self.nugget.is_finite() {
            return Err(EmuError::Parameter(format!("nugget must be >= 0, got {}", self.nugget)));
        }
        Ok(())
    }
}

/// Something a block Metropolis sampler can explore, in unconstrained coordinates `z`.
///
/// `evaluate` stages a proposal that differs from the current point only in
/// `block`; `commit` makes the most recently staged proposal current.
pub trait BlockTarget {
    fn dim(&self) -> usize;
    fn blocks(&self) -> Vec<Range<usize>>;
    fn coordinate_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("z{i}")).collect()
    }
    fn init(&mut self, z: &[f64]) -> Result<f64>;
    fn evaluate(&mut self, z: &[f64], block: usize) -> Result<f64>;
    fn commit(&mut self) -> Result<()>;
}

/// A [`BlockTarget`] built from a closure evaluating the full log density.
pub struct FnTarget<F> {
    blocks: Vec<Range<usize>>,
    dim: usize,
    f: F,
}

impl<F: FnMut(&[f64]) -> f64> FnTarget<F> {
    /// One block per coordinate.
    pub fn new(dim: usize, f: F) -> Self {
        Self { blocks: (0..dim).map(|i| i..i + 1).collect(), dim, f }
    }

    pub fn with_blocks(blocks: Vec<Range<usize>>, f: F) -> Self {
        let dim = blocks.iter().map(|b| b.end).max().unwrap_or(0);
        Self { blocks, dim, f }
    }
}

impl<F: FnMut(&[f64]) -> f64> BlockTarget for FnTarget<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn blocks(&self) -> Vec<Range<usize>> {
        self.blocks.clone()
    }
    fn init(&mut self, z: &[f64]) -> Result<f64> {
        Ok((self.f)(z))
    }
    fn evaluate(&mut self, z: &[f64], _block: usize) -> Result<f64> {
        Ok((self.f)(z))
    }
    fn commit(&mut self) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Tune per-block proposal scales during burn-in.
    pub adapt: bool,
    pub adapt_every: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { n_iter: 10_000, burn_in: 1_000, seed: 0, adapt: true, adapt_every: 50 }
    }
}

/// Full record of one chain.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// State after every sweep, `n_iter x dim`.
    pub trace: DMatrix<f64>,
    /// Accept/reject decision of every block proposal, `n_iter x n_blocks`.
    pub decisions: Vec<Vec<bool>>,
    /// Log density of the current state after every sweep.
    pub log_density: Vec<f64>,
    /// Acceptance rate per block over the retained iterations.
    pub acceptance: Vec<f64>,
    pub final_scales: Vec<f64>,
    pub burn_in: usize,
    pub warnings: Vec<String>,
}

impl ChainOutput {
    /// Retained draws (rows after burn-in).
    pub fn draws(&self) -> DMatrix<f64> {
        self.trace.rows(self.burn_in, self.trace.nrows() - self.burn_in).into_owned()
    }
}

/// Random-walk Metropolis, one Gaussian block proposal at a time in block order.
pub fn metropolis_chain<T: BlockTarget + ?Sized>(
    target: &mut T,
    init: &[f64],
    proposal_scales: &[f64],
    config: &ChainConfig,
) -> Result<ChainOutput> {
    if config.n_iter == 0 || config.n_iter <= config.burn_in {
        return input_err(format!("need n_iter > burn_in, got {} and {}", config.n_iter, config.burn_in));
    }
    let blocks = target.blocks();
    if init.len() != target.dim() {
        return input_err(format!("initial state has {} coordinates, target has {}", init.len(), target.dim()));
    }
    if proposal_scales.len() != blocks.len() || proposal_scales.iter().any(|s| !(*s > 0.0)) {
        return input_err(format!("need {} positive proposal scales", blocks.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scales = proposal_scales.to_vec();
    let mut z = init.to_vec();
    let mut lp = target.init(&z)?;
    if !lp.is_finite() {
        return Err(EmuError::Numerical(format!("initial state has log density {lp}")));
    }
    let nb = blocks.len();
    let mut trace = DMatrix::zeros(config.n_iter, z.len());
    let mut decisions = Vec::with_capacity(config.n_iter);
    let mut log_density = Vec::with_capacity(config.n_iter);
    let mut window = vec![0usize; nb];
    let mut thousand = vec![0usize; nb];
    let mut retained = vec![0usize; nb];
    let mut warnings = Vec::new();
    let mut proposal = z.clone();

    for it in 0..config.n_iter {
        let mut row = Vec::with_capacity(nb);
        for (b, range) in blocks.iter().enumerate() {
            proposal.copy_from_slice(&z);
            for i in range.clone() {
                let e: f64 = rng.sample(StandardNormal);
                proposal[i] += scales[b] * e;
            }
            let lp_new = target.evaluate(&proposal, b)?;
            let u: f64 = rng.random();
            let accepted = !lp_new.is_nan() && lp_new > f64::NEG_INFINITY && u.ln() < lp_new - lp;
            if accepted {
                target.commit()?;
                z.copy_from_slice(&proposal);
                lp = lp_new;
                window[b] += 1;
                thousand[b] += 1;
                if it >= config.burn_in {
                    retained[b] += 1;
                }
            }
            row.push(accepted);
        }
        decisions.push(row);
        for (j, v) in z.iter().enumerate() {
            trace[(it, j)] = *v;
        }
        log_density.push(lp);

        if config.adapt && it < config.burn_in && (it + 1) % config.adapt_every == 0 {
            for b in 0..nb {
                let rate = window[b] as f64 / config.adapt_every as f64;
                if !(0.2..=0.5).contains(&rate) {
                    scales[b] *= (2.0 * (rate - 0.35)).exp();
                }
            }
        }
        if (it + 1) % config.adapt_every == 0 {
            window.iter_mut().for_each(|w| *w = 0);
        }
        if (it + 1) % 1000 == 0 {
            for b in 0..nb {
                if thousand[b] == 0 {
                    let msg = format!("block {b}: no proposal accepted in iterations {}..{}", it + 1 - 1000, it + 1);
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
            }
            thousand.iter_mut().for_each(|w| *w = 0);
        }
    }
    let kept = (config.n_iter - config.burn_in) as f64;
    Ok(ChainOutput {
        trace,
        decisions,
        log_density,
        acceptance: retained.iter().map(|&a| a as f64 / kept).collect(),
        final_scales: scales,
        burn_in: config.burn_in,
        warnings,
    })
}

/// Write a chain trace as CSV `iter,block,value,accepted`, one row per coordinate per sweep.
pub fn write_trace_csv(path: &Path, output: &ChainOutput, names: &[String], blocks: &[Range<usize>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,block,value,accepted")?;
    for it in 0..output.trace.nrows() {
        for (b, range) in blocks.iter().enumerate() {
            for i in range.clone() {
                writeln!(f, "{it},{},{},{}", names[i], output.trace[(it, i)], u8::from(output.decisions[it][b]))?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// Hyper-parameters of the independent-coefficient model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub sigma2_inv: f64,
    pub tau: Vec<f64>,
    /// `p x d`, row `k` for coefficient `k`.
    pub theta: DMatrix<f64>,
    pub nugget: f64,
}

impl ChainState {
    pub fn initial(p: usize, d: usize, sigma2_inv: f64, nugget: f64) -> Self {
        Self { sigma2_inv, tau: vec![1.0; p], theta: DMatrix::from_element(p, d, 0.5), nugget }
    }

    pub fn correlation(&self, k: usize) -> Result<CorrelationParams> {
        CorrelationParams::new(self.theta.row(k).iter().copied().collect(), self.nugget)
    }
}

/// Data the independent-coefficient posterior depends on.
#[derive(Debug, Clone)]
pub struct ItprsProblem {
    /// Least-squares coefficients, basis-major: entry `k*n + i` is run `i`, basis vector `k`.
    pub beta_hat: DVector<f64>,
    /// `p x p` basis Gram matrix.
    pub gram: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    /// `n x d` training inputs on the unit cube.
    pub inputs: DMatrix<f64>,
    /// Residual sum of squares of the basis fit.
    pub rss: f64,
    /// Output locations per run.
    pub n_locations: usize,
    pub priors: PriorConfig,
}

/// Nugget support when it is sampled (log-uniform).
pub const NUGGET_RANGE: (f64, f64) = (1e-10, 1e-2);

impl ItprsProblem {
    pub fn new(
        beta_hat: DVector<f64>,
        gram: DMatrix<f64>,
        inputs: DMatrix<f64>,
        rss: f64,
        n_locations: usize,
        priors: PriorConfig,
    ) -> Result<Self> {
        priors.validate()?;
        let p = gram.nrows();
        let n = inputs.nrows();
        if gram.ncols() != p || beta_hat.len() != n * p || p == 0 || n == 0 {
            return input_err(format!("coefficient vector of length {} does not match n={n}, p={p}", beta_hat.len()));
        }
        if n_locations < p {
            return input_err(format!("{p} basis vectors exceed {n_locations} output locations"));
        }
        let gram_inv = gram
            .clone()
            .cholesky()
            .ok_or_else(|| EmuError::Numerical("basis Gram matrix is not positive definite".into()))?
            .inverse();
        Ok(Self { beta_hat, gram, gram_inv, inputs, rss, n_locations, priors })
    }

    pub fn n_runs(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn n_basis(&self) -> usize {
        self.gram.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// True when the Gram matrix is diagonal, so the posterior factorizes over coefficients.
    pub fn gram_is_diagonal(&self) -> bool {
        let scale = self.gram.diagonal().amax();
        let p = self.n_basis();
        (0..p).all(|i| (0..p).all(|j| i == j || self.gram[(i, j)].abs() <= 1e-10 * scale))
    }

    /// Shape and scale of the modified Gamma prior on `σ⁻²` after absorbing the residual.
    pub fn sigma_prior(&self) -> (f64, f64) {
        let n = self.n_runs() as f64;
        let extra = (self.n_locations - self.n_basis()) as f64;
        let shape = self.priors.a_sigma + n * extra / 2.0;
        let scale = 1.0 / (1.0 / self.priors.b_sigma + self.rss / 2.0);
        (shape, scale)
    }

    pub fn correlation_block(&self, state: &ChainState, k: usize) -> Result<DMatrix<f64>> {
        correlation_matrix(&self.inputs, &state.correlation(k)?)
    }

    /// Dense `D` assembled from scratch.
    pub fn assemble(&self, state: &ChainState) -> Result<DMatrix<f64>> {
        let (n, p) = (self.n_runs(), self.n_basis());
        let s2 = 1.0 / state.sigma2_inv;
        let mut d = DMatrix::zeros(n * p, n * p);
        for k in 0..p {
            for l in 0..p {
                let g = s2 * self.gram_inv[(k, l)];
                for i in 0..n {
                    d[(k * n + i, l * n + i)] = g;
                }
            }
            let w = self.correlation_block(state, k)?;
            let mut blk = d.view_mut((k * n, k * n), (n, n));
            blk += w * state.tau[k];
        }
        Ok(d)
    }

    /// Log prior density of the hyper-parameters (natural coordinates).
    pub fn log_prior(&self, state: &ChainState, nugget_sampled: bool) -> f64 {
        let pr = &self.priors;
        let (a_s, b_s) = self.sigma_prior();
        let mut lp = prior_log_density(PriorKind::Gamma, state.sigma2_inv, a_s, b_s);
        for &t in &state.tau {
            // precision prior transported to τ
            lp += prior_log_density(PriorKind::Gamma, 1.0 / t, pr.a_tau, pr.b_tau) - 2.0 * t.ln();
        }
        for v in state.theta.iter() {
            lp += prior_log_density(PriorKind::Beta, *v, pr.a_theta, pr.b_theta);
        }
        if nugget_sampled {
            let (lo, hi) = NUGGET_RANGE;
            lp += if state.nugget >= lo && state.nugget <= hi {
                -state.nugget.ln() - (hi / lo).ln()
            } else {
                f64::NEG_INFINITY
            };
        }
        lp
    }

    fn gaussian_term(&self, log_det: f64, quad: f64) -> f64 {
        -0.5 * ((self.beta_hat.len() as f64) * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
    }
}

/// Log posterior density of `(σ⁻², τ, θ)` by dense factorization of `D`; `-inf` if `D` is not positive definite.
pub fn itprs_log_posterior(state: &ChainState, problem: &ItprsProblem) -> f64 {
    let prior = problem.log_prior(state, false);
    if !prior.is_finite() {
        return f64::NEG_INFINITY;
    }
    match problem.assemble(state).ok().and_then(|d| d.cholesky()) {
        Some(c) => {
            let quad = problem.beta_hat.dot(&c.solve(&problem.beta_hat));
            problem.gaussian_term(chol_log_det(&c), quad) + prior
        }
        None => f64::NEG_INFINITY,
    }
}

/// How the chain keeps `log|D|` and `β̂ᵀD⁻¹β̂` current.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateMode {
    /// Refactor `D` for every proposal.
    Dense,
    /// Cached `D⁻¹` advanced by block rank updates.
    Woodbury,
    /// Per-coefficient blocks; requires a diagonal Gram matrix.
    Factorized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chain: ChainConfig,
    pub initial_scale: f64,
    pub mode: UpdateMode,
    /// Accepted block updates between full re-inversions.
    pub refresh_every: usize,
    pub sample_nugget: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chain: ChainConfig::default(),
            initial_scale: 0.3,
            mode: UpdateMode::Woodbury,
            refresh_every: 100,
            sample_nugget: false,
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Dense { log_det: f64, quad: f64 },
    Woodbury { d_inv: DMatrix<f64>, log_det: f64, quad: f64, since_refresh: usize },
    Factorized { log_det: Vec<f64>, quad: Vec<f64> },
}

#[derive(Debug, Clone)]
enum Staged {
    Dense { log_det: f64, quad: f64, inverse: Option<DMatrix<f64>> },
    Block { update: BlockUpdate, log_det: f64, quad: f64 },
    Factor { log_det: Vec<f64>, quad: Vec<f64> },
}

/// The independent-coefficient posterior as a [`BlockTarget`].
///
/// Coordinates: `ln σ⁻²`, `ln τ_k`, `logit θ_kj` row by row, then `ln nugget`
/// when sampled. Blocks: `σ⁻²`, each `τ_k`, each row `θ_k`, nugget.
pub struct ItprsTarget<'a> {
    problem: &'a ItprsProblem,
    mode: UpdateMode,
    refresh_every: usize,
    sample_nugget: bool,
    state: ChainState,
    w: Vec<DMatrix<f64>>,
    cache: Option<Cache>,
    staged: Option<(ChainState, Option<(usize, DMatrix<f64>)>, Staged)>,
    /// Largest `max |cached - fresh|` seen at a re-inversion checkpoint.
    pub max_refresh_drift: f64,
    pub refreshes: usize,
    pub fallbacks: usize,
}

fn logit(v: f64) -> f64 {
    (v / (1.0 - v)).ln()
}

fn expit(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl<'a> ItprsTarget<'a> {
    pub fn new(problem: &'a ItprsProblem, mode: UpdateMode, refresh_every: usize, sample_nugget: bool) -> Result<Self> {
        if mode == UpdateMode::Factorized && !problem.gram_is_diagonal() {
            return input_err("factorized updates need a diagonal basis Gram matrix");
        }
        if refresh_every == 0 {
            return input_err("refresh interval must be >= 1");
        }
        let state = ChainState::initial(problem.n_basis(), problem.input_dim(), 1.0, problem.priors.nugget);
        Ok(Self {
            problem,
            mode,
            refresh_every,
            sample_nugget,
            state,
            w: Vec::new(),
            cache: None,
            staged: None,
            max_refresh_drift: 0.0,
            refreshes: 0,
            fallbacks: 0,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn to_z(&self, s: &ChainState) -> Vec<f64> {
        let mut z = vec![s.sigma2_inv.ln()];
        z.extend(s.tau.iter().map(|t| t.ln()));
        for k in 0..s.theta.nrows() {
            z.extend(s.theta.row(k).iter().map(|&v| logit(v)));
        }
        if self.sample_nugget {
            z.push(s.nugget.ln());
        }
        z
    }

    pub fn from_z(&self, z: &[f64]) -> ChainState {
        let (p, d) = (self.problem.n_basis(), self.problem.input_dim());
        let tau = z[1..=p].iter().map(|v| v.exp()).collect();
        let theta = DMatrix::from_fn(p, d, |k, j| expit(z[1 + p + k * d + j]));
        let nugget = if self.sample_nugget { z[1 + p + p * d].exp() } else { self.problem.priors.nugget };
        ChainState { sigma2_inv: z[0].exp(), tau, theta, nugget }
    }

    fn log_jacobian(&self, s: &ChainState) -> f64 {
        let mut j = s.sigma2_inv.ln() + s.tau.iter().map(|t| t.ln()).sum::<f64>();
        j += s.theta.iter().map(|&v| v.ln() + (1.0 - v).ln()).sum::<f64>();
        if self.sample_nugget {
            j += s.nugget.ln();
        }
        j
    }

    fn valid(s: &ChainState) -> bool {
        s.sigma2_inv > 0.0
            && s.sigma2_inv.is_finite()
            && s.tau.iter().all(|t| *t > 0.0 && t.is_finite())
            && s.theta.iter().all(|v| *v > 0.0 && *v < 1.0)
            && s.nugget >= 0.0
            && s.nugget.is_finite()
    }

    fn dense_eval(&self, s: &ChainState, want_inverse: bool) -> Result<Option<Staged>> {
        let d = self.problem.assemble(s)?;
        Ok(d.cholesky().map(|c| {
            let quad = self.problem.beta_hat.dot(&c.solve(&self.problem.beta_hat));
            let log_det = chol_log_det(&c);
            let inverse = want_inverse.then(|| c.inverse());
            Staged::Dense { log_det, quad, inverse }
        }))
    }

    fn factor_block(&self, s: &ChainState, k: usize, w: &DMatrix<f64>) -> Option<(f64, f64)> {
        let n = self.problem.n_runs();
        let mut m = w * s.tau[k];
        let add = self.problem.gram_inv[(k, k)] / s.sigma2_inv;
        for i in 0..n {
            m[(i, i)] += add;
        }
        let c = m.cholesky()?;
        let b = self.problem.beta_hat.rows(k * n, n).into_owned();
        Some((chol_log_det(&c), b.dot(&c.solve(&b))))
    }

    fn factor_all(&self, s: &ChainState, w: &[DMatrix<f64>]) -> Option<Staged> {
        let p = self.problem.n_basis();
        let mut ld = Vec::with_capacity(p);
        let mut qd = Vec::with_capacity(p);
        for k in 0..p {
            let (a, b) = self.factor_block(s, k, &w[k])?;
            ld.push(a);
            qd.push(b);
        }
        Some(Staged::Factor { log_det: ld, quad: qd })
    }

    fn density(&self, s: &ChainState, log_det: f64, quad: f64) -> f64 {
        self.problem.gaussian_term(log_det, quad) + self.problem.log_prior(s, self.sample_nugget) + self.log_jacobian(s)
    }

    /// Block touched by a proposal: `None` for global changes (`σ⁻²`, nugget).
    fn block_kind(&self, block: usize) -> Option<(usize, bool)> {
        let p = self.problem.n_basis();
        match block {
            b if (1..=p).contains(&b) => Some((b - 1, false)),
            b if (p + 1..=2 * p).contains(&b) => Some((b - p - 1, true)),
            _ => None,
        }
    }

    fn refresh(&mut self) -> Result<()> {
        let staged = self.dense_eval(&self.state, true)?;
        let Some(Staged::Dense { log_det, quad, inverse: Some(fresh) }) = staged else {
            return Err(EmuError::Numerical("covariance lost positive definiteness at re-inversion".into()));
        };
        if let Some(Cache::Woodbury { d_inv, .. }) = &self.cache {
            let drift = (d_inv - &fresh).amax();
            self.max_refresh_drift = self.max_refresh_drift.max(drift);
        }
        self.refreshes += 1;
        self.cache = Some(Cache::Woodbury { d_inv: fresh, log_det, quad, since_refresh: 0 });
        Ok(())
    }
}

impl BlockTarget for ItprsTarget<'_> {
    fn dim(&self) -> usize {
        let (p, d) = (self.problem.n_basis(), self.problem.input_dim());
        1 + p + p * d + usize::from(self.sample_nugget)
    }

    fn blocks(&self) -> Vec<Range<usize>> {
        let (p, d) = (self.problem.n_basis(), self.problem.input_dim());
        let mut b = vec![0..1];
        b.extend((0..p).map(|k| 1 + k..2 + k));
        b.extend((0..p).map(|k| 1 + p + k * d..1 + p + (k + 1) * d));
        if self.sample_nugget {
            b.push(1 + p + p * d..2 + p + p * d);
        }
        b
    }

    fn coordinate_names(&self) -> Vec<String> {
        let (p, d) = (self.problem.n_basis(), self.problem.input_dim());
        let mut names = vec!["sigma2_inv".to_string()];
        names.extend((1..=p).map(|k| format!("tau_{k}")));
        for k in 1..=p {
            names.extend((1..=d).map(|j| format!("theta_{k}_{j}")));
        }
        if self.sample_nugget {
            names.push("nugget".into());
        }
        names
    }

    fn init(&mut self, z: &[f64]) -> Result<f64> {
        let s = self.from_z(z);
        if !Self::valid(&s) {
            return Err(EmuError::Parameter("initial chain state outside the support".into()));
        }
        self.w = (0..self.problem.n_basis()).map(|k| self.problem.correlation_block(&s, k)).collect::<Result<_>>()?;
        self.state = s;
        self.staged = None;
        let (log_det, quad) = match self.mode {
            UpdateMode::Dense => match self.dense_eval(&self.state, false)? {
                Some(Staged::Dense { log_det, quad, .. }) => {
                    self.cache = Some(Cache::Dense { log_det, quad });
                    (log_det, quad)
                }
                _ => return Err(EmuError::Numerical("initial covariance is not positive definite".into())),
            },
            UpdateMode::Woodbury => {
                self.refresh()?;
                match &self.cache {
                    Some(Cache::Woodbury { log_det, quad, .. }) => (*log_det, *quad),
                    _ => unreachable!(),
                }
            }
            UpdateMode::Factorized => match self.factor_all(&self.state, &self.w) {
                Some(Staged::Factor { log_det, quad }) => {
                    let t = (log_det.iter().sum(), quad.iter().sum());
                    self.cache = Some(Cache::Factorized { log_det, quad });
                    t
                }
                _ => return Err(EmuError::Numerical("initial covariance is not positive definite".into())),
            },
        };
        Ok(self.density(&self.state, log_det, quad))
    }

    fn evaluate(&mut self, z: &[f64], block: usize) -> Result<f64> {
        self.staged = None;
        let s = self.from_z(z);
        if !Self::valid(&s) {
            return Ok(f64::NEG_INFINITY);
        }
        let kind = self.block_kind(block);
        let new_w = match kind {
            Some((k, true)) => Some((k, self.problem.correlation_block(&s, k)?)),
            _ => None,
        };
        let cache = self.cache.as_ref().ok_or_else(|| EmuError::State("chain target not initialized".into()))?;
        let staged = match (cache, kind) {
            (Cache::Dense { .. }, _) => self.dense_eval(&s, false)?,
            (Cache::Woodbury { .. }, None) => self.dense_eval(&s, true)?,
            (Cache::Woodbury { d_inv, log_det, quad, .. }, Some((k, theta_block))) => {
                let old = &self.w[k] * self.state.tau[k];
                let new = match &new_w {
                    Some((_, w)) if theta_block => w * s.tau[k],
                    _ => &self.w[k] * s.tau[k],
                };
                match BlockUpdate::prepare(d_inv, &(new - old), k) {
                    Ok(update) => {
                        let ld = log_det + update.log_det_change();
                        let q = quad + update.quadratic_form_change(&self.problem.beta_hat);
                        Some(Staged::Block { update, log_det: ld, quad: q })
                    }
                    Err(EmuError::UpdateFailed(_)) => {
                        self.fallbacks += 1;
                        self.dense_eval(&s, true)?
                    }
                    Err(e) => return Err(e),
                }
            }
            (Cache::Factorized { log_det, quad }, Some((k, _))) => {
                let w = new_w.as_ref().map(|(_, w)| w).unwrap_or(&self.w[k]);
                self.factor_block(&s, k, w).map(|(a, b)| {
                    let (mut ld, mut qd) = (log_det.clone(), quad.clone());
                    ld[k] = a;
                    qd[k] = b;
                    Staged::Factor { log_det: ld, quad: qd }
                })
            }
            (Cache::Factorized { .. }, None) => {
                if s.nugget != self.state.nugget {
                    let w: Vec<_> =
                        (0..self.problem.n_basis()).map(|k| self.problem.correlation_block(&s, k)).collect::<Result<_>>()?;
                    self.factor_all(&s, &w)
                } else {
                    self.factor_all(&s, &self.w)
                }
            }
        };
        let Some(staged) = staged else {
            return Ok(f64::NEG_INFINITY);
        };
        let (ld, q) = match &staged {
            Staged::Dense { log_det, quad, .. } | Staged::Block { log_det, quad, .. } => (*log_det, *quad),
            Staged::Factor { log_det, quad } => (log_det.iter().sum(), quad.iter().sum()),
        };
        let value = self.density(&s, ld, q);
        self.staged = Some((s, new_w, staged));
        Ok(value)
    }

    fn commit(&mut self) -> Result<()> {
        let (s, new_w, staged) = self.staged.take().ok_or_else(|| EmuError::State("nothing staged to commit".into()))?;
        let nugget_changed = s.nugget != self.state.nugget;
        self.state = s;
        if let Some((k, w)) = new_w {
            self.w[k] = w;
        }
        if nugget_changed {
            self.w = (0..self.problem.n_basis())
                .map(|k| self.problem.correlation_block(&self.state, k))
                .collect::<Result<_>>()?;
        }
        match (self.cache.as_mut(), staged) {
            (Some(Cache::Dense { log_det, quad }), Staged::Dense { log_det: l, quad: q, .. }) => {
                *log_det = l;
                *quad = q;
            }
            (Some(Cache::Woodbury { d_inv, log_det, quad, since_refresh }), Staged::Block { update, log_det: l, quad: q }) => {
                update.apply(d_inv);
                *log_det = l;
                *quad = q;
                *since_refresh += 1;
                if *since_refresh >= self.refresh_every {
                    self.refresh()?;
                }
            }
            (Some(Cache::Woodbury { .. }), Staged::Dense { log_det, quad, inverse: Some(inv) }) => {
                self.cache = Some(Cache::Woodbury { d_inv: inv, log_det, quad, since_refresh: 0 });
            }
            (Some(Cache::Factorized { .. }), Staged::Factor { log_det, quad }) => {
                self.cache = Some(Cache::Factorized { log_det, quad });
            }
            _ => return Err(EmuError::State("staged proposal does not match the update mode".into())),
        }
        Ok(())
    }
}

/// Retained posterior draws of the independent-coefficient model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub draws: Vec<ChainState>,
    /// Acceptance rate per block over the retained iterations.
    pub acceptance: Vec<f64>,
    pub block_names: Vec<String>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn mean_tau(&self) -> Vec<f64> {
        let p = self.draws[0].tau.len();
        (0..p).map(|k| self.draws.iter().map(|s| s.tau[k]).sum::<f64>() / self.len() as f64).collect()
    }
}

/// Everything produced by [`run_itprs_chain`].
pub struct ItprsRun {
    pub samples: PosteriorSamples,
    pub output: ChainOutput,
    pub coordinate_names: Vec<String>,
    pub blocks: Vec<Range<usize>>,
    pub max_refresh_drift: f64,
    pub fallbacks: usize,
}

/// Sample the independent-coefficient posterior.
pub fn run_itprs_chain(problem: &ItprsProblem, config: &McmcConfig) -> Result<ItprsRun> {
    let mode = if problem.gram_is_diagonal() && config.mode == UpdateMode::Woodbury {
        UpdateMode::Factorized
    } else {
        config.mode
    };
    let mut target = ItprsTarget::new(problem, mode, config.refresh_every, config.sample_nugget)?;
    let (a_s, b_s) = problem.sigma_prior();
    let mut init = ChainState::initial(problem.n_basis(), problem.input_dim(), a_s * b_s, problem.priors.nugget);
    if config.sample_nugget {
        init.nugget = init.nugget.clamp(NUGGET_RANGE.0, NUGGET_RANGE.1);
    }
    let z0 = target.to_z(&init);
    let blocks = target.blocks();
    let scales = vec![config.initial_scale; blocks.len()];
    let output = metropolis_chain(&mut target, &z0, &scales, &config.chain)?;
    let draws = output.draws();
    let samples = PosteriorSamples {
        draws: (0..draws.nrows()).map(|i| target.from_z(draws.row(i).clone_owned().as_slice())).collect(),
        acceptance: output.acceptance.clone(),
        block_names: blocks.iter().map(|r| target.coordinate_names()[r.start].clone()).collect(),
    };
    Ok(ItprsRun {
        samples,
        coordinate_names: target.coordinate_names(),
        blocks,
        max_refresh_drift: target.max_refresh_drift,
        fallbacks: target.fallbacks,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn prior_density_examples() {
        assert_relative_eq!(prior_log_density(PriorKind::Beta, 0.5, 1.0, 1.0), 0.0, epsilon = 1e-14);
        assert_relative_eq!(prior_log_density(PriorKind::Gamma, 1.0, 1.0, 1.0), -1.0, epsilon = 1e-14);
        assert_eq!(prior_log_density(PriorKind::Gamma, 0.0, 1.0, 1.0), f64::NEG_INFINITY);
        assert_eq!(prior_log_density(PriorKind::Beta, 1.0, 2.0, 2.0), f64::NEG_INFINITY);
        let f = |v: f64| prior_log_density(PriorKind::Gamma, v, 5.0, 0.2);
        assert!(f(0.8) > f(0.79) && f(0.8) > f(0.81));
    }

    #[test]
    fn flat_target_accepts_everything() {
        let mut t = FnTarget::new(2, |_z: &[f64]| 0.0);
        let cfg = ChainConfig { n_iter: 200, burn_in: 10, seed: 1, adapt: false, adapt_every: 50 };
        let out = metropolis_chain(&mut t, &[0.0, 0.0], &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(out.acceptance, vec![1.0, 1.0]);
        assert_eq!(out.draws().nrows(), 190);
    }

    #[test]
    fn gaussian_target_moments() {
        let mut t = FnTarget::new(1, |z: &[f64]| -0.5 * ((z[0] - 2.0) / 1.5).powi(2));
        let cfg = ChainConfig { n_iter: 51_000, burn_in: 1000, seed: 7, adapt: true, adapt_every: 50 };
        let out = metropolis_chain(&mut t, &[0.0], &[0.3], &cfg).unwrap();
        let d = out.draws();
        let mean = d.mean();
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() as f64 - 1.0)).sqrt();
        assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
        assert!((sd - 1.5).abs() < 0.05, "sd {sd}");
    }

    #[test]
    fn chain_rejects_bad_config() {
        let mut t = FnTarget::new(1, |_z: &[f64]| 0.0);
        let cfg = ChainConfig { n_iter: 10, burn_in: 10, ..Default::default() };
        assert!(metropolis_chain(&mut t, &[0.0], &[0.3], &cfg).is_err());
        let cfg = ChainConfig { n_iter: 0, burn_in: 0, ..Default::default() };
        assert!(metropolis_chain(&mut t, &[0.0], &[0.3], &cfg).is_err());
    }

    #[test]
    fn zero_acceptance_warns() {
        let mut t = FnTarget::new(1, |z: &[f64]| if z[0] == 0.0 { 0.0 } else { f64::NEG_INFINITY });
        let cfg = ChainConfig { n_iter: 1000, burn_in: 0, seed: 1, adapt: false, adapt_every: 50 };
        let out = metropolis_chain(&mut t, &[0.0], &[0.3], &cfg).unwrap();
        assert_eq!(out.warnings.len(), 1);
    }

    fn toy_problem(n: usize, p: usize, d: usize, orthogonal: bool) -> ItprsProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
        let beta = DVector::from_fn(n * p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let gram = if orthogonal {
            DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 + i as f64 } else { 0.0 })
        } else {
            let a = DMatrix::from_fn(p + 3, p, |_, _| rng.random::<f64>());
            a.tr_mul(&a)
        };
        ItprsProblem::new(beta, gram, inputs, 4.0, 20, PriorConfig::default()).unwrap()
    }

    #[test]
    fn log_posterior_matches_two_by_two_oracle() {
        let inputs = DMatrix::from_row_slice(2, 1, &[0.2, 0.7]);
        let beta = DVector::from_vec(vec![0.8, -0.3]);
        let prob = ItprsProblem::new(beta, DMatrix::identity(1, 1), inputs, 1.5, 4, PriorConfig::default()).unwrap();
        let state = ChainState { sigma2_inv: 2.0, tau: vec![1.3], theta: DMatrix::from_element(1, 1, 0.4), nugget: 1e-6 };
        let rho = 0.4f64.powf(4.0 * 0.25);
        let (s2, t) = (0.5, 1.3);
        let (d11, d12) = (s2 + t * (1.0 + 1e-6), t * rho);
        let det = d11 * d11 - d12 * d12;
        let quad = (d11 * 0.8 * 0.8 - 2.0 * d12 * 0.8 * -0.3 + d11 * 0.09) / det;
        let gauss = -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * quad;
        let pr = PriorConfig::default();
        let (a_s, b_s) = (pr.a_sigma + 2.0 * 3.0 / 2.0, 1.0 / (1.0 / pr.b_sigma + 0.75));
        let prior = (a_s - 1.0) * 2f64.ln() - 2.0 / b_s - ln_gamma(a_s) - a_s * b_s.ln()
            + (pr.a_tau - 1.0) * (1.0 / t).ln() - (1.0 / t) / pr.b_tau - ln_gamma(pr.a_tau) - pr.a_tau * pr.b_tau.ln()
            - 2.0 * t.ln()
            + (pr.b_theta - 1.0) * 0.6f64.ln() - ln_beta(1.0, pr.b_theta);
        let got = itprs_log_posterior(&state, &prob);
        assert_relative_eq!(got, gauss + prior, epsilon = 1e-8);
        assert_eq!(got, itprs_log_posterior(&state, &prob));
    }

    #[test]
    fn larger_coefficients_lower_the_gaussian_term() {
        let prob = toy_problem(4, 2, 1, false);
        let state = ChainState::initial(2, 1, 1.0, 1e-6);
        let mut big = prob.clone();
        big.beta_hat *= 10.0;
        assert!(itprs_log_posterior(&state, &big) < itprs_log_posterior(&state, &prob));
    }

    fn run_mode(prob: &ItprsProblem, mode: UpdateMode, steps: usize) -> (ChainOutput, f64) {
        let mut t = ItprsTarget::new(prob, mode, 100, false).unwrap();
        let z0 = t.to_z(&ChainState::initial(prob.n_basis(), prob.input_dim(), 1.0, 1e-6));
        let scales = vec![0.3; t.blocks().len()];
        let cfg = ChainConfig { n_iter: steps, burn_in: 0, seed: 11, adapt: true, adapt_every: 50 };
        let out = metropolis_chain(&mut t, &z0, &scales, &cfg).unwrap();
        (out, t.max_refresh_drift)
    }

    #[test]
    fn woodbury_chain_matches_dense_chain() {
        let prob = toy_problem(8, 3, 2, false);
        let (dense, _) = run_mode(&prob, UpdateMode::Dense, 500);
        let (wood, drift) = run_mode(&prob, UpdateMode::Woodbury, 500);
        assert_eq!(dense.decisions, wood.decisions);
        assert!(drift < 1e-8, "drift {drift}");
        for (a, b) in dense.log_density.iter().zip(&wood.log_density) {
            assert!((a - b).abs() < 1e-8 * a.abs().max(1.0));
        }
    }

    #[test]
    fn factorized_chain_matches_dense_chain() {
        let prob = toy_problem(6, 2, 1, true);
        let (dense, _) = run_mode(&prob, UpdateMode::Dense, 300);
        let (fact, _) = run_mode(&prob, UpdateMode::Factorized, 300);
        assert_eq!(dense.decisions, fact.decisions);
        assert!(ItprsTarget::new(&toy_problem(6, 2, 1, false), UpdateMode::Factorized, 100, false).is_err());
    }

    #[test]
    fn target_density_matches_dense_posterior() {
        let prob = toy_problem(5, 2, 2, false);
        let mut t = ItprsTarget::new(&prob, UpdateMode::Woodbury, 100, false).unwrap();
        let s = ChainState { sigma2_inv: 3.0, tau: vec![0.7, 1.9], theta: DMatrix::from_row_slice(2, 2, &[0.3, 0.6, 0.2, 0.9]), nugget: 1e-6 };
        let z = t.to_z(&s);
        let v = t.init(&z).unwrap();
        assert_relative_eq!(v, itprs_log_posterior(&s, &prob) + t.log_jacobian(&s), epsilon = 1e-9);
    }

    #[test]
    fn nugget_sampling_runs() {
        let prob = toy_problem(5, 2, 1, false);
        let cfg = McmcConfig {
            chain: ChainConfig { n_iter: 60, burn_in: 10, seed: 2, ..Default::default() },
            sample_nugget: true,
            ..Default::default()
        };
        let run = run_itprs_chain(&prob, &cfg).unwrap();
        assert_eq!(run.samples.len(), 50);
        assert_eq!(run.blocks.len(), 1 + 2 + 2 + 1);
        assert!(run.samples.draws.iter().all(|s| s.nugget >= NUGGET_RANGE.0 && s.nugget <= NUGGET_RANGE.1));
    }

    #[test]
    fn trace_csv_layout() {
        let prob = toy_problem(4, 1, 1, true);
        let cfg = McmcConfig { chain: ChainConfig { n_iter: 5, burn_in: 1, ..Default::default() }, ..Default::default() };
        let run = run_itprs_chain(&prob, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&path, &run.output, &run.coordinate_names, &run.blocks).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "iter,block,value,accepted");
        assert_eq!(lines.len(), 1 + 5 * 3);
        assert!(lines[1].starts_with("0,sigma2_inv,"));
    }
}

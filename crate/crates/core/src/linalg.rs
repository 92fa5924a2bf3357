//! Correlation kernels, Kronecker-structured algebra and the block Woodbury
//! inverse update used by the blocked Metropolis samplers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, EmuError, Result};

/// Default diagonal nugget added to correlation matrices.
pub const DEFAULT_NUGGET: f64 = 1e-6;

/// Per-dimension correlation parameters for the input space plus a diagonal nugget.
///
/// The correlation between `x` and `x'` is `prod_j theta_j^(4 (x_j - x'_j)^2)`,
/// so every `theta_j` must lie strictly inside `(0, 1)`; values near 1 give long
/// correlation lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationParams {
    theta: Vec<f64>,
    nugget: f64,
}

impl CorrelationParams {
    pub fn new(theta: Vec<f64>, nugget: f64) -> Result<Self> {
        check_unit_open("theta", &theta)?;
        if !(nugget >= 0.0 && nugget.is_finite()) {
            return Err(EmuError::Parameter(format!("nugget must be finite and >= 0, got {nugget}")));
        }
        Ok(Self { theta, nugget })
    }

    pub fn with_default_nugget(theta: Vec<f64>) -> Result<Self> {
        Self::new(theta, DEFAULT_NUGGET)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub(crate) fn log_theta(&self) -> Vec<f64> {
        self.theta.iter().map(|t| t.ln()).collect()
    }
}

/// Correlation lengths over the output domain (one per output coordinate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialCorrelationParams {
    nu: Vec<f64>,
}

impl SpatialCorrelationParams {
    pub fn new(nu: Vec<f64>) -> Result<Self> {
        check_unit_open("nu", &nu)?;
        Ok(Self { nu })
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn dim(&self) -> usize {
        self.nu.len()
    }

    /// The same kernel viewed as an input-space parameter set with zero nugget.
    pub fn as_correlation(&self) -> CorrelationParams {
        CorrelationParams { theta: self.nu.clone(), nugget: 0.0 }
    }
}

fn check_unit_open(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(EmuError::Parameter(format!("{name} must have at least one component")));
    }
    for (j, &t) in v.iter().enumerate() {
        if !(t > 0.0 && t < 1.0) {
            return Err(EmuError::Parameter(format!("{name}[{j}] = {t} is outside (0, 1)")));
        }
    }
    Ok(())
}

/// Squared-exponential correlation `prod_j theta_j^(4 (x_j - x'_j)^2)`.
///
/// The nugget is not applied here; see [`correlation_matrix`].
pub fn sqexp_correlation(x: &[f64], x_prime: &[f64], params: &CorrelationParams) -> Result<f64> {
    if x.len() != params.dim() || x_prime.len() != params.dim() {
        return input_err(format!(
            "dimension mismatch: x has {}, x' has {}, theta has {}",
            x.len(),
            x_prime.len(),
            params.dim()
        ));
    }
    Ok(sqexp_log_theta(x, x_prime, &params.log_theta()))
}

#[inline]
pub(crate) fn sqexp_log_theta(x: &[f64], y: &[f64], log_theta: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..log_theta.len() {
        let dx = x[j] - y[j];
        s += 4.0 * dx * dx * log_theta[j];
    }
    s.exp()
}

fn row(points: &DMatrix<f64>, i: usize) -> Vec<f64> {
    points.row(i).iter().copied().collect()
}

fn check_points(points: &DMatrix<f64>, d: usize, what: &str) -> Result<()> {
    if points.ncols() != d {
        return input_err(format!("{what} have {} columns, expected {d}", points.ncols()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return input_err(format!("{what} contain non-finite values"));
    }
    Ok(())
}

/// `n x n` correlation matrix of the rows of `points` with the nugget on the diagonal.
pub fn correlation_matrix(points: &DMatrix<f64>, params: &CorrelationParams) -> Result<DMatrix<f64>> {
    if points.nrows() == 0 {
        return input_err("correlation matrix needs at least one point");
    }
    check_points(points, params.dim(), "points")?;
    let lt = params.log_theta();
    let n = points.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(points, i)).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0 + params.nugget;
        for j in 0..i {
            let v = sqexp_log_theta(&rows[i], &rows[j], &lt);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Cross-correlations between the rows of `a` (`n x d`) and `b` (`m x d`); no nugget.
pub fn cross_correlation(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &CorrelationParams) -> Result<DMatrix<f64>> {
    check_points(a, params.dim(), "points")?;
    check_points(b, params.dim(), "points")?;
    let lt = params.log_theta();
    let ra: Vec<Vec<f64>> = (0..a.nrows()).map(|i| row(a, i)).collect();
    let rb: Vec<Vec<f64>> = (0..b.nrows()).map(|i| row(b, i)).collect();
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| sqexp_log_theta(&ra[i], &rb[j], &lt)))
}

/// Correlations between one point and the rows of `points`.
pub fn correlation_vector(x: &[f64], points: &DMatrix<f64>, params: &CorrelationParams) -> Result<DVector<f64>> {
    if x.len() != params.dim() {
        return input_err(format!("point has {} coordinates, expected {}", x.len(), params.dim()));
    }
    check_points(points, params.dim(), "points")?;
    let lt = params.log_theta();
    Ok(DVector::from_fn(points.nrows(), |i, _| {
        let r = row(points, i);
        sqexp_log_theta(x, &r, &lt)
    }))
}

/// Kronecker product `A ⊗ B`: block `(i, j)` of the result is `A[i, j] * B`.
pub fn kronecker_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            let mut blk = out.view_mut((i * br, j * bc), (br, bc));
            blk.copy_from(b);
            blk *= s;
        }
    }
    out
}

/// Cholesky factorization with a descriptive error naming the factored matrix.
pub fn cholesky(m: DMatrix<f64>, name: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    Cholesky::new(m).ok_or_else(|| EmuError::Numerical(format!("{name} ({n}x{n}) is not positive definite")))
}

/// `log |A|` from a Cholesky factor of `A`.
pub fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Factor-wise solver for systems with matrix `A ⊗ B`, `A` and `B` symmetric positive definite.
///
/// A vector `v` indexed as `v[i * m + j]` (`i` over the rows of `A`, `j` over
/// the `m` rows of `B`) is reshaped to the `m x n` matrix `M` with `vec(M) = v`,
/// so that `(A ⊗ B) vec(X) = vec(B X Aᵀ)`. The full product is never formed.
#[derive(Clone, Debug)]
pub struct KroneckerSolver {
    a: Cholesky<f64, Dyn>,
    b: Cholesky<f64, Dyn>,
}

impl KroneckerSolver {
    pub fn new(a: Cholesky<f64, Dyn>, b: Cholesky<f64, Dyn>) -> Self {
        Self { a, b }
    }

    pub fn outer_dim(&self) -> usize {
        self.a.l_dirty().nrows()
    }

    pub fn inner_dim(&self) -> usize {
        self.b.l_dirty().nrows()
    }

    /// Solve `(A ⊗ B) x = v`.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let (n, m) = (self.outer_dim(), self.inner_dim());
        if v.len() != n * m {
            return input_err(format!("kronecker solve: vector length {} != {}", v.len(), n * m));
        }
        let mat = DMatrix::from_column_slice(m, n, v.as_slice());
        let x = self.solve_matrix(&mat);
        Ok(DVector::from_column_slice(x.as_slice()))
    }

    /// Solve `B X Aᵀ = M` for an `m x n` right-hand side, i.e. `X = B⁻¹ M A⁻¹`.
    pub fn solve_matrix(&self, mat: &DMatrix<f64>) -> DMatrix<f64> {
        let left = self.b.solve(mat);
        self.a.solve(&left.transpose()).transpose()
    }

    /// `vᵀ (A ⊗ B)⁻¹ v`.
    pub fn quadratic_form(&self, v: &DVector<f64>) -> Result<f64> {
        Ok(v.dot(&self.solve(v)?))
    }

    pub fn log_det(&self) -> f64 {
        let (n, m) = (self.outer_dim() as f64, self.inner_dim() as f64);
        m * chol_log_det(&self.a) + n * chol_log_det(&self.b)
    }
}

/// Rank-revealing LU factorization `delta = P1 Q1` with complete pivoting.
///
/// Elimination stops once the largest remaining pivot falls below `tol`; the
/// returned factors have that many columns/rows.
pub fn rank_revealing_lu(delta: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = delta.nrows();
    let c = delta.ncols();
    let mut a = delta.clone();
    let mut rperm: Vec<usize> = (0..n).collect();
    let mut cperm: Vec<usize> = (0..c).collect();
    let mut rank = 0;
    for k in 0..n.min(c) {
        let (mut pi, mut pj, mut best) = (k, k, 0.0);
        for j in k..c {
            for i in k..n {
                let v = a[(i, j)].abs();
                if v > best {
                    best = v;
                    pi = i;
                    pj = j;
                }
            }
        }
        if best <= tol {
            break;
        }
        a.swap_rows(k, pi);
        rperm.swap(k, pi);
        a.swap_columns(k, pj);
        cperm.swap(k, pj);
        let piv = a[(k, k)];
        for i in k + 1..n {
            let l = a[(i, k)] / piv;
            a[(i, k)] = l;
            if l != 0.0 {
                for j in k + 1..c {
                    let u = a[(k, j)];
                    a[(i, j)] -= l * u;
                }
            }
        }
        rank += 1;
    }
    // Π_r delta Π_c = L U  =>  delta = Π_rᵀ L U Π_cᵀ
    let mut p1 = DMatrix::zeros(n, rank);
    for i in 0..n {
        for j in 0..rank {
            let v = if i == j {
                1.0
            } else if i > j {
                a[(i, j)]
            } else {
                0.0
            };
            p1[(rperm[i], j)] = v;
        }
    }
    let mut q1 = DMatrix::zeros(rank, c);
    for i in 0..rank {
        for j in i..c {
            q1[(i, cperm[j])] = a[(i, j)];
        }
    }
    (p1, q1)
}

/// A staged change of one diagonal `n x n` block of a symmetric matrix `D`,
/// expressed against the current inverse `D⁻¹`.
///
/// With `delta = P1 Q1` and `X = (I + Q1 D22⁻¹ P1)⁻¹`, the updated inverse is
/// `D⁻¹ - (D⁻¹ P) X (Q D⁻¹)`, where `P`/`Q` place `P1`/`Q1` at the block.
/// The staged form lets a sampler score a proposal in `O(np·n)` and pay the
/// `O((np)² n)` rank update only on acceptance.
#[derive(Debug, Clone)]
pub struct BlockUpdate {
    /// `D⁻¹ P`, `np x k`.
    left: DMatrix<f64>,
    /// `X Q D⁻¹`, `k x np`.
    right: DMatrix<f64>,
    /// `log det(I + Q1 D22⁻¹ P1) = log|D + PQ| - log|D|`.
    log_det_change: f64,
}

impl BlockUpdate {
    pub fn prepare(d_inv: &DMatrix<f64>, delta: &DMatrix<f64>, block_index: usize) -> Result<Self> {
        let big = d_inv.nrows();
        let n = delta.nrows();
        if d_inv.ncols() != big || delta.ncols() != n || n == 0 {
            return input_err("block update: matrices must be square");
        }
        if big % n != 0 || (block_index + 1) * n > big {
            return input_err(format!(
                "block update: block {block_index} of size {n} does not fit in a {big}x{big} matrix"
            ));
        }
        let scale = delta.amax();
        if scale == 0.0 {
            return Ok(Self { left: DMatrix::zeros(big, 0), right: DMatrix::zeros(0, big), log_det_change: 0.0 });
        }
        let (p1, q1) = rank_revealing_lu(delta, 1e-12 * scale);
        let k = p1.ncols();
        let off = block_index * n;
        let cols = d_inv.columns(off, n);
        let d22 = d_inv.view((off, off), (n, n));
        let mut xinv = &q1 * (d22 * &p1);
        for i in 0..k {
            xinv[(i, i)] += 1.0;
        }
        let lu = xinv.lu();
        let (mut log_det, mut negative) = (0.0, lu.p().determinant::<f64>() < 0.0);
        for u in lu.u().diagonal().iter() {
            if !u.is_finite() || u.abs() < f64::MIN_POSITIVE {
                return Err(EmuError::UpdateFailed("I + Q1 D22^-1 P1 is singular".into()));
            }
            log_det += u.abs().ln();
            negative ^= *u < 0.0;
        }
        if negative {
            return Err(EmuError::UpdateFailed("updated matrix is not positive definite".into()));
        }
        let left = cols * &p1;
        // Q D⁻¹ = Q1 D⁻¹[block rows, :]; D⁻¹ is symmetric so use the block columns transposed.
        let qd = &q1 * cols.transpose();
        let right = lu
            .solve(&qd)
            .ok_or_else(|| EmuError::UpdateFailed("I + Q1 D22^-1 P1 could not be solved".into()))?;
        Ok(Self { left, right, log_det_change: log_det })
    }

    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    pub fn log_det_change(&self) -> f64 {
        self.log_det_change
    }

    /// `vᵀ D'⁻¹ v - vᵀ D⁻¹ v`.
    pub fn quadratic_form_change(&self, v: &DVector<f64>) -> f64 {
        if self.rank() == 0 {
            return 0.0;
        }
        let a = self.left.tr_mul(v);
        let b = &self.right * v;
        -a.dot(&b)
    }

    /// Overwrite `d_inv` with the updated inverse.
    pub fn apply(&self, d_inv: &mut DMatrix<f64>) {
        if self.rank() == 0 {
            return;
        }
        d_inv.gemm(-1.0, &self.left, &self.right, 1.0);
        symmetrize(d_inv);
    }
}

/// `(D + P Q)⁻¹` where `P Q` places `delta` on diagonal block `block_index`.
pub fn woodbury_block_update(d_inv: &DMatrix<f64>, delta: &DMatrix<f64>, block_index: usize) -> Result<DMatrix<f64>> {
    let up = BlockUpdate::prepare(d_inv, delta, block_index)?;
    let mut out = d_inv.clone();
    up.apply(&mut out);
    Ok(out)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

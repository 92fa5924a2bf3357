//! Output grids and the two families of output bases: principal components
//! and thin-plate regression splines (TPRS).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, EmuError, Result};
use crate::linalg::{cross_correlation, SpatialCorrelationParams};

/// The common set of `r` output locations in a `q`-dimensional output domain.
///
/// `locations` are kept in the units they were supplied in; [`OutputGrid::unit_locations`]
/// maps them onto the unit box (via `domain` when known) and all basis and
/// correlation computations run on those standardized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputGrid {
    locations: DMatrix<f64>,
    domain: Option<Vec<(f64, f64)>>,
    /// Points per axis when the grid is a regular lattice (first axis varies fastest).
    shape: Option<Vec<usize>>,
}

impl OutputGrid {
    pub fn new(locations: DMatrix<f64>, domain: Option<Vec<(f64, f64)>>, shape: Option<Vec<usize>>) -> Result<Self> {
        let (r, q) = locations.shape();
        if r == 0 || q == 0 {
            return input_err("output grid needs r >= 1 locations with q >= 1 coordinates");
        }
        if locations.iter().any(|v| !v.is_finite()) {
            return input_err("output grid contains non-finite coordinates");
        }
        if let Some(dom) = &domain {
            if dom.len() != q || dom.iter().any(|(a, b)| !(a < b)) {
                return input_err("output grid domain must give low < high for every coordinate");
            }
        }
        if let Some(sh) = &shape {
            if sh.len() != q || sh.iter().product::<usize>() != r {
                return input_err("lattice shape does not match the number of locations");
            }
        }
        // Duplicate rows make E and Q singular.
        let mut idx: Vec<usize> = (0..r).collect();
        idx.sort_by(|&a, &b| {
            for j in 0..q {
                match locations[(a, j)].partial_cmp(&locations[(b, j)]).unwrap() {
                    std::cmp::Ordering::Equal => continue,
                    o => return o,
                }
            }
            std::cmp::Ordering::Equal
        });
        for w in idx.windows(2) {
            if (0..q).all(|j| locations[(w[0], j)] == locations[(w[1], j)]) {
                return input_err(format!("output grid has duplicate locations {} and {}", w[0], w[1]));
            }
        }
        Ok(Self { locations, domain, shape })
    }

    /// Regular lattice with `counts[j]` points along axis `j` and no boundary points:
    /// along an axis over `[a, b]` with `m` points, point `i` sits at `a + (i + 0.5)(b - a)/m`.
    pub fn lattice(counts: &[usize], domain: &[(f64, f64)]) -> Result<Self> {
        if counts.is_empty() || counts.len() != domain.len() || counts.iter().any(|&c| c == 0) {
            return input_err("lattice needs one positive count and one interval per axis");
        }
        let q = counts.len();
        let r: usize = counts.iter().product();
        let mut loc = DMatrix::zeros(r, q);
        for idx in 0..r {
            let mut rem = idx;
            for j in 0..q {
                let i = rem % counts[j];
                rem /= counts[j];
                let (a, b) = domain[j];
                loc[(idx, j)] = a + (i as f64 + 0.5) * (b - a) / counts[j] as f64;
            }
        }
        Self::new(loc, Some(domain.to_vec()), Some(counts.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.locations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.locations.ncols()
    }

    pub fn locations(&self) -> &DMatrix<f64> {
        &self.locations
    }

    pub fn location(&self, j: usize) -> Vec<f64> {
        self.locations.row(j).iter().copied().collect()
    }

    pub fn domain(&self) -> Option<&[(f64, f64)]> {
        self.domain.as_deref()
    }

    pub fn shape(&self) -> Option<&[usize]> {
        self.shape.as_deref()
    }

    pub fn is_lattice(&self) -> bool {
        self.shape.is_some()
    }

    /// Locations mapped affinely onto the unit box.
    pub fn unit_locations(&self) -> DMatrix<f64> {
        let (r, q) = self.locations.shape();
        let bounds: Vec<(f64, f64)> = match &self.domain {
            Some(d) => d.clone(),
            None => (0..q)
                .map(|j| {
                    let col = self.locations.column(j);
                    (col.min(), col.max())
                })
                .collect(),
        };
        DMatrix::from_fn(r, q, |i, j| {
            let (a, b) = bounds[j];
            if b > a {
                (self.locations[(i, j)] - a) / (b - a)
            } else {
                0.5
            }
        })
    }

    /// The grid restricted to the given location indices (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.iter().any(|&i| i >= self.len()) {
            return input_err("subgrid index out of range");
        }
        let q = self.dim();
        let loc = DMatrix::from_fn(indices.len(), q, |i, j| self.locations[(indices[i], j)]);
        Self::new(loc, self.domain.clone(), None)
    }

    /// Indices of the coarser no-boundary lattice with `counts` points per axis
    /// that is nested inside this lattice (e.g. 10x10 inside 50x50).
    pub fn nested_lattice_indices(&self, counts: &[usize]) -> Result<Vec<usize>> {
        let shape = self
            .shape
            .as_ref()
            .ok_or_else(|| EmuError::Input("nested sub-lattice requires a lattice grid".into()))?;
        if counts.len() != shape.len() {
            return input_err("sub-lattice dimension mismatch");
        }
        let mut axis_idx = Vec::with_capacity(counts.len());
        for (j, (&m_sub, &m_full)) in counts.iter().zip(shape.iter()).enumerate() {
            if m_sub == 0 || m_sub > m_full {
                return input_err(format!("sub-lattice count {m_sub} invalid for axis {j} of size {m_full}"));
            }
            let mut v = Vec::with_capacity(m_sub);
            for k in 0..m_sub {
                let pos = (k as f64 + 0.5) * m_full as f64 / m_sub as f64 - 0.5;
                let i = pos.round();
                if (pos - i).abs() > 1e-9 {
                    return input_err(format!(
                        "a {m_sub}-point lattice is not nested in a {m_full}-point lattice along axis {j}"
                    ));
                }
                v.push(i as usize);
            }
            axis_idx.push(v);
        }
        let total: usize = counts.iter().product();
        let mut out = Vec::with_capacity(total);
        for idx in 0..total {
            let mut rem = idx;
            let mut flat = 0;
            let mut stride = 1;
            for j in 0..counts.len() {
                let k = rem % counts[j];
                rem /= counts[j];
                flat += axis_idx[j][k] * stride;
                stride *= shape[j];
            }
            out.push(flat);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    Pc,
    Tprs,
}

/// TPRS working matrices kept alongside the basis vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TprsAux {
    /// Leading eigenvectors of `E` (`r x k`, `k = m + columns(T)`).
    pub u: DMatrix<f64>,
    /// The matching eigenvalues, ordered by decreasing magnitude.
    pub d: DVector<f64>,
    /// Orthonormal basis (`k x m`) of the null space of `Tᵀ U`.
    pub z: DMatrix<f64>,
    /// Polynomial null-space matrix (`r x c`).
    pub t: DMatrix<f64>,
    /// Spline order (penalty on `l`-th derivatives).
    pub l: usize,
}

/// `p` basis vectors over the output grid, stored as the columns of an `r x p` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub kind: BasisKind,
    pub vectors: DMatrix<f64>,
    /// Number of spline (non-polynomial) columns; equals `p` for a PC basis.
    pub m: usize,
    pub tprs: Option<TprsAux>,
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid_len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn vector(&self, k: usize) -> DVector<f64> {
        self.vectors.column(k).into_owned()
    }

    /// Basis Gram matrix `[a_k · a_l]`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.vectors.tr_mul(&self.vectors)
    }
}

/// PC basis from the SVD `Y = Λ Σ Ωᵀ` of an already standardized `r x n` response matrix.
///
/// Returns the first `p` columns of `n^{-1/2} Λ Σ` and the `p x n` weights
/// `n^{1/2} Ωᵀ` (column `i` holds the coefficients of run `i`).
pub fn pca_basis(y: &DMatrix<f64>, p: usize) -> Result<(BasisSet, DMatrix<f64>)> {
    let (r, n) = y.shape();
    if p == 0 || p > r.min(n) {
        return input_err(format!("number of principal components {p} must be in 1..={}", r.min(n)));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return input_err("response matrix contains non-finite values");
    }
    let svd = y.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| EmuError::Numerical("SVD did not return U".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| EmuError::Numerical("SVD did not return V".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap().then(a.cmp(&b)));
    let nf = n as f64;
    let mut vectors = DMatrix::zeros(r, p);
    let mut coeffs = DMatrix::zeros(p, n);
    for (k, &c) in order.iter().take(p).enumerate() {
        let mut col = u.column(c).into_owned();
        let mut wrow = v_t.row(c).transpose();
        // Fix the sign so the largest-magnitude loading is positive.
        if col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m }) < 0.0 {
            col.neg_mut();
            wrow.neg_mut();
        }
        vectors.set_column(k, &(col * (sv[c] / nf.sqrt())));
        coeffs.set_row(k, &(wrow * nf.sqrt()).transpose());
    }
    Ok((BasisSet { kind: BasisKind::Pc, vectors, m: p, tprs: None }, coeffs))
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Thin-plate radial function `eta_{lq}(t)`, with `eta(0) = 0`.
pub fn tprs_eta(t: f64, l: usize, q: usize) -> Result<f64> {
    if 2 * l <= q {
        return Err(EmuError::Parameter(format!("thin-plate order needs 2l > q, got l={l}, q={q}")));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return input_err(format!("distance must be finite and >= 0, got {t}"));
    }
    Ok(eta_coefficient(l, q) * eta_shape(t, l, q))
}

fn eta_coefficient(l: usize, q: usize) -> f64 {
    let lf = l as i32;
    let qf = q as f64;
    if q % 2 == 0 {
        let sign = if (l + 1 + q / 2) % 2 == 0 { 1.0 } else { -1.0 };
        sign / (2f64.powi(2 * lf - 1) * PI.powf(qf / 2.0) * factorial(l - 1) * factorial(l - q / 2))
    } else {
        statrs::function::gamma::gamma(qf / 2.0 - l as f64) / (2f64.powi(2 * lf) * PI.powf(qf / 2.0) * factorial(l - 1))
    }
}

#[inline]
fn eta_shape(t: f64, l: usize, q: usize) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    let pow = t.powi((2 * l - q) as i32);
    if q % 2 == 0 {
        pow * t.ln()
    } else {
        pow
    }
}

/// Exponents of all monomials in `q` variables with total degree `< l`, constant first.
fn monomial_exponents(q: usize, l: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; q]];
    for deg in 1..l {
        let mut cur = Vec::new();
        gen_exponents(q, deg, &mut vec![0; q], 0, &mut cur);
        out.extend(cur);
    }
    out
}

fn gen_exponents(q: usize, left: usize, acc: &mut Vec<usize>, j: usize, out: &mut Vec<Vec<usize>>) {
    if j == q - 1 {
        acc[j] = left;
        out.push(acc.clone());
        acc[j] = 0;
        return;
    }
    for e in (0..=left).rev() {
        acc[j] = e;
        gen_exponents(q, left - e, acc, j + 1, out);
    }
    acc[j] = 0;
}

/// Polynomial matrix `T` with one column per monomial of degree `< l`.
///
/// For a lattice with `l = 2` row `j` is `[1 | s_jᵀ]`; off-lattice the columns
/// are orthonormalized.
pub fn polynomial_matrix(grid: &OutputGrid, l: usize) -> DMatrix<f64> {
    let s = grid.unit_locations();
    let (r, q) = s.shape();
    let exps = monomial_exponents(q, l);
    let mut t = DMatrix::from_fn(r, exps.len(), |i, c| {
        exps[c].iter().enumerate().map(|(j, &e)| s[(i, j)].powi(e as i32)).product()
    });
    if !grid.is_lattice() {
        t = gram_schmidt(&t);
    }
    t
}

fn gram_schmidt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = a.clone();
    for j in 0..q.ncols() {
        for _ in 0..2 {
            for k in 0..j {
                let proj = q.column(k).dot(&q.column(j));
                let ck = q.column(k).into_owned();
                let mut cj = q.column_mut(j);
                cj.axpy(-proj, &ck, 1.0);
            }
        }
        let nrm = q.column(j).norm();
        if nrm > 0.0 {
            q.column_mut(j).unscale_mut(nrm);
        }
    }
    q
}

/// Orthonormal basis for the orthogonal complement of the column space of `a` (`k x c`, `c <= k`),
/// built from the trailing columns of a full Householder QR.
pub fn orthogonal_complement(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, c) = a.shape();
    let mut r = a.clone();
    let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(c);
    for j in 0..c.min(k) {
        let x = r.view((j, j), (k - j, 1)).column(0).into_owned();
        let alpha = x.norm();
        let mut v = x.clone();
        if alpha == 0.0 {
            reflectors.push(DVector::zeros(k - j));
            continue;
        }
        v[0] += if x[0] >= 0.0 { alpha } else { -alpha };
        let vn = v.norm();
        v.unscale_mut(vn);
        // R[j.., j..] -= 2 v (vᵀ R[j.., j..])
        let mut sub = r.view_mut((j, j), (k - j, c - j));
        let w = sub.tr_mul(&v);
        sub.ger(-2.0, &v, &w, 1.0);
        reflectors.push(v);
    }
    // Q = H_1 ... H_c; the complement is Q applied to the trailing unit vectors.
    let nc = k - c.min(k);
    let mut out = DMatrix::zeros(k, nc);
    for (col, idx) in (c.min(k)..k).enumerate() {
        out[(idx, col)] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        if v.norm() == 0.0 {
            continue;
        }
        let mut sub = out.view_mut((j, 0), (k - j, nc));
        let w = sub.tr_mul(v);
        sub.ger(-2.0, v, &w, 1.0);
    }
    out
}

/// Eigendecomposition of the thin-plate matrix `E` for one grid, ordered by
/// decreasing eigenvalue magnitude (ties by original index).
///
/// Building `E` and its eigensystem is the expensive part of a TPRS basis; one
/// eigensystem serves every basis size on the same grid.
#[derive(Debug, Clone)]
pub struct TprsEigensystem {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
    t: DMatrix<f64>,
    l: usize,
}

/// The `r x r` matrix with entries `eta_{lq}(||s_u - s_v||)` on unit-box coordinates.
pub fn tprs_e_matrix(grid: &OutputGrid, l: usize) -> Result<DMatrix<f64>> {
    let q = grid.dim();
    let coef = {
        tprs_eta(1.0, l, q)?;
        eta_coefficient(l, q)
    };
    let s = grid.unit_locations();
    let r = s.nrows();
    let mut e = DMatrix::zeros(r, r);
    for u in 0..r {
        for v in 0..u {
            let mut d2 = 0.0;
            for j in 0..q {
                let dx = s[(u, j)] - s[(v, j)];
                d2 += dx * dx;
            }
            let val = coef * eta_shape(d2.sqrt(), l, q);
            e[(u, v)] = val;
            e[(v, u)] = val;
        }
    }
    Ok(e)
}

impl TprsEigensystem {
    pub fn new(grid: &OutputGrid, l: usize) -> Result<Self> {
        let e = tprs_e_matrix(grid, l)?;
        let t = polynomial_matrix(grid, l);
        let eig = e.symmetric_eigen();
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(EmuError::Numerical("eigen-decomposition of E produced non-finite values".into()));
        }
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b].abs().partial_cmp(&eig.eigenvalues[a].abs()).unwrap().then(a.cmp(&b))
        });
        let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
        let vectors = eig.eigenvectors.select_columns(&order);
        Ok(Self { values, vectors, t, l })
    }

    pub fn grid_len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn poly_cols(&self) -> usize {
        self.t.ncols()
    }

    /// Largest admissible spline count `m` on this grid.
    pub fn max_m(&self) -> usize {
        self.grid_len().saturating_sub(self.poly_cols())
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.values
    }

    /// Rank-`m` TPRS basis: columns of `U_k D_k Z` (`m` of them) followed by the columns of `T`.
    pub fn basis(&self, m: usize) -> Result<BasisSet> {
        let c = self.poly_cols();
        if m == 0 || m + c > self.grid_len() {
            return input_err(format!(
                "spline basis size m={m} must satisfy 1 <= m and m + {c} <= r = {}",
                self.grid_len()
            ));
        }
        let k = m + c;
        let u = self.vectors.columns(0, k).into_owned();
        let d = self.values.rows(0, k).into_owned();
        let tu = self.t.tr_mul(&u); // c x k
        let z = orthogonal_complement(&tu.transpose()); // k x m
        if z.ncols() != m {
            return Err(EmuError::Numerical("null space of T'U has unexpected dimension".into()));
        }
        let ud = DMatrix::from_fn(u.nrows(), k, |i, j| u[(i, j)] * d[j]);
        let spline = &ud * &z;
        let r = u.nrows();
        let mut vectors = DMatrix::zeros(r, m + c);
        vectors.columns_mut(0, m).copy_from(&spline);
        vectors.columns_mut(m, c).copy_from(&self.t);
        Ok(BasisSet {
            kind: BasisKind::Tprs,
            vectors,
            m,
            tprs: Some(TprsAux { u, d, z, t: self.t.clone(), l: self.l }),
        })
    }
}

/// Rank-`m` TPRS basis over `grid` with smoothness order `l`.
pub fn tprs_basis(grid: &OutputGrid, m: usize, l: usize) -> Result<BasisSet> {
    let c = monomial_exponents(grid.dim(), l.max(1)).len();
    if 2 * l <= grid.dim() {
        return Err(EmuError::Parameter(format!("thin-plate order needs 2l > q, got l={l}, q={}", grid.dim())));
    }
    if m == 0 || m + c > grid.len() {
        return input_err(format!("spline basis size m={m} must satisfy 1 <= m and m + {c} <= r = {}", grid.len()));
    }
    TprsEigensystem::new(grid, l)?.basis(m)
}

/// Scale matrix `V = blockdiag(Zᵀ Uᵀ Q U Z, I_{p-m})` where `Q` is the
/// squared-exponential correlation of the output locations under `nu`.
pub fn tprs_scale_matrix(basis: &BasisSet, grid: &OutputGrid, nu: &SpatialCorrelationParams) -> Result<DMatrix<f64>> {
    let aux = match (&basis.kind, &basis.tprs) {
        (BasisKind::Tprs, Some(aux)) => aux,
        _ => return input_err("scale matrix V is only defined for a TPRS basis"),
    };
    if grid.len() != basis.grid_len() {
        return input_err("grid does not match the basis");
    }
    if nu.dim() != grid.dim() {
        return input_err(format!("nu has {} components for a {}-dimensional grid", nu.dim(), grid.dim()));
    }
    let s = grid.unit_locations();
    let q = cross_correlation(&s, &s, &nu.as_correlation())?;
    let uz = &aux.u * &aux.z;
    let top = uz.tr_mul(&(&q * &uz));
    let p = basis.len();
    let m = basis.m;
    let mut v = DMatrix::zeros(p, p);
    v.view_mut((0, 0), (m, m)).copy_from(&top);
    for i in m..p {
        v[(i, i)] = 1.0;
    }
    crate::linalg::symmetrize(&mut v);
    Ok(v)
}

/// Cached least-squares solver for coefficients on a fixed basis.
#[derive(Debug, Clone)]
pub struct Projector {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Projector {
    pub fn new(basis: &BasisSet) -> Result<Self> {
        let p = basis.len();
        if p > basis.grid_len() {
            return Err(EmuError::Numerical(format!("basis has {p} vectors on {} locations", basis.grid_len())));
        }
        let qr = basis.vectors.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let diag = r.diagonal().map(f64::abs);
        let dmax = diag.max();
        if let Some((k, v)) = diag.iter().enumerate().find(|(_, &v)| !(v > 1e-10 * dmax)) {
            return Err(EmuError::Numerical(format!(
                "basis is rank deficient: |R[{k},{k}]| = {v:.3e} vs max {dmax:.3e}"
            )));
        }
        Ok(Self { q, r })
    }

    /// Least-squares coefficients for every column of `y` (`r x n` -> `p x n`).
    pub fn project_columns(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.q.nrows() {
            return input_err(format!("response has {} rows, basis has {}", y.nrows(), self.q.nrows()));
        }
        let rhs = self.q.tr_mul(y);
        self.r
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| EmuError::Numerical("triangular solve failed".into()))
    }

    pub fn project(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        Ok(self.project_columns(&m)?.column(0).into_owned())
    }
}

/// Unpenalized least-squares coefficients of `y` on the basis.
pub fn project_coefficients(basis: &BasisSet, y: &DVector<f64>) -> Result<DVector<f64>> {
    Projector::new(basis)?.project(y)
}

/// `sum_k a_k beta_k`.
pub fn reconstruct(basis: &BasisSet, beta: &DVector<f64>) -> Result<DVector<f64>> {
    if beta.len() != basis.len() {
        return input_err(format!("coefficient vector has {} entries, basis has {}", beta.len(), basis.len()));
    }
    Ok(&basis.vectors * beta)
}

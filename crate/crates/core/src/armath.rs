//! Closed-form mathematics of the shifted AR(1) prior.
//!
//! The prior on a length-`T` sequence is `N(mu * 1, (tau * Delta_T(delta))^-1)`
//! where `Delta_T(delta)` is tridiagonal with `1 + delta^2` on the diagonal
//! (except a trailing `1`) and `-delta` off the diagonal. Its determinant is
//! always one, which keeps the log-prior normalisation free of `delta`.
//!
//! Expectations of quadratic forms under the independent variational blocks
//! are evaluated through the partial-trace decomposition
//! `Tr(E[Delta] A) = Tr(A) + E[delta^2] Tr^0(A) - E[delta] (Tr^-1(A) + Tr^1(A))`.

use std::f64::consts::{E, PI};

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Result, TpfError};
use crate::special::{digamma, ln_gamma};

/// First two moments of the AR coefficient under its variational family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaMoments {
    pub mean: f64,
    pub second: f64,
}

impl DeltaMoments {
    pub fn fixed(value: f64) -> Self {
        DeltaMoments {
            mean: value,
            second: value * value,
        }
    }

    /// Moments of an untruncated normal family.
    pub fn normal(loc: f64, var: f64) -> Self {
        DeltaMoments {
            mean: loc,
            second: loc * loc + var,
        }
    }
}

/// Symmetric tridiagonal AR(1) precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TriPrecision {
    pub main_diag: Vec<f64>,
    pub off_diag: Vec<f64>,
    /// Set when the matrix is `BᵀB` for the unit lower bidiagonal `B` of a
    /// fixed coefficient.
    unit_factor: bool,
}

impl TriPrecision {
    fn from_moments(delta: DeltaMoments, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(TpfError::arg("sequence length must be at least 1"));
        }
        let mut main_diag = vec![1.0 + delta.second; len];
        main_diag[len - 1] = 1.0;
        Ok(TriPrecision {
            main_diag,
            off_diag: vec![-delta.mean; len - 1],
            unit_factor: delta.second == delta.mean * delta.mean,
        })
    }

    pub fn dim(&self) -> usize {
        self.main_diag.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.main_diag[i];
        }
        for (i, &o) in self.off_diag.iter().enumerate() {
            m[(i + 1, i)] = o;
            m[(i, i + 1)] = o;
        }
        m
    }

    /// xᵀ P x.
    pub fn quad(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            acc += self.main_diag[i] * xi * xi;
        }
        for (i, &o) in self.off_diag.iter().enumerate() {
            acc += 2.0 * o * x[i] * x[i + 1];
        }
        acc
    }

    /// Determinant. For a fixed coefficient it is `det(B)^2 = 1` exactly;
    /// pivoting on the stored entries would amplify their rounding by
    /// `delta^2` per step. Otherwise the product of elimination pivots.
    pub fn det(&self) -> f64 {
        if self.unit_factor {
            return 1.0;
        }
        let mut pivot = self.main_diag[0];
        let mut det = pivot;
        for i in 1..self.dim() {
            pivot = self.main_diag[i] - self.off_diag[i - 1].powi(2) / pivot;
            det *= pivot;
        }
        det
    }

    /// Tr(P A) for a symmetric A, using only the tridiagonal band.
    pub fn trace_with(&self, a: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim() {
            acc += self.main_diag[i] * a[(i, i)];
        }
        for (i, &o) in self.off_diag.iter().enumerate() {
            acc += o * (a[(i + 1, i)] + a[(i, i + 1)]);
        }
        acc
    }
}

/// `Delta_T(delta)`.
pub fn ar_precision(delta: f64, len: usize) -> Result<TriPrecision> {
    TriPrecision::from_moments(DeltaMoments::fixed(delta), len)
}

/// `E[Delta_T(delta)]` for `delta ~ N(loc, var)`.
pub fn expected_precision(delta_loc: f64, delta_var: f64, len: usize) -> Result<TriPrecision> {
    if delta_var < 0.0 || !delta_var.is_finite() {
        return Err(TpfError::arg(format!("delta variance must be >= 0, got {delta_var}")));
    }
    TriPrecision::from_moments(DeltaMoments::normal(delta_loc, delta_var), len)
}

/// Same as [`expected_precision`] for arbitrary (e.g. truncated) moments.
pub fn expected_precision_from(delta: DeltaMoments, len: usize) -> Result<TriPrecision> {
    TriPrecision::from_moments(delta, len)
}

/// Partial traces: `k = -1` sums the subdiagonal, `k = 0` the diagonal without
/// its last entry, `k = 1` the superdiagonal.
pub fn partial_trace(a: &DMatrix<f64>, k: i32) -> Result<f64> {
    if !a.is_square() {
        return Err(TpfError::arg("partial trace needs a square matrix"));
    }
    let n = a.nrows();
    let sum = match k {
        -1 => (1..n).map(|i| a[(i, i - 1)]).sum(),
        0 => (0..n.saturating_sub(1)).map(|i| a[(i, i)]).sum(),
        1 => (1..n).map(|i| a[(i - 1, i)]).sum(),
        _ => return Err(TpfError::arg(format!("partial trace index must be -1, 0 or 1, got {k}"))),
    };
    Ok(sum)
}

/// Lower-triangular Cholesky factor stored as log-diagonal plus the strict
/// lower triangle packed row by row (`row * (row - 1) / 2 + col`).
#[derive(Debug, Clone, Copy)]
pub struct FactorView<'a> {
    pub log_diag: &'a [f64],
    pub lower: &'a [f64],
}

pub fn packed_len(dim: usize) -> usize {
    dim * dim.saturating_sub(1) / 2
}

#[inline]
pub fn packed_index(row: usize, col: usize) -> usize {
    debug_assert!(col < row);
    row * (row - 1) / 2 + col
}

impl FactorView<'_> {
    pub fn dim(&self) -> usize {
        self.log_diag.len()
    }

    #[inline]
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        use std::cmp::Ordering::*;
        match col.cmp(&row) {
            Equal => self.log_diag[row].exp(),
            Less => self.lower[packed_index(row, col)],
            Greater => 0.0,
        }
    }

    /// Σ[row, col] of Σ = L Lᵀ.
    pub fn cov(&self, row: usize, col: usize) -> f64 {
        (0..=row.min(col)).map(|j| self.entry(row, j) * self.entry(col, j)).sum()
    }

    pub fn marginal_var(&self, t: usize) -> f64 {
        self.cov(t, t)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.log_diag.iter().sum::<f64>()
    }

    pub fn factor(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.entry(i, j))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let l = self.factor();
        &l * l.transpose()
    }
}

/// Borrowed view of a covariance in one of the supported structures.
#[derive(Debug, Clone, Copy)]
pub enum CovView<'a> {
    /// Independent coordinates with the given variances.
    Diagonal(&'a [f64]),
    Factor(FactorView<'a>),
    Dense(&'a DMatrix<f64>),
}

impl CovView<'_> {
    pub fn dim(&self) -> usize {
        match self {
            CovView::Diagonal(v) => v.len(),
            CovView::Factor(f) => f.dim(),
            CovView::Dense(m) => m.nrows(),
        }
    }

    /// (Tr, Tr^0, Tr^1) of the covariance.
    fn traces(&self) -> (f64, f64, f64) {
        let n = self.dim();
        match self {
            CovView::Diagonal(v) => {
                let full: f64 = v.iter().sum();
                (full, full - v[n - 1], 0.0)
            }
            CovView::Factor(f) => {
                let diag: Vec<f64> = (0..n).map(|t| f.marginal_var(t)).collect();
                let full: f64 = diag.iter().sum();
                let sup = (1..n).map(|t| f.cov(t - 1, t)).sum();
                (full, full - diag[n - 1], sup)
            }
            CovView::Dense(m) => {
                let full = m.trace();
                (full, full - m[(n - 1, n - 1)], (1..n).map(|t| m[(t - 1, t)]).sum())
            }
        }
    }

    pub fn log_det(&self) -> Result<f64> {
        match self {
            CovView::Diagonal(v) => {
                if v.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
                    return Err(TpfError::numeric("diagonal covariance has a non-positive entry"));
                }
                Ok(v.iter().map(|x| x.ln()).sum())
            }
            CovView::Factor(f) => Ok(f.log_det()),
            CovView::Dense(m) => cholesky_log_det(m),
        }
    }
}

fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| {
        let diag: Vec<f64> = m.diagonal().iter().copied().collect();
        TpfError::numeric(format!(
            "matrix of size {} is not positive definite (diagonal {:?})",
            m.nrows(),
            diag
        ))
    })
}

/// log|A| through the Cholesky factor; fails on indefinite input.
pub fn cholesky_log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(m)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// A⁻¹ through the Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(cholesky(m)?.inverse())
}

/// `E (h - mu 1)ᵀ Delta_T(delta) (h - mu 1)` for independent blocks, written
/// with the partial traces so no T×T product is ever formed.
pub fn quadratic_form_parts(
    h_loc: &[f64],
    h_cov: CovView<'_>,
    mu_loc: f64,
    mu_var: f64,
    delta: DeltaMoments,
) -> f64 {
    let n = h_loc.len();
    let (tr, tr0, tr1) = h_cov.traces();
    let cov_term = tr + delta.second * tr0 - 2.0 * delta.mean * tr1;

    // (m - mu 1)ᵀ E[Delta] (m - mu 1): the same decomposition on the rank-one outer product.
    let dev = |t: usize| h_loc[t] - mu_loc;
    let sq: f64 = (0..n).map(|t| dev(t) * dev(t)).sum();
    let sq0 = sq - dev(n - 1) * dev(n - 1);
    let lag: f64 = (1..n).map(|t| dev(t) * dev(t - 1)).sum();
    let mean_term = sq + delta.second * sq0 - 2.0 * delta.mean * lag;

    // 1ᵀ E[Delta] 1 = T + (T-1) E[delta^2] - 2 (T-1) E[delta]
    let m1 = (n - 1) as f64;
    let ones_term = n as f64 + delta.second * m1 - 2.0 * delta.mean * m1;

    cov_term + mean_term + mu_var * ones_term
}

/// Moments of one (k, v) block of the variational family.
#[derive(Debug, Clone)]
pub struct GaussBlockMoments {
    pub h_loc: Vec<f64>,
    pub h_cov: BlockCov,
    pub mu_loc: f64,
    pub mu_var: f64,
    pub delta_loc: f64,
    pub delta_var: f64,
}

#[derive(Debug, Clone)]
pub enum BlockCov {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

/// Expected AR quadratic form for one block. Always nonnegative.
pub fn expected_quadratic_form(m: &GaussBlockMoments) -> Result<f64> {
    let n = m.h_loc.len();
    if n == 0 {
        return Err(TpfError::arg("empty sequence"));
    }
    if m.mu_var < 0.0 || m.delta_var < 0.0 {
        return Err(TpfError::arg("variances must be nonnegative"));
    }
    let cov = match &m.h_cov {
        BlockCov::Diagonal(v) => {
            if v.len() != n || v.iter().any(|&x| x <= 0.0) {
                return Err(TpfError::numeric(format!("diagonal covariance must have {n} positive entries")));
            }
            CovView::Diagonal(v)
        }
        BlockCov::Dense(c) => {
            if c.nrows() != n || c.ncols() != n {
                return Err(TpfError::arg("covariance dimension mismatch"));
            }
            cholesky(c)?;
            CovView::Dense(c)
        }
    };
    Ok(quadratic_form_parts(
        &m.h_loc,
        cov,
        m.mu_loc,
        m.mu_var,
        DeltaMoments::normal(m.delta_loc, m.delta_var),
    ))
}

/// A variational block whose entropy is needed by the ELBO.
#[derive(Debug, Clone, Copy)]
pub enum EntropyBlock<'a> {
    Gamma { shp: f64, rte: f64 },
    Normal { var: f64 },
    MvNormal(CovView<'a>),
}

pub fn gamma_entropy(shp: f64, rte: f64) -> f64 {
    (1.0 - shp) * digamma(shp) - rte.ln() + shp + ln_gamma(shp)
}

pub fn normal_entropy(var: f64) -> f64 {
    0.5 * var.ln() + 0.5 * (2.0 * PI * E).ln()
}

pub fn entropy(block: EntropyBlock<'_>) -> Result<f64> {
    match block {
        EntropyBlock::Gamma { shp, rte } => {
            if shp <= 0.0 || rte <= 0.0 {
                return Err(TpfError::arg(format!("gamma parameters must be positive ({shp}, {rte})")));
            }
            Ok(gamma_entropy(shp, rte))
        }
        EntropyBlock::Normal { var } => {
            if var <= 0.0 {
                return Err(TpfError::arg(format!("normal variance must be positive, got {var}")));
            }
            Ok(normal_entropy(var))
        }
        EntropyBlock::MvNormal(cov) => {
            let dim = cov.dim() as f64;
            Ok(0.5 * cov.log_det()? + 0.5 * dim * (2.0 * PI * E).ln())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_det(m: &DMatrix<f64>) -> f64 {
        m.clone().lu().determinant()
    }

    #[test]
    fn precision_matches_displayed_matrix() {
        let p = ar_precision(0.5, 3).unwrap();
        assert_eq!(p.main_diag, vec![1.25, 1.25, 1.0]);
        assert_eq!(p.off_diag, vec![-0.5, -0.5]);
    }

    #[test]
    fn zero_delta_is_identity() {
        for t in 1..6 {
            assert_eq!(ar_precision(0.0, t).unwrap().to_dense(), DMatrix::identity(t, t));
        }
    }

    #[test]
    fn random_walk_two_by_two() {
        let p = ar_precision(1.0, 2).unwrap().to_dense();
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]));
        assert!((dense_det(&p) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_period_is_one() {
        let p = ar_precision(3.7, 1).unwrap();
        assert_eq!(p.main_diag, vec![1.0]);
        assert!(p.off_diag.is_empty());
        assert!(ar_precision(0.5, 0).is_err());
    }

    #[test]
    fn expected_precision_plugs_in_second_moment() {
        let p = expected_precision(0.5, 0.25, 4).unwrap();
        assert_eq!(p.main_diag, vec![1.5, 1.5, 1.5, 1.0]);
        assert_eq!(p.off_diag, vec![-0.5; 3]);
        assert_eq!(expected_precision(0.3, 0.0, 5).unwrap(), ar_precision(0.3, 5).unwrap());
        assert_eq!(expected_precision(1.0, 0.0, 5).unwrap(), ar_precision(1.0, 5).unwrap());
        assert!(expected_precision(0.0, -0.1, 3).is_err());
    }

    #[test]
    fn partial_traces() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(partial_trace(&a, 0).unwrap(), 1.0);
        assert_eq!(partial_trace(&a, 1).unwrap(), 2.0);
        assert_eq!(partial_trace(&a, -1).unwrap(), 3.0);
        let i = DMatrix::<f64>::identity(4, 4);
        assert_eq!(partial_trace(&i, 0).unwrap(), 3.0);
        assert_eq!(partial_trace(&i, 1).unwrap(), 0.0);
        assert_eq!(partial_trace(&i, -1).unwrap(), 0.0);
        assert!(partial_trace(&i, 2).is_err());
        assert!(partial_trace(&DMatrix::zeros(2, 3), 0).is_err());
    }

    #[test]
    fn quadratic_form_hand_values() {
        let mut m = GaussBlockMoments {
            h_loc: vec![0.0, 0.0],
            h_cov: BlockCov::Dense(DMatrix::identity(2, 2)),
            mu_loc: 0.0,
            mu_var: 0.0,
            delta_loc: 0.0,
            delta_var: 0.0,
        };
        assert!((expected_quadratic_form(&m).unwrap() - 2.0).abs() < 1e-15);
        m.delta_loc = 1.0;
        assert!((expected_quadratic_form(&m).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let m = GaussBlockMoments {
            h_loc: vec![0.0, 0.0],
            h_cov: BlockCov::Dense(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])),
            mu_loc: 0.0,
            mu_var: 0.0,
            delta_loc: 0.0,
            delta_var: 0.0,
        };
        assert!(matches!(expected_quadratic_form(&m), Err(TpfError::Numeric(_))));
    }

    #[test]
    fn factor_view_roundtrip() {
        let log_diag = [0.1, -0.2, 0.3];
        let lower = [0.5, -0.4, 0.25];
        let f = FactorView {
            log_diag: &log_diag,
            lower: &lower,
        };
        let dense = f.to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert!((dense[(i, j)] - f.cov(i, j)).abs() < 1e-15);
            }
        }
        assert!((cholesky_log_det(&dense).unwrap() - f.log_det()).abs() < 1e-12);
    }

    #[test]
    fn entropies() {
        assert!((entropy(EntropyBlock::Gamma { shp: 1.0, rte: 1.0 }).unwrap() - 1.0).abs() < 1e-14);
        assert!((entropy(EntropyBlock::Normal { var: 1.0 }).unwrap() - 1.418938533204673).abs() < 1e-14);
        let id = DMatrix::<f64>::identity(2, 2);
        assert!((entropy(EntropyBlock::MvNormal(CovView::Dense(&id))).unwrap() - 2.837877066409345).abs() < 1e-14);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        assert!(entropy(EntropyBlock::MvNormal(CovView::Dense(&bad))).is_err());
    }

    #[test]
    fn diagonal_mv_entropy_is_sum_of_univariate() {
        let v = [0.3, 1.7, 2.2, 0.01];
        let mv = entropy(EntropyBlock::MvNormal(CovView::Diagonal(&v))).unwrap();
        let sum: f64 = v.iter().map(|&x| normal_entropy(x)).sum();
        assert!((mv - sum).abs() < 1e-12);
    }
}

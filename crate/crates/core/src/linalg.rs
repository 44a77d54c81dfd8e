//! Dense and sparse matrix primitives shared by the filters.
//!
//! Dense matrices are column-major `nalgebra` matrices, so ensemble members
//! are contiguous in memory. The sparse factor stores one sorted
//! `(column, value)` list per row with an implicit unit diagonal.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::exec;

/// Column-major dense matrix of `f64`.
pub type DenseMatrix = DMatrix<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("entry {index} of {context} must be strictly positive, found {value}")]
    NotPositive {
        context: &'static str,
        index: usize,
        value: f64,
    },
    #[error("row {row} of a unit lower triangular factor: {reason}")]
    BadRow { row: usize, reason: &'static str },
    #[error("an ensemble needs at least 2 members, found {0}")]
    TooFewMembers(usize),
}

pub(crate) fn check_dim(
    context: &'static str,
    expected: usize,
    found: usize,
) -> Result<(), LinalgError> {
    if expected == found {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}

/// An `nstate × nens` matrix whose columns are ensemble members.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMatrix {
    members: DenseMatrix,
}

impl EnsembleMatrix {
    pub fn new(members: DenseMatrix) -> Result<Self, LinalgError> {
        if members.ncols() < 2 {
            return Err(LinalgError::TooFewMembers(members.ncols()));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite("ensemble members"));
        }
        Ok(Self { members })
    }

    /// Builds an ensemble from member state vectors.
    pub fn from_members(members: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let nstate = members.first().map_or(0, Vec::len);
        for m in members {
            check_dim("ensemble member length", nstate, m.len())?;
        }
        let data: Vec<f64> = members.iter().flatten().copied().collect();
        Self::new(DenseMatrix::from_vec(nstate, members.len(), data))
    }

    pub fn nstate(&self) -> usize {
        self.members.nrows()
    }

    pub fn nens(&self) -> usize {
        self.members.ncols()
    }

    pub fn members(&self) -> &DenseMatrix {
        &self.members
    }

    pub fn into_members(self) -> DenseMatrix {
        self.members
    }

    pub fn member(&self, j: usize) -> &[f64] {
        let n = self.nstate();
        &self.members.as_slice()[j * n..(j + 1) * n]
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.nens() as f64;
        let mut mean = DVector::zeros(self.nstate());
        for col in self.members.column_iter() {
            mean += col;
        }
        mean / n
    }

    /// Member deviations from the ensemble mean; row sums vanish.
    pub fn deviations(&self) -> DenseMatrix {
        let mean = self.mean();
        let mut dev = self.members.clone();
        for mut col in dev.column_iter_mut() {
            col -= &mean;
        }
        dev
    }

    /// Unbiased sample covariance `U Uᵀ / (nens - 1)`.
    pub fn sample_covariance(&self) -> DenseMatrix {
        let u = self.deviations();
        (&u * u.transpose()) / (self.nens() as f64 - 1.0)
    }

    /// Copy of the ensemble restricted to the given state rows.
    pub fn select_rows(&self, rows: &[usize]) -> EnsembleMatrix {
        EnsembleMatrix {
            members: self.members.select_rows(rows),
        }
    }

    /// Scales deviations about the mean by `factor`.
    pub fn inflate(&self, factor: f64) -> EnsembleMatrix {
        if factor == 1.0 {
            return self.clone();
        }
        let mean = self.mean();
        let mut members = self.deviations() * factor;
        for mut col in members.column_iter_mut() {
            col += &mean;
        }
        EnsembleMatrix { members }
    }
}

/// Unit lower triangular matrix with sparse strictly-lower rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseUnitLowerTriangular {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseUnitLowerTriangular {
    pub fn identity(dim: usize) -> Self {
        Self {
            rows: vec![Vec::new(); dim],
        }
    }

    /// Validates and wraps per-row `(column, value)` lists.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self, LinalgError> {
        for (i, row) in rows.iter().enumerate() {
            let mut prev = None;
            for &(j, v) in row {
                if j >= i {
                    return Err(LinalgError::BadRow {
                        row: i,
                        reason: "column index not strictly below the diagonal",
                    });
                }
                if prev.is_some_and(|p| p >= j) {
                    return Err(LinalgError::BadRow {
                        row: i,
                        reason: "column indices not strictly ascending",
                    });
                }
                if !v.is_finite() {
                    return Err(LinalgError::NonFinite("triangular factor"));
                }
                prev = Some(j);
            }
        }
        Ok(Self { rows })
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn max_row_nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// `T · x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_dim("unit lower product", self.dim(), x.len())?;
        Ok(self
            .rows
            .iter()
            .zip(x)
            .map(|(row, &xi)| xi + row.iter().map(|&(j, v)| v * x[j]).sum::<f64>())
            .collect())
    }

    /// `Tᵀ · x`.
    pub fn transpose_mul_vec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_dim("unit lower transpose product", self.dim(), x.len())?;
        let mut y = x.to_vec();
        for (row, &xi) in self.rows.iter().zip(x) {
            for &(j, v) in row {
                y[j] += v * xi;
            }
        }
        Ok(y)
    }

    /// Forward substitution for `T · x = b`, overwriting `b` with `x`.
    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<(), LinalgError> {
        check_dim("unit lower solve", self.dim(), b.len())?;
        for (i, row) in self.rows.iter().enumerate() {
            let s: f64 = row.iter().map(|&(j, v)| v * b[j]).sum();
            b[i] -= s;
        }
        Ok(())
    }

    /// Backward substitution for `Tᵀ · x = b`, overwriting `b` with `x`.
    pub fn transpose_solve_in_place(&self, b: &mut [f64]) -> Result<(), LinalgError> {
        check_dim("unit lower transpose solve", self.dim(), b.len())?;
        for (i, row) in self.rows.iter().enumerate().rev() {
            let xi = b[i];
            for &(j, v) in row {
                b[j] -= v * xi;
            }
        }
        Ok(())
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }

    pub fn transpose_solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let mut x = b.to_vec();
        self.transpose_solve_in_place(&mut x)?;
        Ok(x)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.dim();
        let mut m = DenseMatrix::identity(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Diagonal matrix with strictly positive finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveDiagonal {
    values: Vec<f64>,
}

impl PositiveDiagonal {
    pub fn new(values: Vec<f64>) -> Result<Self, LinalgError> {
        for (index, &value) in values.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(LinalgError::NotPositive {
                    context: "positive diagonal",
                    index,
                    value,
                });
            }
        }
        Ok(Self { values })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            values: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn select(&self, indices: &[usize]) -> PositiveDiagonal {
        PositiveDiagonal {
            values: indices.iter().map(|&i| self.values[i]).collect(),
        }
    }
}

/// Factors of the precision estimate `B̂⁻¹ = Tᵀ D⁻¹ T`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactors {
    t: SparseUnitLowerTriangular,
    d: PositiveDiagonal,
}

impl CholeskyFactors {
    pub fn new(t: SparseUnitLowerTriangular, d: PositiveDiagonal) -> Result<Self, LinalgError> {
        check_dim("factor diagonal", t.dim(), d.dim())?;
        Ok(Self { t, d })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            t: SparseUnitLowerTriangular::identity(dim),
            d: PositiveDiagonal::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.t.dim()
    }

    pub fn t(&self) -> &SparseUnitLowerTriangular {
        &self.t
    }

    pub fn d(&self) -> &PositiveDiagonal {
        &self.d
    }

    /// `Tᵀ D⁻¹ T v` without forming the product.
    pub fn apply_precision(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let mut w = self.t.mul_vec(v)?;
        for (wi, di) in w.iter_mut().zip(self.d.values()) {
            *wi /= di;
        }
        self.t.transpose_mul_vec(&w)
    }

    /// `B̂ v = T⁻¹ D T⁻ᵀ v`, overwriting `v`.
    pub fn solve_precision_in_place(&self, v: &mut [f64]) -> Result<(), LinalgError> {
        self.t.transpose_solve_in_place(v)?;
        for (vi, di) in v.iter_mut().zip(self.d.values()) {
            *vi *= di;
        }
        self.t.solve_in_place(v)
    }

    pub fn solve_precision(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let mut x = v.to_vec();
        self.solve_precision_in_place(&mut x)?;
        Ok(x)
    }

    /// Applies [`Self::solve_precision`] to every column.
    pub fn solve_precision_columns(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        check_dim("precision solve rows", self.dim(), rhs.nrows())?;
        map_columns(rhs, |col| self.solve_precision(col))
    }

    /// Applies [`Self::apply_precision`] to every column.
    pub fn apply_precision_columns(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        check_dim("precision apply rows", self.dim(), rhs.nrows())?;
        map_columns(rhs, |col| self.apply_precision(col))
    }

    /// Dense `Tᵀ D⁻¹ T`.
    pub fn to_dense_precision(&self) -> DenseMatrix {
        let t = self.t.to_dense();
        let dinv = DVector::from_iterator(self.dim(), self.d.values().iter().map(|d| 1.0 / d));
        t.transpose() * DenseMatrix::from_diagonal(&dinv) * t
    }
}

/// Maps each column of `m` through `f`, possibly in parallel.
pub(crate) fn map_columns<F>(m: &DenseMatrix, f: F) -> Result<DenseMatrix, LinalgError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, LinalgError> + Sync + Send,
{
    let n = m.nrows();
    let data = m.as_slice();
    let cols = exec::try_map_indexed(m.ncols(), |j| f(&data[j * n..(j + 1) * n]))?;
    let mut out = Vec::with_capacity(n * m.ncols());
    for c in cols {
        out.extend(c);
    }
    Ok(DenseMatrix::from_vec(n, m.ncols(), out))
}

/// Max-absolute-row-sum norm.
pub fn inf_norm(m: &DenseMatrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    pub(crate) fn random_factors(rng: &mut ChaCha8Rng, n: usize, density: f64) -> CholeskyFactors {
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::new();
            for j in 0..i {
                if rng.random_bool(density) {
                    row.push((j, rng.random_range(-0.5..0.5)));
                }
            }
            rows.push(row);
        }
        let t = SparseUnitLowerTriangular::from_rows(rows).unwrap();
        let d = PositiveDiagonal::new((0..n).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap();
        CholeskyFactors::new(t, d).unwrap()
    }

    #[test]
    fn mean_of_identical_members() {
        let v = vec![1.5, -2.0, 3.0];
        let ens = EnsembleMatrix::from_members(&[v.clone(), v.clone()]).unwrap();
        assert_eq!(ens.mean().as_slice(), v.as_slice());
        assert!(ens.deviations().iter().all(|&x| x == 0.0));
        assert!(ens.sample_covariance().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mean_midpoint_and_deviations() {
        let ens = EnsembleMatrix::from_members(&[vec![0.0; 4], vec![2.0; 4]]).unwrap();
        assert_eq!(ens.mean().as_slice(), &[1.0; 4]);
        let one_d = EnsembleMatrix::from_members(&[vec![0.0], vec![2.0]]).unwrap();
        let dev = one_d.deviations();
        assert_eq!(dev.as_slice(), &[-1.0, 1.0]);
        assert_eq!(one_d.sample_covariance()[(0, 0)], 2.0);
    }

    #[test]
    fn mean_matches_one_pass_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_matrix(&mut rng, 5, 10);
        let ens = EnsembleMatrix::new(m.clone()).unwrap();
        let mean = ens.mean();
        for i in 0..5 {
            let mut s = 0.0;
            for j in 0..10 {
                s += m[(i, j)];
            }
            assert!((mean[i] - s / 10.0).abs() < 1e-14);
        }
        let dev = ens.deviations();
        for i in 0..5 {
            assert!(dev.row(i).sum().abs() < 1e-14);
            for j in 0..10 {
                assert!((dev[(i, j)] + mean[i] - m[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn covariance_matches_pairwise_loop() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DenseMatrix::from_fn(4, 50, |_, _| StandardNormal.sample(&mut rng));
        let cov = EnsembleMatrix::new(m.clone()).unwrap().sample_covariance();
        for a in 0..4 {
            for b in 0..4 {
                let ma: f64 = (0..50).map(|j| m[(a, j)]).sum::<f64>() / 50.0;
                let mb: f64 = (0..50).map(|j| m[(b, j)]).sum::<f64>() / 50.0;
                let mut s = 0.0;
                for j in 0..50 {
                    s += (m[(a, j)] - ma) * (m[(b, j)] - mb);
                }
                assert!((cov[(a, b)] - s / 49.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_member_rejected() {
        assert_eq!(
            EnsembleMatrix::new(DenseMatrix::zeros(3, 1)),
            Err(LinalgError::TooFewMembers(1))
        );
    }

    #[test]
    fn triangular_hand_cases() {
        let id = SparseUnitLowerTriangular::identity(3);
        assert_eq!(id.solve(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(id.transpose_solve(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);

        let t = SparseUnitLowerTriangular::from_rows(vec![vec![], vec![(0, -0.5)]]).unwrap();
        assert_eq!(t.solve(&[1.0, 1.0]).unwrap(), vec![1.0, 1.5]);
        assert_eq!(t.transpose_solve(&[1.0, 1.0]).unwrap(), vec![1.5, 1.0]);
        assert!(matches!(
            t.solve(&[1.0]),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(SparseUnitLowerTriangular::from_rows(vec![vec![(0, 1.0)]]).is_err());
        assert!(SparseUnitLowerTriangular::from_rows(vec![
            vec![],
            vec![],
            vec![(1, 1.0), (0, 1.0)]
        ])
        .is_err());
        assert!(PositiveDiagonal::new(vec![1.0, 0.0]).is_err());
        assert!(PositiveDiagonal::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn precision_scalar_cases() {
        let id = CholeskyFactors::identity(3);
        assert_eq!(id.apply_precision(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(id.solve_precision(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let f = CholeskyFactors::new(
            SparseUnitLowerTriangular::identity(1),
            PositiveDiagonal::new(vec![4.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(f.apply_precision(&[2.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn precision_matches_dense_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 7, 30] {
            let f = random_factors(&mut rng, n, 0.3);
            let t = f.t().to_dense();
            let dinv = DenseMatrix::from_diagonal(&DVector::from_iterator(
                n,
                f.d().values().iter().map(|d| 1.0 / d),
            ));
            let dense = t.transpose() * dinv * &t;
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = &dense * DVector::from_column_slice(&v);
            let got = f.apply_precision(&v).unwrap();
            for i in 0..n {
                assert!((got[i] - want[i]).abs() < 1e-12);
            }
            let inv = dense.clone().try_inverse().unwrap();
            let want = &inv * DVector::from_column_slice(&v);
            let got = f.solve_precision(&v).unwrap();
            let scale = want.amax().max(1.0);
            for i in 0..n {
                assert!((got[i] - want[i]).abs() < 1e-10 * scale);
            }
        }
    }

    #[test]
    fn triangular_residual_on_large_random_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_factors(&mut rng, 500, 0.01);
        let b: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = f.t().solve(&b).unwrap();
        let tx = f.t().mul_vec(&x).unwrap();
        let bmax = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let res = tx.iter().zip(&b).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(res <= 1e-12 * bmax, "residual {res}");
        let x = f.t().transpose_solve(&b).unwrap();
        let tx = f.t().transpose_mul_vec(&x).unwrap();
        let res = tx.iter().zip(&b).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(res <= 1e-12 * bmax, "residual {res}");
    }

    #[test]
    fn inf_norm_is_max_row_sum() {
        let m = DenseMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 0.5]);
        assert_eq!(inf_norm(&m), 3.0);
    }
}

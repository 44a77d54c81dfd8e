//! Modified Cholesky estimation of the background precision matrix.
//!
//! Each component's deviations are regressed on the deviations of its
//! localized predecessors. The negated coefficients fill row `i` of the unit
//! lower triangular factor `T`, and the residual variances fill `D`, giving
//! `B̂⁻¹ = Tᵀ D⁻¹ T`.

use std::fmt::Write as _;

use nalgebra::{DVector, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::grid::{GeometryError, GridGeometry};
use crate::linalg::{
    check_dim, inf_norm, CholeskyFactors, DenseMatrix, EnsembleMatrix, LinalgError,
    PositiveDiagonal, SparseUnitLowerTriangular,
};

/// Relative floor applied to residual variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Reciprocal-condition threshold below which a Gram matrix counts as singular.
const SINGULAR_RCOND: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(
        "normal equations are numerically singular for component {component}; \
         use a Tikhonov or truncated-SVD regression instead"
    )]
    Singular { component: usize },
    #[error("invalid regression parameter: {0}")]
    InvalidMethod(String),
    #[error("factor dump line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RegressionMethod {
    NormalEquations,
    /// Ridge penalty `λ² ‖β‖²`.
    Tikhonov(f64),
    /// Keeps singular values with `τ_j / τ_max ≥ σ_r`.
    TruncatedSvd(f64),
}

impl Default for RegressionMethod {
    fn default() -> Self {
        RegressionMethod::TruncatedSvd(0.10)
    }
}

impl RegressionMethod {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        match *self {
            RegressionMethod::NormalEquations => Ok(()),
            RegressionMethod::Tikhonov(l) if l.is_finite() && l >= 0.0 => Ok(()),
            RegressionMethod::Tikhonov(l) => Err(EstimatorError::InvalidMethod(format!(
                "Tikhonov lambda must be >= 0, got {l}"
            ))),
            RegressionMethod::TruncatedSvd(s) if s > 0.0 && s < 1.0 => Ok(()),
            RegressionMethod::TruncatedSvd(s) => Err(EstimatorError::InvalidMethod(format!(
                "truncation threshold must lie in (0, 1), got {s}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Regression {
    pub beta: Vec<f64>,
    pub residual: Vec<f64>,
}

/// Solves `min ‖x − Zᵀβ‖²` (with the method's regularization).
///
/// `z` is `p × nens`, one predecessor per row; `x` holds `nens` samples.
pub fn regress_component(
    z: &DenseMatrix,
    x: &[f64],
    method: RegressionMethod,
) -> Result<Regression, EstimatorError> {
    regress_component_at(z, x, method, 0)
}

fn regress_component_at(
    z: &DenseMatrix,
    x: &[f64],
    method: RegressionMethod,
    component: usize,
) -> Result<Regression, EstimatorError> {
    check_dim("regression samples", z.ncols(), x.len())?;
    let xv = DVector::from_column_slice(x);
    let p = z.nrows();
    let beta = match method {
        RegressionMethod::NormalEquations => gram_solve(z, &xv, 0.0, component)?,
        RegressionMethod::Tikhonov(lambda) => gram_solve(z, &xv, lambda * lambda, component)?,
        RegressionMethod::TruncatedSvd(threshold) => {
            let mut beta = DVector::zeros(p);
            for pair in singular_pairs(z, &xv) {
                if pair.ratio >= threshold {
                    beta.axpy(pair.alpha, &pair.u, 1.0);
                }
            }
            beta
        }
    };
    let fitted = z.tr_mul(&beta);
    let residual = (xv - fitted).as_slice().to_vec();
    Ok(Regression {
        beta: beta.as_slice().to_vec(),
        residual,
    })
}

fn gram_solve(
    z: &DenseMatrix,
    x: &DVector<f64>,
    ridge: f64,
    component: usize,
) -> Result<DVector<f64>, EstimatorError> {
    let p = z.nrows();
    let mut gram = z * z.transpose();
    for i in 0..p {
        gram[(i, i)] += ridge;
    }
    let max_diag = (0..p).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let chol = gram
        .cholesky()
        .ok_or(EstimatorError::Singular { component })?;
    let l = chol.l_dirty();
    let min_piv = (0..p).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if max_diag == 0.0 || min_piv < SINGULAR_RCOND * max_diag {
        return Err(EstimatorError::Singular { component });
    }
    Ok(chol.solve(&(z * x)))
}

struct SingularPair {
    tau: f64,
    ratio: f64,
    alpha: f64,
    u: DVector<f64>,
}

/// Singular triplets of `z` (descending) with the weights `α_j = v_jᵀx / τ_j`.
fn singular_pairs(z: &DenseMatrix, x: &DVector<f64>) -> Vec<SingularPair> {
    if z.nrows() == 0 || z.ncols() == 0 {
        return Vec::new();
    }
    let svd = SVD::new(z.clone(), true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let tau_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if tau_max == 0.0 {
        return Vec::new();
    }
    svd.singular_values
        .iter()
        .enumerate()
        .filter(|(_, &tau)| tau > 0.0)
        .map(|(j, &tau)| SingularPair {
            tau,
            ratio: tau / tau_max,
            alpha: vt.row(j).transpose().dot(x) / tau,
            u: u.column(j).into_owned(),
        })
        .collect()
}

/// Singular values and expansion weights of the coefficient vector in the
/// left singular basis, largest singular value first.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingularWeights {
    pub singular_values: Vec<f64>,
    pub alphas: Vec<f64>,
}

pub fn singular_weights(z: &DenseMatrix, x: &[f64]) -> Result<SingularWeights, EstimatorError> {
    check_dim("regression samples", z.ncols(), x.len())?;
    let pairs = singular_pairs(z, &DVector::from_column_slice(x));
    Ok(SingularWeights {
        singular_values: pairs.iter().map(|p| p.tau).collect(),
        alphas: pairs.iter().map(|p| p.alpha).collect(),
    })
}

/// Side information collected while estimating factors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimateReport {
    /// Components whose residual variance hit the floor.
    pub floored: Vec<usize>,
    pub nnz: usize,
    pub max_row_nnz: usize,
}

pub fn estimate_factors(
    ens: &EnsembleMatrix,
    geometry: &GridGeometry,
    method: RegressionMethod,
) -> Result<CholeskyFactors, EstimatorError> {
    estimate_factors_with_report(ens, geometry, method).map(|(f, _)| f)
}

pub fn estimate_factors_with_report(
    ens: &EnsembleMatrix,
    geometry: &GridGeometry,
    method: RegressionMethod,
) -> Result<(CholeskyFactors, EstimateReport), EstimatorError> {
    method.validate()?;
    let n = ens.nstate();
    check_dim("geometry size vs ensemble", geometry.size(), n)?;
    let nens = ens.nens();
    let divisor = nens as f64 - 1.0;
    // samples[i] = deviations of component i across members
    let samples = ens.deviations().transpose();
    let sample = |i: usize| &samples.as_slice()[i * nens..(i + 1) * nens];
    let sumsq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();

    let max_var = (0..n).map(|i| sumsq(sample(i)) / divisor).fold(0.0, f64::max);
    let floor = VARIANCE_FLOOR * if max_var > 0.0 { max_var } else { 1.0 };

    let rows = exec::try_map_indexed(n, |i| {
        let preds = geometry.predecessors(i)?.predecessors;
        let x = sample(i);
        if preds.is_empty() {
            return Ok((Vec::new(), sumsq(x) / divisor));
        }
        let z = DenseMatrix::from_fn(preds.len(), nens, |r, c| samples[(c, preds[r])]);
        let reg = regress_component_at(&z, x, method, i)?;
        let row = preds
            .into_iter()
            .zip(reg.beta)
            .map(|(q, b)| (q, -b))
            .collect::<Vec<_>>();
        Ok::<_, EstimatorError>((row, sumsq(&reg.residual) / divisor))
    })?;

    let mut t_rows = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut report = EstimateReport::default();
    for (i, (row, var)) in rows.into_iter().enumerate() {
        if !(var > floor) {
            report.floored.push(i);
            d.push(floor);
        } else {
            d.push(var);
        }
        t_rows.push(row);
    }
    if !report.floored.is_empty() {
        log::warn!(
            "residual variance floored at {floor:e} for {} of {n} components",
            report.floored.len()
        );
    }
    let t = SparseUnitLowerTriangular::from_rows(t_rows)?;
    report.nnz = t.nnz();
    report.max_row_nnz = t.max_row_nnz();
    let factors = CholeskyFactors::new(t, PositiveDiagonal::new(d)?)?;
    Ok((factors, report))
}

/// `‖dense(f) − reference‖∞`.
pub fn precision_error_norm(
    factors: &CholeskyFactors,
    reference: &DenseMatrix,
) -> Result<f64, EstimatorError> {
    check_dim("reference rows", factors.dim(), reference.nrows())?;
    check_dim("reference cols", factors.dim(), reference.ncols())?;
    Ok(inf_norm(&(factors.to_dense_precision() - reference)))
}

/// Serializes factors as `mcfactors <n>` followed by `i d_i k_1 v_1 …` rows
/// with 1-based indices.
pub fn write_factors(factors: &CholeskyFactors) -> String {
    let mut out = format!("mcfactors {}\n", factors.dim());
    for (i, (row, d)) in factors
        .t()
        .rows()
        .iter()
        .zip(factors.d().values())
        .enumerate()
    {
        write!(out, "{} {}", i + 1, d).unwrap();
        for &(k, v) in row {
            write!(out, " {} {}", k + 1, v).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn read_factors(text: &str) -> Result<CholeskyFactors, EstimatorError> {
    let err = |line: usize, reason: &str| EstimatorError::Parse {
        line,
        reason: reason.to_string(),
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty input"))?;
    let n: usize = match header.split_whitespace().collect::<Vec<_>>()[..] {
        ["mcfactors", n] => n.parse().map_err(|_| err(1, "bad dimension"))?,
        _ => return Err(err(1, "expected `mcfactors <n>` header")),
    };
    let mut rows = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    for (lineno, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 || fields.len() % 2 != 0 {
            return Err(err(lineno, "expected `i d_i` followed by index/value pairs"));
        }
        let i: usize = fields[0].parse().map_err(|_| err(lineno, "bad row index"))?;
        if i != rows.len() + 1 {
            return Err(err(lineno, "rows must appear in order"));
        }
        d.push(fields[1].parse::<f64>().map_err(|_| err(lineno, "bad diagonal"))?);
        let row = fields[2..]
            .chunks(2)
            .map(|kv| {
                let k: usize = kv[0].parse().map_err(|_| err(lineno, "bad column index"))?;
                let v: f64 = kv[1].parse().map_err(|_| err(lineno, "bad value"))?;
                if k == 0 {
                    return Err(err(lineno, "column indices are 1-based"));
                }
                Ok((k - 1, v))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.len() != n {
        return Err(err(text.lines().count(), "row count does not match header"));
    }
    let t = SparseUnitLowerTriangular::from_rows(rows)?;
    Ok(CholeskyFactors::new(t, PositiveDiagonal::new(d)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Ordering;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn perfect_predictor() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let z = DenseMatrix::from_row_slice(1, 4, &x);
        for m in [
            RegressionMethod::NormalEquations,
            RegressionMethod::TruncatedSvd(0.1),
        ] {
            let r = regress_component(&z, &x, m).unwrap();
            assert!((r.beta[0] - 1.0).abs() < 1e-14);
            assert!(r.residual.iter().all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn orthogonal_target_gives_zero_beta() {
        let z = DenseMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let x = [1.0, -1.0, 2.0, -2.0];
        let r = regress_component(&z, &x, RegressionMethod::NormalEquations).unwrap();
        assert!(r.beta.iter().all(|b| b.abs() < 1e-15));
        assert_eq!(r.residual, x.to_vec());
    }

    #[test]
    fn singular_gram_is_reported() {
        let z = DenseMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        let e = regress_component(&z, &[1.0, 0.0, 1.0], RegressionMethod::NormalEquations);
        assert!(matches!(e, Err(EstimatorError::Singular { .. })));
        // the rank-deficient case is fine once regularized
        assert!(regress_component(&z, &[1.0, 0.0, 1.0], RegressionMethod::Tikhonov(0.1)).is_ok());
        assert!(
            regress_component(&z, &[1.0, 0.0, 1.0], RegressionMethod::TruncatedSvd(0.1)).is_ok()
        );
    }

    #[test]
    fn tikhonov_matches_augmented_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = gaussian(&mut rng, 3, 40);
        let x: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = regress_component(&z, &x, RegressionMethod::Tikhonov(0.1)).unwrap();
        // oracle: (Z Zᵀ + λ² I) β = Z x solved by LU
        let a = &z * z.transpose() + DenseMatrix::identity(3, 3) * 0.01;
        let b = &z * DVector::from_column_slice(&x);
        let want = a.lu().solve(&b).unwrap();
        for i in 0..3 {
            assert!((r.beta[i] - want[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn svd_threshold_near_one_keeps_leading_pair_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = gaussian(&mut rng, 3, 30);
        let x: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = regress_component(&z, &x, RegressionMethod::TruncatedSvd(0.999)).unwrap();
        // oracle: leading singular pair via power iteration on Z Zᵀ
        let g = &z * z.transpose();
        let mut u = DVector::from_element(3, 1.0);
        for _ in 0..2000 {
            u = &g * &u;
            u /= u.norm();
        }
        let tau = (u.dot(&(&g * &u))).sqrt();
        let v = z.transpose() * &u / tau;
        let want = &u * (v.dot(&DVector::from_column_slice(&x)) / tau);
        for i in 0..3 {
            assert!((r.beta[i] - want[i]).abs() < 1e-9, "{} vs {}", r.beta[i], want[i]);
        }
    }

    #[test]
    fn zero_predictors_give_zero_beta() {
        let z = DenseMatrix::zeros(2, 5);
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = regress_component(&z, &x, RegressionMethod::TruncatedSvd(0.1)).unwrap();
        assert_eq!(r.beta, vec![0.0, 0.0]);
        assert_eq!(r.residual, x.to_vec());
    }

    #[test]
    fn method_validation() {
        assert!(RegressionMethod::Tikhonov(-1.0).validate().is_err());
        assert!(RegressionMethod::TruncatedSvd(0.0).validate().is_err());
        assert!(RegressionMethod::TruncatedSvd(1.0).validate().is_err());
        assert!(RegressionMethod::TruncatedSvd(0.5).validate().is_ok());
    }

    #[test]
    fn zero_radius_gives_diagonal_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ens = EnsembleMatrix::new(gaussian(&mut rng, 6, 12)).unwrap();
        let g = GridGeometry::ring(6, 0).unwrap();
        let f = estimate_factors(&ens, &g, RegressionMethod::default()).unwrap();
        assert_eq!(f.t().nnz(), 0);
        let cov = ens.sample_covariance();
        for i in 0..6 {
            assert!((f.d().values()[i] - cov[(i, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_components_recover_diagonal_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sd: Vec<f64> = (0..10).map(|i| 0.5 + 0.2 * i as f64).collect();
        let m = DenseMatrix::from_fn(10, 2000, |i, _| {
            sd[i] * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let ens = EnsembleMatrix::new(m).unwrap();
        let g = GridGeometry::ring(10, 5).unwrap();
        let f = estimate_factors(&ens, &g, RegressionMethod::NormalEquations).unwrap();
        // sampling error of β_ij is about sd_i / (sd_j · √N)
        for (i, row) in f.t().rows().iter().enumerate() {
            for &(j, v) in row {
                assert!(v.abs() < 4.0 * sd[i] / (sd[j] * 2000f64.sqrt()), "{i} {j} {v}");
            }
        }
        for i in 0..10 {
            let truth = sd[i] * sd[i];
            assert!((f.d().values()[i] - truth).abs() < 0.1 * truth);
        }
    }

    #[test]
    fn first_diagonal_is_raw_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let ens = EnsembleMatrix::new(gaussian(&mut rng, 8, 20)).unwrap();
        let g = GridGeometry::rect(2, 4, Ordering::RowMajor, 1).unwrap();
        let f = estimate_factors(&ens, &g, RegressionMethod::TruncatedSvd(0.1)).unwrap();
        assert!((f.d().values()[0] - ens.sample_covariance()[(0, 0)]).abs() < 1e-12);
        for i in 0..8 {
            let preds = g.predecessors(i).unwrap().predecessors;
            assert!(f.t().row(i).iter().all(|(k, _)| preds.contains(k)));
        }
    }

    #[test]
    fn saturated_regression_inverts_sample_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let ens = EnsembleMatrix::new(gaussian(&mut rng, 5, 50)).unwrap();
        let g = GridGeometry::ring(5, 5).unwrap();
        let f = estimate_factors(&ens, &g, RegressionMethod::NormalEquations).unwrap();
        let want = ens.sample_covariance().try_inverse().unwrap();
        let got = f.to_dense_precision();
        assert!((&got - &want).norm() <= 1e-6 * want.norm());
    }

    #[test]
    fn degenerate_ensemble_is_floored() {
        let ens = EnsembleMatrix::from_members(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
        let g = GridGeometry::ring(3, 1).unwrap();
        let (f, report) =
            estimate_factors_with_report(&ens, &g, RegressionMethod::TruncatedSvd(0.1)).unwrap();
        assert_eq!(report.floored, vec![0, 1, 2]);
        assert!(f.d().values().iter().all(|&d| d == VARIANCE_FLOOR));
    }

    #[test]
    fn error_norm_hand_cases() {
        let f = CholeskyFactors::identity(4);
        assert_eq!(precision_error_norm(&f, &DenseMatrix::identity(4, 4)).unwrap(), 0.0);
        // |I - 2I| has unit row sums
        let r = DenseMatrix::identity(4, 4) * 2.0;
        assert_eq!(precision_error_norm(&f, &r).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ens = EnsembleMatrix::new(gaussian(&mut rng, 6, 30)).unwrap();
        let f = estimate_factors(&ens, &GridGeometry::ring(6, 2).unwrap(), Default::default())
            .unwrap();
        let reference = DenseMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let dense = f.to_dense_precision();
        let mut want = 0.0_f64;
        for i in 0..6 {
            let mut s = 0.0;
            for j in 0..6 {
                s += (dense[(i, j)] - reference[(i, j)]).abs();
            }
            want = want.max(s);
        }
        assert!((precision_error_norm(&f, &reference).unwrap() - want).abs() < 1e-12);
        assert!(precision_error_norm(&f, &DenseMatrix::zeros(5, 5)).is_err());
    }

    #[test]
    fn factor_dump_format() {
        let t = SparseUnitLowerTriangular::from_rows(vec![vec![], vec![(0, -0.25)]]).unwrap();
        let f = CholeskyFactors::new(t, PositiveDiagonal::new(vec![2.0, 0.5]).unwrap()).unwrap();
        let text = write_factors(&f);
        assert_eq!(text, "mcfactors 2\n1 2\n2 0.5 1 -0.25\n");
        assert_eq!(read_factors(&text).unwrap(), f);
        assert!(read_factors("mcfactors 3\n1 1\n").is_err());
        assert!(read_factors("factors 1\n1 1\n").is_err());
        assert!(matches!(
            read_factors("mcfactors 2\n1 1\n2 1 2 0.5\n"),
            Err(EstimatorError::Linalg(_))
        ));
    }

    #[test]
    fn parallel_estimate_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let ens = EnsembleMatrix::new(gaussian(&mut rng, 40, 25)).unwrap();
        let g = GridGeometry::ring(40, 4).unwrap();
        let par = estimate_factors(&ens, &g, Default::default()).unwrap();
        let seq = exec::sequential(|| estimate_factors(&ens, &g, Default::default()).unwrap());
        assert_eq!(par, seq);
    }
}

//! Random instances and dense oracles shared by the property and acceptance tests.

use enkf_mc::filters::ObservationBundle;
use enkf_mc::linalg::{CholeskyFactors, DenseMatrix, EnsembleMatrix, PositiveDiagonal, SparseUnitLowerTriangular};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random factors whose rows reach back at most `band` columns.
pub fn random_factors(rng: &mut ChaCha8Rng, n: usize, band: usize) -> CholeskyFactors {
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::new();
        for j in i.saturating_sub(band)..i {
            row.push((j, rng.random_range(-0.6..0.6)));
        }
        rows.push(row);
    }
    let d = (0..n).map(|_| rng.random_range(0.3..3.0)).collect();
    CholeskyFactors::new(
        SparseUnitLowerTriangular::from_rows(rows).unwrap(),
        PositiveDiagonal::new(d).unwrap(),
    )
    .unwrap()
}

pub fn gaussian_ensemble(rng: &mut ChaCha8Rng, n: usize, nens: usize) -> EnsembleMatrix {
    let mut m = DenseMatrix::zeros(n, nens);
    for j in 0..nens {
        for i in 0..n {
            m[(i, j)] = normal(rng);
        }
    }
    EnsembleMatrix::new(m).unwrap()
}

/// Observes a random subset of `nobs` components.
pub fn random_obs(rng: &mut ChaCha8Rng, n: usize, nobs: usize, r: f64) -> ObservationBundle {
    let mut idx = rand::seq::index::sample(rng, n, nobs).into_vec();
    idx.sort_unstable();
    let y = idx.iter().map(|_| normal(rng)).collect();
    ObservationBundle::new(y, idx, vec![r; nobs], n).unwrap()
}

pub fn rel_err(got: &DenseMatrix, want: &DenseMatrix) -> f64 {
    (got - want).norm() / want.norm().max(f64::MIN_POSITIVE)
}

/// Dense selection matrix `H`.
pub fn selection(obs: &ObservationBundle) -> DenseMatrix {
    let mut h = DenseMatrix::zeros(obs.nobs(), obs.nstate());
    for (k, &i) in obs.indices().iter().enumerate() {
        h[(k, i)] = 1.0;
    }
    h
}

/// `Xᵇ + (B̂⁻¹ + Hᵀ R⁻¹ H)⁻¹ Hᵀ R⁻¹ (Yˢ − H Xᵇ)` by explicit inversion.
pub fn enkf_mc_oracle(ens: &EnsembleMatrix, obs: &ObservationBundle, f: &CholeskyFactors, ys: &DenseMatrix) -> DenseMatrix {
    let h = selection(obs);
    let rinv = DenseMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        obs.nobs(),
        obs.r().values().iter().map(|r| 1.0 / r),
    ));
    let a = (f.to_dense_precision() + h.transpose() * &rinv * &h)
        .try_inverse()
        .unwrap();
    let delta = ys - &h * ens.members();
    ens.members() + a * h.transpose() * rinv * delta
}

/// Global ETKF analysis evaluated densely in ensemble space.
pub fn etkf_oracle(ens: &EnsembleMatrix, obs: &ObservationBundle) -> DenseMatrix {
    let nens = ens.nens();
    let m = nens as f64 - 1.0;
    let mean = ens.mean();
    let u = ens.deviations();
    let h = selection(obs);
    let q = &h * &u;
    let rinv = DenseMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        obs.nobs(),
        obs.r().values().iter().map(|r| 1.0 / r),
    ));
    let pa = (DenseMatrix::identity(nens, nens) * m + q.transpose() * &rinv * &q)
        .try_inverse()
        .unwrap();
    let d = nalgebra::DVector::from_column_slice(obs.y()) - &h * &mean;
    let wa = &pa * q.transpose() * &rinv * d;
    let eig = (&pa * m).symmetric_eigen();
    let root = &eig.eigenvectors
        * DenseMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
        * eig.eigenvectors.transpose();
    let mean_a = &mean + &u * wa;
    let mut xa = &u * root;
    for j in 0..nens {
        let mut col = xa.column_mut(j);
        col += &mean_a;
    }
    xa
}

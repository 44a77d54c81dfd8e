//! Analysis steps: EnKF-MC (three formulations), LETKF, Schur-localized
//! stochastic EnKF, and the exact Kalman update used as an oracle.

use std::collections::BTreeMap;

use nalgebra::{DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::grid::{GeometryError, GridGeometry};
use crate::linalg::{
    check_dim, CholeskyFactors, DenseMatrix, EnsembleMatrix, LinalgError, PositiveDiagonal,
};

/// Largest state size accepted by the dense Schur-localized baseline.
pub const DEFAULT_DENSE_LIMIT: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("observed indices must be strictly ascending and below {nstate}")]
    BadSelection { nstate: usize },
    #[error("state size {nstate} exceeds the dense limit {limit}")]
    DenseLimit { nstate: usize, limit: usize },
    #[error("background covariance is not symmetric positive definite")]
    NotSpd,
    #[error("linear system in {0} is singular")]
    Singular(&'static str),
    #[error("inflation factor must be >= 1, got {0}")]
    BadInflation(f64),
}

/// Point observations `y = H x + ε`, `ε ~ N(0, R)` with `H` a row selection.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationBundle {
    y: Vec<f64>,
    indices: Vec<usize>,
    r: PositiveDiagonal,
    nstate: usize,
}

impl ObservationBundle {
    pub fn new(
        y: Vec<f64>,
        indices: Vec<usize>,
        r: Vec<f64>,
        nstate: usize,
    ) -> Result<Self, FilterError> {
        check_dim("observation values", indices.len(), y.len())?;
        check_dim("observation variances", indices.len(), r.len())?;
        if indices.windows(2).any(|w| w[0] >= w[1]) || indices.last().is_some_and(|&i| i >= nstate) {
            return Err(FilterError::BadSelection { nstate });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite("observations").into());
        }
        Ok(Self {
            y,
            indices,
            r: PositiveDiagonal::new(r)?,
            nstate,
        })
    }

    pub fn empty(nstate: usize) -> Self {
        Self {
            y: Vec::new(),
            indices: Vec::new(),
            r: PositiveDiagonal::identity(0),
            nstate,
        }
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn r(&self) -> &PositiveDiagonal {
        &self.r
    }

    pub fn nobs(&self) -> usize {
        self.y.len()
    }

    pub fn nstate(&self) -> usize {
        self.nstate
    }

    /// `H x`.
    pub fn apply_h(&self, x: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| x[i]).collect()
    }

    /// `R` scaled by a constant factor.
    pub fn with_scaled_noise(&self, factor: f64) -> Result<Self, FilterError> {
        Self::new(
            self.y.clone(),
            self.indices.clone(),
            self.r.values().iter().map(|r| r * factor).collect(),
            self.nstate,
        )
    }

    /// Observations falling on the given state indices, re-indexed to
    /// positions within that list. Also returns the kept observation
    /// positions.
    pub fn restrict(&self, states: &[usize]) -> (ObservationBundle, Vec<usize>) {
        let mut kept = Vec::new();
        let mut local = Vec::new();
        for (pos, &s) in states.iter().enumerate() {
            if let Ok(k) = self.indices.binary_search(&s) {
                kept.push(k);
                local.push(pos);
            }
        }
        let bundle = ObservationBundle {
            y: kept.iter().map(|&k| self.y[k]).collect(),
            indices: local,
            r: self.r.select(&kept),
            nstate: states.len(),
        };
        (bundle, kept)
    }

    fn check_state(&self, nstate: usize) -> Result<(), FilterError> {
        Ok(check_dim("observation state size", self.nstate, nstate)?)
    }
}

/// Columns `y + ε_j`, `ε_j ~ N(0, R)`, drawn from a seeded stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedObservations {
    pub ys: DenseMatrix,
    pub seed: u64,
}

impl PerturbedObservations {
    /// The rows belonging to the given observation positions.
    pub fn select(&self, positions: &[usize]) -> PerturbedObservations {
        PerturbedObservations {
            ys: self.ys.select_rows(positions),
            seed: self.seed,
        }
    }
}

pub fn perturb_observations(
    obs: &ObservationBundle,
    nens: usize,
    seed: u64,
) -> Result<PerturbedObservations, FilterError> {
    if nens < 2 {
        return Err(LinalgError::TooFewMembers(nens).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd: Vec<f64> = obs.r.values().iter().map(|r| r.sqrt()).collect();
    let mut ys = DenseMatrix::zeros(obs.nobs(), nens);
    for j in 0..nens {
        for k in 0..obs.nobs() {
            let e: f64 = StandardNormal.sample(&mut rng);
            ys[(k, j)] = obs.y[k] + sd[k] * e;
        }
    }
    Ok(PerturbedObservations { ys, seed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisResult {
    pub ensemble: EnsembleMatrix,
    pub diagnostics: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    #[default]
    Incremental,
    Primal,
    Dual,
}

/// `Δ = Yˢ − H Xᵇ`.
fn innovations(
    ens: &EnsembleMatrix,
    obs: &ObservationBundle,
    perturbed: &PerturbedObservations,
) -> Result<DenseMatrix, FilterError> {
    check_dim("perturbed observation rows", obs.nobs(), perturbed.ys.nrows())?;
    check_dim("perturbed observation columns", ens.nens(), perturbed.ys.ncols())?;
    let hx = ens.members().select_rows(obs.indices());
    Ok(&perturbed.ys - hx)
}

/// `Hᵀ R⁻¹ M` for an `nobs × k` matrix `M`.
fn scatter_weighted(obs: &ObservationBundle, m: &DenseMatrix, nstate: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(nstate, m.ncols());
    for (k, (&i, r)) in obs.indices.iter().zip(obs.r.values()).enumerate() {
        for j in 0..m.ncols() {
            out[(i, j)] = m[(k, j)] / r;
        }
    }
    out
}

/// `R_H = Hᵀ R^{-1/2}`, one column per observation.
pub fn weighted_selection(obs: &ObservationBundle) -> DenseMatrix {
    let mut rh = DenseMatrix::zeros(obs.nstate, obs.nobs());
    for (k, (&i, r)) in obs.indices.iter().zip(obs.r.values()).enumerate() {
        rh[(i, k)] = 1.0 / r.sqrt();
    }
    rh
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `(B̂⁻¹ + R_H R_Hᵀ) X = rhs` by triangular solves against `B̂⁻¹`
/// followed by one Sherman–Morrison update per column of `R_H`.
pub fn sherman_morrison_solve(
    factors: &CholeskyFactors,
    r_h: &DenseMatrix,
    rhs: &DenseMatrix,
) -> Result<DenseMatrix, FilterError> {
    let n = factors.dim();
    check_dim("Sherman-Morrison rhs rows", n, rhs.nrows())?;
    check_dim("Sherman-Morrison update rows", n, r_h.nrows())?;
    let nobs = r_h.ncols();
    let mut w_z = factors.solve_precision_columns(rhs)?;
    let mut w_u = factors.solve_precision_columns(r_h)?;
    let updates = r_h.as_slice();
    for i in 0..nobs {
        let r = &updates[i * n..(i + 1) * n];
        let (done, pending) = w_u.as_mut_slice().split_at_mut((i + 1) * n);
        let w = &done[i * n..];
        let denom = 1.0 + dot(r, w);
        // positive in exact arithmetic; anything else means the factors are unusable
        if !(denom.is_finite() && denom > 0.0) {
            return Err(FilterError::Singular("Sherman-Morrison denominator"));
        }
        let gamma = 1.0 / denom;
        let h: Vec<f64> = w.iter().map(|v| gamma * v).collect();
        let update = |_: usize, col: &mut [f64]| {
            let s = dot(r, col);
            if s != 0.0 {
                for (c, hv) in col.iter_mut().zip(&h) {
                    *c -= hv * s;
                }
            }
        };
        exec::for_each_chunk_mut(w_z.as_mut_slice(), n, update);
        exec::for_each_chunk_mut(pending, n, update);
    }
    Ok(w_z)
}

pub fn analyze_enkf_mc(
    ens: &EnsembleMatrix,
    obs: &ObservationBundle,
    factors: &CholeskyFactors,
    formulation: Formulation,
    perturbed: &PerturbedObservations,
) -> Result<AnalysisResult, FilterError> {
    let n = ens.nstate();
    let nens = ens.nens() as f64;
    obs.check_state(n)?;
    check_dim("factor size", n, factors.dim())?;
    let mut diagnostics = BTreeMap::new();
    let nobs = obs.nobs() as f64;
    let nz = factors.t().max_row_nnz() as f64;
    diagnostics.insert("factor_nnz".into(), factors.t().nnz() as f64);
    diagnostics.insert("factor_max_row_nnz".into(), nz);
    diagnostics.insert("nobs".into(), nobs);
    if obs.nobs() == 0 {
        return Ok(AnalysisResult {
            ensemble: ens.clone(),
            diagnostics,
        });
    }
    let nf = n as f64;
    let delta = innovations(ens, obs, perturbed)?;
    let members = match formulation {
        Formulation::Incremental => {
            let rhs = scatter_weighted(obs, &delta, n);
            let dx = sherman_morrison_solve(factors, &weighted_selection(obs), &rhs)?;
            diagnostics.insert("sm_rank_one_updates".into(), nobs);
            diagnostics.insert(
                "sm_long_ops".into(),
                nobs * nf + nobs * nf * nens + nobs * nobs * nf + nz * nf * nens + nz * nf * nobs,
            );
            ens.members() + dx
        }
        Formulation::Primal => {
            let rhs = factors.apply_precision_columns(ens.members())?
                + scatter_weighted(obs, &perturbed.ys, n);
            diagnostics.insert("sm_rank_one_updates".into(), nobs);
            sherman_morrison_solve(factors, &weighted_selection(obs), &rhs)?
        }
        Formulation::Dual => {
            // rows of V = H T⁻¹ D^{1/2}, built from D^{1/2} T⁻ᵀ e_i
            let sqrt_d: Vec<f64> = factors.d().values().iter().map(|d| d.sqrt()).collect();
            let mut v = DenseMatrix::zeros(obs.nobs(), n);
            for (k, &i) in obs.indices.iter().enumerate() {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                factors.t().transpose_solve_in_place(&mut e)?;
                for (c, (ec, sd)) in e.iter().zip(&sqrt_d).enumerate() {
                    v[(k, c)] = ec * sd;
                }
            }
            let mut inner = &v * v.transpose();
            for (k, r) in obs.r.values().iter().enumerate() {
                inner[(k, k)] += r;
            }
            let chol = inner.cholesky().ok_or(FilterError::Singular("dual inner system"))?;
            let w = chol.solve(&delta);
            let mut inc = v.transpose() * w;
            for (i, sd) in sqrt_d.iter().enumerate() {
                inc.row_mut(i).scale_mut(*sd);
            }
            exec::for_each_chunk_mut(inc.as_mut_slice(), n, |_, col| {
                factors
                    .t()
                    .solve_in_place(col)
                    .expect("column length matches factor size");
            });
            diagnostics.insert("dual_system_size".into(), nobs);
            ens.members() + inc
        }
    };
    Ok(AnalysisResult {
        ensemble: EnsembleMatrix::new(members)?,
        diagnostics,
    })
}

/// Ensemble-space quantities of one local LETKF analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTransform {
    /// `[(N−1) I + Qᵀ R⁻¹ Q]⁻¹`.
    pub pa: DenseMatrix,
    /// Mean weights `P̂ᵃ Qᵀ R⁻¹ d`.
    pub wa: DVector<f64>,
    /// Symmetric square root of `(N−1) P̂ᵃ`.
    pub sqrt_pa: DenseMatrix,
}

/// `q` is `nobs × nens` (observed deviations), `r_inv` the inverse variances,
/// `innovation` is `y − H x̄ᵇ`.
pub fn letkf_local_transform(q: &DenseMatrix, r_inv: &[f64], innovation: &[f64]) -> LocalTransform {
    let nens = q.ncols();
    let m = nens as f64 - 1.0;
    let mut rq = q.clone();
    for (k, ri) in r_inv.iter().enumerate() {
        rq.row_mut(k).scale_mut(*ri);
    }
    let mut a = q.tr_mul(&rq);
    for i in 0..nens {
        a[(i, i)] += m;
    }
    let eig = SymmetricEigen::new(a);
    let vecs = &eig.eigenvectors;
    let inv = DVector::from_iterator(nens, eig.eigenvalues.iter().map(|l| 1.0 / l));
    let root = DVector::from_iterator(nens, eig.eigenvalues.iter().map(|l| (m / l).sqrt()));
    let pa = vecs * DenseMatrix::from_diagonal(&inv) * vecs.transpose();
    let sqrt_pa = vecs * DenseMatrix::from_diagonal(&root) * vecs.transpose();
    let wa = &pa * rq.tr_mul(&DVector::from_column_slice(innovation));
    LocalTransform { pa, wa, sqrt_pa }
}

pub fn analyze_letkf(
    ens: &EnsembleMatrix,
    obs: &ObservationBundle,
    geometry: &GridGeometry,
    inflation: f64,
) -> Result<AnalysisResult, FilterError> {
    if !(inflation >= 1.0 && inflation.is_finite()) {
        return Err(FilterError::BadInflation(inflation));
    }
    let n = ens.nstate();
    let nens = ens.nens();
    obs.check_state(n)?;
    check_dim("geometry size", n, geometry.size())?;
    let mean = ens.mean();
    let dev = ens.deviations() * inflation;
    let hx_mean = obs.apply_h(mean.as_slice());
    let r_inv: Vec<f64> = obs.r.values().iter().map(|r| 1.0 / r).collect();

    let rows = exec::try_map_indexed(n, |k| {
        let local_box = geometry.local_box(k)?;
        let local: Vec<usize> = local_box
            .iter()
            .filter_map(|s| obs.indices.binary_search(s).ok())
            .collect();
        let dev_k = dev.row(k);
        if local.is_empty() {
            let row: Vec<f64> = dev_k.iter().map(|d| mean[k] + d).collect();
            return Ok::<_, FilterError>((row, 0));
        }
        let q = DenseMatrix::from_fn(local.len(), nens, |r, c| dev[(obs.indices[local[r]], c)]);
        let rinv: Vec<f64> = local.iter().map(|&p| r_inv[p]).collect();
        let d: Vec<f64> = local.iter().map(|&p| obs.y[p] - hx_mean[p]).collect();
        let tr = letkf_local_transform(&q, &rinv, &d);
        let mean_a = mean[k] + (dev_k * &tr.wa)[(0, 0)];
        let spread = dev_k * &tr.sqrt_pa;
        let row: Vec<f64> = spread.iter().map(|s| mean_a + s).collect();
        Ok((row, local.len()))
    })?;

    let mut members = DenseMatrix::zeros(n, nens);
    let mut max_local = 0;
    let mut analysed = 0;
    for (k, (row, nloc)) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            members[(k, j)] = v;
        }
        max_local = max_local.max(nloc);
        analysed += usize::from(nloc > 0);
    }
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("nobs".into(), obs.nobs() as f64);
    diagnostics.insert("local_analyses".into(), analysed as f64);
    diagnostics.insert("max_local_obs".into(), max_local as f64);
    Ok(AnalysisResult {
        ensemble: EnsembleMatrix::new(members)?,
        diagnostics,
    })
}

/// Stochastic EnKF with the sample covariance tapered by `geometry`'s radius.
pub fn analyze_enkf_schur(
    ens: &EnsembleMatrix,
    obs: &ObservationBundle,
    geometry: &GridGeometry,
    perturbed: &PerturbedObservations,
    dense_limit: usize,
) -> Result<AnalysisResult, FilterError> {
    let n = ens.nstate();
    if n > dense_limit {
        return Err(FilterError::DenseLimit {
            nstate: n,
            limit: dense_limit,
        });
    }
    check_dim("geometry size", n, geometry.size())?;
    let taper = geometry.taper_matrix(geometry.radius() as f64)?;
    analyze_enkf_schur_with_taper(ens, obs, &taper, perturbed)
}

/// `Xᵃ = Xᵇ + P̂ Hᵀ (R + H P̂ Hᵀ)⁻¹ Δ` with `P̂ = taper ∘ Pᵇ`.
pub fn analyze_enkf_schur_with_taper(
    ens: &EnsembleMatrix,
    obs: &ObservationBundle,
    taper: &DenseMatrix,
    perturbed: &PerturbedObservations,
) -> Result<AnalysisResult, FilterError> {
    let n = ens.nstate();
    obs.check_state(n)?;
    check_dim("taper size", n, taper.nrows())?;
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("nobs".into(), obs.nobs() as f64);
    if obs.nobs() == 0 {
        return Ok(AnalysisResult {
            ensemble: ens.clone(),
            diagnostics,
        });
    }
    let p = ens.sample_covariance().component_mul(taper);
    let pht = p.select_columns(obs.indices());
    let mut s = pht.select_rows(obs.indices());
    for (k, r) in obs.r.values().iter().enumerate() {
        s[(k, k)] += r;
    }
    let delta = innovations(ens, obs, perturbed)?;
    let w = s
        .lu()
        .solve(&delta)
        .ok_or(FilterError::Singular("Schur innovation system"))?;
    let members = ens.members() + pht * w;
    Ok(AnalysisResult {
        ensemble: EnsembleMatrix::new(members)?,
        diagnostics,
    })
}

/// Exact Kalman update of mean `xb` and covariance `b`.
pub fn kalman_analysis(
    xb: &[f64],
    b: &DenseMatrix,
    obs: &ObservationBundle,
) -> Result<(Vec<f64>, DenseMatrix), FilterError> {
    let n = xb.len();
    check_dim("background covariance", n, b.nrows())?;
    check_dim("background covariance", n, b.ncols())?;
    obs.check_state(n)?;
    if b.clone().cholesky().is_none() {
        return Err(FilterError::NotSpd);
    }
    if obs.nobs() == 0 {
        return Ok((xb.to_vec(), b.clone()));
    }
    let bht = b.select_columns(obs.indices());
    let mut s = bht.select_rows(obs.indices());
    for (k, r) in obs.r.values().iter().enumerate() {
        s[(k, k)] += r;
    }
    let chol = s.cholesky().ok_or(FilterError::Singular("Kalman innovation"))?;
    let d = DVector::from_iterator(
        obs.nobs(),
        obs.y.iter().zip(obs.apply_h(xb)).map(|(y, h)| y - h),
    );
    let xa = DVector::from_column_slice(xb) + &bht * chol.solve(&d);
    // A = B − B Hᵀ S⁻¹ H B
    let a = b - &bht * chol.solve(&bht.transpose());
    let a = (&a + a.transpose()) * 0.5;
    Ok((xa.as_slice().to_vec(), a))
}

//! Twin experiments on Lorenz-96: spin-up, the cycle loop, metrics, domain
//! decomposition and threshold sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

pub use crate::config::{ExperimentConfig, FilterKind, Seeds};
use crate::config::ConfigError;
use crate::estimator::{
    estimate_factors_with_report, precision_error_norm, singular_weights, EstimatorError,
    RegressionMethod, SingularWeights,
};
use crate::exec;
use crate::filters::{
    analyze_enkf_mc, analyze_enkf_schur, analyze_letkf, perturb_observations, AnalysisResult,
    FilterError, Formulation, ObservationBundle, PerturbedObservations,
};
use crate::grid::{Coord, GeometryError, GridGeometry, Shape};
use crate::linalg::{
    CholeskyFactors, DenseMatrix, EnsembleMatrix, LinalgError, PositiveDiagonal,
    SparseUnitLowerTriangular,
};
use crate::models::{
    build_network, perturb_relative, propagate, propagate_ensemble, synthesize_observation,
    Lorenz96Config, ModelError, ObservationNetwork,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("{what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("sub-domain {index} is {width} cells wide; a halo of {halo} needs at least {}", 2 * halo + 1)]
    SubdomainTooNarrow {
        index: usize,
        width: usize,
        halo: usize,
    },
    #[error("cannot split {size} components into {subdomains} sub-domains")]
    TooManySubdomains { subdomains: usize, size: usize },
    #[error("threshold {0} outside (0, 1)")]
    BadThreshold(f64),
}

type Result<T> = std::result::Result<T, HarnessError>;

/// Independent per-cycle seed derived from a base seed (splitmix64).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------- metrics

fn check_trajectories(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(HarnessError::LengthMismatch {
            what: "trajectory length",
            expected: a.len(),
            found: b.len(),
        });
    }
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(HarnessError::LengthMismatch {
                what: "state dimension",
                expected: x.len(),
                found: y.len(),
            });
        }
    }
    Ok(())
}

fn squared_error(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `sqrt((1/N) Σ_k ‖x_ref,k − x_a,k‖²)` over the `N` cycles.
///
/// The squared norm is summed over components, not averaged; see
/// [`rmse_per_component`] for the normalized variant.
pub fn rmse(x_ref: &[Vec<f64>], x_a: &[Vec<f64>]) -> Result<f64> {
    check_trajectories(x_ref, x_a)?;
    if x_ref.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = x_ref.iter().zip(x_a).map(|(r, a)| squared_error(r, a)).sum();
    Ok((total / x_ref.len() as f64).sqrt())
}

/// Like [`rmse`] but also divided by the state dimension.
pub fn rmse_per_component(x_ref: &[Vec<f64>], x_a: &[Vec<f64>]) -> Result<f64> {
    let n = x_ref.first().map_or(1, Vec::len).max(1);
    Ok(rmse(x_ref, x_a)? / (n as f64).sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum ComponentFilter {
    #[default]
    All,
    Indices(Vec<usize>),
}

impl ComponentFilter {
    fn select(&self, n: usize) -> Vec<usize> {
        match self {
            ComponentFilter::All => (0..n).collect(),
            ComponentFilter::Indices(v) => v.iter().copied().filter(|&i| i < n).collect(),
        }
    }
}

/// Accumulates ranks of the reference among ensemble values.
#[derive(Clone, Debug)]
pub struct RankHistogram {
    counts: Vec<u64>,
    filter: ComponentFilter,
    rng: ChaCha8Rng,
}

impl RankHistogram {
    pub fn new(nens: usize, filter: ComponentFilter, seed: u64) -> Self {
        Self {
            counts: vec![0; nens + 1],
            filter,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Adds one cycle; `members` holds one column per member.
    pub fn add(&mut self, reference: &[f64], members: &DenseMatrix) -> Result<()> {
        if members.ncols() + 1 != self.counts.len() {
            return Err(HarnessError::LengthMismatch {
                what: "ensemble size",
                expected: self.counts.len() - 1,
                found: members.ncols(),
            });
        }
        if reference.len() != members.nrows() {
            return Err(HarnessError::LengthMismatch {
                what: "state dimension",
                expected: members.nrows(),
                found: reference.len(),
            });
        }
        let m = members;
        for i in self.filter.select(reference.len()) {
            let v = reference[i];
            let row = m.row(i);
            let below = row.iter().filter(|&&x| x < v).count();
            let ties = row.iter().filter(|&&x| x == v).count();
            let rank = below + if ties > 0 { self.rng.random_range(0..=ties) } else { 0 };
            self.counts[rank] += 1;
        }
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn into_counts(self) -> Vec<u64> {
        self.counts
    }
}

/// Rank counts in `Nens + 1` bins; ties are broken uniformly with `seed`.
pub fn rank_histogram(
    reference: &[Vec<f64>],
    ensembles: &[DenseMatrix],
    filter: &ComponentFilter,
    seed: u64,
) -> Result<Vec<u64>> {
    if reference.len() != ensembles.len() {
        return Err(HarnessError::LengthMismatch {
            what: "trajectory length",
            expected: reference.len(),
            found: ensembles.len(),
        });
    }
    let Some(first) = ensembles.first() else {
        return Ok(Vec::new());
    };
    let mut h = RankHistogram::new(first.ncols(), filter.clone(), seed);
    for (r, e) in reference.iter().zip(ensembles) {
        h.add(r, e)?;
    }
    Ok(h.into_counts())
}

/// Pearson statistic of `counts` against the uniform distribution.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return 0.0;
    }
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}

// ---------------------------------------------------------------- records

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentRecord {
    pub filter: String,
    /// Per-cycle error norms (the RMSE formula with a single cycle).
    pub rmse_background: Vec<f64>,
    pub rmse_analysis: Vec<f64>,
    pub wall_ms: Vec<f64>,
    pub diagnostics: Vec<BTreeMap<String, f64>>,
    pub rank_histogram: Vec<u64>,
    /// Singular weights of the traced component, one entry per cycle.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub alpha_trace: Vec<SingularWeights>,
    #[serde(skip)]
    pub reference: Vec<Vec<f64>>,
    #[serde(skip)]
    pub background_mean: Vec<Vec<f64>>,
    #[serde(skip)]
    pub analysis_mean: Vec<Vec<f64>>,
    #[serde(skip)]
    pub final_analysis: Option<EnsembleMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordSummary {
    pub cycles: usize,
    pub window: (usize, usize),
    pub mean_rmse_background: f64,
    pub mean_rmse_analysis: f64,
    /// `1 − analysis / background` over the window.
    pub reduction: f64,
    pub rmse_analysis: f64,
    pub rmse_analysis_per_component: f64,
    pub rmse_background: f64,
    pub rank_chi_square: f64,
    pub total_wall_ms: f64,
}

impl ExperimentRecord {
    pub fn cycles(&self) -> usize {
        self.rmse_analysis.len()
    }

    /// Equality of everything except timings.
    pub fn same_results(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_ms: Vec::new(),
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    /// Mean per-cycle background and analysis error over the 1-based,
    /// inclusive cycle window, clipped to the run length.
    pub fn window_means(&self, first: usize, last: usize) -> (f64, f64) {
        let lo = first.max(1) - 1;
        let hi = last.min(self.cycles());
        if lo >= hi {
            return (f64::NAN, f64::NAN);
        }
        let mean = |v: &[f64]| v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        (mean(&self.rmse_background), mean(&self.rmse_analysis))
    }

    pub fn summary(&self, first: usize, last: usize) -> RecordSummary {
        let (bg, an) = self.window_means(first, last);
        let full = |m: &[Vec<f64>]| rmse(&self.reference, m).unwrap_or(f64::NAN);
        RecordSummary {
            cycles: self.cycles(),
            window: (first, last.min(self.cycles())),
            mean_rmse_background: bg,
            mean_rmse_analysis: an,
            reduction: 1.0 - an / bg,
            rmse_analysis: full(&self.analysis_mean),
            rmse_analysis_per_component: rmse_per_component(&self.reference, &self.analysis_mean)
                .unwrap_or(f64::NAN),
            rmse_background: full(&self.background_mean),
            rank_chi_square: chi_square_uniform(&self.rank_histogram),
            total_wall_ms: self.wall_ms.iter().sum(),
        }
    }

    /// `cycle,rmse_bg,rmse_an,wall_ms,<diagnostics…>` with one row per cycle.
    pub fn to_csv(&self) -> String {
        let mut keys: Vec<&String> = self.diagnostics.iter().flat_map(|d| d.keys()).collect();
        keys.sort();
        keys.dedup();
        let mut out = String::from("cycle,rmse_bg,rmse_an,wall_ms");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for c in 0..self.cycles() {
            let _ = write!(
                out,
                "{},{},{},{:.3}",
                c + 1,
                self.rmse_background[c],
                self.rmse_analysis[c],
                self.wall_ms[c]
            );
            for k in &keys {
                match self.diagnostics[c].get(*k) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// `bin,count` rows.
    pub fn rank_csv(&self) -> String {
        let mut out = String::from("bin,count\n");
        for (b, c) in self.rank_histogram.iter().enumerate() {
            let _ = writeln!(out, "{b},{c}");
        }
        out
    }

    /// `cycle,index,singular_value,alpha` rows for the traced component.
    pub fn alpha_csv(&self) -> String {
        let mut out = String::from("cycle,index,singular_value,alpha\n");
        for (c, w) in self.alpha_trace.iter().enumerate() {
            for (j, (s, a)) in w.singular_values.iter().zip(&w.alphas).enumerate() {
                let _ = writeln!(out, "{},{},{s},{a}", c + 1, j + 1);
            }
        }
        out
    }
}

// ---------------------------------------------------------------- filters

/// One analysis step as selected by the configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub zeta: usize,
    pub regression: RegressionMethod,
    pub formulation: Formulation,
    pub inflation: f64,
    pub dense_limit: usize,
}

impl FilterSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            kind: cfg.filter.method,
            zeta: cfg.filter.zeta,
            regression: cfg.filter.regression_method(),
            formulation: cfg.filter.formulation,
            inflation: cfg.filter.inflation(),
            dense_limit: cfg.filter.dense_limit,
        }
    }

    pub fn analyze(
        &self,
        geometry: &GridGeometry,
        bg: &EnsembleMatrix,
        obs: &ObservationBundle,
        perturbed: &PerturbedObservations,
    ) -> Result<AnalysisResult> {
        Ok(match self.kind {
            FilterKind::EnkfMc => {
                let bg = bg.inflate(self.inflation);
                let (factors, report) = estimate_factors_with_report(&bg, geometry, self.regression)?;
                let mut res = analyze_enkf_mc(&bg, obs, &factors, self.formulation, perturbed)?;
                res.diagnostics
                    .insert("floored_variances".into(), report.floored.len() as f64);
                res
            }
            FilterKind::Letkf => analyze_letkf(bg, obs, geometry, self.inflation)?,
            FilterKind::EnkfSchur => {
                let bg = bg.inflate(self.inflation);
                analyze_enkf_schur(&bg, obs, geometry, perturbed, self.dense_limit)?
            }
        })
    }
}

// ---------------------------------------------------------------- decomposition

/// A halo-extended piece of the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Subdomain {
    /// Global indices of the extended region, in local index order.
    pub extended: Vec<usize>,
    /// Local positions of the cells this sub-domain owns.
    pub interior: Vec<usize>,
    /// Geometry of the extended region; never periodic once split.
    pub geometry: GridGeometry,
}

fn even_bounds(len: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|s| s * len / parts).collect()
}

/// Tiling `rows × cols` into `k` tiles, as close to square tiles as possible.
fn tile_counts(rows: usize, cols: usize, k: usize) -> (usize, usize) {
    (1..=k)
        .filter(|kr| k % kr == 0 && *kr <= rows && k / kr <= cols)
        .map(|kr| (kr, k / kr))
        .min_by(|a, b| {
            let skew = |(kr, kc): (usize, usize)| {
                let h = rows as f64 / kr as f64;
                let w = cols as f64 / kc as f64;
                (h / w).ln().abs()
            };
            skew(*a).total_cmp(&skew(*b))
        })
        .unwrap_or((1, k))
}

/// Splits `geometry` into `subdomains` pieces with `halo` cells of overlap.
///
/// A ring becomes contiguous equal arcs; a rectangle becomes near-square
/// tiles whose halos are clipped at the grid edge. Each extended region gets
/// a local geometry with radius `radius`.
pub fn split_domain(
    geometry: &GridGeometry,
    subdomains: usize,
    halo: usize,
    radius: usize,
) -> Result<Vec<Subdomain>> {
    let size = geometry.size();
    if subdomains == 0 || subdomains > size {
        return Err(HarnessError::TooManySubdomains { subdomains, size });
    }
    if subdomains == 1 {
        return Ok(vec![Subdomain {
            extended: (0..size).collect(),
            interior: (0..size).collect(),
            geometry: geometry.with_radius(radius)?,
        }]);
    }
    let narrow = |index, width| HarnessError::SubdomainTooNarrow { index, width, halo };
    match geometry.shape() {
        Shape::Ring(n) => {
            let b = even_bounds(n, subdomains);
            (0..subdomains)
                .map(|s| {
                    let w = b[s + 1] - b[s];
                    if w < 2 * halo + 1 {
                        return Err(narrow(s, w));
                    }
                    let extended = (0..w + 2 * halo)
                        .map(|o| (b[s] + n + o - halo) % n)
                        .collect();
                    let local = GridGeometry::rect(1, w + 2 * halo, Default::default(), radius)?;
                    Ok(Subdomain {
                        extended,
                        interior: (halo..halo + w).collect(),
                        geometry: local,
                    })
                })
                .collect()
        }
        Shape::Rect { rows, cols } => {
            let (kr, kc) = tile_counts(rows, cols, subdomains);
            if kr * kc != subdomains {
                return Err(HarnessError::TooManySubdomains { subdomains, size });
            }
            let rb = even_bounds(rows, kr);
            let cb = even_bounds(cols, kc);
            let mut out = Vec::with_capacity(subdomains);
            for tr in 0..kr {
                for tc in 0..kc {
                    let index = tr * kc + tc;
                    let (h, w) = (rb[tr + 1] - rb[tr], cb[tc + 1] - cb[tc]);
                    if h.min(w) < 2 * halo + 1 {
                        return Err(narrow(index, h.min(w)));
                    }
                    let r0 = rb[tr].saturating_sub(halo);
                    let r1 = (rb[tr + 1] + halo).min(rows);
                    let c0 = cb[tc].saturating_sub(halo);
                    let c1 = (cb[tc + 1] + halo).min(cols);
                    let local = GridGeometry::rect(r1 - r0, c1 - c0, geometry.ordering(), radius)?;
                    let mut extended = Vec::with_capacity(local.size());
                    let mut interior = Vec::new();
                    for l in 0..local.size() {
                        let c = local.coord_of(l)?;
                        let g = Coord {
                            row: c.row + r0,
                            col: c.col + c0,
                        };
                        extended.push(geometry.index_of(g)?);
                        if (rb[tr]..rb[tr + 1]).contains(&g.row) && (cb[tc]..cb[tc + 1]).contains(&g.col) {
                            interior.push(l);
                        }
                    }
                    out.push(Subdomain {
                        extended,
                        interior,
                        geometry: local,
                    });
                }
            }
            Ok(out)
        }
    }
}

/// Analyzes every sub-domain concurrently and reassembles interior rows.
pub fn analyze_decomposed(
    spec: &FilterSpec,
    parts: &[Subdomain],
    bg: &EnsembleMatrix,
    obs: &ObservationBundle,
    perturbed: &PerturbedObservations,
) -> Result<AnalysisResult> {
    let results = exec::try_map_indexed(parts.len(), |s| {
        let part = &parts[s];
        let local_bg = bg.select_rows(&part.extended);
        let (local_obs, kept) = obs.restrict(&part.extended);
        let local_pert = perturbed.select(&kept);
        spec.analyze(&part.geometry, &local_bg, &local_obs, &local_pert)
    })?;
    let mut members = bg.members().clone();
    let mut diagnostics = BTreeMap::new();
    for (part, res) in parts.iter().zip(results) {
        let local = res.ensemble.members();
        for &pos in &part.interior {
            members.set_row(part.extended[pos], &local.row(pos));
        }
        for (k, v) in res.diagnostics {
            let e = diagnostics.entry(k.clone()).or_insert(0.0);
            // per-part maxima combine by max, counts by sum
            if k.contains("max") {
                *e = f64::max(*e, v);
            } else {
                *e += v;
            }
        }
    }
    diagnostics.insert("subdomains".into(), parts.len() as f64);
    diagnostics.insert("nobs".into(), obs.nobs() as f64);
    Ok(AnalysisResult {
        ensemble: EnsembleMatrix::new(members)?,
        diagnostics,
    })
}

// ---------------------------------------------------------------- experiments

/// Knobs beyond the configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Replaces the configured observation network.
    pub network: Option<ObservationNetwork>,
    /// Records singular weights of this component every cycle.
    pub alpha_component: Option<usize>,
    /// `(subdomains, halo)`; `None` runs the monolithic filter.
    pub decomposition: Option<(usize, usize)>,
    pub rank_components: ComponentFilter,
}

/// Reference state and initial ensemble at the first cycle's start time.
///
/// A random state is spun up for `reference_time`; a relative perturbation of
/// it becomes the background and both are advanced `background_time`; members
/// are relative perturbations of the background advanced `ensemble_time`,
/// with the reference again advanced alongside.
pub fn spin_up(cfg: &ExperimentConfig, seeds: &Seeds) -> Result<(Vec<f64>, EnsembleMatrix)> {
    let model = cfg.lorenz96();
    model.validate()?;
    let sp = &cfg.spinup;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.reference);
    let mut x_ref: Vec<f64> = (0..model.nstate)
        .map(|_| model.forcing + std_normal(&mut rng))
        .collect();
    propagate(&model, &mut x_ref, model.steps_for(sp.reference_time))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seeds.ensemble);
    let mut xb = perturb_relative(&x_ref, sp.perturbation, &mut rng);
    let bg_steps = model.steps_for(sp.background_time);
    propagate(&model, &mut xb, bg_steps)?;
    propagate(&model, &mut x_ref, bg_steps)?;

    let members: Vec<Vec<f64>> = (0..cfg.nens)
        .map(|_| perturb_relative(&xb, sp.perturbation, &mut rng))
        .collect();
    let ens_steps = model.steps_for(sp.ensemble_time);
    let ens = propagate_ensemble(&model, &EnsembleMatrix::from_members(&members)?, ens_steps)?;
    propagate(&model, &mut x_ref, ens_steps)?;
    Ok((x_ref, ens))
}

/// Singular weights of `component`'s regression on its predecessors.
pub fn alpha_weights(
    ens: &EnsembleMatrix,
    geometry: &GridGeometry,
    component: usize,
) -> Result<SingularWeights> {
    let preds = geometry.predecessors(component)?.predecessors;
    let dev = ens.deviations();
    let x: Vec<f64> = dev.row(component).iter().copied().collect();
    if preds.is_empty() {
        return Ok(SingularWeights {
            singular_values: Vec::new(),
            alphas: Vec::new(),
        });
    }
    let z = dev.select_rows(&preds);
    Ok(singular_weights(&z, &x)?)
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn ensemble_mean(ens: &EnsembleMatrix) -> Vec<f64> {
    ens.mean().iter().copied().collect()
}

pub fn run_twin_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    run_with(cfg, &RunOptions::default())
}

pub fn run_decomposed(cfg: &ExperimentConfig, subdomains: usize, halo: usize) -> Result<ExperimentRecord> {
    run_with(
        cfg,
        &RunOptions {
            decomposition: Some((subdomains, halo)),
            ..Default::default()
        },
    )
}

/// The full cycle loop: forecast, observe, analyze, record.
pub fn run_with(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentRecord> {
    cfg.validate()?;
    let seeds = cfg.seeds.require()?;
    let model: Lorenz96Config = cfg.lorenz96();
    let network = match &opts.network {
        Some(n) => n.clone(),
        None => build_network(model.nstate, cfg.network.fraction, cfg.network_pattern()?)?,
    };
    let spec = FilterSpec::from_config(cfg);
    let geometry = GridGeometry::ring(model.nstate, spec.zeta)?;
    let parts = match opts.decomposition {
        Some((k, halo)) if k > 1 => Some(split_domain(&geometry, k, halo, spec.zeta)?),
        Some((0, _)) => return Err(HarnessError::TooManySubdomains { subdomains: 0, size: model.nstate }),
        _ => None,
    };

    let (mut x_ref, mut ens) = spin_up(cfg, &seeds)?;
    let mut hist = RankHistogram::new(cfg.nens, opts.rank_components.clone(), seeds.rank);
    let mut rec = ExperimentRecord {
        filter: spec.kind.name().into(),
        rmse_background: Vec::with_capacity(cfg.cycles),
        rmse_analysis: Vec::with_capacity(cfg.cycles),
        wall_ms: Vec::with_capacity(cfg.cycles),
        diagnostics: Vec::with_capacity(cfg.cycles),
        rank_histogram: Vec::new(),
        alpha_trace: Vec::new(),
        reference: Vec::with_capacity(cfg.cycles),
        background_mean: Vec::with_capacity(cfg.cycles),
        analysis_mean: Vec::with_capacity(cfg.cycles),
        final_analysis: None,
    };

    for k in 1..=cfg.cycles {
        let start = Instant::now();
        ens = propagate_ensemble(&model, &ens, model.steps_per_cycle)?;
        propagate(&model, &mut x_ref, model.steps_per_cycle)?;
        let obs = synthesize_observation(
            &x_ref,
            &network,
            cfg.observation.rel_sigma,
            derive_seed(seeds.observation, k as u64),
        )?;
        let perturbed = perturb_observations(&obs, cfg.nens, derive_seed(seeds.perturbation, k as u64))?;
        if let Some(c) = opts.alpha_component {
            let bg = if spec.kind == FilterKind::EnkfMc {
                ens.inflate(spec.inflation)
            } else {
                ens.clone()
            };
            rec.alpha_trace.push(alpha_weights(&bg, &geometry, c)?);
        }
        let analysis = match &parts {
            Some(parts) => analyze_decomposed(&spec, parts, &ens, &obs, &perturbed)?,
            None => spec.analyze(&geometry, &ens, &obs, &perturbed)?,
        };
        let bg_mean = ensemble_mean(&ens);
        let an_mean = ensemble_mean(&analysis.ensemble);
        rec.rmse_background.push(squared_error(&x_ref, &bg_mean).sqrt());
        rec.rmse_analysis.push(squared_error(&x_ref, &an_mean).sqrt());
        hist.add(&x_ref, analysis.ensemble.members())?;
        ens = analysis.ensemble;
        rec.diagnostics.push(analysis.diagnostics);
        rec.reference.push(x_ref.clone());
        rec.background_mean.push(bg_mean);
        rec.analysis_mean.push(an_mean);
        rec.wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
        log::debug!(
            "cycle {k}: rmse_bg {:.4} rmse_an {:.4}",
            rec.rmse_background[k - 1],
            rec.rmse_analysis[k - 1]
        );
    }
    rec.rank_histogram = hist.into_counts();
    rec.final_analysis = Some(ens);
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRun {
    pub sigma_r: f64,
    pub record: ExperimentRecord,
}

/// Reruns the experiment with truncated-SVD regression at each threshold,
/// tracing the singular weights of `cfg.sweep.alpha_component`.
pub fn svd_threshold_sweep(cfg: &ExperimentConfig, thresholds: &[f64]) -> Result<Vec<SweepRun>> {
    if let Some(&t) = thresholds.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
        return Err(HarnessError::BadThreshold(t));
    }
    if cfg.sweep.alpha_component >= cfg.model.nstate {
        return Err(ConfigError::InvalidValue {
            key: "sweep.alpha_component".into(),
            value: cfg.sweep.alpha_component.to_string(),
            expected: "< model.nstate".into(),
        }
        .into());
    }
    thresholds
        .iter()
        .map(|&sigma_r| {
            let mut c = cfg.clone();
            c.filter.regression = crate::config::RegressionKind::TruncatedSvd;
            c.filter.sigma_r = sigma_r;
            let opts = RunOptions {
                alpha_component: Some(cfg.sweep.alpha_component),
                ..Default::default()
            };
            Ok(SweepRun {
                sigma_r,
                record: run_with(&c, &opts)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- synthetic estimation

/// Precision factors on `Ring(nstate)` whose `T` couples each component to
/// its predecessors within `bandwidth`.
pub fn banded_ring_factors(nstate: usize, bandwidth: usize) -> Result<CholeskyFactors> {
    let g = GridGeometry::ring(nstate, bandwidth)?;
    let mut rows = Vec::with_capacity(nstate);
    for i in 0..nstate {
        let preds = g.predecessors(i)?.predecessors;
        let mut row = Vec::with_capacity(preds.len());
        for j in preds {
            let d = g.box_distance(i, j)? as i32;
            row.push((j, -0.3 * 0.6f64.powi(d - 1)));
        }
        rows.push(row);
    }
    let d = (0..nstate).map(|i| 0.5 + 0.25 * (i % 4) as f64).collect();
    Ok(CholeskyFactors::new(
        SparseUnitLowerTriangular::from_rows(rows)?,
        PositiveDiagonal::new(d)?,
    )?)
}

/// `nens` draws of `N(0, B)` with `B⁻¹ = Tᵀ D⁻¹ T`, via `x = T⁻¹ D^{1/2} z`.
pub fn sample_gaussian(factors: &CholeskyFactors, nens: usize, seed: u64) -> Result<EnsembleMatrix> {
    let n = factors.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd: Vec<f64> = factors.d().values().iter().map(|v| v.sqrt()).collect();
    let mut m = DenseMatrix::zeros(n, nens);
    for j in 0..nens {
        let mut x: Vec<f64> = sd
            .iter()
            .map(|s| s * std_normal(&mut rng))
            .collect();
        factors.t().solve_in_place(&mut x)?;
        m.set_column(j, &nalgebra::DVector::from_vec(x));
    }
    Ok(EnsembleMatrix::new(m)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergencePoint {
    pub nens: usize,
    pub median: f64,
    pub errors: Vec<f64>,
}

/// Median `‖B̂⁻¹ − B⁻¹‖∞` over `repeats` seeds for each ensemble size,
/// with the radius matched to the true bandwidth.
pub fn convergence_sweep(
    nstate: usize,
    bandwidth: usize,
    nens_list: &[usize],
    repeats: usize,
    seed: u64,
    method: RegressionMethod,
) -> Result<Vec<ConvergencePoint>> {
    let truth = banded_ring_factors(nstate, bandwidth)?;
    let reference = truth.to_dense_precision();
    let geometry = GridGeometry::ring(nstate, bandwidth)?;
    nens_list
        .iter()
        .map(|&nens| {
            let mut errors = exec::try_map_indexed(repeats, |r| {
                let ens = sample_gaussian(&truth, nens, derive_seed(seed, r as u64))?;
                let (f, _) = estimate_factors_with_report(&ens, &geometry, method)?;
                Ok::<_, HarnessError>(precision_error_norm(&f, &reference)?)
            })?;
            let median = median(&mut errors.clone());
            errors.shrink_to_fit();
            Ok(ConvergencePoint { nens, median, errors })
        })
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Overrides, SeedSection};

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            nens: 12,
            cycles: 4,
            seeds: SeedSection::all_from(100),
            ..Default::default()
        };
        cfg.model.nstate = 20;
        cfg.filter.zeta = 2;
        cfg.resolve();
        cfg
    }

    #[test]
    fn rmse_examples() {
        let x = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert_eq!(rmse(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap(), 5.0);
        assert!((rmse_per_component(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap() - 5.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&x, &x[..1]).is_err());
        assert!(rmse(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn rmse_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Vec<f64>> = (0..7).map(|_| (0..9).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..7).map(|_| (0..9).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let mut total = 0.0;
        for k in 0..7 {
            for i in 0..9 {
                total += (a[k][i] - b[k][i]).powi(2);
            }
        }
        assert!((rmse(&a, &b).unwrap() - (total / 7.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rank_histogram_examples() {
        let ens = DenseMatrix::from_column_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let counts = rank_histogram(&[vec![0.0, 0.0]], &[ens], &ComponentFilter::All, 1).unwrap();
        assert_eq!(counts, vec![2, 0, 0]);
        let one = DenseMatrix::from_element(1, 1, 1.0);
        assert_eq!(
            rank_histogram(&[vec![2.0]], &[one], &ComponentFilter::All, 1).unwrap(),
            vec![0, 1]
        );
        let ens = DenseMatrix::from_column_slice(3, 2, &[1.0, 5.0, 9.0, 3.0, 4.0, 0.0]);
        let counts = rank_histogram(
            &[vec![2.0, 4.5, 10.0]],
            &[ens],
            &ComponentFilter::Indices(vec![0, 2]),
            1,
        )
        .unwrap();
        assert_eq!(counts, vec![0, 1, 1]);
        assert_eq!(counts.iter().sum::<u64>(), 2);
    }

    #[test]
    fn ties_split_between_adjacent_bins() {
        let ens = DenseMatrix::from_element(1, 2, 1.0);
        let refs = vec![vec![1.0]; 3000];
        let ens = vec![ens; 3000];
        let counts = rank_histogram(&refs, &ens, &ComponentFilter::All, 9).unwrap();
        for c in &counts {
            assert!((*c as f64 - 1000.0).abs() < 150.0, "{counts:?}");
        }
    }

    #[test]
    fn even_network_and_halo_split_on_ring() {
        let g = GridGeometry::ring(40, 2).unwrap();
        let parts = split_domain(&g, 4, 2, 2).unwrap();
        assert_eq!(parts.len(), 4);
        let mut owned: Vec<usize> = parts
            .iter()
            .flat_map(|p| p.interior.iter().map(|&l| p.extended[l]))
            .collect();
        owned.sort_unstable();
        assert_eq!(owned, (0..40).collect::<Vec<_>>());
        assert_eq!(parts[0].extended[..3], [38, 39, 0]);
        assert_eq!(parts[0].extended.len(), 14);
        assert!(matches!(
            split_domain(&g, 8, 3, 2),
            Err(HarnessError::SubdomainTooNarrow { width: 5, halo: 3, .. })
        ));
    }

    #[test]
    fn rect_split_covers_grid_once() {
        let g = GridGeometry::rect(6, 8, crate::grid::Ordering::ColumnMajor, 1).unwrap();
        let parts = split_domain(&g, 4, 1, 1).unwrap();
        let mut owned: Vec<usize> = parts
            .iter()
            .flat_map(|p| p.interior.iter().map(|&l| p.extended[l]))
            .collect();
        owned.sort_unstable();
        assert_eq!(owned, (0..48).collect::<Vec<_>>());
        // corner tile is 3×4 plus one halo row and column
        assert_eq!(parts[0].extended.len(), 4 * 5);
    }

    #[test]
    fn no_observations_leave_background_untouched() {
        let mut cfg = small_config();
        cfg.cycles = 1;
        for kind in [FilterKind::EnkfMc, FilterKind::Letkf, FilterKind::EnkfSchur] {
            cfg.filter.method = kind;
            let opts = RunOptions {
                network: Some(ObservationNetwork {
                    fraction: 0.0,
                    indices: Vec::new(),
                }),
                ..Default::default()
            };
            let rec = run_with(&cfg, &opts).unwrap();
            assert_eq!(rec.rmse_analysis, rec.rmse_background, "{kind:?}");
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small_config();
        let a = run_twin_experiment(&cfg).unwrap();
        let b = run_twin_experiment(&cfg).unwrap();
        assert!(a.same_results(&b));
        assert_eq!(a.cycles(), 4);
        assert_eq!(a.rank_histogram.iter().sum::<u64>(), 4 * 20);
        let s = exec::sequential(|| run_twin_experiment(&cfg).unwrap());
        assert!(a.same_results(&s));
    }

    #[test]
    fn single_subdomain_is_monolithic() {
        let cfg = small_config();
        let a = run_twin_experiment(&cfg).unwrap();
        let b = run_decomposed(&cfg, 1, 2).unwrap();
        assert!(a.same_results(&b));
    }

    #[test]
    fn missing_seed_is_an_error() {
        let mut cfg = small_config();
        cfg.seeds.rank = None;
        assert_eq!(
            run_twin_experiment(&cfg).unwrap_err(),
            HarnessError::Config(ConfigError::MissingSeed("rank"))
        );
    }

    #[test]
    fn single_threshold_sweep_equals_direct_run() {
        let mut cfg = small_config();
        cfg.filter.sigma_r = 0.2;
        cfg.sweep.alpha_component = 7;
        let sweep = svd_threshold_sweep(&cfg, &[0.2]).unwrap();
        let direct = run_twin_experiment(&cfg).unwrap();
        let mut rec = sweep[0].record.clone();
        assert_eq!(rec.alpha_trace.len(), 4);
        assert!(rec.alpha_trace.iter().all(|w| w.alphas.iter().all(|a| a.is_finite())));
        rec.alpha_trace.clear();
        assert!(rec.same_results(&direct));
        assert!(svd_threshold_sweep(&cfg, &[1.0]).is_err());
    }

    #[test]
    fn csv_has_one_row_per_cycle() {
        let rec = run_twin_experiment(&small_config()).unwrap();
        let csv = rec.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("cycle,rmse_bg,rmse_an,wall_ms"));
        assert_eq!(rec.rank_csv().lines().count(), 14);
    }

    #[test]
    fn synthetic_samples_match_true_covariance() {
        let f = banded_ring_factors(8, 2).unwrap();
        let ens = sample_gaussian(&f, 20000, 5).unwrap();
        let b = f.to_dense_precision().try_inverse().unwrap();
        let err = (ens.sample_covariance() - &b).abs().max();
        assert!(err < 0.1 * b.abs().max(), "{err}");
    }

    #[test]
    fn overrides_feed_the_run() {
        let text = "nens = 8\ncycles = 2\n[model]\nnstate = 12\n[seeds]\nreference = 1\nensemble = 2\nobservation = 3\nperturbation = 4\nrank = 5\n";
        let cfg = crate::config::parse_config_str(
            text,
            &Overrides {
                filter: Some(FilterKind::Letkf),
                zeta: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        let rec = run_twin_experiment(&cfg).unwrap();
        assert_eq!(rec.filter, "letkf");
        assert_eq!(rec.rank_histogram.len(), 9);
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use enkf_mc::config::{ConfigError, EnsembleSource, ExperimentConfig};
use enkf_mc::estimator::{estimate_factors_with_report, precision_error_norm, write_factors};
use enkf_mc::grid::GridGeometry;
use enkf_mc::harness::{
    banded_ring_factors, convergence_sweep, run_decomposed, run_twin_experiment,
    sample_gaussian, svd_threshold_sweep, ExperimentRecord, RecordSummary,
};
use enkf_mc::linalg::EnsembleMatrix;

use crate::output::{matrix_to_csv, read_matrix_csv, Artifacts};

/// First cycle of the summary window.
const WINDOW_START: usize = 10;

#[derive(Serialize)]
struct RunSummary<'a> {
    filter: &'a str,
    config: String,
    summary: RecordSummary,
    mean_diagnostics: BTreeMap<String, f64>,
    rank_histogram: &'a [u64],
}

fn window_start(cfg: &ExperimentConfig) -> usize {
    if cfg.cycles >= WINDOW_START {
        WINDOW_START
    } else {
        1
    }
}

fn mean_diagnostics(rec: &ExperimentRecord) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for d in &rec.diagnostics {
        for (k, v) in d {
            let e = sums.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn run_summary<'a>(cfg: &ExperimentConfig, rec: &'a ExperimentRecord) -> RunSummary<'a> {
    RunSummary {
        filter: &rec.filter,
        config: cfg.to_toml(),
        summary: rec.summary(window_start(cfg), cfg.cycles),
        mean_diagnostics: mean_diagnostics(rec),
        rank_histogram: &rec.rank_histogram,
    }
}

fn experiment(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    let rec = if cfg.filter.subdomains > 1 {
        run_decomposed(cfg, cfg.filter.subdomains, cfg.filter.halo())
    } else {
        run_twin_experiment(cfg)
    };
    rec.with_context(|| format!("running {} experiment", cfg.filter.method.name()))
}

fn add_record(out: &mut Artifacts, prefix: &str, cfg: &ExperimentConfig, rec: &ExperimentRecord) -> Result<()> {
    out.add(format!("{prefix}.csv"), rec.to_csv());
    out.add(format!("{prefix}_rank.csv"), rec.rank_csv());
    out.add_json(&format!("{prefix}_summary.json"), &run_summary(cfg, rec))
}

pub fn run(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let rec = experiment(cfg)?;
    let mut out = Artifacts::default();
    add_record(&mut out, "run", cfg, &rec)?;
    if let Some(ens) = &rec.final_analysis {
        out.add("final_ensemble.csv", matrix_to_csv(ens.members())?);
    }
    Ok(out)
}

pub fn compare(cfg: &ExperimentConfig) -> Result<Artifacts> {
    if cfg.compare.filters.is_empty() {
        bail!("compare.filters is empty");
    }
    let mut out = Artifacts::default();
    let mut joined = String::from(
        "filter,mean_rmse_bg,mean_rmse_an,reduction,rmse_an,rmse_an_per_component,rank_chi_square,wall_ms\n",
    );
    let mut summaries = Vec::new();
    for &kind in &cfg.compare.filters {
        let mut c = cfg.clone();
        c.filter.method = kind;
        c.filter.inflation = None;
        c.resolve();
        let rec = experiment(&c)?;
        let s = rec.summary(window_start(&c), c.cycles);
        let _ = writeln!(
            joined,
            "{},{},{},{},{},{},{},{:.3}",
            kind.name(),
            s.mean_rmse_background,
            s.mean_rmse_analysis,
            s.reduction,
            s.rmse_analysis,
            s.rmse_analysis_per_component,
            s.rank_chi_square,
            s.total_wall_ms
        );
        out.add(format!("{}.csv", kind.name()), rec.to_csv());
        out.add(format!("{}_rank.csv", kind.name()), rec.rank_csv());
        summaries.push((kind.name(), c.to_toml(), s));
    }
    out.add("compare_summary.csv", joined);
    let json: Vec<_> = summaries
        .into_iter()
        .map(|(filter, config, summary)| serde_json::json!({ "filter": filter, "config": config, "summary": summary }))
        .collect();
    out.add_json("compare_summary.json", &json)?;
    Ok(out)
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let runs = svd_threshold_sweep(cfg, &cfg.sweep.thresholds).context("running threshold sweep")?;
    let mut out = Artifacts::default();
    let mut joined = String::from("sigma_r,mean_rmse_bg,mean_rmse_an,reduction,rmse_an\n");
    let mut json = Vec::new();
    for run in &runs {
        let tag = format!("{:.2}", run.sigma_r);
        let s = run.record.summary(window_start(cfg), cfg.cycles);
        let _ = writeln!(
            joined,
            "{},{},{},{},{}",
            run.sigma_r, s.mean_rmse_background, s.mean_rmse_analysis, s.reduction, s.rmse_analysis
        );
        out.add(format!("sweep_{tag}.csv"), run.record.to_csv());
        out.add(format!("sweep_{tag}_alpha.csv"), run.record.alpha_csv());
        json.push(serde_json::json!({ "sigma_r": run.sigma_r, "summary": s }));
    }
    out.add("sweep_summary.csv", joined);
    out.add_json(
        "sweep_summary.json",
        &serde_json::json!({ "config": cfg.to_toml(), "alpha_component": cfg.sweep.alpha_component, "runs": json }),
    )?;
    Ok(out)
}

#[derive(Serialize)]
struct EstimateSummary {
    config: String,
    nstate: usize,
    nens: usize,
    nnz: usize,
    max_row_nnz: usize,
    floored: Vec<usize>,
    error_norm: Option<f64>,
}

pub fn estimate(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let est = &cfg.estimate;
    let ensemble_seed = || cfg.seeds.ensemble.ok_or(ConfigError::MissingSeed("ensemble"));
    let nstate = cfg.model.nstate;
    let (ens, reference) = match est.source {
        EnsembleSource::Synthetic => {
            let truth = banded_ring_factors(nstate, est.bandwidth)?;
            let ens = sample_gaussian(&truth, cfg.nens, ensemble_seed()?)?;
            (ens, Some(truth.to_dense_precision()))
        }
        EnsembleSource::File => {
            let path = est
                .ensemble_path
                .as_deref()
                .context("estimate.source = \"file\" needs estimate.ensemble_path")?;
            let ens = EnsembleMatrix::new(read_matrix_csv(Path::new(path))?)
                .with_context(|| format!("ensemble in {path}"))?;
            let reference = match &est.reference_path {
                Some(r) => Some(read_matrix_csv(Path::new(r))?),
                None => None,
            };
            (ens, reference)
        }
    };
    let n = ens.nstate();
    let geometry = GridGeometry::ring(n, cfg.filter.zeta)?;
    let (factors, report) = estimate_factors_with_report(&ens, &geometry, cfg.filter.regression_method())?;
    let error_norm = if est.error_norm {
        if n > cfg.filter.dense_limit {
            log::warn!("skipping dense error norm: {n} components exceeds dense_limit");
            None
        } else {
            let reference = reference
                .context("estimate.error_norm requested but no reference precision (estimate.reference_path)")?;
            Some(precision_error_norm(&factors, &reference)?)
        }
    } else {
        None
    };

    let mut out = Artifacts::default();
    out.add("factors.txt", write_factors(&factors));
    if !est.nens_sweep.is_empty() {
        if est.source != EnsembleSource::Synthetic {
            bail!("estimate.nens_sweep needs the synthetic source");
        }
        let points = convergence_sweep(
            nstate,
            est.bandwidth,
            &est.nens_sweep,
            est.repeats,
            ensemble_seed()?,
            cfg.filter.regression_method(),
        )?;
        let mut csv = String::from("nens,median_error_norm");
        for r in 0..est.repeats {
            let _ = write!(csv, ",repeat_{}", r + 1);
        }
        csv.push('\n');
        for p in &points {
            let _ = write!(csv, "{},{}", p.nens, p.median);
            for e in &p.errors {
                let _ = write!(csv, ",{e}");
            }
            csv.push('\n');
        }
        out.add("convergence.csv", csv);
    }
    out.add_json(
        "estimate_summary.json",
        &EstimateSummary {
            config: cfg.to_toml(),
            nstate: n,
            nens: ens.nens(),
            nnz: report.nnz,
            max_row_nnz: report.max_row_nnz,
            floored: report.floored,
            error_norm,
        },
    )?;
    Ok(out)
}

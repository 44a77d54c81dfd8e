//! Experiment configuration: a TOML document with one table per concern.
//!
//! Every key has a default except the seeds, which must be given explicitly
//! before anything random runs. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::RegressionMethod;
use crate::filters::{Formulation, DEFAULT_DENSE_LIMIT};
use crate::models::{Lorenz96Config, NetworkPattern};

/// Inflation used by the LETKF preset when none is configured.
pub const LETKF_PRESET_INFLATION: f64 = 1.04;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key: {message}")]
    UnknownKey { line: usize, message: String },
    #[error("invalid value for `{key}`: {value} (expected {expected})")]
    InvalidValue {
        key: String,
        value: String,
        expected: String,
    },
    #[error("missing seed `seeds.{0}`; every random stream must be seeded explicitly")]
    MissingSeed(&'static str),
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    #[default]
    EnkfMc,
    Letkf,
    EnkfSchur,
}

impl FilterKind {
    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::EnkfMc => "enkf-mc",
            FilterKind::Letkf => "letkf",
            FilterKind::EnkfSchur => "enkf-schur",
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "enkf-mc" => Ok(FilterKind::EnkfMc),
            "letkf" => Ok(FilterKind::Letkf),
            "enkf-schur" => Ok(FilterKind::EnkfSchur),
            _ => Err(format!("unknown filter `{s}` (enkf-mc, letkf, enkf-schur)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionKind {
    NormalEquations,
    Tikhonov,
    #[default]
    TruncatedSvd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    #[default]
    EveryKth,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub nstate: usize,
    pub forcing: f64,
    pub dt: f64,
    pub steps_per_cycle: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let l = Lorenz96Config::default();
        Self {
            nstate: l.nstate,
            forcing: l.forcing,
            dt: l.dt,
            steps_per_cycle: l.steps_per_cycle,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpinupSection {
    pub reference_time: f64,
    pub background_time: f64,
    pub ensemble_time: f64,
    pub perturbation: f64,
}

impl Default for SpinupSection {
    fn default() -> Self {
        Self {
            reference_time: 10.0,
            background_time: 5.0,
            ensemble_time: 2.5,
            perturbation: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub fraction: f64,
    pub pattern: PatternKind,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            fraction: 1.0,
            pattern: PatternKind::EveryKth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationSection {
    pub rel_sigma: f64,
}

impl Default for ObservationSection {
    fn default() -> Self {
        Self { rel_sigma: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub method: FilterKind,
    pub zeta: usize,
    pub regression: RegressionKind,
    pub sigma_r: f64,
    pub lambda: f64,
    pub formulation: Formulation,
    /// Resolved to the method's preset when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inflation: Option<f64>,
    pub dense_limit: usize,
    pub subdomains: usize,
    /// Halo width for decomposed runs; defaults to `zeta`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub halo: Option<usize>,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            method: FilterKind::EnkfMc,
            zeta: 5,
            regression: RegressionKind::TruncatedSvd,
            sigma_r: 0.10,
            lambda: 0.0,
            formulation: Formulation::Incremental,
            inflation: None,
            dense_limit: DEFAULT_DENSE_LIMIT,
            subdomains: 1,
            halo: None,
        }
    }
}

impl FilterSection {
    pub fn regression_method(&self) -> RegressionMethod {
        match self.regression {
            RegressionKind::NormalEquations => RegressionMethod::NormalEquations,
            RegressionKind::Tikhonov => RegressionMethod::Tikhonov(self.lambda),
            RegressionKind::TruncatedSvd => RegressionMethod::TruncatedSvd(self.sigma_r),
        }
    }

    /// The configured inflation, or the method preset.
    pub fn inflation(&self) -> f64 {
        self.inflation.unwrap_or(match self.method {
            FilterKind::Letkf => LETKF_PRESET_INFLATION,
            _ => 1.0,
        })
    }

    pub fn halo(&self) -> usize {
        self.halo.unwrap_or(self.zeta)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observation: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<u64>,
}

/// Seeds after the presence check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub reference: u64,
    pub ensemble: u64,
    pub observation: u64,
    pub perturbation: u64,
    pub rank: u64,
}

impl SeedSection {
    pub fn require(&self) -> Result<Seeds, ConfigError> {
        let get = |v: Option<u64>, name| v.ok_or(ConfigError::MissingSeed(name));
        Ok(Seeds {
            reference: get(self.reference, "reference")?,
            ensemble: get(self.ensemble, "ensemble")?,
            observation: get(self.observation, "observation")?,
            perturbation: get(self.perturbation, "perturbation")?,
            rank: get(self.rank, "rank")?,
        })
    }

    /// Sets every seed to distinct values derived from `base`.
    pub fn all_from(base: u64) -> Self {
        Self {
            reference: Some(base),
            ensemble: Some(base + 1),
            observation: Some(base + 2),
            perturbation: Some(base + 3),
            rank: Some(base + 4),
            network: Some(base + 5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub thresholds: Vec<f64>,
    /// Component whose singular weights are traced each cycle (0-based).
    pub alpha_component: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            thresholds: vec![0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
            alpha_component: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub filters: Vec<FilterKind>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            filters: vec![FilterKind::EnkfMc, FilterKind::Letkf],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleSource {
    /// Gaussian samples from a banded precision on a ring.
    #[default]
    Synthetic,
    /// Members read from `ensemble_path` (CSV, one row per component).
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSection {
    pub source: EnsembleSource,
    /// Bandwidth of the synthetic true precision.
    pub bandwidth: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble_path: Option<String>,
    /// Dense reference precision for file sources (CSV).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_path: Option<String>,
    pub error_norm: bool,
    /// Ensemble sizes for the convergence sweep; empty disables it.
    pub nens_sweep: Vec<usize>,
    pub repeats: usize,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            source: EnsembleSource::Synthetic,
            bandwidth: 2,
            ensemble_path: None,
            reference_path: None,
            error_norm: true,
            nens_sweep: Vec::new(),
            repeats: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub nens: usize,
    pub cycles: usize,
    pub model: ModelSection,
    pub spinup: SpinupSection,
    pub network: NetworkSection,
    pub observation: ObservationSection,
    pub filter: FilterSection,
    pub seeds: SeedSection,
    pub sweep: SweepSection,
    pub compare: CompareSection,
    pub estimate: EstimateSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            nens: 30,
            cycles: 30,
            model: ModelSection::default(),
            spinup: SpinupSection::default(),
            network: NetworkSection::default(),
            observation: ObservationSection::default(),
            filter: FilterSection::default(),
            seeds: SeedSection::default(),
            sweep: SweepSection::default(),
            compare: CompareSection::default(),
            estimate: EstimateSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// The calibrated Lorenz-96 twin experiment used by the acceptance suite.
///
/// Six model steps (0.3 time units) per cycle and a short spin-up: with the
/// default spin-up the initial background is climatological and, at 1%
/// observation noise, half-observed runs often diverge within 30 cycles.
pub fn calibrated_lorenz96(seed_base: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        nens: 30,
        cycles: 30,
        seeds: SeedSection::all_from(seed_base),
        ..Default::default()
    };
    cfg.model.steps_per_cycle = CALIBRATED_STEPS_PER_CYCLE;
    cfg.spinup.background_time = 0.0;
    cfg.spinup.ensemble_time = 0.5;
    cfg.resolve();
    cfg
}

pub const CALIBRATED_STEPS_PER_CYCLE: usize = 6;

/// Command-line overrides layered on top of the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub zeta: Option<usize>,
    pub nens: Option<usize>,
    pub sigma_r: Option<f64>,
    pub filter: Option<FilterKind>,
    pub formulation: Option<Formulation>,
    pub subdomains: Option<usize>,
    pub out: Option<String>,
}

impl ExperimentConfig {
    pub fn lorenz96(&self) -> Lorenz96Config {
        Lorenz96Config {
            nstate: self.model.nstate,
            forcing: self.model.forcing,
            dt: self.model.dt,
            steps_per_cycle: self.model.steps_per_cycle,
        }
    }

    pub fn network_pattern(&self) -> Result<NetworkPattern, ConfigError> {
        Ok(match self.network.pattern {
            PatternKind::EveryKth => NetworkPattern::EveryKth,
            PatternKind::Random => NetworkPattern::RandomSeeded(
                self.seeds.network.ok_or(ConfigError::MissingSeed("network"))?,
            ),
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(z) = o.zeta {
            self.filter.zeta = z;
        }
        if let Some(n) = o.nens {
            self.nens = n;
        }
        if let Some(s) = o.sigma_r {
            self.filter.sigma_r = s;
        }
        if let Some(f) = o.filter {
            self.filter.method = f;
        }
        if let Some(f) = o.formulation {
            self.filter.formulation = f;
        }
        if let Some(k) = o.subdomains {
            self.filter.subdomains = k;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
    }

    /// Fills presets so the serialized form is self-contained.
    pub fn resolve(&mut self) {
        self.filter.inflation = Some(self.filter.inflation());
        self.filter.halo = Some(self.filter.halo());
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(key: &str, value: impl ToString, expected: &str) -> ConfigError {
            ConfigError::InvalidValue {
                key: key.into(),
                value: value.to_string(),
                expected: expected.into(),
            }
        }
        let f = &self.filter;
        let checks: [(bool, &str, String, &str); 15] = [
            (self.nens >= 2, "nens", self.nens.to_string(), ">= 2"),
            (self.cycles >= 1, "cycles", self.cycles.to_string(), ">= 1"),
            (self.model.nstate >= 4, "model.nstate", self.model.nstate.to_string(), ">= 4"),
            (
                self.model.dt.is_finite() && self.model.dt > 0.0,
                "model.dt",
                self.model.dt.to_string(),
                "> 0",
            ),
            (
                self.model.steps_per_cycle >= 1,
                "model.steps_per_cycle",
                self.model.steps_per_cycle.to_string(),
                ">= 1",
            ),
            (
                self.network.fraction > 0.0 && self.network.fraction <= 1.0,
                "network.fraction",
                self.network.fraction.to_string(),
                "a value in (0, 1]",
            ),
            (
                self.observation.rel_sigma > 0.0 && self.observation.rel_sigma.is_finite(),
                "observation.rel_sigma",
                self.observation.rel_sigma.to_string(),
                "> 0",
            ),
            (
                f.zeta <= self.model.nstate,
                "filter.zeta",
                f.zeta.to_string(),
                "<= model.nstate",
            ),
            (
                f.sigma_r > 0.0 && f.sigma_r < 1.0,
                "filter.sigma_r",
                f.sigma_r.to_string(),
                "a value in (0, 1)",
            ),
            (
                f.lambda >= 0.0 && f.lambda.is_finite(),
                "filter.lambda",
                f.lambda.to_string(),
                ">= 0",
            ),
            (
                f.inflation() >= 1.0 && f.inflation().is_finite(),
                "filter.inflation",
                f.inflation().to_string(),
                ">= 1",
            ),
            (f.subdomains >= 1, "filter.subdomains", f.subdomains.to_string(), ">= 1"),
            (
                !(f.method == FilterKind::EnkfSchur && f.zeta == 0),
                "filter.zeta",
                f.zeta.to_string(),
                ">= 1 for the Schur-localized filter",
            ),
            (
                self.spinup.perturbation >= 0.0,
                "spinup.perturbation",
                self.spinup.perturbation.to_string(),
                ">= 0",
            ),
            (
                self.sweep.thresholds.iter().all(|&s| s > 0.0 && s < 1.0),
                "sweep.thresholds",
                format!("{:?}", self.sweep.thresholds),
                "values in (0, 1)",
            ),
        ];
        for (ok, key, value, expected) in checks {
            if !ok {
                return Err(bad(key, value, expected));
            }
        }
        for (key, t) in [
            ("spinup.reference_time", self.spinup.reference_time),
            ("spinup.background_time", self.spinup.background_time),
            ("spinup.ensemble_time", self.spinup.ensemble_time),
        ] {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(bad(key, t, ">= 0"));
            }
        }
        if self.estimate.repeats == 0 {
            return Err(bad("estimate.repeats", 0, ">= 1"));
        }
        if let Some(&n) = self.estimate.nens_sweep.iter().find(|&&n| n < 2) {
            return Err(bad("estimate.nens_sweep", n, "sizes >= 2"));
        }
        Ok(())
    }

    /// Canonical TOML form; re-parsing it yields the same text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

const UNSIGNED_KEYS: &[(&str, &str)] = &[
    ("", "nens"),
    ("", "cycles"),
    ("model", "nstate"),
    ("model", "steps_per_cycle"),
    ("filter", "zeta"),
    ("filter", "dense_limit"),
    ("filter", "subdomains"),
    ("filter", "halo"),
    ("sweep", "alpha_component"),
    ("estimate", "bandwidth"),
    ("estimate", "repeats"),
];

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses config text, applies overrides and presets, and validates.
pub fn parse_config_str(text: &str, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    // negative integers would otherwise surface as opaque type errors
    for (section, key) in UNSIGNED_KEYS {
        let value = if section.is_empty() {
            table.get(*key)
        } else {
            table.get(*section).and_then(|s| s.get(*key))
        };
        if let Some(toml::Value::Integer(v)) = value {
            if *v < 0 {
                let name = if section.is_empty() {
                    key.to_string()
                } else {
                    format!("{section}.{key}")
                };
                return Err(ConfigError::InvalidValue {
                    key: name,
                    value: v.to_string(),
                    expected: "a non-negative integer".into(),
                });
            }
        }
    }
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e: toml::de::Error| {
        let line = e.span().map_or(1, |s| line_of(text, s.start));
        let message = e.message().to_string();
        if message.contains("unknown field") {
            ConfigError::UnknownKey { line, message }
        } else {
            ConfigError::Parse { line, message }
        }
    })?;
    cfg.apply(overrides);
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(
    path: &std::path::Path,
    overrides: &Overrides,
) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("", &Overrides::default()).unwrap();
        let mut want = ExperimentConfig::default();
        want.resolve();
        assert_eq!(cfg, want);
        assert_eq!(cfg.filter.method, FilterKind::EnkfMc);
        assert_eq!(cfg.filter.sigma_r, 0.10);
        assert_eq!(cfg.model.forcing, 8.0);
        assert_eq!(cfg.model.dt, 0.05);
        assert_eq!(cfg.filter.inflation, Some(1.0));
        assert_eq!(cfg.seeds.require(), Err(ConfigError::MissingSeed("reference")));
    }

    #[test]
    fn letkf_preset_inflation() {
        let cfg = parse_config_str("[filter]\nmethod = \"letkf\"\n", &Overrides::default()).unwrap();
        assert_eq!(cfg.filter.inflation, Some(1.04));
        let over = Overrides {
            filter: Some(FilterKind::Letkf),
            ..Default::default()
        };
        assert_eq!(parse_config_str("", &over).unwrap().filter.inflation, Some(1.04));
    }

    #[test]
    fn zeta_override_changes_only_zeta() {
        let base = parse_config_str("", &Overrides::default()).unwrap();
        let over = Overrides {
            zeta: Some(3),
            ..Default::default()
        };
        let cfg = parse_config_str("", &over).unwrap();
        assert_eq!(cfg.filter.zeta, 3);
        let mut expect = base.clone();
        expect.filter.zeta = 3;
        expect.filter.halo = Some(3);
        assert_eq!(cfg, expect);
    }

    #[test]
    fn negative_zeta_names_the_key() {
        let err = parse_config_str("[filter]\nzeta = -1\n", &Overrides::default()).unwrap_err();
        match err {
            ConfigError::InvalidValue { key, .. } => assert_eq!(key, "filter.zeta"),
            other => panic!("{other:?}"),
        }
        let err = parse_config_str("[filter]\nsigma_r = 1.5\n", &Overrides::default()).unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { ref key, .. } if key == "filter.sigma_r"));
    }

    #[test]
    fn unknown_keys_and_syntax_errors_carry_lines() {
        let err = parse_config_str("nens = 10\n[filter]\nzeta = 2\nbogus = 1\n", &Overrides::default())
            .unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 4, .. }), "{err:?}");
        let err = parse_config_str("nens = 10\ncycles = = 3\n", &Overrides::default()).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn canonical_form_is_a_fixed_point() {
        let text = "nens = 12\n[seeds]\nreference = 1\nensemble = 2\n[filter]\nmethod = \"letkf\"\nzeta = 2\n";
        let cfg = parse_config_str(text, &Overrides::default()).unwrap();
        let echo = cfg.to_toml();
        let again = parse_config_str(&echo, &Overrides::default()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml(), echo);
    }
}

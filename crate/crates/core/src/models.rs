//! Lorenz-96 dynamics and synthetic observation networks.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::filters::{FilterError, ObservationBundle};
use crate::linalg::{EnsembleMatrix, LinalgError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("Lorenz-96 needs at least 4 components, got {0}")]
    TooFewComponents(usize),
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("state length {found} does not match model size {expected}")]
    StateLength { expected: usize, found: usize },
    #[error("state became non-finite at integration step {step}")]
    BlowUp { step: usize },
    #[error("observed fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("fraction {fraction} of {nstate} components selects no observations")]
    NoObservations { fraction: f64, nstate: usize },
    #[error("relative observation error must be positive, got {0}")]
    BadRelativeSigma(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Observation(#[from] FilterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96Config {
    pub nstate: usize,
    pub forcing: f64,
    pub dt: f64,
    pub steps_per_cycle: usize,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Self {
            nstate: 40,
            forcing: 8.0,
            dt: 0.05,
            steps_per_cycle: 6,
        }
    }
}

impl Lorenz96Config {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.nstate < 4 {
            return Err(ModelError::TooFewComponents(self.nstate));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(ModelError::BadTimeStep(self.dt));
        }
        Ok(())
    }

    fn check_state(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.nstate {
            return Err(ModelError::StateLength {
                expected: self.nstate,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Number of steps covering `time` model units.
    pub fn steps_for(&self, time: f64) -> usize {
        (time / self.dt).round() as usize
    }
}

/// `dx_j/dt = (x_{j+1} − x_{j−2}) x_{j−1} − x_j + F` with cyclic indices.
pub fn lorenz96_tendency(cfg: &Lorenz96Config, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    tendency_into(cfg.forcing, x, &mut out);
    out
}

fn tendency_into(forcing: f64, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for j in 0..n {
        let xp1 = x[(j + 1) % n];
        let xm1 = x[(j + n - 1) % n];
        let xm2 = x[(j + n - 2) % n];
        out[j] = (xp1 - xm2) * xm1 - x[j] + forcing;
    }
}

/// Fixed-step classical RK4.
pub struct Rk4 {
    forcing: f64,
    dt: f64,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(cfg: &Lorenz96Config) -> Self {
        let n = cfg.nstate;
        Self {
            forcing: cfg.forcing,
            dt: cfg.dt,
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            tmp: vec![0.0; n],
        }
    }

    pub fn step(&mut self, x: &mut [f64]) {
        let h = self.dt;
        let [k1, k2, k3, k4] = &mut self.k;
        tendency_into(self.forcing, x, k1);
        for (t, (xi, ki)) in self.tmp.iter_mut().zip(x.iter().zip(k1.iter())) {
            *t = xi + 0.5 * h * ki;
        }
        tendency_into(self.forcing, &self.tmp, k2);
        for (t, (xi, ki)) in self.tmp.iter_mut().zip(x.iter().zip(k2.iter())) {
            *t = xi + 0.5 * h * ki;
        }
        tendency_into(self.forcing, &self.tmp, k3);
        for (t, (xi, ki)) in self.tmp.iter_mut().zip(x.iter().zip(k3.iter())) {
            *t = xi + h * ki;
        }
        tendency_into(self.forcing, &self.tmp, k4);
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Advances `x` by `steps` RK4 steps, failing on the first non-finite state.
pub fn propagate(cfg: &Lorenz96Config, x: &mut [f64], steps: usize) -> Result<(), ModelError> {
    cfg.validate()?;
    cfg.check_state(x)?;
    let mut rk = Rk4::new(cfg);
    for step in 1..=steps {
        rk.step(x);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::BlowUp { step });
        }
    }
    Ok(())
}

/// States at every cycle boundary, starting with `x0`.
pub fn integrate(
    cfg: &Lorenz96Config,
    x0: &[f64],
    cycles: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    cfg.validate()?;
    cfg.check_state(x0)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::BlowUp { step: 0 });
    }
    let mut traj = Vec::with_capacity(cycles + 1);
    traj.push(x0.to_vec());
    let mut x = x0.to_vec();
    let mut rk = Rk4::new(cfg);
    for c in 0..cycles {
        for s in 1..=cfg.steps_per_cycle {
            rk.step(&mut x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::BlowUp {
                    step: c * cfg.steps_per_cycle + s,
                });
            }
        }
        traj.push(x.clone());
    }
    Ok(traj)
}

/// Propagates every member independently by `steps` steps.
pub fn propagate_ensemble(
    cfg: &Lorenz96Config,
    ens: &EnsembleMatrix,
    steps: usize,
) -> Result<EnsembleMatrix, ModelError> {
    let members = exec::try_map_indexed(ens.nens(), |j| {
        let mut x = ens.member(j).to_vec();
        propagate(cfg, &mut x, steps)?;
        Ok::<_, ModelError>(x)
    })?;
    Ok(EnsembleMatrix::from_members(&members)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkPattern {
    EveryKth,
    RandomSeeded(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationNetwork {
    pub fraction: f64,
    pub indices: Vec<usize>,
}

/// Chooses `round(p · nstate)` observed components.
///
/// `EveryKth` spaces them evenly from component 0, which reduces to the
/// stride `1/p` whenever `1/p` is an integer.
pub fn build_network(
    nstate: usize,
    fraction: f64,
    pattern: NetworkPattern,
) -> Result<ObservationNetwork, ModelError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ModelError::BadFraction(fraction));
    }
    let count = (fraction * nstate as f64).round() as usize;
    if count == 0 {
        return Err(ModelError::NoObservations { fraction, nstate });
    }
    let indices = match pattern {
        NetworkPattern::EveryKth => (0..count).map(|m| m * nstate / count).collect(),
        NetworkPattern::RandomSeeded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = index::sample(&mut rng, nstate, count).into_vec();
            v.sort_unstable();
            v
        }
    };
    Ok(ObservationNetwork { fraction, indices })
}

/// Draws `y = H x_ref + ε` with `R = diag((σ_rel · (H x_ref)_i)²)`.
///
/// Each standard deviation is floored at `σ_rel · 1e-3 · rms(x_ref)`.
pub fn synthesize_observation(
    x_ref: &[f64],
    network: &ObservationNetwork,
    rel_sigma: f64,
    seed: u64,
) -> Result<ObservationBundle, ModelError> {
    if !(rel_sigma.is_finite() && rel_sigma > 0.0) {
        return Err(ModelError::BadRelativeSigma(rel_sigma));
    }
    let rms = (x_ref.iter().map(|v| v * v).sum::<f64>() / x_ref.len().max(1) as f64).sqrt();
    let floor_scale = 1e-3 * if rms > 0.0 { rms } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Vec::with_capacity(network.indices.len());
    let mut r = Vec::with_capacity(network.indices.len());
    for &i in &network.indices {
        let sd = rel_sigma * x_ref[i].abs().max(floor_scale);
        let eps: f64 = StandardNormal.sample(&mut rng);
        y.push(x_ref[i] + sd * eps);
        r.push(sd * sd);
    }
    Ok(ObservationBundle::new(
        y,
        network.indices.clone(),
        r,
        x_ref.len(),
    )?)
}

/// Adds independent `N(0, (rel · x_i)²)` noise to each component.
pub fn perturb_relative(x: &[f64], rel: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let sd = (rel * v).abs();
            if sd > 0.0 {
                Normal::new(v, sd).expect("finite sd").sample(rng)
            } else {
                v
            }
        })
        .collect()
}

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use enkf_mc::estimator::{estimate_factors, RegressionMethod};
use enkf_mc::exec;
use enkf_mc::filters::{analyze_letkf, sherman_morrison_solve, weighted_selection, ObservationBundle};
use enkf_mc::grid::{GridGeometry, Ordering};
use enkf_mc::linalg::{DenseMatrix, EnsembleMatrix};
use enkf_mc::models::{propagate_ensemble, Lorenz96Config};

fn random_ensemble(n: usize, nens: usize, seed: u64) -> EnsembleMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EnsembleMatrix::new(DenseMatrix::from_fn(n, nens, |_, _| rng.random_range(-1.0..1.0))).unwrap()
}

fn every_other(n: usize, seed: u64) -> ObservationBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n).step_by(2).collect();
    let y = idx.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    ObservationBundle::new(y, idx.clone(), vec![0.25; idx.len()], n).unwrap()
}

fn both<R>(c: &mut Criterion, group: &str, size: usize, f: impl Fn() -> R) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_with_input(BenchmarkId::new("parallel", size), &size, |b, _| b.iter(&f));
    g.bench_with_input(BenchmarkId::new("sequential", size), &size, |b, _| {
        b.iter(|| exec::sequential(&f))
    });
    g.finish();
}

fn estimator(c: &mut Criterion) {
    let geometry = GridGeometry::rect(32, 32, Ordering::RowMajor, 2).unwrap();
    let ens = random_ensemble(geometry.size(), 40, 1);
    both(c, "estimate_factors", geometry.size(), || {
        estimate_factors(&ens, &geometry, RegressionMethod::default()).unwrap()
    });
}

fn letkf(c: &mut Criterion) {
    let geometry = GridGeometry::rect(32, 32, Ordering::RowMajor, 2).unwrap();
    let ens = random_ensemble(geometry.size(), 40, 2);
    let obs = every_other(geometry.size(), 3);
    both(c, "letkf", geometry.size(), || {
        analyze_letkf(&ens, &obs, &geometry, 1.04).unwrap()
    });
}

fn forecast(c: &mut Criterion) {
    let cfg = Lorenz96Config {
        nstate: 400,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let members: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..400).map(|_| 8.0 + rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ens = EnsembleMatrix::from_members(&members).unwrap();
    both(c, "propagate_ensemble", 400, || propagate_ensemble(&cfg, &ens, 20).unwrap());
}

fn sherman_morrison(c: &mut Criterion) {
    let geometry = GridGeometry::ring(2000, 3).unwrap();
    let ens = random_ensemble(2000, 40, 5);
    let factors = estimate_factors(&ens, &geometry, RegressionMethod::default()).unwrap();
    let obs = every_other(2000, 6);
    let r_h = weighted_selection(&obs);
    let rhs = ens.deviations();
    both(c, "sherman_morrison", 2000, || {
        sherman_morrison_solve(&factors, &r_h, &rhs).unwrap()
    });
}

criterion_group!(benches, estimator, letkf, forecast, sherman_morrison);
criterion_main!(benches);

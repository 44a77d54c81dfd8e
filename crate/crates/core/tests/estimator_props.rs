use enkf_mc_validation::{gaussian_ensemble, rng};
use enkf_mc::estimator::{estimate_factors, read_factors, write_factors, RegressionMethod};
use enkf_mc::exec;
use enkf_mc::grid::{GridGeometry, Ordering};
use proptest::prelude::*;

fn method() -> impl Strategy<Value = RegressionMethod> {
    prop_oneof![
        Just(RegressionMethod::NormalEquations),
        (0.01f64..1.0).prop_map(RegressionMethod::Tikhonov),
        (0.02f64..0.5).prop_map(RegressionMethod::TruncatedSvd),
    ]
}

fn geometry() -> impl Strategy<Value = GridGeometry> {
    prop_oneof![
        (4usize..40, 0usize..4).prop_map(|(n, z)| GridGeometry::ring(n, z).unwrap()),
        (2usize..7, 2usize..7, 0usize..3)
            .prop_map(|(r, c, z)| GridGeometry::rect(r, c, Ordering::RowMajor, z).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rows_respect_predecessor_sets(g in geometry(), m in method(), extra in 0usize..30, seed: u64) {
        let mut r = rng(seed);
        let nens = 2 + extra + if m == RegressionMethod::NormalEquations { 2 * g.size() } else { 0 };
        let ens = gaussian_ensemble(&mut r, g.size(), nens);
        let f = estimate_factors(&ens, &g, m).unwrap();
        for i in 0..g.size() {
            let preds = g.predecessors(i).unwrap().predecessors;
            let row = f.t().row(i);
            prop_assert!(row.len() <= preds.len());
            prop_assert!(row.iter().all(|(k, _)| preds.contains(k)));
        }
        prop_assert!(f.d().values().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn estimated_precision_is_spd(g in geometry(), m in method(), seed: u64) {
        let mut r = rng(seed);
        let nens = 2 * g.size() + 5;
        let ens = gaussian_ensemble(&mut r, g.size(), nens);
        let p = estimate_factors(&ens, &g, m).unwrap().to_dense_precision();
        prop_assert!((&p - p.transpose()).amax() <= 1e-10 * p.amax());
        prop_assert!(p.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn worker_count_does_not_change_factors(g in geometry(), m in method(), seed: u64) {
        let mut r = rng(seed);
        let ens = gaussian_ensemble(&mut r, g.size(), 3 * g.size());
        let par = estimate_factors(&ens, &g, m).unwrap();
        let seq = exec::sequential(|| estimate_factors(&ens, &g, m).unwrap());
        prop_assert_eq!(&par, &seq);
        let back = read_factors(&write_factors(&par)).unwrap();
        prop_assert_eq!(back, par);
    }
}

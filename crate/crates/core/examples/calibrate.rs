//! Prints the twin-experiment skill table behind the frozen acceptance
//! thresholds: EnKF-MC and LETKF over radii 1..=5 for two network densities,
//! pooled over several seeds.
//!
//! cargo run --release -p enkf-mc --example calibrate -- \
//!     [seeds] [steps_per_cycle] [enkf_mc_inflation] [background_time] [ensemble_time]

use enkf_mc::config::{calibrated_lorenz96, FilterKind};
use enkf_mc::harness::run_twin_experiment;

fn arg<T: std::str::FromStr>(args: &[String], i: usize) -> Option<T> {
    args.get(i).and_then(|s| s.parse().ok())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let nseeds: u64 = arg(&args, 1).unwrap_or(5);
    let base = calibrated_lorenz96(0);
    let spc = arg(&args, 2).unwrap_or(base.model.steps_per_cycle);
    let inflation: Option<f64> = arg(&args, 3);
    let bg_time = arg(&args, 4).unwrap_or(base.spinup.background_time);
    let ens_time = arg(&args, 5).unwrap_or(base.spinup.ensemble_time);
    println!(
        "steps_per_cycle={spc} background_time={bg_time} ensemble_time={ens_time} \
         enkf_mc_inflation={inflation:?} seeds={nseeds}"
    );
    println!("filter        p  zeta  bg(10-30)  an(10-30)  reduction  diverged");
    for kind in [FilterKind::EnkfMc, FilterKind::Letkf] {
        for p in [1.0, 0.5] {
            for zeta in 1..=5 {
                let (mut bg, mut an, mut ok, mut failed) = (0.0, 0.0, 0, 0);
                for s in 0..nseeds {
                    let mut cfg = calibrated_lorenz96(1000 * (s + 1));
                    cfg.model.steps_per_cycle = spc;
                    cfg.spinup.background_time = bg_time;
                    cfg.spinup.ensemble_time = ens_time;
                    cfg.network.fraction = p;
                    cfg.filter.method = kind;
                    cfg.filter.zeta = zeta;
                    cfg.filter.inflation = if kind == FilterKind::EnkfMc { inflation } else { None };
                    cfg.resolve();
                    match run_twin_experiment(&cfg) {
                        Ok(rec) => {
                            let (b, a) = rec.window_means(10, 30);
                            bg += b;
                            an += a;
                            ok += 1;
                        }
                        Err(_) => failed += 1,
                    }
                }
                let n = ok.max(1) as f64;
                println!(
                    "{:<10} {:>4} {:>5} {:>10.4} {:>10.4} {:>9.1}% {:>9}",
                    kind.name(),
                    p,
                    zeta,
                    bg / n,
                    an / n,
                    100.0 * (1.0 - an / bg),
                    failed
                );
            }
        }
    }
}

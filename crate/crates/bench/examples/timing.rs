//! Temporary harness: measure desk-profile convergence cost and quality.

use std::time::Instant;

use threetank_bench::{persistence_mse, scenario_dataset, Profile};
use threetank_models::{build_model, ArchKind, Standardizer};
use threetank_sim::ScenarioKind;
use threetank_train::{forecast_mse_original, train};

fn main() {
    let profile = Profile::Desk;
    let (ds, _) = scenario_dataset(ScenarioKind::Standard, profile.counts(), 1).unwrap();
    let norm = Standardizer::fit(&ds.train.samples).unwrap();
    let persistence = persistence_mse(&ds.test.samples).unwrap();
    println!("persistence {persistence:.4e}  floor {:.1e}", 0.02f64 * 0.02);
    for &arch in ArchKind::ALL.iter() {
        let cfg = profile.arch_config(arch);
        let mut model = build_model(&cfg, norm.clone(), 1).unwrap();
        let tc = profile.train_config(1);
        let started = Instant::now();
        let report = train(&mut model, &ds, &tc).unwrap();
        let secs = started.elapsed().as_secs_f64();
        let test = forecast_mse_original(&model, &ds.test.samples, 32).unwrap();
        println!(
            "{:>14}: {:3} epochs in {:6.1}s (best {:3}), test {:.4e} ({:.2}x persistence)",
            arch.cli_name(),
            report.epochs.len(),
            secs,
            report.best_epoch,
            test,
            test / persistence
        );
    }
}

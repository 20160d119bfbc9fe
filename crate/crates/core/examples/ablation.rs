//! Runs the ablation table for one seed: update rules, reward shape,
//! random selection and random subsets at the same budget.
//!
//!     cargo run --release --example ablation -- 4

use patchzoom::experiment::{run_seed, ExperimentConfig};

fn main() -> patchzoom::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let run = run_seed(&ExperimentConfig::default(), seed)?;
    println!("{:28} {:>8} {:>8} {:>8} {:>9}", "cohort", "accuracy", "auc", "ece", "hit ratio");
    for ev in &run.evals {
        println!(
            "{:28} {:8.3} {:>8} {:8.3} {:9.3}",
            ev.cohort,
            ev.metrics.accuracy,
            ev.metrics.auc.map_or("-".into(), |a| format!("{a:.3}")),
            ev.ece,
            ev.mean_hit_ratio()
        );
    }
    Ok(())
}

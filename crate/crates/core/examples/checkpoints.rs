//! Saves a trained aggregator, reloads it without the original config and
//! confirms predictions are bit-identical.

use patchzoom::checkpoint::Checkpoint;
use patchzoom::experiment::{fit_hafed, hafed_checkpoint, load_hafed, ExperimentConfig, Splits};
use patchzoom::hafed::predict;

fn main() -> patchzoom::Result<()> {
    let mut cfg = ExperimentConfig::default().with_seed(5);
    cfg.positives = 20;
    cfg.negatives = 20;
    cfg.hafed_training.epochs = 3;
    cfg.hafed_training.restarts = 1;
    let data = Splits::generate(&cfg)?;
    let trained = fit_hafed(&cfg, &data)?;
    let path = std::env::temp_dir().join("patchzoom-hafed.ckpt");
    let ck = hafed_checkpoint(&cfg.hafed, &trained, cfg.hafed_training.seed);
    ck.save(&path)?;

    let loaded = Checkpoint::load(&path)?;
    let (config, params) = load_hafed(&loaded)?;
    println!("{} ({} tensors, hash {}) from {}", loaded.component, loaded.tensors.len(), loaded.hash(), path.display());
    println!("metadata {:?}", loaded.metadata);
    println!("branches {} hidden {}", config.branches, config.hidden);
    let same = data
        .test
        .iter()
        .all(|b| predict(&params, b).unwrap().prob.to_bits() == predict(&trained.params, b).unwrap().prob.to_bits());
    println!("predictions identical after reload: {same}");
    Ok(())
}

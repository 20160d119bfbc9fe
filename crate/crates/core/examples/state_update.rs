//! Trains the targeted state updater and shows what one visit changes in
//! the low-resolution state.

use patchzoom::agent::Environment;
use patchzoom::experiment::{fit_hafed, fit_tsu, ExperimentConfig, Splits};
use patchzoom::tsu::{similar_set, SlideState, UpdateRule};

fn main() -> patchzoom::Result<()> {
    let cfg = ExperimentConfig::default().with_seed(2);
    let data = Splits::generate(&cfg)?;
    let hafed = fit_hafed(&cfg, &data)?.params;
    let rule = cfg.targeted_rule();
    let tsu = fit_tsu(&cfg, &data, &hafed, rule)?;
    println!(
        "validation mse {:.3} (identity {:.3}) at epoch {}",
        tsu.best_val_mse, tsu.val_identity_mse, tsu.best_epoch
    );

    let env = Environment { hafed: &hafed, tsu: Some(&tsu.params), rule };
    let bag = data.test.iter().find(|b| b.label == 1).expect("a positive test slide");
    let v = &env.distill(std::slice::from_ref(bag))?[0];
    let tau = match rule {
        UpdateRule::Targeted { tau } => tau,
        _ => unreachable!(),
    };
    let unvisited = vec![false; bag.num_patches()];
    let a = (0..bag.num_patches())
        .max_by_key(|&i| similar_set(bag.z.view(), i, tau, &unvisited).map_or(0, |s| s.len()))
        .unwrap();
    let similar = similar_set(bag.z.view(), a, tau, &unvisited)?;
    for rule in [rule, UpdateRule::Local] {
        let mut state = SlideState::new(bag.z.view(), 10)?;
        let before = state.s.clone();
        let changed = state.apply_update(a, v.row(a), Some(&tsu.params), rule)?;
        let err = |s: &ndarray::Array2<f64>| -> f64 {
            similar.iter().map(|&i| (&s.row(i) - &v.row(i)).mapv(|x| x * x).sum()).sum::<f64>() / similar.len().max(1) as f64
        };
        println!(
            "{:8}: visiting patch {a} changed {} rows; {} similar rows moved from {:.3} to {:.3} away from their high-res features",
            rule.name(),
            changed.len(),
            similar.len(),
            err(&before),
            err(&state.s)
        );
    }
    Ok(())
}

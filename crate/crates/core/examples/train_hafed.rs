//! Trains the two-stage attention aggregator on full-resolution bags and
//! checks where its attention goes.

use patchzoom::experiment::{eval_hafed, fit_hafed, ExperimentConfig, Splits};
use patchzoom::hafed::predict;

fn main() -> patchzoom::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = ExperimentConfig::default().with_seed(1);
    let data = Splits::generate(&cfg)?;
    let trained = fit_hafed(&cfg, &data)?;
    let ev = eval_hafed(&trained.params, &data.test)?;
    println!("test accuracy {:.3}  auc {:?}  ece {:.3}", ev.metrics.accuracy, ev.metrics.auc, ev.ece);

    let bag = data.test.iter().find(|b| b.label == 1).expect("a positive test slide");
    let out = predict(&trained.params, bag)?;
    let mut order: Vec<usize> = (0..bag.num_patches()).collect();
    order.sort_by(|a, b| out.alpha[*b].total_cmp(&out.alpha[*a]));
    println!("{}: p(tumour)={:.3}", bag.slide_id, out.prob);
    for &i in order.iter().take(5) {
        println!("  patch {i:3} attention {:.3} tumour {}", out.alpha[i], bag.tumor_mask[i]);
    }
    Ok(())
}

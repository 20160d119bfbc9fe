//! Trains the sampling policy at a 20% budget and compares it with random
//! selection and with the full-resolution classifier.

use patchzoom::agent::{Environment, SamplingPolicy, Selector};
use patchzoom::experiment::{eval_hafed, eval_policy, fit_agent, fit_hafed, fit_tsu, ExperimentConfig, Splits};

fn main() -> patchzoom::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = ExperimentConfig::default().with_seed(3);
    let data = Splits::generate(&cfg)?;
    let hafed = fit_hafed(&cfg, &data)?.params;
    let rule = cfg.targeted_rule();
    let tsu = fit_tsu(&cfg, &data, &hafed, rule)?.params;
    let env = Environment { hafed: &hafed, tsu: Some(&tsu), rule };
    let agent = fit_agent(&cfg, &data, &env, 0.2, false)?;
    println!("best epoch {} (selection score {:.3})", agent.best_epoch, agent.best_score);

    let v = env.distill(&data.test)?;
    let full = eval_hafed(&hafed, &data.test)?;
    println!("{:22} accuracy {:.3}", "full resolution", full.metrics.accuracy);
    for (name, selector) in [
        ("deterministic", Selector::Policy(SamplingPolicy::Deterministic)),
        ("top-k:5", Selector::Policy(SamplingPolicy::TopK { k: 5 })),
        ("random", Selector::Random),
    ] {
        let (ev, traces) = eval_policy(name, &env, &data.test, &v, &agent.params, selector, 0.2, 9)?;
        println!(
            "{name:22} accuracy {:.3}  hit ratio {:.3}  first path {:?}",
            ev.metrics.accuracy,
            ev.mean_hit_ratio(),
            traces[0].actions()
        );
    }
    Ok(())
}

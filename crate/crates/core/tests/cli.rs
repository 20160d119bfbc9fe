use std::fs;
use std::path::Path;

use patchzoom::checkpoint::Checkpoint;
use patchzoom::cli::{main_with_args, RUN_ROOT_ENV};
use patchzoom::metrics::parse_records;

const SMALL: &str = r#"
positives = 8
negatives = 8
seeds = [7, 8]
variants = ["random-policy", "random-sampling", "local-update"]
budgets = [0.2]

[data]
n_min = 16
n_max = 20
k = 4
d = 8

[hafed]
d = 8
k = 4
hidden = 8
branches = 2

[hafed_training]
epochs = 2
restarts = 2
restart_epochs = 1

[tsu]
epochs = 2

[agent]
epochs = 2
hidden = 8
rollouts_per_update = 4
"#;

fn pz(config: &Path, args: &str) -> i32 {
    let mut argv = vec!["patchzoom".to_string(), "--config".into(), config.display().to_string()];
    argv.extend(args.split_whitespace().map(String::from));
    main_with_args(argv)
}

// One test so the run-root environment variable is set exactly once.
#[test]
fn pipeline_subcommands_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    std::env::set_var(RUN_ROOT_ENV, tmp.path().join("runs"));
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let seed_dir = tmp.path().join("runs/default/seed-7");

    assert_eq!(pz(&cfg, "train-hafed"), 3);
    assert_eq!(pz(&cfg, "gen-data"), 0);
    assert_eq!(pz(&cfg, "train-agent"), 3);
    assert_eq!(pz(&cfg, "train-hafed"), 0);
    assert_eq!(pz(&cfg, "train-agent"), 3);
    assert_eq!(pz(&cfg, "train-tsu"), 0);
    assert_eq!(pz(&cfg, "train-agent"), 0);
    assert_eq!(pz(&cfg, "train-agent --rule local --budget 0.1"), 0);

    for args in [
        "eval --budget 0.2",
        "eval --budget 0.2 --policy full",
        "eval --budget 0.2 --policy top-k:2",
        "eval --budget 0.2 --policy top-p:0.5",
        "eval --budget 1.0",
        "eval --budget 0.1 --rule local --agent-budget 0.1",
        "eval --budget 0.2 --baseline hafed",
        "eval --budget 0.2 --baseline random-policy",
        "eval --budget 0.2 --baseline random-sampling",
    ] {
        assert_eq!(pz(&cfg, args), 0, "{args}");
    }
    assert_eq!(pz(&cfg, "eval --budget 0.3"), 2);
    assert_eq!(pz(&cfg, "eval --policy top-k:0"), 2);
    assert_eq!(pz(&cfg, "--set agent.nope=1 eval"), 2);
    assert_eq!(pz(&cfg, "--frobnicate eval"), 2);

    let records = parse_records(&fs::read_to_string(tmp.path().join("runs/default/metrics.tsv")).unwrap()).unwrap();
    assert!(records.iter().any(|r| r.cohort == "sasha-0.2/top-k:2" && r.name == "accuracy"));
    assert!(records.iter().all(|r| r.seed == 7));

    // Checkpoints are self-describing and re-encode to the same bytes.
    for name in ["hafed.ckpt", "tsu-targeted.ckpt", "agent-targeted-0.2.ckpt"] {
        let path = seed_dir.join(name);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().encode(), bytes);
    }
    let manifest = fs::read_to_string(tmp.path().join("runs/default/manifest.toml")).unwrap();
    let agent_hash = Checkpoint::load(&seed_dir.join("agent-targeted-0.2.ckpt")).unwrap().hash();
    assert!(manifest.contains(&agent_hash));

    // Retraining the aggregator invalidates everything trained on top of it.
    assert_eq!(pz(&cfg, "--set hafed_training.epochs=3 train-hafed"), 0);
    assert_eq!(pz(&cfg, "eval --budget 0.2"), 3);
    assert_eq!(pz(&cfg, "train-agent"), 3);

    assert_eq!(pz(&cfg, "--seed 8 ablate"), 0);
    assert!(tmp.path().join("runs/default/ablation.md").exists());
    assert_eq!(pz(&cfg, "report"), 0);
    let report = fs::read_to_string(tmp.path().join("runs/default/report.md")).unwrap();
    for cohort in ["hafed", "sasha-0.2", "random-policy-0.2", "random-sampling-0.2", "local-update-0.2"] {
        assert!(report.contains(&format!("| {cohort} |")), "{cohort} missing from\n{report}");
    }
    assert!(tmp.path().join("runs/default/series/ece-bars.tsv").exists());
    assert!(tmp.path().join("runs/default/series/hit-sasha-0.2-seed8.txt").exists());
}

//! The `patchzoom` command-line tool.
//!
//! Every subcommand reads an experiment config (TOML, dotted sections) plus
//! `--set key=value` overrides and works inside a run directory under
//! `$PATCHZOOM_RUNS` (default `runs`). Per-seed artifacts live in
//! `<run>/seed-<s>/`; metric records accumulate in `<run>/metrics.tsv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::agent::{Environment, SamplingPolicy, Selector};
use crate::checkpoint::Checkpoint;
use crate::datagen::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::experiment::{
    agent_checkpoint, cohort_name, eval_hafed, eval_policy, eval_random_sampling, fit_agent, fit_hafed, fit_tsu,
    hafed_checkpoint, load_agent, load_hafed, load_tsu, mean, run_seed, tsu_checkpoint, ExperimentConfig, PolicyEval,
    Splits, Variant,
};
use crate::metrics::{parse_records, MetricRecord};
use crate::tsu::UpdateRule;

pub const RUN_ROOT_ENV: &str = "PATCHZOOM_RUNS";

#[derive(Debug, Parser)]
#[command(name = "patchzoom", about = "Budgeted sequential patch sampling on synthetic slides")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `agent.hidden=32`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run name, a directory under the run root.
    #[arg(long, global = true, default_value = "default")]
    pub run: String,
    /// Seed to operate on; defaults to the first configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Targeted,
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Hafed,
    RandomPolicy,
    RandomSampling,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset for one seed.
    GenData,
    /// Train the two-stage aggregator on full-resolution bags.
    TrainHafed,
    /// Train the state updater against a HAFED checkpoint.
    TrainTsu {
        #[arg(long, value_enum, default_value = "targeted")]
        rule: RuleArg,
    },
    /// Train the sampling policy.
    TrainAgent {
        #[arg(long, value_enum, default_value = "targeted")]
        rule: RuleArg,
        /// Training budget; defaults to `agent.budget_fraction`.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long)]
        terminal_reward: bool,
    },
    /// Evaluate on the test split and append metric records.
    Eval {
        #[arg(long, default_value_t = 0.2)]
        budget: f64,
        /// deterministic, full, top-k[:K] or top-p[:P].
        #[arg(long, default_value = "deterministic")]
        policy: SamplingPolicy,
        #[arg(long, value_enum, default_value = "targeted")]
        rule: RuleArg,
        /// Budget the agent was trained at; defaults to `agent.budget_fraction`.
        #[arg(long)]
        agent_budget: Option<f64>,
        #[arg(long)]
        terminal_reward: bool,
        /// Evaluate a baseline instead of a trained agent.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Train and evaluate ablation variants for every configured seed.
    Ablate {
        /// Variant to run; repeatable. Defaults to the configured list.
        #[arg(long = "variant")]
        variants: Vec<Variant>,
    },
    /// Aggregate metric records into tables and plot-ready series.
    Report,
}

/// Resolved paths and config for one invocation.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
    pub seed: u64,
}

impl Workspace {
    pub fn open(common: &Common) -> Result<Workspace> {
        let text = match &common.config {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let config = ExperimentConfig::from_toml(&text, &common.overrides)?;
        let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        let seed = common.seed.unwrap_or(config.seeds[0]);
        Ok(Workspace {
            config,
            run_dir: root.join(&common.run),
            seed,
        })
    }

    pub fn seed_dir(&self) -> PathBuf {
        self.run_dir.join(format!("seed-{}", self.seed))
    }

    fn seeded(&self) -> ExperimentConfig {
        self.config.with_seed(self.seed)
    }

    fn data(&self) -> Result<Splits> {
        let dir = self.seed_dir().join("data");
        if !dir.join("manifest.txt").exists() {
            return Err(Error::Dependency(format!("no dataset at {}; run gen-data first", dir.display())));
        }
        Splits::load(&Dataset::open(&dir)?)
    }

    fn checkpoint(&self, name: &str, hint: &str) -> Result<Checkpoint> {
        let path = self.seed_dir().join(name);
        if !path.exists() {
            return Err(Error::Dependency(format!("missing {}; run {hint} first", path.display())));
        }
        Checkpoint::load(&path)
    }

    fn save(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        let path = self.seed_dir().join(name);
        ck.save(&path)?;
        self.record_manifest(name, &ck.hash())?;
        println!("wrote {} ({})", path.display(), ck.hash());
        Ok(())
    }

    /// Keeps `<run>/manifest.toml` sufficient to re-run: resolved config,
    /// seeds and the hash of every checkpoint written so far.
    fn record_manifest(&self, artifact: &str, hash: &str) -> Result<()> {
        let path = self.run_dir.join("manifest.toml");
        let mut table: toml::Table = match fs::read_to_string(&path) {
            Ok(t) => t.parse().map_err(|e: toml::de::Error| Error::config("manifest", e.message()))?,
            Err(_) => toml::Table::new(),
        };
        let config: toml::Table = self.config.to_toml().parse().expect("config round trips");
        table.insert("config".into(), toml::Value::Table(config));
        let artifacts = table
            .entry("artifacts")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config("manifest", "artifacts is not a table"))?;
        artifacts.insert(format!("seed-{}/{artifact}", self.seed), toml::Value::String(hash.into()));
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        fs::write(&path, toml::to_string(&table).expect("manifest serializes")).map_err(|e| Error::io(&path, e))
    }

    fn append_records(&self, records: &[MetricRecord]) -> Result<()> {
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let path = self.run_dir.join("metrics.tsv");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for r in records {
            writeln!(f, "{r}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn write_series(&self, seed: u64, ev: &PolicyEval) -> Result<()> {
        let dir = self.run_dir.join("series");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut curves = String::new();
        for c in &ev.hit_curves {
            let row: Vec<String> = c.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(curves, "{}", row.join("\t")).unwrap();
        }
        let mut paths = String::new();
        for a in &ev.actions {
            let row: Vec<String> = a.iter().map(usize::to_string).collect();
            writeln!(paths, "{}", row.join(" ")).unwrap();
        }
        for (kind, body) in [("hit", curves), ("paths", paths)] {
            let p = dir.join(format!("{kind}-{}-seed{seed}.txt", ev.cohort.replace([':', '/'], "_")));
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn rule_for(arg: RuleArg, cfg: &ExperimentConfig) -> UpdateRule {
    match arg {
        RuleArg::Targeted => cfg.targeted_rule(),
        RuleArg::Global => UpdateRule::Global,
        RuleArg::Local => UpdateRule::Local,
    }
}

fn agent_file(rule: UpdateRule, budget: f64, terminal: bool) -> String {
    format!("agent-{}-{budget}{}.ckpt", rule.name(), if terminal { "-terminal" } else { "" })
}

pub fn run(cli: Cli) -> Result<()> {
    let ws = Workspace::open(&cli.common)?;
    let cfg = ws.seeded();
    match cli.command {
        Command::GenData => {
            let dir = ws.seed_dir().join("data");
            let manifest = generate_dataset(&cfg.data, cfg.positives, cfg.negatives, cfg.splits, &dir)?;
            ws.record_manifest("data", &format!("{} slides", manifest.entries.len()))?;
            println!("wrote {} slides to {}", manifest.entries.len(), dir.display());
        }
        Command::TrainHafed => {
            let data = ws.data()?;
            let trained = fit_hafed(&cfg, &data)?;
            ws.save("hafed.ckpt", &hafed_checkpoint(&cfg.hafed, &trained, cfg.hafed_training.seed))?;
        }
        Command::TrainTsu { rule } => {
            let rule = rule_for(rule, &cfg);
            if rule == UpdateRule::Local {
                return Err(Error::config("rule", "the local rule has nothing to train"));
            }
            let hafed_ck = ws.checkpoint("hafed.ckpt", "train-hafed")?;
            let (_, hafed) = load_hafed(&hafed_ck)?;
            let data = ws.data()?;
            let trained = fit_tsu(&cfg, &data, &hafed, rule)?;
            let tsu_cfg = crate::tsu::TsuConfig { rule, ..cfg.tsu.clone() };
            ws.save(&format!("tsu-{}.ckpt", rule.name()), &tsu_checkpoint(&tsu_cfg, &trained, &hafed_ck))?;
        }
        Command::TrainAgent { rule, budget, terminal_reward } => {
            let rule = rule_for(rule, &cfg);
            let budget = budget.unwrap_or(cfg.agent.budget_fraction);
            let hafed_ck = ws.checkpoint("hafed.ckpt", "train-hafed")?;
            let (_, hafed) = load_hafed(&hafed_ck)?;
            let tsu_ck = match rule {
                UpdateRule::Local => None,
                r => Some(ws.checkpoint(&format!("tsu-{}.ckpt", r.name()), "train-tsu")?),
            };
            let tsu = tsu_ck.as_ref().map(|c| load_tsu(c, &hafed_ck)).transpose()?.map(|(_, p)| p);
            let data = ws.data()?;
            let env = Environment {
                hafed: &hafed,
                tsu: tsu.as_ref(),
                rule,
            };
            let trained = fit_agent(&cfg, &data, &env, budget, terminal_reward)?;
            let ppo = crate::agent::PpoConfig {
                budget_fraction: budget,
                terminal_reward,
                ..cfg.agent.clone()
            };
            let ck = agent_checkpoint(&ppo, &trained, rule, &hafed_ck, tsu_ck.as_ref());
            ws.save(&agent_file(rule, budget, terminal_reward), &ck)?;
        }
        Command::Eval { budget, policy, rule, agent_budget, terminal_reward, baseline } => {
            if ![0.1, 0.2, 1.0].contains(&budget) {
                return Err(Error::config("budget", "must be one of 0.1, 0.2, 1.0"));
            }
            policy.validate()?;
            let hafed_ck = ws.checkpoint("hafed.ckpt", "train-hafed")?;
            let (_, hafed) = load_hafed(&hafed_ck)?;
            let data = ws.data()?;
            let eval_seed = crate::datagen::derive_seed(ws.seed, "eval");
            let ev = match baseline {
                Some(Baseline::Hafed) => eval_hafed(&hafed, &data.test)?,
                Some(Baseline::RandomSampling) => {
                    let env = Environment { hafed: &hafed, tsu: None, rule: UpdateRule::Local };
                    eval_random_sampling(&hafed, &data.test, &env.distill(&data.test)?, budget, eval_seed)?
                }
                _ => {
                    let rule = rule_for(rule, &cfg);
                    let trained_at = agent_budget.unwrap_or(cfg.agent.budget_fraction);
                    let agent_ck = ws.checkpoint(&agent_file(rule, trained_at, terminal_reward), "train-agent")?;
                    let (_, rule, params) = load_agent(&agent_ck, &hafed_ck)?;
                    let tsu = match rule {
                        UpdateRule::Local => None,
                        r => {
                            let tsu_ck = ws.checkpoint(&format!("tsu-{}.ckpt", r.name()), "train-tsu")?;
                            crate::experiment::require_parent(&agent_ck, "tsu", &tsu_ck)?;
                            Some(load_tsu(&tsu_ck, &hafed_ck)?.1)
                        }
                    };
                    let env = Environment { hafed: &hafed, tsu: tsu.as_ref(), rule };
                    let distilled = env.distill(&data.test)?;
                    let (selector, cohort) = if baseline == Some(Baseline::RandomPolicy) {
                        (Selector::Random, cohort_name(Variant::RandomPolicy, budget))
                    } else {
                        let base = match rule {
                            UpdateRule::Targeted { .. } => cohort_name(Variant::Default, budget),
                            UpdateRule::Global => cohort_name(Variant::GlobalUpdate, budget),
                            UpdateRule::Local => cohort_name(Variant::LocalUpdate, budget),
                        };
                        let base = if terminal_reward { format!("{base}-terminal") } else { base };
                        (Selector::Policy(policy), format!("{base}/{policy}"))
                    };
                    eval_policy(&cohort, &env, &data.test, &distilled, &params, selector, budget, eval_seed)?.0
                }
            };
            ws.append_records(&ev.records(ws.seed))?;
            ws.write_series(ws.seed, &ev)?;
            print!("{}", table(&[&ev]));
        }
        Command::Ablate { variants } => {
            let mut base = ws.config.clone();
            if !variants.is_empty() {
                base.variants = variants;
            }
            let seeds = match cli.common.seed {
                Some(s) => vec![s],
                None => base.seeds.clone(),
            };
            let mut all = Vec::new();
            for seed in seeds {
                let run = run_seed(&base, seed)?;
                ws.append_records(&run.records())?;
                for ev in &run.evals {
                    ws.write_series(seed, ev)?;
                }
                all.extend(run.records());
            }
            let text = summary_table(&all);
            let path = ws.run_dir.join("ablation.md");
            fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            print!("{text}");
        }
        Command::Report => {
            let path = ws.run_dir.join("metrics.tsv");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let records = parse_records(&text)?;
            let summary = summary_table(&records);
            let out = ws.run_dir.join("report.md");
            fs::write(&out, &summary).map_err(|e| Error::io(&out, e))?;
            let bars = ece_bars(&records);
            let out = ws.run_dir.join("series").join("ece-bars.tsv");
            fs::create_dir_all(out.parent().unwrap()).map_err(|e| Error::io(&out, e))?;
            fs::write(&out, bars).map_err(|e| Error::io(&out, e))?;
            print!("{summary}");
        }
    }
    Ok(())
}

const COLUMNS: [&str; 6] = ["accuracy", "auc", "f1", "ece", "hit_ratio", "mean_attention"];

fn table(evals: &[&PolicyEval]) -> String {
    let mut out = String::from("cohort\tbudget\taccuracy\tauc\tf1\tece\thit_ratio\n");
    for ev in evals {
        let auc = ev.metrics.auc.map_or("-".to_string(), |a| format!("{a:.3}"));
        let hits = if ev.hit_ratio.is_empty() { "-".to_string() } else { format!("{:.3}", mean(&ev.hit_ratio)) };
        writeln!(
            out,
            "{}\t{}\t{:.3}\t{auc}\t{:.3}\t{:.3}\t{hits}",
            ev.cohort, ev.budget, ev.metrics.accuracy, ev.metrics.f1, ev.ece
        )
        .unwrap();
    }
    out
}

/// Mean ± standard deviation over seeds, one row per cohort.
pub fn summary_table(records: &[MetricRecord]) -> String {
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        cells.entry((r.cohort.clone(), r.name.clone())).or_default().push(r.value);
    }
    let mut cohorts: Vec<&String> = cells.keys().map(|(c, _)| c).collect();
    cohorts.dedup();
    let mut out = format!("| cohort | {} |\n|---|{}\n", COLUMNS.join(" | "), "---|".repeat(COLUMNS.len()));
    for c in cohorts {
        let row: Vec<String> = COLUMNS
            .iter()
            .map(|m| match cells.get(&(c.clone(), m.to_string())) {
                Some(v) => format!("{:.3} ± {:.3}", mean(v), std_dev(v)),
                None => "-".into(),
            })
            .collect();
        writeln!(out, "| {c} | {} |", row.join(" | ")).unwrap();
    }
    out
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn ece_bars(records: &[MetricRecord]) -> String {
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.name == "ece") {
        by.entry(&r.cohort).or_default().push(r.value);
    }
    let mut out = String::from("cohort\tece_mean\tece_std\n");
    for (c, v) in by {
        writeln!(out, "{c}\t{:.6}\t{:.6}", mean(&v), std_dev(&v)).unwrap();
    }
    out
}

/// Parses arguments, runs, and maps errors onto exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

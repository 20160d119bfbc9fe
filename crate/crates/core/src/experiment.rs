//! Experiment configuration and the end-to-end training and evaluation
//! pipeline shared by the command-line tool, the examples and the
//! benchmark tests.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    evaluate, random_subset_prediction, train_agent, ActorCriticParams, Environment, EpisodeTrace, Mode,
    PpoConfig, RolloutSpec, SamplingPolicy, Selector, TrainedAgent,
};
use crate::checkpoint::Checkpoint;
use crate::datagen::{derive_seed, generate_bags, plan_dataset, Dataset, FeatureBag, Split, SplitFractions, SyntheticConfig};
use crate::error::{Error, Result};
use crate::hafed::{predict, train_hafed, HafedConfig, HafedParams, HafedTraining, TrainedHafed};
use crate::metrics::{attention_overlap, classification_metrics, ece, hit_ratio_series, ClassificationMetrics, MetricRecord};
use crate::tensor::{Algorithm, OptimizerConfig, Schedule};
use crate::tsu::{train_tsu, TrainedTsu, TsuConfig, TsuParams, UpdateRule};

pub const ECE_BINS: usize = 10;

/// One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Default,
    RandomPolicy,
    GlobalUpdate,
    LocalUpdate,
    TerminalReward,
    RandomSampling,
    SingleBranch,
    FeatureNoise,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Default,
        Variant::RandomPolicy,
        Variant::GlobalUpdate,
        Variant::LocalUpdate,
        Variant::TerminalReward,
        Variant::RandomSampling,
        Variant::SingleBranch,
        Variant::FeatureNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::RandomPolicy => "random-policy",
            Variant::GlobalUpdate => "global-update",
            Variant::LocalUpdate => "local-update",
            Variant::TerminalReward => "terminal-reward",
            Variant::RandomSampling => "random-sampling",
            Variant::SingleBranch => "single-branch",
            Variant::FeatureNoise => "feature-noise",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    pub positives: usize,
    pub negatives: usize,
    pub splits: SplitFractions,
    pub hafed: HafedConfig,
    pub hafed_training: HafedTraining,
    pub tsu: TsuConfig,
    pub agent: PpoConfig,
    pub seeds: Vec<u64>,
    /// Budgets evaluated by the benchmark; one agent is trained per budget
    /// below 1.
    pub budgets: Vec<f64>,
    pub variants: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut agent = PpoConfig {
            hidden: 64,
            ..Default::default()
        };
        agent.optimizer.lr0 = 2e-3;
        ExperimentConfig {
            data: SyntheticConfig::default(),
            positives: 100,
            negatives: 100,
            splits: SplitFractions::default(),
            hafed: HafedConfig::default(),
            hafed_training: HafedTraining {
                epochs: 10,
                restarts: 3,
                optimizer: OptimizerConfig {
                    algorithm: Algorithm::Adamw,
                    lr0: 2e-3,
                    weight_decay: 1e-4,
                    schedule: Schedule::Cosine,
                    ..Default::default()
                },
                ..Default::default()
            },
            tsu: TsuConfig::default(),
            agent,
            seeds: vec![1, 2, 3, 4, 5],
            budgets: vec![0.1, 0.2, 1.0],
            variants: vec![
                Variant::RandomPolicy,
                Variant::GlobalUpdate,
                Variant::LocalUpdate,
                Variant::TerminalReward,
                Variant::RandomSampling,
            ],
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, with `overrides` given as dotted `key=value`
    /// assignments applied on top. Unknown keys are rejected.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.message()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config("override", format!("`{o}` is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message()))?;
        let canonical = toml::Value::try_from(&cfg).map_err(|e| Error::config("config", e.to_string()))?;
        check_known(&table, canonical.as_table().expect("struct serializes to a table"), "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.hafed.validate()?;
        self.tsu.validate()?;
        self.agent.validate()?;
        if self.hafed.d != self.data.d || self.hafed.k != self.data.k {
            return Err(Error::config("hafed.d", "feature and sub-patch dims must match the data"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if let Some(b) = self.budgets.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(Error::config("budgets", format!("{b} outside (0, 1]")));
        }
        Ok(())
    }

    /// The same experiment with every component seeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> ExperimentConfig {
        // TOML integers are signed 64-bit.
        let sub = |stream: &str| derive_seed(seed, stream) >> 1;
        let mut cfg = self.clone();
        cfg.data.seed = seed;
        cfg.hafed_training.seed = sub("hafed");
        cfg.tsu.seed = sub("tsu");
        cfg.agent.seed = sub("agent");
        cfg
    }

    pub fn targeted_rule(&self) -> UpdateRule {
        match self.tsu.rule {
            UpdateRule::Targeted { tau } => UpdateRule::Targeted { tau },
            _ => UpdateRule::Targeted { tau: 0.9 },
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|p| !p.is_empty()).ok_or_else(|| Error::config("override", "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn check_known(given: &toml::Table, canonical: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, canonical.get(k)) {
            (_, None) => return Err(Error::config(path, "unknown key")),
            (toml::Value::Table(g), Some(toml::Value::Table(c))) => check_known(g, c, &path)?,
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<FeatureBag>,
    pub val: Vec<FeatureBag>,
    pub test: Vec<FeatureBag>,
}

impl Splits {
    /// Generates the configured dataset in memory.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Splits> {
        let manifest = plan_dataset(&cfg.data, cfg.positives, cfg.negatives, cfg.splits)?;
        let bags = generate_bags(&manifest)?;
        let mut out = Splits { train: vec![], val: vec![], test: vec![] };
        for (entry, bag) in manifest.entries.iter().zip(bags) {
            match entry.split {
                Split::Train => out.train.push(bag),
                Split::Val => out.val.push(bag),
                Split::Test => out.test.push(bag),
            }
        }
        Ok(out)
    }

    pub fn load(dataset: &Dataset) -> Result<Splits> {
        Ok(Splits {
            train: dataset.load_split(Split::Train)?,
            val: dataset.load_split(Split::Val)?,
            test: dataset.load_split(Split::Test)?,
        })
    }
}

pub fn fit_hafed(cfg: &ExperimentConfig, data: &Splits) -> Result<TrainedHafed> {
    train_hafed(&data.train, &data.val, &cfg.hafed, &cfg.hafed_training)
}

pub fn fit_tsu(cfg: &ExperimentConfig, data: &Splits, hafed: &HafedParams, rule: UpdateRule) -> Result<TrainedTsu> {
    let tsu = TsuConfig { rule, ..cfg.tsu.clone() };
    train_tsu(&data.train, &data.val, hafed, &tsu)
}

pub fn fit_agent(
    cfg: &ExperimentConfig,
    data: &Splits,
    env: &Environment<'_>,
    budget: f64,
    terminal_reward: bool,
) -> Result<TrainedAgent> {
    let ppo = PpoConfig {
        budget_fraction: budget,
        terminal_reward,
        ..cfg.agent.clone()
    };
    train_agent(env, &data.train, &data.val, &ppo)
}

/// Test-set outcome of one method at one budget.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub cohort: String,
    pub budget: f64,
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
    pub metrics: ClassificationMetrics,
    pub ece: f64,
    /// Final hit ratio per positive test slide, in test order.
    pub hit_ratio: Vec<f64>,
    /// Hit ratio after each step, per positive test slide.
    pub hit_curves: Vec<Vec<f64>>,
    /// Mean full-resolution attention of the visited patches, per positive
    /// test slide.
    pub mean_attention: Vec<f64>,
    pub actions: Vec<Vec<usize>>,
}

impl PolicyEval {
    fn new(cohort: &str, budget: f64, probs: Vec<f64>, test: &[FeatureBag], hafed: &HafedParams, actions: Vec<Vec<usize>>) -> Result<PolicyEval> {
        let labels: Vec<u8> = test.iter().map(|b| b.label).collect();
        let metrics = classification_metrics(&probs, &labels)?;
        let ece = ece(&probs, &labels, ECE_BINS)?.ece;
        let mut out = PolicyEval {
            cohort: cohort.to_string(),
            budget,
            probs,
            labels,
            metrics,
            ece,
            hit_ratio: vec![],
            hit_curves: vec![],
            mean_attention: vec![],
            actions,
        };
        for (bag, acts) in test.iter().zip(&out.actions) {
            if bag.label != 1 || acts.is_empty() {
                continue;
            }
            let series = hit_ratio_series(acts, &bag.tumor_mask, acts.len())?;
            if series.no_tumor {
                continue;
            }
            out.hit_ratio.push(series.terminal());
            out.hit_curves.push(series.values);
            let alpha = predict(hafed, bag)?.alpha.to_vec();
            out.mean_attention.push(attention_overlap(acts, &alpha, acts.len())?.mean_attention);
        }
        Ok(out)
    }

    pub fn mean_hit_ratio(&self) -> f64 {
        mean(&self.hit_ratio)
    }

    pub fn records(&self, seed: u64) -> Vec<MetricRecord> {
        let mut values = vec![
            ("accuracy", self.metrics.accuracy),
            ("f1", self.metrics.f1),
            ("ece", self.ece),
        ];
        if let Some(a) = self.metrics.auc {
            values.push(("auc", a));
        }
        if !self.hit_ratio.is_empty() {
            values.push(("hit_ratio", self.mean_hit_ratio()));
            values.push(("mean_attention", mean(&self.mean_attention)));
        }
        values
            .into_iter()
            .map(|(name, value)| MetricRecord {
                name: name.to_string(),
                value,
                cohort: self.cohort.clone(),
                seed,
            })
            .collect()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn eval_hafed(hafed: &HafedParams, test: &[FeatureBag]) -> Result<PolicyEval> {
    let probs = test.iter().map(|b| predict(hafed, b).map(|o| o.prob)).collect::<Result<Vec<_>>>()?;
    PolicyEval::new("hafed", 1.0, probs, test, hafed, vec![vec![]; test.len()])
}

#[allow(clippy::too_many_arguments)]
pub fn eval_policy(
    cohort: &str,
    env: &Environment<'_>,
    test: &[FeatureBag],
    distilled: &[Array2<f64>],
    params: &ActorCriticParams,
    selector: Selector,
    budget: f64,
    seed: u64,
) -> Result<(PolicyEval, Vec<EpisodeTrace>)> {
    let spec = RolloutSpec {
        budget_fraction: budget,
        selector,
        mode: Mode::Eval,
        terminal_reward: false,
    };
    let ev = evaluate(env, test, distilled, params, &spec, seed)?;
    let actions = ev.traces.iter().map(|t| t.actions()).collect();
    Ok((PolicyEval::new(cohort, budget, ev.probs, test, env.hafed, actions)?, ev.traces))
}

pub fn eval_random_sampling(
    hafed: &HafedParams,
    test: &[FeatureBag],
    distilled: &[Array2<f64>],
    budget: f64,
    seed: u64,
) -> Result<PolicyEval> {
    let mut probs = Vec::with_capacity(test.len());
    let mut actions = Vec::with_capacity(test.len());
    for (i, v) in distilled.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("subset/{i}")));
        let (p, idx) = random_subset_prediction(hafed, v.view(), budget, &mut rng)?;
        probs.push(p);
        actions.push(idx);
    }
    PolicyEval::new(&format!("random-sampling-{budget}"), budget, probs, test, hafed, actions)
}

pub fn cohort_name(variant: Variant, budget: f64) -> String {
    match variant {
        Variant::Default => format!("sasha-{budget}"),
        v => format!("{v}-{budget}"),
    }
}

/// Everything trained and measured for one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub hafed: TrainedHafed,
    pub tsu: TrainedTsu,
    /// Default agents keyed by budget in thousandths.
    pub agents: BTreeMap<u32, TrainedAgent>,
    pub evals: Vec<PolicyEval>,
}

impl SeedRun {
    pub fn eval(&self, cohort: &str) -> Option<&PolicyEval> {
        self.evals.iter().find(|e| e.cohort == cohort)
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        self.evals.iter().flat_map(|e| e.records(self.seed)).collect()
    }
}

pub fn budget_key(budget: f64) -> u32 {
    (budget * 1000.0).round() as u32
}

/// Trains and evaluates HAFED, the default agent at every configured budget
/// and each configured ablation variant at the training budget.
pub fn run_seed(base: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let cfg = base.with_seed(seed);
    let data = Splits::generate(&cfg)?;
    let hafed = fit_hafed(&cfg, &data)?;
    log::info!("seed {seed}: hafed best epoch {}", hafed.best_epoch);
    let rule = cfg.targeted_rule();
    let tsu = fit_tsu(&cfg, &data, &hafed.params, rule)?;
    let env = Environment {
        hafed: &hafed.params,
        tsu: Some(&tsu.params),
        rule,
    };
    let distilled = env.distill(&data.test)?;
    let eval_seed = derive_seed(seed, "eval");
    let f = cfg.agent.budget_fraction;
    let mut evals = vec![eval_hafed(&hafed.params, &data.test)?];
    let mut agents = BTreeMap::new();
    let mut budgets: Vec<f64> = cfg.budgets.iter().copied().filter(|b| *b < 1.0).collect();
    if !budgets.iter().any(|b| budget_key(*b) == budget_key(f)) {
        budgets.push(f);
    }
    for &b in &budgets {
        let agent = fit_agent(&cfg, &data, &env, b, false)?;
        let policy = Selector::Policy(SamplingPolicy::Deterministic);
        evals.push(eval_policy(&cohort_name(Variant::Default, b), &env, &data.test, &distilled, &agent.params, policy, b, eval_seed)?.0);
        log::info!("seed {seed}: sasha-{b} accuracy {:.3}", evals.last().unwrap().metrics.accuracy);
        agents.insert(budget_key(b), agent);
    }
    if cfg.budgets.iter().any(|b| *b == 1.0) {
        let agent = &agents[&budget_key(f)];
        let policy = Selector::Policy(SamplingPolicy::Deterministic);
        evals.push(eval_policy(&cohort_name(Variant::Default, 1.0), &env, &data.test, &distilled, &agent.params, policy, 1.0, eval_seed)?.0);
    }
    let default_agent = agents[&budget_key(f)].params.clone();
    for &variant in &cfg.variants {
        let name = cohort_name(variant, f);
        let ev = match variant {
            Variant::Default => continue,
            Variant::RandomPolicy => eval_policy(&name, &env, &data.test, &distilled, &default_agent, Selector::Random, f, eval_seed)?.0,
            Variant::RandomSampling => eval_random_sampling(&hafed.params, &data.test, &distilled, f, eval_seed)?,
            Variant::TerminalReward => {
                let agent = fit_agent(&cfg, &data, &env, f, true)?;
                eval_policy(&name, &env, &data.test, &distilled, &agent.params, Selector::Policy(SamplingPolicy::Deterministic), f, eval_seed)?.0
            }
            Variant::LocalUpdate => {
                let local = Environment { rule: UpdateRule::Local, ..env };
                let agent = fit_agent(&cfg, &data, &local, f, false)?;
                eval_policy(&name, &local, &data.test, &distilled, &agent.params, Selector::Policy(SamplingPolicy::Deterministic), f, eval_seed)?.0
            }
            Variant::GlobalUpdate => {
                let global_tsu = fit_tsu(&cfg, &data, &hafed.params, UpdateRule::Global)?;
                let global = Environment {
                    hafed: &hafed.params,
                    tsu: Some(&global_tsu.params),
                    rule: UpdateRule::Global,
                };
                let agent = fit_agent(&cfg, &data, &global, f, false)?;
                eval_policy(&name, &global, &data.test, &distilled, &agent.params, Selector::Policy(SamplingPolicy::Deterministic), f, eval_seed)?.0
            }
            Variant::SingleBranch | Variant::FeatureNoise => {
                let mut alt = cfg.clone();
                if variant == Variant::SingleBranch {
                    alt.hafed.branches = 1;
                } else {
                    alt.data = cfg.data.degraded();
                }
                let alt_data = Splits::generate(&alt)?;
                let h = fit_hafed(&alt, &alt_data)?;
                let t = fit_tsu(&alt, &alt_data, &h.params, rule)?;
                let e = Environment {
                    hafed: &h.params,
                    tsu: Some(&t.params),
                    rule,
                };
                let v = e.distill(&alt_data.test)?;
                let agent = fit_agent(&alt, &alt_data, &e, f, false)?;
                eval_policy(&name, &e, &alt_data.test, &v, &agent.params, Selector::Policy(SamplingPolicy::Deterministic), f, eval_seed)?.0
            }
        };
        log::info!("seed {seed}: {name} accuracy {:.3}", ev.metrics.accuracy);
        evals.push(ev);
    }
    Ok(SeedRun {
        seed,
        hafed,
        tsu,
        agents,
        evals,
    })
}

pub fn hafed_checkpoint(cfg: &HafedConfig, trained: &TrainedHafed, seed: u64) -> Checkpoint {
    let meta = BTreeMap::from([
        ("seed".to_string(), seed.to_string()),
        ("epoch".to_string(), trained.best_epoch.to_string()),
        ("selection_score".to_string(), format!("{:?}", trained.best_val_loss)),
    ]);
    Checkpoint::from_params("hafed", toml::to_string(cfg).expect("config serializes"), meta, &trained.params)
}

pub fn load_hafed(ck: &Checkpoint) -> Result<(HafedConfig, HafedParams)> {
    ck.expect_component("hafed")?;
    let cfg: HafedConfig = toml::from_str(&ck.config).map_err(|e| Error::config("hafed checkpoint", e.message()))?;
    let mut params = HafedParams::new(&cfg, 0)?;
    ck.restore(&mut params)?;
    Ok((cfg, params))
}

pub fn tsu_checkpoint(cfg: &TsuConfig, trained: &TrainedTsu, hafed: &Checkpoint) -> Checkpoint {
    let meta = BTreeMap::from([
        ("seed".to_string(), cfg.seed.to_string()),
        ("epoch".to_string(), trained.best_epoch.to_string()),
        ("selection_score".to_string(), format!("{:?}", trained.best_val_mse)),
        ("d".to_string(), trained.params.d().to_string()),
        ("hafed".to_string(), hafed.hash()),
    ]);
    Checkpoint::from_params("tsu", toml::to_string(cfg).expect("config serializes"), meta, &trained.params)
}

pub fn load_tsu(ck: &Checkpoint, hafed: &Checkpoint) -> Result<(TsuConfig, TsuParams)> {
    ck.expect_component("tsu")?;
    require_parent(ck, "hafed", hafed)?;
    let cfg: TsuConfig = toml::from_str(&ck.config).map_err(|e| Error::config("tsu checkpoint", e.message()))?;
    let d = ck.meta("d")?.parse().map_err(|_| Error::config("d", "not an integer"))?;
    let mut params = TsuParams::new(d, 0);
    ck.restore(&mut params)?;
    Ok((cfg, params))
}

pub fn agent_checkpoint(
    cfg: &PpoConfig,
    trained: &TrainedAgent,
    rule: UpdateRule,
    hafed: &Checkpoint,
    tsu: Option<&Checkpoint>,
) -> Checkpoint {
    let mut meta = BTreeMap::from([
        ("seed".to_string(), cfg.seed.to_string()),
        ("epoch".to_string(), trained.best_epoch.to_string()),
        ("selection_score".to_string(), format!("{:?}", trained.best_score)),
        ("d".to_string(), trained.params.d().to_string()),
        ("rule".to_string(), toml::to_string(&rule).expect("rule serializes")),
        ("hafed".to_string(), hafed.hash()),
    ]);
    if let Some(t) = tsu {
        meta.insert("tsu".to_string(), t.hash());
    }
    Checkpoint::from_params("agent", toml::to_string(cfg).expect("config serializes"), meta, &trained.params)
}

pub fn load_agent(ck: &Checkpoint, hafed: &Checkpoint) -> Result<(PpoConfig, UpdateRule, ActorCriticParams)> {
    ck.expect_component("agent")?;
    require_parent(ck, "hafed", hafed)?;
    let cfg: PpoConfig = toml::from_str(&ck.config).map_err(|e| Error::config("agent checkpoint", e.message()))?;
    let rule: UpdateRule = toml::from_str(ck.meta("rule")?).map_err(|e| Error::config("rule", e.message()))?;
    let d = ck.meta("d")?.parse().map_err(|_| Error::config("d", "not an integer"))?;
    let mut params = ActorCriticParams::new(d, cfg.hidden, 0);
    ck.restore(&mut params)?;
    Ok((cfg, rule, params))
}

/// Fails unless `ck` was trained against exactly `parent`.
pub fn require_parent(ck: &Checkpoint, key: &str, parent: &Checkpoint) -> Result<()> {
    let recorded = ck.meta(key)?;
    let actual = parent.hash();
    if recorded != actual {
        return Err(Error::Dependency(format!(
            "{} checkpoint was trained against {key} {recorded}, found {actual}",
            ck.component
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_overrides_apply() {
        let cfg = ExperimentConfig::from_toml(
            "",
            &["agent.hidden=32".into(), "data.n_min=50".into(), "variants=[\"local-update\"]".into()],
        )
        .unwrap();
        assert_eq!(cfg.agent.hidden, 32);
        assert_eq!(cfg.data.n_min, 50);
        assert_eq!(cfg.variants, vec![Variant::LocalUpdate]);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for text in ["bogus = 1", "[agent]\nhiden = 3", "[tsu.optimizer]\nlr = 0.1"] {
            let err = ExperimentConfig::from_toml(text, &[]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        assert!(ExperimentConfig::from_toml("", &["hafed.d=16".into()]).is_err());
    }

    #[test]
    fn seeding_touches_every_component() {
        let a = ExperimentConfig::default().with_seed(1);
        let b = ExperimentConfig::default().with_seed(2);
        assert_ne!(a.data.seed, b.data.seed);
        assert_ne!(a.hafed_training.seed, b.hafed_training.seed);
        assert_ne!(a.tsu.seed, b.tsu.seed);
        assert_ne!(a.agent.seed, b.agent.seed);
        ExperimentConfig::from_toml(&a.to_toml(), &[]).unwrap();
    }

    #[test]
    fn variant_names_parse_back() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }
}

//! Actor-critic patch selection: the rollout loop over a frozen distiller
//! and state updater, GAE, PPO updates and inference-time action policies.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, FeatureBag};
use crate::error::{Error, Result};
use crate::hafed::{classifier_forward, classify_with_scores, distill_all, HafedConfig, HafedParams};
use crate::metrics;
use crate::tensor::{
    clip_global_norm, masked_softmax, prefixed, prefixed_mut, softmax_backward, Algorithm, GatedAttention,
    Linear, Objective, Optimizer, OptimizerConfig, ParamSet, Schedule,
};
use crate::tsu::{SlideState, TsuParams, UpdateRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip: f64,
    pub entropy_coef: f64,
    /// Applied separately to the actor and the critic gradient.
    pub grad_clip: f64,
    pub value_coef: f64,
    pub gamma: f64,
    pub lambda_gae: f64,
    pub epochs: usize,
    pub budget_fraction: f64,
    pub rollouts_per_update: usize,
    pub ppo_epochs: usize,
    /// Episodes per gradient step.
    pub minibatch_size: usize,
    pub hidden: usize,
    pub terminal_reward: bool,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.1,
            entropy_coef: 0.001,
            grad_clip: 0.5,
            value_coef: 0.5,
            gamma: 1.0,
            lambda_gae: 0.95,
            epochs: 15,
            budget_fraction: 0.2,
            rollouts_per_update: 16,
            ppo_epochs: 4,
            minibatch_size: 1,
            hidden: 128,
            terminal_reward: false,
            seed: 0,
            optimizer: OptimizerConfig {
                algorithm: Algorithm::Adamw,
                lr0: 1e-5,
                weight_decay: 1e-3,
                schedule: Schedule::Constant,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) {
            return Err(Error::config("clip", "must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return Err(Error::config("lambda_gae", "must lie in [0, 1]"));
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::config("budget_fraction", "must lie in (0, 1]"));
        }
        if self.grad_clip <= 0.0 || self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(Error::config("coefficients", "grad_clip must be positive, others nonnegative"));
        }
        if self.rollouts_per_update == 0 || self.ppo_epochs == 0 || self.minibatch_size == 0 || self.hidden == 0 {
            return Err(Error::config("ppo schedule", "counts must be positive"));
        }
        self.optimizer.validate()
    }
}

/// Episode length for a budget fraction: `ceil(f * n)`, at least one.
pub fn budget_for(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("budget_fraction", format!("{fraction} outside (0, 1]")));
    }
    if n == 0 {
        return Err(Error::EmptyInstances("bag without patches".into()));
    }
    // guard against 0.2 * 55 = 11.000000000000002
    let raw = fraction * n as f64;
    let t = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    Ok((t as usize).clamp(1, n))
}

/// Critic: attention pooling of the state followed by a scalar head.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub attention: GatedAttention,
    pub head: Linear,
}

impl ParamSet for Critic {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.attention.visit(&mut prefixed("attention", f));
        self.head.visit(&mut prefixed("head", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.attention.visit_mut(&mut prefixed_mut("attention", f));
        self.head.visit_mut(&mut prefixed_mut("head", f));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticParams {
    pub actor: GatedAttention,
    pub critic: Critic,
}

impl ActorCriticParams {
    pub fn new(d: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActorCriticParams {
            actor: GatedAttention::new(&mut rng, d, hidden, 1),
            critic: Critic {
                attention: GatedAttention::new(&mut rng, d, hidden, 1),
                head: Linear::new(&mut rng, d, 1),
            },
        }
    }

    pub fn d(&self) -> usize {
        self.actor.in_dim()
    }
}

impl ParamSet for ActorCriticParams {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.actor.visit(&mut prefixed("actor", f));
        self.critic.visit(&mut prefixed("critic", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.actor.visit_mut(&mut prefixed_mut("actor", f));
        self.critic.visit_mut(&mut prefixed_mut("critic", f));
    }
}

/// Action distribution over patches; visited patches get probability zero.
pub fn policy_forward(s: ArrayView2<'_, f64>, visited: &[bool], actor: &GatedAttention) -> Result<Vec<f64>> {
    if visited.len() != s.nrows() {
        return Err(Error::dim("visited mask", s.nrows(), visited.len()));
    }
    let scores = actor.scores(s)?;
    masked_softmax(&scores.column(0).to_vec(), visited)
}

fn pooled_value(critic: &Critic, rows: &[usize], pool: ArrayView2<'_, f64>, scores: &[f64]) -> Result<(f64, Vec<f64>, Array1<f64>)> {
    let logits: Vec<f64> = rows.iter().map(|&r| scores[r]).collect();
    let alpha = masked_softmax(&logits, &vec![false; rows.len()])?;
    let mut h = Array1::zeros(pool.ncols());
    for (&r, &a) in rows.iter().zip(&alpha) {
        h.scaled_add(a, &pool.row(r));
    }
    let value = h.dot(&critic.head.weight.column(0)) + critic.head.bias[0];
    Ok((value, alpha, h))
}

/// State value `w · (Σ α_i s_i) + b`.
pub fn critic_value(s: ArrayView2<'_, f64>, critic: &Critic) -> Result<f64> {
    let scores = critic.attention.scores(s)?.column(0).to_vec();
    let rows: Vec<usize> = (0..s.nrows()).collect();
    Ok(pooled_value(critic, &rows, s, &scores)?.0)
}

/// Negative binary cross-entropy of the current prediction.
pub fn reward(prob: f64, y: u8) -> f64 {
    let p = prob.clamp(1e-7, 1.0 - 1e-7);
    if y == 1 {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingPolicy {
    Deterministic,
    /// Sample from the full distribution.
    Full,
    TopK { k: usize },
    TopP { p: f64 },
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingPolicy::TopK { k } if k < 1 => Err(Error::config("top_k", "k must be at least 1")),
            SamplingPolicy::TopP { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::config("top_p", format!("p = {p} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SamplingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingPolicy::Deterministic => write!(f, "deterministic"),
            SamplingPolicy::Full => write!(f, "full"),
            SamplingPolicy::TopK { k } => write!(f, "top-k:{k}"),
            SamplingPolicy::TopP { p } => write!(f, "top-p:{p}"),
        }
    }
}

impl FromStr for SamplingPolicy {
    type Err = Error;

    /// `deterministic`, `full`, `top-k[:K]` (default 5), `top-p[:P]` (default 0.9).
    fn from_str(text: &str) -> Result<Self> {
        let (name, arg) = match text.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (text, None),
        };
        let bad = |e: String| Error::config("policy", e);
        let policy = match (name, arg) {
            ("deterministic", None) => SamplingPolicy::Deterministic,
            ("full", None) => SamplingPolicy::Full,
            ("top-k", a) => SamplingPolicy::TopK {
                k: a.map_or(Ok(5), str::parse).map_err(|e| bad(format!("top-k: {e}")))?,
            },
            ("top-p", a) => SamplingPolicy::TopP {
                p: a.map_or(Ok(0.9), str::parse).map_err(|e| bad(format!("top-p: {e}")))?,
            },
            _ => return Err(bad(format!("unknown policy {text:?}"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

fn by_descending(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|a, b| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b)));
    order
}

/// The distribution actually sampled from under `policy`.
pub fn truncated_distribution(probs: &[f64], policy: SamplingPolicy) -> Result<Vec<f64>> {
    policy.validate()?;
    let total: f64 = probs.iter().sum();
    if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) || !(total > 0.0) {
        return Err(Error::Validation("invalid action distribution".into()));
    }
    let keep: Vec<usize> = match policy {
        SamplingPolicy::Full => return Ok(probs.iter().map(|p| p / total).collect()),
        SamplingPolicy::Deterministic => by_descending(probs)[..1].to_vec(),
        SamplingPolicy::TopK { k } => by_descending(probs).into_iter().take(k).collect(),
        SamplingPolicy::TopP { p } => {
            let mut cum = 0.0;
            let mut keep = Vec::new();
            for i in by_descending(probs) {
                keep.push(i);
                cum += probs[i] / total;
                if cum >= p - 1e-12 {
                    break;
                }
            }
            keep
        }
    };
    let mass: f64 = keep.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &keep {
        out[i] = probs[i] / mass;
    }
    Ok(out)
}

pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], policy: SamplingPolicy, rng: &mut R) -> Result<usize> {
    if policy == SamplingPolicy::Deterministic {
        policy.validate()?;
        return Ok(by_descending(probs)[0]);
    }
    let dist = truncated_distribution(probs, policy)?;
    let index = WeightedIndex::new(&dist).map_err(|e| Error::Validation(e.to_string()))?;
    Ok(index.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How actions are chosen during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selector {
    Policy(SamplingPolicy),
    /// Uniform over unvisited patches.
    Random,
}

/// Frozen distiller, classifier and state updater.
#[derive(Debug, Clone, Copy)]
pub struct Environment<'a> {
    pub hafed: &'a HafedParams,
    pub tsu: Option<&'a TsuParams>,
    pub rule: UpdateRule,
}

impl<'a> Environment<'a> {
    /// Distilled high-resolution features for every bag.
    pub fn distill(&self, bags: &[FeatureBag]) -> Result<Vec<Array2<f64>>> {
        bags.iter().map(|b| distill_all(self.hafed, b.u.view())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// Prediction on the updated state.
    pub prob: f64,
    /// Visited mask before the action.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub slide_id: String,
    pub label: u8,
    pub mode: Mode,
    pub steps: Vec<StepRecord>,
    pub prediction: f64,
    /// Every row version seen during the episode.
    pub pool: Array2<f64>,
    /// For each step, the pool row holding each patch of the state.
    pub step_rows: Vec<Vec<usize>>,
}

impl EpisodeTrace {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.value).collect()
    }

    /// State at step `t`, rebuilt from the row pool.
    pub fn state(&self, t: usize) -> Array2<f64> {
        self.pool.select(Axis(0), &self.step_rows[t])
    }

    /// `step<TAB>action<TAB>reward<TAB>log_prob<TAB>value` per line.
    pub fn to_lines(&self) -> String {
        self.steps
            .iter()
            .enumerate()
            .map(|(t, s)| format!("{t}\t{}\t{:?}\t{:?}\t{:?}\n", s.action, s.reward, s.log_prob, s.value))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSpec {
    pub budget_fraction: f64,
    pub selector: Selector,
    pub mode: Mode,
    pub terminal_reward: bool,
}

fn column(scores: Array2<f64>) -> Vec<f64> {
    scores.column(0).to_vec()
}

/// Runs one episode. `v` is the bag's distilled feature matrix.
pub fn rollout_episode<R: Rng + ?Sized>(
    env: &Environment<'_>,
    bag: &FeatureBag,
    v: ArrayView2<'_, f64>,
    params: &ActorCriticParams,
    spec: &RolloutSpec,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    let n = bag.num_patches();
    if v.dim() != bag.z.dim() {
        return Err(Error::dim("distilled features", format!("{:?}", bag.z.dim()), format!("{:?}", v.dim())));
    }
    let budget = budget_for(spec.budget_fraction, n)?;
    let mut state = SlideState::new(bag.z.view(), budget)?;
    let mut pool = bag.z.clone();
    let mut rows: Vec<usize> = (0..n).collect();
    let mut actor_scores = column(params.actor.scores(pool.view())?);
    let mut critic_scores = column(params.critic.attention.scores(pool.view())?);
    let mut cls_scores = env.hafed.stage2.scores(pool.view())?;
    let mut steps = Vec::with_capacity(budget);
    let mut step_rows = Vec::with_capacity(budget);
    for t in 0..budget {
        let mask = state.visited().to_vec();
        let logits: Vec<f64> = rows.iter().map(|&r| actor_scores[r]).collect();
        let probs = masked_softmax(&logits, &mask)?;
        let (value, _, _) = pooled_value(&params.critic, &rows, pool.view(), &critic_scores)?;
        let action = match spec.selector {
            Selector::Policy(policy) => sample_action(&probs, policy, rng)?,
            Selector::Random => {
                let open: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
                *open.choose(rng).ok_or(Error::ExhaustedActions)?
            }
        };
        step_rows.push(rows.clone());
        let changed = state.apply_update(action, v.row(action), env.tsu, env.rule)?;
        let first_new = pool.nrows();
        for &i in &changed {
            pool.push_row(state.s.row(i)).expect("same width");
            rows[i] = pool.nrows() - 1;
        }
        let fresh = pool.slice(s![first_new.., ..]);
        actor_scores.extend(column(params.actor.scores(fresh)?));
        critic_scores.extend(column(params.critic.attention.scores(fresh)?));
        cls_scores.append(Axis(0), env.hafed.stage2.scores(fresh)?.view()).expect("same width");
        let last = t + 1 == budget;
        let prob = if last {
            // fresh pass over the whole state so a full traversal reproduces
            // the full-resolution prediction exactly
            classifier_forward(env.hafed, state.s.view(), &HafedConfig::default(), None)?.prob
        } else {
            let gathered = cls_scores.select(Axis(0), &rows);
            classify_with_scores(env.hafed, state.s.view(), gathered.view(), None)?.prob
        };
        let r = if spec.terminal_reward && !last { 0.0 } else { reward(prob, bag.label) };
        steps.push(StepRecord {
            action,
            log_prob: probs[action].ln(),
            value,
            reward: r,
            prob,
            mask,
        });
    }
    let prediction = steps.last().map(|s| s.prob).expect("budget >= 1");
    Ok(EpisodeTrace {
        slide_id: bag.slide_id.clone(),
        label: bag.label,
        mode: spec.mode,
        steps,
        prediction,
        pool,
        step_rows,
    })
}

/// GAE advantages and returns-to-go; the value after the last step is zero.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::dim("values", rewards.len(), values.len()));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoLoss {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// Fraction of steps whose ratio was outside the clip range.
    pub clip_fraction: f64,
}

/// Clipped-surrogate, entropy and value loss of one episode, averaged over
/// its steps, with the gradient.
pub fn ppo_loss_and_grad(
    params: &ActorCriticParams,
    trace: &EpisodeTrace,
    advantages: &[f64],
    returns: &[f64],
    config: &PpoConfig,
) -> Result<(PpoLoss, ActorCriticParams)> {
    let steps = trace.steps.len();
    if steps == 0 {
        return Err(Error::EmptyInstances("episode without steps".into()));
    }
    if advantages.len() != steps || returns.len() != steps {
        return Err(Error::dim("advantages", steps, advantages.len().min(returns.len())));
    }
    let pool = trace.pool.view();
    let (a_scores, a_cache) = params.actor.forward(pool)?;
    let (c_scores, c_cache) = params.critic.attention.forward(pool)?;
    let a_col = a_scores.column(0).to_vec();
    let c_col = c_scores.column(0).to_vec();
    let mut da = Array2::<f64>::zeros(a_scores.raw_dim());
    let mut dc = Array2::<f64>::zeros(c_scores.raw_dim());
    let mut grad = params.zeros_like();
    let scale = 1.0 / steps as f64;
    let mut loss = PpoLoss::default();
    let mut clipped_steps = 0usize;
    let w = params.critic.head.weight.column(0);
    for (t, step) in trace.steps.iter().enumerate() {
        let rows = &trace.step_rows[t];
        let logits: Vec<f64> = rows.iter().map(|&r| a_col[r]).collect();
        let p = masked_softmax(&logits, &step.mask)?;
        let logp_a = p[step.action].ln();
        let ratio = (logp_a - step.log_prob).exp();
        let adv = advantages[t];
        let clipped = ratio.clamp(1.0 - config.clip, 1.0 + config.clip);
        let surrogate = (ratio * adv).min(clipped * adv);
        let unclipped_active = ratio * adv <= clipped * adv;
        if ratio < 1.0 - config.clip || ratio > 1.0 + config.clip {
            clipped_steps += 1;
        }
        let entropy: f64 = -p.iter().filter(|q| **q > 0.0).map(|q| q * q.ln()).sum::<f64>();
        loss.policy -= scale * surrogate;
        loss.entropy += scale * entropy;
        // d(loss)/d(logp_a) from the surrogate, then through log-softmax
        let dlogp = if unclipped_active { -scale * adv * ratio } else { 0.0 };
        for (j, &r) in rows.iter().enumerate() {
            if step.mask[j] {
                continue;
            }
            let onehot = if j == step.action { 1.0 } else { 0.0 };
            let mut g = dlogp * (onehot - p[j]);
            // loss includes -c * H; dH/dz_j = -p_j (ln p_j + H)
            if p[j] > 0.0 {
                g += config.entropy_coef * scale * p[j] * (p[j].ln() + entropy);
            }
            da[[r, 0]] += g;
        }
        let (value, alpha, h) = pooled_value(&params.critic, rows, pool, &c_col)?;
        let err = value - returns[t];
        loss.value += scale * err * err;
        let dv = config.value_coef * scale * 2.0 * err;
        grad.critic.head.weight.column_mut(0).scaled_add(dv, &h);
        grad.critic.head.bias[0] += dv;
        let dalpha: Vec<f64> = rows.iter().map(|&r| dv * pool.row(r).dot(&w)).collect();
        for (&r, g) in rows.iter().zip(softmax_backward(&alpha, &dalpha)) {
            dc[[r, 0]] += g;
        }
    }
    loss.clip_fraction = clipped_steps as f64 / steps as f64;
    loss.total = loss.policy - config.entropy_coef * loss.entropy + config.value_coef * loss.value;
    if !loss.total.is_finite() {
        return Err(Error::Numeric(format!("ppo loss (parameter snapshot {})", params.fingerprint())));
    }
    params.actor.backward(pool, &a_cache, da.view(), &mut grad.actor, false);
    params
        .critic
        .attention
        .backward(pool, &c_cache, dc.view(), &mut grad.critic.attention, false);
    Ok((loss, grad))
}

/// PPO loss of a fixed episode as an [`Objective`].
pub struct PpoObjective<'a> {
    pub trace: &'a EpisodeTrace,
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
    pub config: &'a PpoConfig,
}

impl Objective for PpoObjective<'_> {
    type Params = ActorCriticParams;

    fn loss(&self, params: &ActorCriticParams) -> Result<f64> {
        Ok(self.loss_and_grad(params)?.0)
    }

    fn loss_and_grad(&self, params: &ActorCriticParams) -> Result<(f64, ActorCriticParams)> {
        let (l, g) = ppo_loss_and_grad(params, self.trace, self.advantages, self.returns, self.config)?;
        Ok((l.total, g))
    }
}

/// Clips the actor and critic parts of a gradient to `max_norm` each.
/// Returns the pre-clip norms.
pub fn clip_actor_critic(grad: &mut ActorCriticParams, max_norm: f64) -> (f64, f64) {
    (clip_global_norm(&mut grad.actor, max_norm), clip_global_norm(&mut grad.critic, max_norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoStats {
    pub loss: PpoLoss,
    pub updates: usize,
}

/// Several epochs of minibatch updates over one wave of episodes, with
/// advantages normalised across the wave.
pub fn ppo_update<R: Rng + ?Sized>(
    params: &mut ActorCriticParams,
    optimizer: &mut Optimizer,
    traces: &[EpisodeTrace],
    config: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    if traces.is_empty() {
        return Err(Error::EmptyInstances("no episodes for the update".into()));
    }
    let mut advantages = Vec::with_capacity(traces.len());
    let mut returns = Vec::with_capacity(traces.len());
    for trace in traces {
        let (a, r) = compute_gae(&trace.rewards(), &trace.values(), config.gamma, config.lambda_gae)?;
        advantages.push(a);
        returns.push(r);
    }
    let all: Vec<f64> = advantages.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    for a in advantages.iter_mut().flatten() {
        *a = (*a - mean) / (std + 1e-8);
    }
    let mut stats = PpoStats::default();
    let mut order: Vec<usize> = (0..traces.len()).collect();
    for _ in 0..config.ppo_epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.minibatch_size) {
            let mut grad = params.zeros_like();
            let mut batch_loss = PpoLoss::default();
            let share = 1.0 / batch.len() as f64;
            for &i in batch {
                let (l, g) = ppo_loss_and_grad(params, &traces[i], &advantages[i], &returns[i], config)
                    .map_err(|e| match e {
                        Error::Numeric(reason) => Error::Training {
                            step: optimizer.steps_taken(),
                            reason,
                        },
                        other => other,
                    })?;
                grad.add_scaled(&g, share);
                batch_loss.total += share * l.total;
                batch_loss.policy += share * l.policy;
                batch_loss.value += share * l.value;
                batch_loss.entropy += share * l.entropy;
                batch_loss.clip_fraction += share * l.clip_fraction;
            }
            clip_actor_critic(&mut grad, config.grad_clip);
            optimizer.step(params, &grad)?;
            let k = stats.updates as f64;
            let avg = |old: f64, new: f64| (old * k + new) / (k + 1.0);
            stats.loss = PpoLoss {
                total: avg(stats.loss.total, batch_loss.total),
                policy: avg(stats.loss.policy, batch_loss.policy),
                value: avg(stats.loss.value, batch_loss.value),
                entropy: avg(stats.loss.entropy, batch_loss.entropy),
                clip_fraction: avg(stats.loss.clip_fraction, batch_loss.clip_fraction),
            };
            stats.updates += 1;
        }
    }
    Ok(stats)
}

/// `loss + 2 - (auc + f1)`; zero for a perfect model.
pub fn selection_score(loss: f64, auc: f64, f1: f64) -> f64 {
    loss + 2.0 - (auc + f1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
    pub traces: Vec<EpisodeTrace>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        metrics::accuracy(&self.probs, &self.labels).unwrap_or(0.0)
    }

    pub fn bce(&self) -> f64 {
        metrics::bce_loss(&self.probs, &self.labels).unwrap_or(f64::INFINITY)
    }

    /// Selection score, with chance-level AUC when only one class is present.
    pub fn score(&self) -> f64 {
        let m = metrics::classification_metrics(&self.probs, &self.labels);
        match m {
            Ok(m) => selection_score(self.bce(), m.auc.unwrap_or(0.5), m.f1),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Rolls out every bag once. Each bag gets its own random stream derived
/// from `seed` and its position.
pub fn evaluate(
    env: &Environment<'_>,
    bags: &[FeatureBag],
    distilled: &[Array2<f64>],
    params: &ActorCriticParams,
    spec: &RolloutSpec,
    seed: u64,
) -> Result<Evaluation> {
    if bags.len() != distilled.len() {
        return Err(Error::dim("distilled bags", bags.len(), distilled.len()));
    }
    let mut out = Evaluation {
        probs: Vec::with_capacity(bags.len()),
        labels: Vec::with_capacity(bags.len()),
        traces: Vec::with_capacity(bags.len()),
    };
    for (i, (bag, v)) in bags.iter().zip(distilled).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("eval/{i}")));
        let trace = rollout_episode(env, bag, v.view(), params, spec, &mut rng)?;
        out.probs.push(trace.prediction);
        out.labels.push(bag.label);
        out.traces.push(trace);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub train_return: f64,
    pub loss: PpoLoss,
    pub val_score: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAgent {
    pub params: ActorCriticParams,
    pub best_epoch: usize,
    pub best_score: f64,
    pub history: Vec<EpochStats>,
}

/// Trains the actor-critic against the frozen environment and keeps the
/// epoch with the lowest validation selection score.
pub fn train_agent(
    env: &Environment<'_>,
    train: &[FeatureBag],
    val: &[FeatureBag],
    config: &PpoConfig,
) -> Result<TrainedAgent> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInstances("agent training needs train and validation bags".into()));
    }
    let train_v = env.distill(train)?;
    let val_v = env.distill(val)?;
    let d = env.hafed.d();
    let mut params = ActorCriticParams::new(d, config.hidden, derive_seed(config.seed, "agent/init"));
    let mut opt_cfg = config.optimizer.clone();
    if opt_cfg.total_steps == 0 {
        let waves = train.len().div_ceil(config.rollouts_per_update);
        let per_wave = config.ppo_epochs * config.rollouts_per_update.min(train.len()).div_ceil(config.minibatch_size);
        opt_cfg.total_steps = config.epochs * waves * per_wave;
    }
    let mut optimizer = Optimizer::new(opt_cfg, params.num_params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "agent/train"));
    let train_spec = RolloutSpec {
        budget_fraction: config.budget_fraction,
        selector: Selector::Policy(SamplingPolicy::Full),
        mode: Mode::Train,
        terminal_reward: config.terminal_reward,
    };
    let val_spec = RolloutSpec {
        budget_fraction: config.budget_fraction,
        selector: Selector::Policy(SamplingPolicy::Deterministic),
        mode: Mode::Eval,
        terminal_reward: config.terminal_reward,
    };
    let mut best = (params.clone(), 0usize, f64::INFINITY);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total_return = 0.0;
        let mut epoch_loss = PpoLoss::default();
        let mut waves = 0.0;
        for wave in order.chunks(config.rollouts_per_update) {
            let mut traces = Vec::with_capacity(wave.len());
            for &i in wave {
                let trace = rollout_episode(env, &train[i], train_v[i].view(), &params, &train_spec, &mut rng)?;
                total_return += trace.rewards().iter().sum::<f64>();
                traces.push(trace);
            }
            let stats = ppo_update(&mut params, &mut optimizer, &traces, config, &mut rng)?;
            epoch_loss.total += stats.loss.total;
            epoch_loss.policy += stats.loss.policy;
            epoch_loss.value += stats.loss.value;
            epoch_loss.entropy += stats.loss.entropy;
            epoch_loss.clip_fraction += stats.loss.clip_fraction;
            waves += 1.0;
        }
        for x in [
            &mut epoch_loss.total,
            &mut epoch_loss.policy,
            &mut epoch_loss.value,
            &mut epoch_loss.entropy,
            &mut epoch_loss.clip_fraction,
        ] {
            *x /= waves;
        }
        let eval = evaluate(env, val, &val_v, &params, &val_spec, derive_seed(config.seed, "agent/val"))?;
        let score = eval.score();
        let stats = EpochStats {
            train_return: total_return / train.len() as f64,
            loss: epoch_loss,
            val_score: score,
            val_accuracy: eval.accuracy(),
        };
        log::info!(
            "agent epoch {epoch}: return {:.4} value loss {:.4} entropy {:.3} val score {:.4} acc {:.3}",
            stats.train_return,
            stats.loss.value,
            stats.loss.entropy,
            score,
            stats.val_accuracy
        );
        history.push(stats);
        if score < best.2 {
            best = (params.clone(), epoch, score);
        }
    }
    Ok(TrainedAgent {
        params: best.0,
        best_epoch: best.1,
        best_score: best.2,
        history,
    })
}

/// Baseline without sequential state: classify from the distilled features
/// of a uniformly random subset of `ceil(f * N)` patches alone.
pub fn random_subset_prediction<R: Rng + ?Sized>(
    hafed: &HafedParams,
    v: ArrayView2<'_, f64>,
    fraction: f64,
    rng: &mut R,
) -> Result<(f64, Vec<usize>)> {
    let n = v.nrows();
    let budget = budget_for(fraction, n)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(budget);
    let subset = v.select(Axis(0), &idx);
    let out = classifier_forward(hafed, subset.view(), &HafedConfig::default(), None)?;
    Ok((out.prob, idx))
}
